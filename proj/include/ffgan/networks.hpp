#pragma once

#include "ffgan/container.hpp"
#include "ffgan/graph.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ffgan {

enum class NetKind : std::uint8_t { reconstructor, generator, discriminator, recognizer };

std::string_view net_kind_name(NetKind kind);

/// Layer description shared by all four networks. Every conv uses 3x3
/// kernels with padding 1; stride-2 convs halve the resolution.
struct Architecture {
    NetKind kind = NetKind::reconstructor;
    std::size_t image_size = 32;
    std::size_t coeff_dim = 0;    // R output / G fusion input
    std::size_t n_identities = 0; // C classes
    /// R, C: stride-2 trunk widths. G: encoder widths (decoder mirrors them).
    /// D: three stride-2 widths followed by two stride-1 widths.
    std::vector<std::size_t> widths;
    /// Channels of G's coefficient map at the fusion site.
    std::size_t fusion_channels = 8;
    double slope = 0.2;

    /// Ordered (name, shape) of every parameter tensor.
    std::vector<std::pair<std::string, Shape>> parameter_shapes() const;

    std::vector<double> descriptor() const;
    static Architecture from_descriptor(const std::vector<double>& values);

    /// Throws InvalidArgument when widths or sizes are inconsistent.
    void validate() const;
};

Architecture reconstructor_arch(std::size_t image_size, std::size_t coeff_dim);
Architecture generator_arch(std::size_t image_size, std::size_t coeff_dim);
Architecture discriminator_arch(std::size_t image_size);
Architecture recognizer_arch(std::size_t image_size, std::size_t n_identities);

struct NetworkParams {
    Architecture arch;
    std::vector<std::string> names;
    std::vector<Tensor> tensors;

    std::size_t numel() const;
    /// FNV-1a over the raw parameter bytes.
    std::uint64_t hash() const;
    bool operator==(const NetworkParams& other) const { return names == other.names && tensors == other.tensors; }
};

/// Gaussian(0, 0.02) weights and zero biases, drawn in parameter order from `seed`.
NetworkParams init_params(const Architecture& arch, std::uint64_t seed);

/// Parameter tensors placed on a graph, either as trainable leaves or as constants.
struct Bound {
    const NetworkParams* net = nullptr;
    std::vector<Var> vars;
};

Bound bind(Graph& graph, const NetworkParams& net, bool trainable);

/// x: [B,1,H,W] in [0,1]. Returns z-scored coefficients [B,coeff_dim].
Var forward_R(const Bound& r, const Var& x);
/// x: [B,1,H,W], p: [B,coeff_dim]. Returns a frontal image [B,1,H,W] in (0,1).
Var forward_G(const Bound& g, const Var& x, const Var& p);
/// Returns logits [B,2]; index 0 is "real", index 1 is "generated".
Var forward_D(const Bound& d, const Var& x);

struct RecognizerOutput {
    Var logits; // [B,n_identities]
    Var h;      // [B,last width], globally pooled identity feature
};
RecognizerOutput forward_C(const Bound& c, const Var& x);

/// Row-wise softmax of a [B,K] tensor.
Tensor softmax_rows(const Tensor& logits);

std::vector<Record> params_records(const NetworkParams& net, const std::string& prefix);
NetworkParams params_from_records(const std::vector<Record>& records, const std::string& prefix);

} // namespace ffgan
