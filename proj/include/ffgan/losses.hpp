#pragma once

#include "ffgan/graph.hpp"
#include "ffgan/morphable_model.hpp"

#include <optional>
#include <vector>

namespace ffgan {

struct LossWeights {
    double rec = 0.0;
    double tv = 0.0;
    double sym = 0.0;
    double gan = 0.0;
    double id = 0.0;

    /// Throws InvalidArgument for a negative or non-finite weight.
    void validate() const;
    bool operator==(const LossWeights&) const = default;
};

inline constexpr double kTvEpsilon = 1e-8;

/// Weighted parameter distance on a batch [B,P]: mean over the batch of sum_i w_i (p_i - p_g,i)^2.
Var param_distance_loss(const Var& p, const Var& p_g, const Eigen::VectorXd& weights);

/// Mean absolute difference over every pixel.
Var rec_loss(const Var& x_f, const Var& x_g);

/// Mean over the (H-1)x(W-1) interior of sqrt(dx^2 + dy^2 + eps).
Var tv_loss(const Var& x_f, double eps = kTvEpsilon);

/// Binary [B,1,H,W] masks and their per-sample areas; used as graph constants.
struct SymmetryMasks {
    Tensor mask;
    Tensor mask_flip;
    std::vector<std::size_t> area;
    std::vector<std::size_t> area_flip;
};

/// M from each p and M_flip from its mirrored coefficients.
SymmetryMasks symmetry_masks(const MorphableModel& model, const std::vector<Coeffs>& p, std::size_t image_size);
SymmetryMasks masks_from(const std::vector<VisibilityMask>& mask, const std::vector<VisibilityMask>& mask_flip);

/// Per-sample ||M (a - b)||_2 / sqrt(|M|) + ||M_flip (a - b)||_2 / sqrt(|M_flip|), averaged over the
/// batch. a = G(x, p) and b = G(x_flip, p_flip). An empty mask contributes 0.
Var sym_loss(const Var& g_x, const Var& g_x_flip, const SymmetryMasks& masks);

/// -mean log P_real(x_g) - mean log P_generated(x_f). The generated logits must come from detached images.
Var d_loss(const Var& logits_real, const Var& logits_generated);
/// -mean log P_real(x_f).
Var g_gan_loss(const Var& logits_generated);
/// Mean cross-entropy of identity logits against labels.
Var c_loss(const Var& logits, const std::vector<std::size_t>& labels);
/// Labelled identity loss: cross-entropy of C(x_f) against y.
Var g_id_loss(const Var& logits_f, const std::vector<std::size_t>& labels);
/// Unlabelled identity loss: mean over feature entries of (h_f - h)^2, h detached.
Var g_id_loss(const Var& h_f, const Var& h);

struct GeneratorTerms {
    std::optional<Var> rec, tv, sym, gan, id;
};

/// Weighted sum of the present terms. Terms with zero weight are left out of the graph.
Var total_g_loss(Graph& graph, const LossWeights& weights, const GeneratorTerms& terms);

} // namespace ffgan
