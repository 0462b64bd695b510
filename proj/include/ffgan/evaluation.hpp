#pragma once

#include "ffgan/training.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ffgan {

enum class FeatureMode : std::uint8_t { original, synthesized, fused };

std::string_view feature_mode_name(FeatureMode mode);
/// Accepts "original", "syn"/"synthesized" and "fused".
FeatureMode feature_mode_from_name(const std::string& name);

inline constexpr double kYawBucketDeg = 15.0;
inline constexpr std::size_t kYawBuckets = 7; // 0, 15, ..., 90

/// Bucket of |yaw| rounded to the nearest multiple of 15 degrees, capped at 90.
std::size_t yaw_bucket(double yaw_deg);

/// Rows scaled to unit Euclidean norm; zero rows stay zero.
Tensor unit_rows(const Tensor& h);

/// Per-image quantities every matching mode draws on. Features are unit-norm
/// pooled recognizer activations, so matching ignores image gain.
struct FeatureSet {
    Tensor h;       // [N,F] features of the images
    Tensor h_syn;   // [N,F] features of G(x, p)
    std::vector<double> p_real; // D's real probability of G(x, p)
};

/// Features of [N,1,H,W] images with coefficients from R (zero under drop_R).
FeatureSet compute_features(const TrainState& state, const TrainConfig& config, const Tensor& images);

/// d = |h1 - h2| + w |h1f - h2f| with w = min(p1, p2).
double fused_distance(const std::vector<double>& h1, const std::vector<double>& h2, const std::vector<double>& h1f,
                      const std::vector<double>& h2f, double p1, double p2);
/// Network form: features and realism of G(x_i, p_i) for two [1,1,H,W] images with z-scored coefficients [1,P].
double fused_distance(const TrainState& state, const Tensor& x1, const Tensor& p1, const Tensor& x2,
                      const Tensor& p2);

/// Probe-by-gallery distance matrix [P,G] for a matching mode.
Tensor distance_matrix(const FeatureSet& probes, const FeatureSet& gallery, FeatureMode mode);

struct Rank1Result {
    std::array<double, kYawBuckets> accuracy{};
    std::array<std::size_t, kYawBuckets> count{};
    /// Mean accuracy over the buckets that hold probes.
    double average = 0.0;
};

/// Nearest-gallery classification; ties go to the lowest gallery index.
Rank1Result rank1_from_distances(const Tensor& distances, const std::vector<std::size_t>& probe_labels,
                                 const std::vector<std::size_t>& gallery_labels,
                                 const std::vector<std::size_t>& probe_buckets);

/// Gallery: frontal ground truth of each identity's first held-out sample.
/// Throws InvalidArgument when an identity has no held-out sample.
std::vector<std::size_t> gallery_indices(const Dataset& data);

/// Held-out probes against the frontal gallery.
Rank1Result rank1_identification(const TrainState& state, const TrainConfig& config, const Dataset& data,
                                 FeatureMode mode);

struct AblationRow {
    std::string name;
    double syn_average = 0.0;
    std::uint64_t data_hash = 0;
    std::uint64_t seed = 0;
};

/// FNV-1a over the encoded dataset.
std::uint64_t dataset_hash(const Dataset& data);

/// Trains the full model and the six variants from the same pretrained R and C.
/// The trained states are appended to `trained` when given.
std::vector<AblationRow> run_ablation(const TrainConfig& config, const Dataset& data, const NetworkParams& r,
                                      const NetworkParams& c, std::ostream* log = nullptr,
                                      std::vector<TrainState>* trained = nullptr);

/// Rows of four [H,W] tiles: input, frontal ground truth, G output, G output inside the visibility mask.
Tensor grid_mosaic(const std::vector<std::array<Tensor, 4>>& rows);
std::vector<std::array<Tensor, 4>> grid_rows(const TrainState& state, const TrainConfig& config, const Dataset& data,
                                             const std::vector<std::size_t>& idx);
void export_grid(const std::vector<std::array<Tensor, 4>>& rows, const std::filesystem::path& path);

struct EvalReport {
    double nme = 0.0;
    double heldout_l1 = 0.0;
    std::array<Rank1Result, 3> rank1; // indexed by FeatureMode
    std::vector<AblationRow> ablation;
    std::vector<std::string> grids;

    /// One key=value per line.
    std::string to_text() const;
};

EvalReport evaluate(const TrainState& state, const TrainConfig& config, const Dataset& data);

} // namespace ffgan
