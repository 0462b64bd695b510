#pragma once

#include "ffgan/losses.hpp"
#include "ffgan/networks.hpp"
#include "ffgan/synth_data.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace ffgan {

/// The six structural ablations. Each one removes a network or a generator term.
struct Ablation {
    bool drop_C = false;
    bool drop_D = false;
    bool drop_R = false;
    bool drop_Gid = false;
    bool drop_Gtv = false;
    bool drop_Gsym = false;

    bool operator==(const Ablation&) const = default;
};

/// Names in table order: "full" first, then the six switches.
const std::vector<std::string>& ablation_names();
/// "full" gives no switches; throws InvalidArgument for unknown names.
Ablation ablation_from_name(const std::string& name);
std::string ablation_name(const Ablation& a);

struct StageEpochs {
    std::size_t pretrain_r = 30;
    std::size_t pretrain_c = 30;
    std::size_t stage1 = 20;
    std::size_t stage2 = 20;
    std::size_t stage3 = 10;

    std::size_t joint() const { return stage1 + stage2 + stage3; }
    bool operator==(const StageEpochs&) const = default;
};

struct TrainConfig {
    std::uint64_t seed = 0;
    std::size_t batch_size = 16;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double lr_pretrain = 1e-3;
    double lr_gd = 2e-4;
    double lr_joint = 1e-4;
    StageEpochs epochs;
    /// Generator weights for stages 1, 2 and 3 before ablation overrides.
    std::array<LossWeights, 3> stage_weights = {
        LossWeights{0.0, 1.0, 1.0, 1.0, 0.01},
        LossWeights{1.0, 0.5, 0.8, 1.0, 1.0},
        LossWeights{1.0, 0.5, 0.8, 1.0, 1.0},
    };
    /// Weight on the pose entries of the coefficient distance.
    double pose_weight = 5.0;
    Ablation ablation;
    /// R receives generator gradients in stages 2-3.
    bool r_through_g = true;
    /// Mirrored coefficients from the analytic flip of R(x); otherwise R(x_flip).
    bool analytic_flip = true;

    /// Throws InvalidArgument naming the offending field.
    void validate() const;
    /// Effective weights of a joint stage (1-3) after ablation overrides.
    LossWeights weights(int stage) const;
    /// Stage (1-3) of a zero-based joint epoch.
    int stage_of(std::size_t joint_epoch) const;

    std::vector<double> to_vector() const;
    static TrainConfig from_vector(const std::vector<double>& values);
    bool operator==(const TrainConfig&) const = default;
};

/// Adam moments for one network.
struct AdamState {
    std::uint64_t step = 0;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static AdamState zeros_like(const NetworkParams& net);
    bool operator==(const AdamState&) const = default;
};

/// One Adam update of `net` from gradients of its bound leaves.
void adam_step(NetworkParams& net, AdamState& state, const Gradients& grads, const Bound& bound, double lr,
               const TrainConfig& config);

/// Mean of each logged quantity over one epoch, with the weights in effect.
struct EpochLog {
    std::size_t epoch = 0;
    int stage = 0;
    std::map<std::string, double> terms;
    LossWeights weights;

    /// Single line of key=value fields.
    std::string to_line() const;
    bool operator==(const EpochLog&) const = default;
};

struct TrainState {
    NetworkParams r, g, d, c;
    AdamState opt_r, opt_g, opt_d, opt_c;
    /// Joint epochs completed so far.
    std::size_t epoch = 0;
    std::vector<EpochLog> history;

    bool operator==(const TrainState& o) const
    {
        return r == o.r && g == o.g && d == o.d && c == o.c && opt_r == o.opt_r && opt_g == o.opt_g &&
               opt_d == o.opt_d && opt_c == o.opt_c && epoch == o.epoch && history == o.history;
    }
};

struct PretrainResult {
    NetworkParams net;
    std::vector<double> epoch_loss;
    /// R: held-out NME and the mean-coefficient baseline NME.
    /// C: held-out frontal accuracy and chance level.
    double heldout = 0.0;
    double baseline = 0.0;
};

/// Images of the selected samples stacked as [B,1,H,W].
Tensor stack_images(const Dataset& data, const std::vector<std::size_t>& idx, bool frontal);
/// Z-scored ground-truth coefficients [B,P].
Tensor stack_coeffs(const Dataset& data, const std::vector<std::size_t>& idx);
/// Order of the training samples in one epoch of a phase.
std::vector<std::size_t> epoch_order(const Dataset& data, std::uint64_t seed, std::uint64_t phase, std::size_t epoch);

/// Reconstructor predictions as raw coefficients, one per selected sample.
std::vector<Coeffs> predict_coeffs(const NetworkParams& r, const Dataset& data, const std::vector<std::size_t>& idx);
/// Mean landmark NME of R on the held-out samples.
double heldout_nme(const NetworkParams& r, const Dataset& data);
/// Mean landmark NME of the mean-coefficient predictor on the held-out samples.
double mean_predictor_nme(const Dataset& data);
/// Identity accuracy of C on the held-out frontal images.
double heldout_accuracy(const NetworkParams& c, const Dataset& data);

/// R minimizes the weighted coefficient distance on the pose-variant inputs.
/// C minimizes identity cross-entropy on the frontal ground truth plus the pose-variant inputs.
PretrainResult pretrain_R(const TrainConfig& config, const Dataset& data, std::ostream* log = nullptr);
PretrainResult pretrain_C(const TrainConfig& config, const Dataset& data, std::ostream* log = nullptr);

/// Fresh G and D plus the pretrained R and C with zeroed optimizer moments.
TrainState init_joint(const TrainConfig& config, const Dataset& data, const NetworkParams& r, const NetworkParams& c);
/// Runs the next `n` joint epochs, capped at the configured total. Writes one log line per epoch.
void train_epochs(TrainState& state, const TrainConfig& config, const Dataset& data, std::size_t n,
                  std::ostream* log = nullptr);
TrainState train_joint(const TrainConfig& config, const Dataset& data, const NetworkParams& r,
                       const NetworkParams& c, std::ostream* log = nullptr);

/// Frontalized images G(x, p) for the selected samples, p = R(x) or zero under drop_R.
Tensor frontalize(const TrainState& state, const TrainConfig& config, const Dataset& data,
                  const std::vector<std::size_t>& idx);
/// Mean L1 between frontalized held-out inputs and their frontal ground truth.
double heldout_l1(const TrainState& state, const TrainConfig& config, const Dataset& data);

std::vector<Record> state_records(const TrainState& state, const TrainConfig& config);
TrainState state_from_records(const std::vector<Record>& records, TrainConfig* config = nullptr);
void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::string& path);
TrainState load_checkpoint(const std::string& path, TrainConfig* config = nullptr);

} // namespace ffgan
