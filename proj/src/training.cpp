#include "ffgan/training.hpp"

#include "ffgan/error.hpp"
#include "ffgan/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>

namespace ffgan {

namespace {

constexpr std::uint64_t kPhasePretrainR = 1;
constexpr std::uint64_t kPhasePretrainC = 2;
constexpr std::uint64_t kPhaseJoint = 3;
constexpr std::uint64_t kInitR = 10;
constexpr std::uint64_t kInitC = 11;
constexpr std::uint64_t kInitG = 12;
constexpr std::uint64_t kInitD = 13;
constexpr std::size_t kEvalChunk = 64;

/// Logged quantities in a fixed order; used for the history record.
const std::vector<std::string>& term_keys()
{
    static const std::vector<std::string> keys = {"d", "rec", "tv", "sym", "gan", "id", "param", "c", "g_total"};
    return keys;
}

void require(bool ok, const std::string& what)
{
    if (!ok) {
        throw InvalidArgument("train config: " + what);
    }
}

[[noreturn]] void bad_content(const std::string& what)
{
    throw FormatError(FormatError::Kind::bad_content, what);
}

double checked(const Var& v, const std::string& where, const std::string& term)
{
    const double value = v.value().item();
    if (!std::isfinite(value)) {
        throw DivergenceError(where + ": loss term '" + term + "' is not finite");
    }
    return value;
}

std::vector<std::vector<std::size_t>> batches(const std::vector<std::size_t>& order, std::size_t batch_size)
{
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += batch_size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
    }
    return out;
}

std::vector<std::size_t> labels_of(const Dataset& data, const std::vector<std::size_t>& idx)
{
    std::vector<std::size_t> y;
    y.reserve(idx.size());
    for (std::size_t i : idx) {
        y.push_back(data.samples[i].y);
    }
    return y;
}

Tensor tile_rows(const Eigen::VectorXd& row, std::size_t batch)
{
    const std::size_t n = static_cast<std::size_t>(row.size());
    Tensor out({batch, n});
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t i = 0; i < n; ++i) {
            out[b * n + i] = row[static_cast<Eigen::Index>(i)];
        }
    }
    return out;
}

/// Identity cross-entropy over the frontal ground truth plus the pose-variant inputs.
Var recognizer_loss(const Bound& c, const Var& frontal, const Var& posed, const std::vector<std::size_t>& labels)
{
    return add(c_loss(forward_C(c, frontal).logits, labels), c_loss(forward_C(c, posed).logits, labels));
}

/// z' = a z + b maps z-scored coefficients to those of the mirrored image.
struct FlipAffine {
    Eigen::VectorXd a;
    Eigen::VectorXd b;
};

FlipAffine flip_affine(const MorphableModel& model, std::size_t width)
{
    const std::size_t n = model.coeff_size();
    FlipAffine f{Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n)), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))};
    const std::array<double, kPoseEntries> sign = {1, -1, -1, -1, -1, 1, 1, 1};
    Eigen::VectorXd shift = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    shift[3] = static_cast<double>(width) - 1.0;
    for (std::size_t i = 0; i < kPoseEntries; ++i) {
        f.a[static_cast<Eigen::Index>(i)] = sign[i];
    }
    f.b = (f.a.cwiseProduct(model.coeff_mean) + shift - model.coeff_mean).cwiseQuotient(model.coeff_std);
    return f;
}

std::vector<Coeffs> rows_to_coeffs(const MorphableModel& model, const Tensor& z)
{
    const std::size_t batch = z.dim(0), n = z.dim(1);
    std::vector<Coeffs> out;
    out.reserve(batch);
    for (std::size_t b = 0; b < batch; ++b) {
        Eigen::VectorXd row(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            row[static_cast<Eigen::Index>(i)] = z[b * n + i];
        }
        out.push_back(denormalize_coeffs(model, row));
    }
    return out;
}

/// Masks of the predicted poses; a degenerate prediction gives an empty mask.
SymmetryMasks predicted_masks(const MorphableModel& model, const std::vector<Coeffs>& p, std::size_t size)
{
    std::vector<VisibilityMask> m, mf;
    for (const Coeffs& c : p) {
        VisibilityMask a, b;
        try {
            a = visibility_mask(model, c, size, size);
            b = visibility_mask(model, flip_coeffs(c, size), size, size);
        } catch (const InvalidArgument&) {
            a = b = VisibilityMask{size, size, std::vector<std::uint8_t>(size * size, 0), c.m};
        }
        m.push_back(std::move(a));
        mf.push_back(std::move(b));
    }
    return masks_from(m, mf);
}

Tensor flip_images(const Tensor& x)
{
    Graph g;
    return flip_w(g.constant(x)).value();
}

struct Accumulator {
    std::map<std::string, double> sum;
    std::size_t count = 0;

    void add(const std::map<std::string, double>& values)
    {
        for (const auto& [k, v] : values) {
            sum[k] += v;
        }
        ++count;
    }
    std::map<std::string, double> mean() const
    {
        std::map<std::string, double> out;
        for (const auto& [k, v] : sum) {
            out[k] = v / static_cast<double>(count);
        }
        return out;
    }
};

std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void put_scalar(std::vector<Record>& out, const std::string& name, double v)
{
    out.push_back({name, Tensor::scalar(v)});
}

void put_vector(std::vector<Record>& out, const std::string& name, const std::vector<double>& v)
{
    out.push_back({name, Tensor({v.size()}, v)});
}

std::vector<Record> adam_records(const AdamState& s, const NetworkParams& net, const std::string& prefix)
{
    std::vector<Record> out;
    put_scalar(out, prefix + "/step", static_cast<double>(s.step));
    for (std::size_t i = 0; i < net.names.size(); ++i) {
        out.push_back({prefix + "/m/" + net.names[i], s.m[i]});
        out.push_back({prefix + "/v/" + net.names[i], s.v[i]});
    }
    return out;
}

std::size_t whole(double v, const std::string& what)
{
    if (!(v >= 0.0) || v != std::floor(v) || v > 9007199254740992.0) {
        bad_content(what + " is not a nonnegative integer");
    }
    return static_cast<std::size_t>(v);
}

AdamState adam_from_records(const std::vector<Record>& records, const NetworkParams& net, const std::string& prefix)
{
    AdamState s;
    s.step = whole(find_record(records, prefix + "/step").item(), prefix + "/step");
    for (std::size_t i = 0; i < net.names.size(); ++i) {
        s.m.push_back(find_record(records, prefix + "/m/" + net.names[i]));
        s.v.push_back(find_record(records, prefix + "/v/" + net.names[i]));
        if (s.m.back().shape() != net.tensors[i].shape() || s.v.back().shape() != net.tensors[i].shape()) {
            bad_content(prefix + ": moment shape does not match " + net.names[i]);
        }
    }
    return s;
}

} // namespace

const std::vector<std::string>& ablation_names()
{
    static const std::vector<std::string> names = {"full",   "drop_C",   "drop_D",   "drop_R",
                                                   "drop_Gid", "drop_Gtv", "drop_Gsym"};
    return names;
}

Ablation ablation_from_name(const std::string& name)
{
    Ablation a;
    if (name == "full") {
    } else if (name == "drop_C") {
        a.drop_C = true;
    } else if (name == "drop_D") {
        a.drop_D = true;
    } else if (name == "drop_R") {
        a.drop_R = true;
    } else if (name == "drop_Gid") {
        a.drop_Gid = true;
    } else if (name == "drop_Gtv") {
        a.drop_Gtv = true;
    } else if (name == "drop_Gsym") {
        a.drop_Gsym = true;
    } else {
        throw InvalidArgument("unknown ablation '" + name + "'");
    }
    return a;
}

std::string ablation_name(const Ablation& a)
{
    std::string out;
    const std::pair<bool, const char*> parts[] = {{a.drop_C, "drop_C"},     {a.drop_D, "drop_D"},
                                                  {a.drop_R, "drop_R"},     {a.drop_Gid, "drop_Gid"},
                                                  {a.drop_Gtv, "drop_Gtv"}, {a.drop_Gsym, "drop_Gsym"}};
    for (const auto& [on, name] : parts) {
        if (on) {
            out += out.empty() ? name : std::string("+") + name;
        }
    }
    return out.empty() ? "full" : out;
}

void TrainConfig::validate() const
{
    require(seed < (std::uint64_t{1} << 53), "seed must be below 2^53");
    require(batch_size >= 1, "batch_size must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0, "beta1 must be in [0,1)");
    require(beta2 >= 0.0 && beta2 < 1.0, "beta2 must be in [0,1)");
    require(adam_eps > 0.0 && std::isfinite(adam_eps), "adam_eps must be positive");
    for (const auto& [v, name] : {std::pair{lr_pretrain, "lr_pretrain"}, {lr_gd, "lr_gd"}, {lr_joint, "lr_joint"}}) {
        require(v > 0.0 && std::isfinite(v), std::string(name) + " must be positive");
    }
    for (const LossWeights& w : stage_weights) {
        w.validate();
    }
    require(pose_weight >= 0.0 && std::isfinite(pose_weight), "pose_weight must be nonnegative");
}

LossWeights TrainConfig::weights(int stage) const
{
    if (stage < 1 || stage > 3) {
        throw InvalidArgument("stage must be 1, 2 or 3");
    }
    LossWeights w = stage_weights[static_cast<std::size_t>(stage - 1)];
    if (ablation.drop_C || ablation.drop_Gid) {
        w.id = 0.0;
    }
    if (ablation.drop_D) {
        w.gan = 0.0;
    }
    if (ablation.drop_Gtv) {
        w.tv = 0.0;
    }
    if (ablation.drop_Gsym) {
        w.sym = 0.0;
    }
    return w;
}

int TrainConfig::stage_of(std::size_t joint_epoch) const
{
    if (joint_epoch < epochs.stage1) {
        return 1;
    }
    return joint_epoch < epochs.stage1 + epochs.stage2 ? 2 : 3;
}

std::vector<double> TrainConfig::to_vector() const
{
    std::vector<double> v = {static_cast<double>(seed),
                             static_cast<double>(batch_size),
                             beta1,
                             beta2,
                             adam_eps,
                             lr_pretrain,
                             lr_gd,
                             lr_joint,
                             static_cast<double>(epochs.pretrain_r),
                             static_cast<double>(epochs.pretrain_c),
                             static_cast<double>(epochs.stage1),
                             static_cast<double>(epochs.stage2),
                             static_cast<double>(epochs.stage3)};
    for (const LossWeights& w : stage_weights) {
        v.insert(v.end(), {w.rec, w.tv, w.sym, w.gan, w.id});
    }
    v.push_back(pose_weight);
    for (bool b : {ablation.drop_C, ablation.drop_D, ablation.drop_R, ablation.drop_Gid, ablation.drop_Gtv,
                   ablation.drop_Gsym, r_through_g, analytic_flip}) {
        v.push_back(b ? 1.0 : 0.0);
    }
    return v;
}

TrainConfig TrainConfig::from_vector(const std::vector<double>& v)
{
    constexpr std::size_t kSize = 13 + 15 + 1 + 8;
    if (v.size() != kSize) {
        bad_content("train config has " + std::to_string(v.size()) + " entries, expected " + std::to_string(kSize));
    }
    const auto flag = [](double x) {
        if (x != 0.0 && x != 1.0) {
            bad_content("train config flag is not 0 or 1");
        }
        return x == 1.0;
    };
    TrainConfig c;
    c.seed = whole(v[0], "seed");
    c.batch_size = whole(v[1], "batch_size");
    c.beta1 = v[2];
    c.beta2 = v[3];
    c.adam_eps = v[4];
    c.lr_pretrain = v[5];
    c.lr_gd = v[6];
    c.lr_joint = v[7];
    c.epochs = {whole(v[8], "epochs"), whole(v[9], "epochs"), whole(v[10], "epochs"), whole(v[11], "epochs"),
                whole(v[12], "epochs")};
    for (std::size_t s = 0; s < 3; ++s) {
        const double* w = &v[13 + 5 * s];
        c.stage_weights[s] = {w[0], w[1], w[2], w[3], w[4]};
    }
    c.pose_weight = v[28];
    c.ablation = {flag(v[29]), flag(v[30]), flag(v[31]), flag(v[32]), flag(v[33]), flag(v[34])};
    c.r_through_g = flag(v[35]);
    c.analytic_flip = flag(v[36]);
    try {
        c.validate();
    } catch (const InvalidArgument& e) {
        bad_content(e.what());
    }
    return c;
}

AdamState AdamState::zeros_like(const NetworkParams& net)
{
    AdamState s;
    for (const Tensor& t : net.tensors) {
        s.m.emplace_back(t.shape());
        s.v.emplace_back(t.shape());
    }
    return s;
}

void adam_step(NetworkParams& net, AdamState& state, const Gradients& grads, const Bound& bound, double lr,
               const TrainConfig& config)
{
    if (bound.vars.size() != net.tensors.size() || state.m.size() != net.tensors.size()) {
        throw InvalidArgument("adam_step: optimizer state does not match the network");
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(config.beta1, t);
    const double c2 = 1.0 - std::pow(config.beta2, t);
    const double step = lr * std::sqrt(c2) / c1;
    for (std::size_t k = 0; k < net.tensors.size(); ++k) {
        const Tensor& g = grads[bound.vars[k]];
        std::span<double> p = net.tensors[k].data();
        std::span<double> m = state.m[k].data();
        std::span<double> v = state.v[k].data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
            p[i] -= step * m[i] / (std::sqrt(v[i]) + config.adam_eps);
        }
    }
}

std::string EpochLog::to_line() const
{
    std::string line = "epoch=" + std::to_string(epoch) + " stage=" + std::to_string(stage);
    for (const std::string& k : term_keys()) {
        const auto it = terms.find(k);
        if (it != terms.end()) {
            line += " " + k + "=" + format_double(it->second);
        }
    }
    line += " lambda_rec=" + format_double(weights.rec) + " lambda_tv=" + format_double(weights.tv) +
            " lambda_sym=" + format_double(weights.sym) + " lambda_gan=" + format_double(weights.gan) +
            " lambda_id=" + format_double(weights.id);
    return line;
}

Tensor stack_images(const Dataset& data, const std::vector<std::size_t>& idx, bool frontal)
{
    const std::size_t size = data.spec.image_size, hw = size * size;
    Tensor out({idx.size(), 1, size, size});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const Tensor& img = frontal ? data.samples.at(idx[b]).x_g : data.samples.at(idx[b]).x;
        std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * hw));
    }
    return out;
}

Tensor stack_coeffs(const Dataset& data, const std::vector<std::size_t>& idx)
{
    const std::size_t n = data.model.coeff_size();
    Tensor out({idx.size(), n});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        const Eigen::VectorXd z = normalize_coeffs(data.model, data.samples.at(idx[b]).p_g);
        std::copy(z.data(), z.data() + z.size(), out.data().begin() + static_cast<std::ptrdiff_t>(b * n));
    }
    return out;
}

std::vector<std::size_t> epoch_order(const Dataset& data, std::uint64_t seed, std::uint64_t phase, std::size_t epoch)
{
    const std::vector<std::size_t> train = data.indices(false);
    Rng rng(mix_seed(mix_seed(seed, phase), epoch));
    std::vector<std::size_t> out;
    out.reserve(train.size());
    for (std::size_t i : rng.permutation(train.size())) {
        out.push_back(train[i]);
    }
    return out;
}

std::vector<Coeffs> predict_coeffs(const NetworkParams& r, const Dataset& data, const std::vector<std::size_t>& idx)
{
    std::vector<Coeffs> out;
    for (const auto& chunk : batches(idx, kEvalChunk)) {
        Graph g;
        const Var z = forward_R(bind(g, r, false), g.constant(stack_images(data, chunk, false)));
        for (Coeffs& c : rows_to_coeffs(data.model, z.value())) {
            out.push_back(std::move(c));
        }
    }
    return out;
}

namespace {

double mean_nme(const Dataset& data, const std::vector<std::size_t>& idx, const std::vector<Coeffs>& pred)
{
    if (idx.empty()) {
        return 0.0;
    }
    double total = 0.0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const Sample& s = data.samples[idx[k]];
        total += landmark_nme(landmarks_2d(data.model, pred[k]), s.landmarks, bbox_diagonal(s.landmarks));
    }
    return total / static_cast<double>(idx.size());
}

} // namespace

double heldout_nme(const NetworkParams& r, const Dataset& data)
{
    const std::vector<std::size_t> idx = data.indices(true);
    return mean_nme(data, idx, predict_coeffs(r, data, idx));
}

double mean_predictor_nme(const Dataset& data)
{
    const std::vector<std::size_t> idx = data.indices(true);
    const Coeffs mean = denormalize_coeffs(data.model, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(data.model.coeff_size())));
    return mean_nme(data, idx, std::vector<Coeffs>(idx.size(), mean));
}

double heldout_accuracy(const NetworkParams& c, const Dataset& data)
{
    const std::vector<std::size_t> idx = data.indices(true);
    if (idx.empty()) {
        return 0.0;
    }
    std::size_t correct = 0;
    for (const auto& chunk : batches(idx, kEvalChunk)) {
        Graph g;
        const Tensor logits = forward_C(bind(g, c, false), g.constant(stack_images(data, chunk, true))).logits.value();
        const std::size_t k = logits.dim(1);
        for (std::size_t b = 0; b < chunk.size(); ++b) {
            const auto row = logits.data().begin() + static_cast<std::ptrdiff_t>(b * k);
            const auto best = static_cast<std::size_t>(std::max_element(row, row + static_cast<std::ptrdiff_t>(k)) - row);
            correct += best == data.samples[chunk[b]].y;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

PretrainResult pretrain_R(const TrainConfig& config, const Dataset& data, std::ostream* log)
{
    config.validate();
    PretrainResult out;
    out.net = init_params(reconstructor_arch(data.spec.image_size, data.model.coeff_size()), mix_seed(config.seed, kInitR));
    AdamState opt = AdamState::zeros_like(out.net);
    const Eigen::VectorXd w = importance_weights(data.model, config.pose_weight);
    for (std::size_t epoch = 0; epoch < config.epochs.pretrain_r; ++epoch) {
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& batch : batches(epoch_order(data, config.seed, kPhasePretrainR, epoch), config.batch_size)) {
            Graph g;
            const Bound rb = bind(g, out.net, true);
            const Var z = forward_R(rb, g.constant(stack_images(data, batch, false)));
            const Var loss = param_distance_loss(z, g.constant(stack_coeffs(data, batch)), w);
            total += checked(loss, "pretrain_R epoch " + std::to_string(epoch), "param");
            ++n;
            adam_step(out.net, opt, g.backward(loss), rb, config.lr_pretrain, config);
        }
        out.epoch_loss.push_back(n == 0 ? 0.0 : total / static_cast<double>(n));
        if (log) {
            *log << "phase=pretrain_r epoch=" << epoch << " param=" << format_double(out.epoch_loss.back()) << '\n';
        }
    }
    out.heldout = heldout_nme(out.net, data);
    out.baseline = mean_predictor_nme(data);
    return out;
}

PretrainResult pretrain_C(const TrainConfig& config, const Dataset& data, std::ostream* log)
{
    config.validate();
    PretrainResult out;
    out.net = init_params(recognizer_arch(data.spec.image_size, data.spec.n_identities), mix_seed(config.seed, kInitC));
    AdamState opt = AdamState::zeros_like(out.net);
    for (std::size_t epoch = 0; epoch < config.epochs.pretrain_c; ++epoch) {
        double total = 0.0;
        std::size_t n = 0;
        for (const auto& batch : batches(epoch_order(data, config.seed, kPhasePretrainC, epoch), config.batch_size)) {
            Graph g;
            const Bound cb = bind(g, out.net, true);
            const Var loss = recognizer_loss(cb, g.constant(stack_images(data, batch, true)),
                                             g.constant(stack_images(data, batch, false)), labels_of(data, batch));
            total += checked(loss, "pretrain_C epoch " + std::to_string(epoch), "c");
            ++n;
            adam_step(out.net, opt, g.backward(loss), cb, config.lr_pretrain, config);
        }
        out.epoch_loss.push_back(n == 0 ? 0.0 : total / static_cast<double>(n));
        if (log) {
            *log << "phase=pretrain_c epoch=" << epoch << " c=" << format_double(out.epoch_loss.back()) << '\n';
        }
    }
    out.heldout = heldout_accuracy(out.net, data);
    out.baseline = 1.0 / static_cast<double>(data.spec.n_identities);
    return out;
}

TrainState init_joint(const TrainConfig& config, const Dataset& data, const NetworkParams& r, const NetworkParams& c)
{
    config.validate();
    const std::size_t size = data.spec.image_size, n = data.model.coeff_size();
    if (r.arch.kind != NetKind::reconstructor || r.arch.image_size != size || r.arch.coeff_dim != n) {
        throw InvalidArgument("init_joint: reconstructor does not match the dataset");
    }
    if (c.arch.kind != NetKind::recognizer || c.arch.image_size != size || c.arch.n_identities != data.spec.n_identities) {
        throw InvalidArgument("init_joint: recognizer does not match the dataset");
    }
    TrainState s;
    s.r = r;
    s.c = c;
    s.g = init_params(generator_arch(size, n), mix_seed(config.seed, kInitG));
    s.d = init_params(discriminator_arch(size), mix_seed(config.seed, kInitD));
    s.opt_r = AdamState::zeros_like(s.r);
    s.opt_c = AdamState::zeros_like(s.c);
    s.opt_g = AdamState::zeros_like(s.g);
    s.opt_d = AdamState::zeros_like(s.d);
    return s;
}

namespace {

std::map<std::string, double> joint_iteration(TrainState& s, const TrainConfig& config, const Dataset& data,
                                              const std::vector<std::size_t>& batch, int stage, const FlipAffine& flip,
                                              const std::string& where)
{
    const Ablation& ab = config.ablation;
    const LossWeights w = config.weights(stage);
    const std::size_t bsz = batch.size(), n = data.model.coeff_size(), size = data.spec.image_size;
    const bool update_r = stage >= 2 && !ab.drop_R;
    std::map<std::string, double> logged;

    const Tensor x_t = stack_images(data, batch, false);
    const Tensor xg_t = stack_images(data, batch, true);

    Graph g;
    const Bound rb = bind(g, s.r, update_r);
    const Bound gb = bind(g, s.g, true);
    const Var x = g.constant(x_t);
    const Var x_g = g.constant(xg_t);

    std::optional<Var> p_hat;
    Var p_in;
    if (ab.drop_R) {
        p_in = g.constant(Tensor({bsz, n}));
    } else {
        p_hat = forward_R(rb, x);
        p_in = update_r && !config.r_through_g ? g.detach(*p_hat) : *p_hat;
    }
    const Var x_f = forward_G(gb, x, p_in);

    std::optional<Var> x_f_flip;
    if (w.sym > 0.0) {
        const Var x_flip = g.constant(flip_images(x_t));
        Var p_flip;
        if (ab.drop_R) {
            p_flip = p_in;
        } else if (config.analytic_flip) {
            p_flip = add(mul(p_in, g.constant(tile_rows(flip.a, bsz))), g.constant(tile_rows(flip.b, bsz)));
        } else {
            const Var z = forward_R(rb, x_flip);
            p_flip = update_r && !config.r_through_g ? g.detach(z) : z;
        }
        x_f_flip = forward_G(gb, x_flip, p_flip);
    }

    // D step on a real frontal batch and a detached generated batch.
    if (!ab.drop_D) {
        Graph gd;
        const Bound db = bind(gd, s.d, true);
        const Var loss = d_loss(forward_D(db, gd.constant(xg_t)), forward_D(db, gd.constant(x_f.value())));
        logged["d"] = checked(loss, where, "d");
        adam_step(s.d, s.opt_d, gd.backward(loss), db, config.lr_gd, config);
    }

    // G step against the updated D and the current C, both held constant.
    GeneratorTerms terms;
    if (w.rec > 0.0) {
        terms.rec = rec_loss(x_f, x_g);
    }
    if (w.tv > 0.0) {
        terms.tv = tv_loss(x_f);
    }
    if (x_f_flip) {
        const Tensor z_pred = p_hat ? p_hat->value() : Tensor({bsz, n});
        terms.sym = sym_loss(x_f, *x_f_flip, predicted_masks(data.model, rows_to_coeffs(data.model, z_pred), size));
    }
    if (w.gan > 0.0) {
        terms.gan = g_gan_loss(forward_D(bind(g, s.d, false), x_f));
    }
    if (w.id > 0.0) {
        terms.id = g_id_loss(forward_C(bind(g, s.c, false), x_f).logits, labels_of(data, batch));
    }
    const std::pair<const char*, const std::optional<Var>*> named[] = {
        {"rec", &terms.rec}, {"tv", &terms.tv}, {"sym", &terms.sym}, {"gan", &terms.gan}, {"id", &terms.id}};
    for (const auto& [name, term] : named) {
        if (*term) {
            logged[name] = checked(**term, where, name);
        }
    }
    Var total = total_g_loss(g, w, terms);
    logged["g_total"] = checked(total, where, "g_total");
    if (update_r) {
        const Var param = param_distance_loss(*p_hat, g.constant(stack_coeffs(data, batch)),
                                              importance_weights(data.model, config.pose_weight));
        logged["param"] = checked(param, where, "param");
        total = add(total, param);
    }
    const Gradients grads = g.backward(total);
    adam_step(s.g, s.opt_g, grads, gb, config.lr_gd, config);
    if (update_r) {
        adam_step(s.r, s.opt_r, grads, rb, config.lr_joint, config);
    }

    // C step on real frontal images, stage 3 only.
    if (stage == 3 && !ab.drop_C) {
        Graph gc;
        const Bound cb = bind(gc, s.c, true);
        const Var loss = recognizer_loss(cb, gc.constant(xg_t), gc.constant(x_t), labels_of(data, batch));
        logged["c"] = checked(loss, where, "c");
        adam_step(s.c, s.opt_c, gc.backward(loss), cb, config.lr_joint, config);
    }
    return logged;
}

} // namespace

void train_epochs(TrainState& state, const TrainConfig& config, const Dataset& data, std::size_t n, std::ostream* log)
{
    config.validate();
    const FlipAffine flip = flip_affine(data.model, data.spec.image_size);
    const std::size_t total = config.epochs.joint();
    for (std::size_t k = 0; k < n && state.epoch < total; ++k) {
        const std::size_t epoch = state.epoch;
        const int stage = config.stage_of(epoch);
        const std::string where = "joint epoch " + std::to_string(epoch) + " stage " + std::to_string(stage);
        Accumulator acc;
        for (const auto& batch : batches(epoch_order(data, config.seed, kPhaseJoint, epoch), config.batch_size)) {
            acc.add(joint_iteration(state, config, data, batch, stage, flip, where));
        }
        EpochLog entry{epoch, stage, acc.mean(), config.weights(stage)};
        if (log) {
            *log << entry.to_line() << '\n';
        }
        state.history.push_back(std::move(entry));
        ++state.epoch;
    }
}

TrainState train_joint(const TrainConfig& config, const Dataset& data, const NetworkParams& r, const NetworkParams& c,
                       std::ostream* log)
{
    TrainState s = init_joint(config, data, r, c);
    train_epochs(s, config, data, config.epochs.joint(), log);
    return s;
}

Tensor frontalize(const TrainState& state, const TrainConfig& config, const Dataset& data,
                  const std::vector<std::size_t>& idx)
{
    const std::size_t size = data.spec.image_size, hw = size * size, n = data.model.coeff_size();
    Tensor out({idx.size(), 1, size, size});
    std::size_t offset = 0;
    for (const auto& chunk : batches(idx, kEvalChunk)) {
        Graph g;
        const Var x = g.constant(stack_images(data, chunk, false));
        const Var p = config.ablation.drop_R ? g.constant(Tensor({chunk.size(), n})) : forward_R(bind(g, state.r, false), x);
        const Tensor f = forward_G(bind(g, state.g, false), x, p).value();
        std::copy(f.data().begin(), f.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(offset));
        offset += chunk.size() * hw;
    }
    return out;
}

double heldout_l1(const TrainState& state, const TrainConfig& config, const Dataset& data)
{
    const std::vector<std::size_t> idx = data.indices(true);
    if (idx.empty()) {
        return 0.0;
    }
    const Tensor f = frontalize(state, config, data, idx);
    const Tensor t = stack_images(data, idx, true);
    double total = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        total += std::fabs(f[i] - t[i]);
    }
    return total / static_cast<double>(f.size());
}

std::vector<Record> state_records(const TrainState& state, const TrainConfig& config)
{
    std::vector<Record> out;
    put_vector(out, "train/config", config.to_vector());
    put_scalar(out, "train/epoch", static_cast<double>(state.epoch));
    const std::vector<std::string>& keys = term_keys();
    const std::size_t cols = 2 + keys.size() + 5;
    Tensor hist({state.history.size(), cols});
    for (std::size_t e = 0; e < state.history.size(); ++e) {
        const EpochLog& h = state.history[e];
        double* row = hist.data().data() + e * cols;
        row[0] = static_cast<double>(h.epoch);
        row[1] = h.stage;
        for (std::size_t k = 0; k < keys.size(); ++k) {
            const auto it = h.terms.find(keys[k]);
            row[2 + k] = it == h.terms.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
        }
        const double ws[] = {h.weights.rec, h.weights.tv, h.weights.sym, h.weights.gan, h.weights.id};
        std::copy(std::begin(ws), std::end(ws), row + 2 + keys.size());
    }
    out.push_back({"train/history", std::move(hist)});
    const std::pair<const NetworkParams*, const AdamState*> nets[] = {
        {&state.r, &state.opt_r}, {&state.g, &state.opt_g}, {&state.d, &state.opt_d}, {&state.c, &state.opt_c}};
    const char* prefixes[] = {"r", "g", "d", "c"};
    for (std::size_t i = 0; i < 4; ++i) {
        for (Record& rec : params_records(*nets[i].first, prefixes[i])) {
            out.push_back(std::move(rec));
        }
        for (Record& rec : adam_records(*nets[i].second, *nets[i].first, std::string("opt_") + prefixes[i])) {
            out.push_back(std::move(rec));
        }
    }
    return out;
}

TrainState state_from_records(const std::vector<Record>& records, TrainConfig* config)
{
    const TrainConfig cfg = TrainConfig::from_vector(find_record(records, "train/config").values());
    if (config) {
        *config = cfg;
    }
    TrainState s;
    s.epoch = whole(find_record(records, "train/epoch").item(), "train/epoch");
    s.r = params_from_records(records, "r");
    s.g = params_from_records(records, "g");
    s.d = params_from_records(records, "d");
    s.c = params_from_records(records, "c");
    const std::pair<NetKind, const NetworkParams*> kinds[] = {{NetKind::reconstructor, &s.r},
                                                              {NetKind::generator, &s.g},
                                                              {NetKind::discriminator, &s.d},
                                                              {NetKind::recognizer, &s.c}};
    for (const auto& [kind, net] : kinds) {
        if (net->arch.kind != kind) {
            bad_content("checkpoint network has the wrong kind");
        }
    }
    s.opt_r = adam_from_records(records, s.r, "opt_r");
    s.opt_g = adam_from_records(records, s.g, "opt_g");
    s.opt_d = adam_from_records(records, s.d, "opt_d");
    s.opt_c = adam_from_records(records, s.c, "opt_c");

    const Tensor& hist = find_record(records, "train/history");
    const std::vector<std::string>& keys = term_keys();
    const std::size_t cols = 2 + keys.size() + 5;
    if (hist.rank() != 2 || hist.dim(1) != cols || hist.dim(0) != s.epoch) {
        bad_content("train/history does not match the epoch counter");
    }
    for (std::size_t e = 0; e < hist.dim(0); ++e) {
        const double* row = hist.data().data() + e * cols;
        EpochLog h;
        h.epoch = whole(row[0], "history epoch");
        h.stage = static_cast<int>(whole(row[1], "history stage"));
        for (std::size_t k = 0; k < keys.size(); ++k) {
            if (!std::isnan(row[2 + k])) {
                h.terms[keys[k]] = row[2 + k];
            }
        }
        const double* w = row + 2 + keys.size();
        h.weights = {w[0], w[1], w[2], w[3], w[4]};
        s.history.push_back(std::move(h));
    }
    return s;
}

void save_checkpoint(const TrainState& state, const TrainConfig& config, const std::string& path)
{
    write_container(path, state_records(state, config));
}

TrainState load_checkpoint(const std::string& path, TrainConfig* config)
{
    return state_from_records(read_container(path), config);
}

} // namespace ffgan
