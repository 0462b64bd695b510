#include "ffgan/synth_data.hpp"

#include "ffgan/error.hpp"
#include "ffgan/random.hpp"

#include <Eigen/Geometry>
#include <Eigen/QR>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numbers>

namespace ffgan {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

constexpr std::uint64_t kGeometryStream = 0x6E0;
constexpr std::uint64_t kIdBasisStream = 0xB1D;
constexpr std::uint64_t kExpBasisStream = 0xBE8;
constexpr std::uint64_t kTexBasisStream = 0xB7E;
constexpr std::uint64_t kPoseStatsStream = 0x57A7;
constexpr std::uint64_t kIdentityStream = 0x1D00;

constexpr std::size_t kPoseStatDraws = 4096;

double sigma_id(std::size_t k) { return 2.0 * std::pow(0.85, static_cast<double>(k)); }
double sigma_exp(std::size_t k) { return 2.0 * std::pow(0.8, static_cast<double>(k)); }
double sigma_tex(std::size_t k) { return 2.0 * std::pow(0.85, static_cast<double>(k)); }

void require_spec(bool ok, const std::string& what)
{
    if (!ok) {
        throw InvalidArgument("dataset spec: " + what);
    }
}

std::size_t grid_side(std::size_t n_vertices)
{
    return static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n_vertices))));
}

double gauss2(double dx, double sx, double dy, double sy)
{
    return std::exp(-0.5 * ((dx / sx) * (dx / sx) + (dy / sy) * (dy / sy)));
}

/// Eight passes of the separable [1,2,1]/4 filter with edge replication.
void blur(std::vector<double>& f, std::size_t side)
{
    std::vector<double> tmp(f.size());
    const auto at = [side](std::size_t i, std::size_t j) { return j * side + i; };
    for (int pass = 0; pass < 8; ++pass) {
        for (std::size_t j = 0; j < side; ++j) {
            for (std::size_t i = 0; i < side; ++i) {
                const std::size_t l = i == 0 ? i : i - 1, r = i + 1 == side ? i : i + 1;
                tmp[at(i, j)] = 0.25 * f[at(l, j)] + 0.5 * f[at(i, j)] + 0.25 * f[at(r, j)];
            }
        }
        for (std::size_t j = 0; j < side; ++j) {
            const std::size_t u = j == 0 ? j : j - 1, d = j + 1 == side ? j : j + 1;
            for (std::size_t i = 0; i < side; ++i) {
                f[at(i, j)] = 0.25 * tmp[at(i, u)] + 0.5 * tmp[at(i, j)] + 0.25 * tmp[at(i, d)];
            }
        }
    }
}

/// Smooth random fields with orthonormal columns. With `symmetric`, every
/// column is even under the mirror map (the x channel of a shape basis is odd).
Eigen::MatrixXd smooth_basis(std::size_t side, std::size_t channels, std::size_t k,
                             const std::vector<std::size_t>& mirror, bool symmetric, std::uint64_t seed)
{
    const std::size_t n = side * side;
    Rng rng(seed);
    Eigen::MatrixXd a(static_cast<Eigen::Index>(n * channels), static_cast<Eigen::Index>(k));
    std::vector<double> field(n);
    for (std::size_t col = 0; col < k; ++col) {
        for (std::size_t ch = 0; ch < channels; ++ch) {
            for (double& v : field) {
                v = rng.normal();
            }
            blur(field, side);
            const double parity = (channels == 3 && ch == 0) ? -1.0 : 1.0;
            for (std::size_t v = 0; v < n; ++v) {
                const double value = symmetric ? 0.5 * (field[v] + parity * field[mirror[v]]) : field[v];
                a(static_cast<Eigen::Index>(v * channels + ch), static_cast<Eigen::Index>(col)) = value;
            }
        }
    }
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
    return qr.householderQ() * Eigen::MatrixXd::Identity(a.rows(), a.cols());
}

std::size_t nearest_vertex(const Eigen::VectorXd& shape, std::size_t n, double x, double y, bool positive_x_only)
{
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t v = 0; v < n; ++v) {
        const double vx = shape[static_cast<Eigen::Index>(3 * v)];
        const double vy = shape[static_cast<Eigen::Index>(3 * v + 1)];
        if (positive_x_only && vx <= 0.0) {
            continue;
        }
        const double d = (vx - x) * (vx - x) + (vy - y) * (vy - y);
        if (d < best_d) {
            best_d = d;
            best = v;
        }
    }
    return best;
}

Tensor flatten_matrix(const Eigen::MatrixXd& m)
{
    Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            t[static_cast<std::size_t>(r * m.cols() + c)] = m(r, c);
        }
    }
    return t;
}

Tensor flatten_vector(const Eigen::VectorXd& v)
{
    Tensor t({static_cast<std::size_t>(v.size())});
    std::copy(v.data(), v.data() + v.size(), t.data().begin());
    return t;
}

Tensor flatten_indices(const std::vector<std::size_t>& v)
{
    Tensor t({v.size()});
    for (std::size_t i = 0; i < v.size(); ++i) {
        t[i] = static_cast<double>(v[i]);
    }
    return t;
}

[[noreturn]] void bad_content(const std::string& what)
{
    throw FormatError(FormatError::Kind::bad_content, what);
}

Eigen::MatrixXd matrix_from(const Tensor& t, const std::string& name)
{
    if (t.rank() != 2) {
        bad_content("record '" + name + "' must be rank 2, got " + to_string(t.shape()));
    }
    Eigen::MatrixXd m(static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            m(r, c) = t[static_cast<std::size_t>(r * m.cols() + c)];
        }
    }
    return m;
}

Eigen::VectorXd vector_from(const Tensor& t, const std::string& name)
{
    if (t.rank() != 1) {
        bad_content("record '" + name + "' must be rank 1, got " + to_string(t.shape()));
    }
    return Eigen::Map<const Eigen::VectorXd>(t.data().data(), static_cast<Eigen::Index>(t.size()));
}

std::vector<std::size_t> indices_from(const Tensor& t, const std::string& name)
{
    std::vector<std::size_t> out(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double v = t[i];
        if (!(v >= 0.0) || v != std::floor(v)) {
            bad_content("record '" + name + "' holds a non-index value");
        }
        out[i] = static_cast<std::size_t>(v);
    }
    return out;
}

std::string sample_name(std::size_t i)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "sample/%06zu", i);
    return buf;
}

} // namespace

void DatasetSpec::validate() const
{
    require_spec(seed < (std::uint64_t{1} << 53), "seed must be below 2^53");
    require_spec(n_identities >= 2, "n_identities must be at least 2");
    require_spec(images_per_identity >= 1, "images_per_identity must be at least 1");
    require_spec(image_size >= 16 && std::has_single_bit(image_size), "image_size must be a power of two >= 16");
    require_spec(d_id >= 1 && d_exp >= 1 && d_tex >= 1, "basis dimensions must be positive");
    const std::size_t side = grid_side(n_vertices);
    require_spec(n_vertices >= 64 && side * side == n_vertices && side % 2 == 0,
                 "n_vertices must be an even perfect square >= 64");
    require_spec(3 * n_vertices > d_id + d_exp && n_vertices > d_tex, "basis dimensions exceed vertex count");
    require_spec(n_landmarks == 8, "n_landmarks must be 8");
    require_spec(yaw_max_deg > 0.0 && yaw_max_deg <= 90.0, "yaw_max_deg must lie in (0, 90]");
    require_spec(yaw_step_deg > 0.0 && std::fmod(yaw_max_deg, yaw_step_deg) == 0.0,
                 "yaw_step_deg must divide yaw_max_deg");
    require_spec(gain_min > 0.0 && gain_min <= gain_max, "gain range must satisfy 0 < gain_min <= gain_max");
    require_spec(holdout_period >= 2, "holdout_period must be at least 2");
}

std::vector<double> DatasetSpec::to_vector() const
{
    return {static_cast<double>(seed),        static_cast<double>(n_identities),
            static_cast<double>(images_per_identity), static_cast<double>(image_size),
            static_cast<double>(d_id),        static_cast<double>(d_exp),
            static_cast<double>(d_tex),       static_cast<double>(n_vertices),
            static_cast<double>(n_landmarks), yaw_max_deg,
            yaw_step_deg,                     gain_min,
            gain_max,                         static_cast<double>(holdout_period)};
}

DatasetSpec DatasetSpec::from_vector(const std::vector<double>& v)
{
    if (v.size() != 14) {
        bad_content("spec record must have 14 entries, got " + std::to_string(v.size()));
    }
    for (std::size_t i : {0, 1, 2, 3, 4, 5, 6, 7, 8, 13}) {
        if (!(v[i] >= 0.0) || v[i] != std::floor(v[i])) {
            bad_content("spec record entry " + std::to_string(i) + " must be a nonnegative integer");
        }
    }
    DatasetSpec s;
    s.seed = static_cast<std::uint64_t>(v[0]);
    s.n_identities = static_cast<std::size_t>(v[1]);
    s.images_per_identity = static_cast<std::size_t>(v[2]);
    s.image_size = static_cast<std::size_t>(v[3]);
    s.d_id = static_cast<std::size_t>(v[4]);
    s.d_exp = static_cast<std::size_t>(v[5]);
    s.d_tex = static_cast<std::size_t>(v[6]);
    s.n_vertices = static_cast<std::size_t>(v[7]);
    s.n_landmarks = static_cast<std::size_t>(v[8]);
    s.yaw_max_deg = v[9];
    s.yaw_step_deg = v[10];
    s.gain_min = v[11];
    s.gain_max = v[12];
    s.holdout_period = static_cast<std::size_t>(v[13]);
    return s;
}

std::vector<std::size_t> Dataset::indices(bool held_out) const
{
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].held_out == held_out) {
            out.push_back(i);
        }
    }
    return out;
}

MorphableModel make_model(const DatasetSpec& spec)
{
    spec.validate();
    const std::size_t side = grid_side(spec.n_vertices);
    const std::size_t n = spec.n_vertices;
    MorphableModel model;

    model.mirror.resize(n);
    for (std::size_t j = 0; j < side; ++j) {
        for (std::size_t i = 0; i < side; ++i) {
            model.mirror[j * side + i] = j * side + (side - 1 - i);
        }
    }

    Rng geo(mix_seed(spec.seed, kGeometryStream));
    const double nose_amp = 0.35 * geo.uniform(0.9, 1.1);
    const double brow_amp = 0.06 * geo.uniform(0.9, 1.1);
    const double chin_amp = 0.08 * geo.uniform(0.9, 1.1);

    // Longitudes are computed for one half and mirrored so the head is exactly symmetric.
    std::vector<double> theta(side);
    const double theta_step = 170.0 * kDeg / static_cast<double>(side);
    for (std::size_t i = 0; i < side / 2; ++i) {
        theta[i] = -85.0 * kDeg + (static_cast<double>(i) + 0.5) * theta_step;
        theta[side - 1 - i] = -theta[i];
    }
    const double phi_step = 130.0 * kDeg / static_cast<double>(side);

    model.mean_shape.resize(static_cast<Eigen::Index>(3 * n));
    model.mean_texture.resize(static_cast<Eigen::Index>(n));
    for (std::size_t j = 0; j < side; ++j) {
        const double phi = -65.0 * kDeg + (static_cast<double>(j) + 0.5) * phi_step;
        for (std::size_t i = 0; i < side; ++i) {
            const double th = theta[i];
            const std::size_t v = j * side + i;
            const double bump = nose_amp * gauss2(th, 0.16, phi - 0.05, 0.18) +
                                brow_amp * gauss2(th, 0.45, phi + 0.32, 0.06) +
                                chin_amp * gauss2(th, 0.22, phi - 0.95, 0.12);
            const double x = std::sin(th) * std::cos(phi);
            const double y = 1.2 * std::sin(phi);
            const double z = std::cos(th) * std::cos(phi) + bump;
            model.mean_shape[static_cast<Eigen::Index>(3 * v)] = x;
            model.mean_shape[static_cast<Eigen::Index>(3 * v + 1)] = y;
            model.mean_shape[static_cast<Eigen::Index>(3 * v + 2)] = z;

            const double ax = std::abs(x);
            double t = 0.7;
            t -= 0.45 * gauss2(ax - 0.32, 0.09, y + 0.24, 0.06);
            t -= 0.30 * gauss2(ax - 0.32, 0.13, y + 0.45, 0.04);
            t -= 0.35 * gauss2(ax, 0.2, y - 0.5, 0.05);
            t -= 0.20 * gauss2(ax - 0.07, 0.04, y - 0.22, 0.03);
            t -= 0.25 * std::pow(std::abs(th) / (85.0 * kDeg), 4.0);
            model.mean_texture[static_cast<Eigen::Index>(v)] = std::clamp(t, 0.05, 0.95);
        }
    }

    model.basis_id = smooth_basis(side, 3, spec.d_id, model.mirror, true, mix_seed(spec.seed, kIdBasisStream));
    model.basis_exp = smooth_basis(side, 3, spec.d_exp, model.mirror, false, mix_seed(spec.seed, kExpBasisStream));
    model.basis_tex = smooth_basis(side, 1, spec.d_tex, model.mirror, true, mix_seed(spec.seed, kTexBasisStream));

    // Landmarks: outer/inner eye corners, nose tip, mouth corners, chin.
    const Eigen::VectorXd& s = model.mean_shape;
    const std::size_t eye_outer = nearest_vertex(s, n, 0.48, -0.24, true);
    const std::size_t eye_inner = nearest_vertex(s, n, 0.16, -0.24, true);
    const std::size_t mouth = nearest_vertex(s, n, 0.25, 0.5, true);
    std::size_t nose = 0;
    for (std::size_t v = 1; v < n; ++v) {
        if (s[static_cast<Eigen::Index>(3 * v + 2)] > s[static_cast<Eigen::Index>(3 * nose + 2)]) {
            nose = v;
        }
    }
    const std::size_t chin = nearest_vertex(s, n, 0.0, 0.95, false);
    model.landmark_indices = {model.mirror[eye_outer], model.mirror[eye_inner], eye_inner, eye_outer, nose,
                              model.mirror[mouth],     mouth,                    chin};

    // Pose statistics are measured on the sampling distribution; the alphas are zero-mean by construction.
    const std::size_t p = kPoseEntries + spec.d_id + spec.d_exp + spec.d_tex;
    model.coeff_mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    model.coeff_std = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
    Eigen::Matrix<double, kPoseEntries, 1> sum = Eigen::Matrix<double, kPoseEntries, 1>::Zero();
    Eigen::Matrix<double, kPoseEntries, 1> sum_sq = Eigen::Matrix<double, kPoseEntries, 1>::Zero();
    Rng stats(mix_seed(spec.seed, kPoseStatsStream));
    for (std::size_t d = 0; d < kPoseStatDraws; ++d) {
        const ViewParams view = draw_view(spec, stats.next());
        const auto m = pose_matrix(view.pose);
        for (std::size_t e = 0; e < kPoseEntries; ++e) {
            sum[static_cast<Eigen::Index>(e)] += m[e];
            sum_sq[static_cast<Eigen::Index>(e)] += m[e] * m[e];
        }
    }
    const double draws = static_cast<double>(kPoseStatDraws);
    for (std::size_t e = 0; e < kPoseEntries; ++e) {
        const auto i = static_cast<Eigen::Index>(e);
        const double mean = sum[i] / draws;
        const double var = std::max(sum_sq[i] / draws - mean * mean, 0.0);
        model.coeff_mean[i] = mean;
        model.coeff_std[i] = std::max(std::sqrt(var), 1e-6);
    }
    std::size_t offset = kPoseEntries;
    for (std::size_t k = 0; k < spec.d_id; ++k) {
        model.coeff_std[static_cast<Eigen::Index>(offset++)] = sigma_id(k);
    }
    for (std::size_t k = 0; k < spec.d_exp; ++k) {
        model.coeff_std[static_cast<Eigen::Index>(offset++)] = sigma_exp(k);
    }
    for (std::size_t k = 0; k < spec.d_tex; ++k) {
        model.coeff_std[static_cast<Eigen::Index>(offset++)] = sigma_tex(k);
    }
    model.validate();
    return model;
}

std::uint64_t identity_seed(const DatasetSpec& spec, std::size_t identity)
{
    return mix_seed(mix_seed(spec.seed, kIdentityStream), identity);
}

std::uint64_t pose_seed(std::uint64_t identity_seed, std::size_t image_index)
{
    return mix_seed(identity_seed, image_index + 1);
}

IdentityParams draw_identity(const DatasetSpec& spec, std::uint64_t identity_seed)
{
    Rng rng(identity_seed);
    IdentityParams id;
    id.alpha_id.resize(static_cast<Eigen::Index>(spec.d_id));
    id.alpha_tex.resize(static_cast<Eigen::Index>(spec.d_tex));
    for (std::size_t k = 0; k < spec.d_id; ++k) {
        id.alpha_id[static_cast<Eigen::Index>(k)] = sigma_id(k) * rng.normal();
    }
    for (std::size_t k = 0; k < spec.d_tex; ++k) {
        id.alpha_tex[static_cast<Eigen::Index>(k)] = sigma_tex(k) * rng.normal();
    }
    return id;
}

ViewParams draw_view(const DatasetSpec& spec, std::uint64_t pose_seed)
{
    Rng rng(pose_seed);
    ViewParams view;
    const auto steps = static_cast<std::size_t>(std::llround(spec.yaw_max_deg / spec.yaw_step_deg));
    view.yaw_deg = -spec.yaw_max_deg + spec.yaw_step_deg * static_cast<double>(rng.below(2 * steps + 1));
    view.pose.yaw = view.yaw_deg * kDeg;
    view.pose.pitch = rng.uniform(-10.0, 10.0) * kDeg;
    view.pose.roll = rng.uniform(-5.0, 5.0) * kDeg;
    view.pose.scale = spec.base_scale() * rng.uniform(0.95, 1.05);
    view.pose.tu = spec.center() + rng.uniform(-1.0, 1.0);
    view.pose.tw = spec.center() + rng.uniform(-1.0, 1.0);
    view.gain = rng.uniform(spec.gain_min, spec.gain_max);
    view.alpha_exp.resize(static_cast<Eigen::Index>(spec.d_exp));
    for (std::size_t k = 0; k < spec.d_exp; ++k) {
        view.alpha_exp[static_cast<Eigen::Index>(k)] = sigma_exp(k) * rng.normal();
    }
    return view;
}

ViewParams canonical_view(const DatasetSpec& spec, const Eigen::VectorXd& alpha_exp)
{
    ViewParams view;
    view.pose.scale = spec.base_scale();
    view.pose.tu = spec.center();
    view.pose.tw = spec.center();
    view.alpha_exp = alpha_exp;
    return view;
}

Coeffs view_coeffs(const IdentityParams& identity, const ViewParams& view)
{
    Coeffs c;
    c.m = pose_matrix(view.pose);
    c.alpha_id = identity.alpha_id;
    c.alpha_exp = view.alpha_exp;
    c.alpha_tex = identity.alpha_tex;
    return c;
}

Tensor render(const MorphableModel& model, const Coeffs& c, double gain, std::size_t image_size)
{
    const Eigen::VectorXd shape = synthesize_shape(model, c);
    const Eigen::VectorXd texture = synthesize_texture(model, c);
    const Eigen::VectorXd uv = project(c.m, shape);
    const Eigen::Vector3d depth_axis =
        Eigen::Vector3d(c.m[0], c.m[1], c.m[2]).cross(Eigen::Vector3d(c.m[4], c.m[5], c.m[6]));

    const auto size = static_cast<long>(image_size);
    Tensor image({image_size, image_size});
    std::vector<double> zbuf(image_size * image_size, -std::numeric_limits<double>::infinity());
    const auto n = static_cast<Eigen::Index>(model.n_vertices());
    for (Eigen::Index v = 0; v < n; ++v) {
        const double depth = depth_axis.dot(shape.segment<3>(3 * v));
        const double value = std::clamp(gain * texture[v], 0.0, 1.0);
        const auto u0 = static_cast<long>(std::floor(uv[2 * v]));
        const auto w0 = static_cast<long>(std::floor(uv[2 * v + 1]));
        for (long py = w0; py <= w0 + 1; ++py) {
            for (long px = u0; px <= u0 + 1; ++px) {
                if (px < 0 || px >= size || py < 0 || py >= size) {
                    continue;
                }
                const auto idx = static_cast<std::size_t>(py * size + px);
                if (depth > zbuf[idx]) {
                    zbuf[idx] = depth;
                    image[idx] = value;
                }
            }
        }
    }
    return image;
}

Sample make_sample(const MorphableModel& model, const DatasetSpec& spec, const IdentityParams& identity,
                   const ViewParams& view, std::size_t label)
{
    Sample s;
    s.p_g = view_coeffs(identity, view);
    s.x = render(model, s.p_g, view.gain, spec.image_size);
    s.x_g = render(model, view_coeffs(identity, canonical_view(spec, view.alpha_exp)), 1.0, spec.image_size);
    s.y = label;
    s.yaw_deg = view.yaw_deg;
    s.gain = view.gain;
    s.landmarks = landmarks_2d(model, s.p_g);
    return s;
}

Sample sample_pair(const MorphableModel& model, const DatasetSpec& spec, std::uint64_t identity_seed,
                   std::uint64_t pose_seed, std::size_t label)
{
    return make_sample(model, spec, draw_identity(spec, identity_seed), draw_view(spec, pose_seed), label);
}

Dataset generate_dataset(const DatasetSpec& spec)
{
    Dataset ds;
    ds.spec = spec;
    ds.model = make_model(spec);
    ds.samples.reserve(spec.n_identities * spec.images_per_identity);
    for (std::size_t id = 0; id < spec.n_identities; ++id) {
        const std::uint64_t ids = identity_seed(spec, id);
        const IdentityParams identity = draw_identity(spec, ids);
        for (std::size_t i = 0; i < spec.images_per_identity; ++i) {
            Sample s = make_sample(ds.model, spec, identity, draw_view(spec, pose_seed(ids, i)), id);
            s.held_out = spec.is_held_out(i);
            ds.samples.push_back(std::move(s));
        }
    }
    return ds;
}

std::vector<Record> model_records(const MorphableModel& model)
{
    return {
        {"model/mean_shape", flatten_vector(model.mean_shape)},
        {"model/mean_texture", flatten_vector(model.mean_texture)},
        {"model/basis_id", flatten_matrix(model.basis_id)},
        {"model/basis_exp", flatten_matrix(model.basis_exp)},
        {"model/basis_tex", flatten_matrix(model.basis_tex)},
        {"model/landmarks", flatten_indices(model.landmark_indices)},
        {"model/mirror", flatten_indices(model.mirror)},
        {"model/coeff_mean", flatten_vector(model.coeff_mean)},
        {"model/coeff_std", flatten_vector(model.coeff_std)},
    };
}

MorphableModel model_from_records(const std::vector<Record>& records)
{
    const auto get = [&records](const std::string& name) -> const Tensor& { return find_record(records, name); };
    MorphableModel model;
    model.mean_shape = vector_from(get("model/mean_shape"), "model/mean_shape");
    model.mean_texture = vector_from(get("model/mean_texture"), "model/mean_texture");
    model.basis_id = matrix_from(get("model/basis_id"), "model/basis_id");
    model.basis_exp = matrix_from(get("model/basis_exp"), "model/basis_exp");
    model.basis_tex = matrix_from(get("model/basis_tex"), "model/basis_tex");
    model.landmark_indices = indices_from(get("model/landmarks"), "model/landmarks");
    model.mirror = indices_from(get("model/mirror"), "model/mirror");
    model.coeff_mean = vector_from(get("model/coeff_mean"), "model/coeff_mean");
    model.coeff_std = vector_from(get("model/coeff_std"), "model/coeff_std");
    try {
        model.validate();
    } catch (const Error& e) {
        bad_content(e.what());
    }
    return model;
}

std::vector<Record> dataset_records(const Dataset& dataset)
{
    const DatasetSpec& spec = dataset.spec;
    const std::vector<double> sv = spec.to_vector();
    Tensor spec_t({sv.size()});
    std::copy(sv.begin(), sv.end(), spec_t.data().begin());

    std::vector<Record> records;
    records.push_back({"spec", std::move(spec_t)});
    records.push_back({"count", Tensor::scalar(static_cast<double>(dataset.samples.size()))});
    for (Record& r : model_records(dataset.model)) {
        records.push_back(std::move(r));
    }
    const std::size_t hw = spec.image_size * spec.image_size;
    for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
        const Sample& s = dataset.samples[i];
        const Eigen::VectorXd p = s.p_g.flatten();
        std::vector<double> row;
        row.reserve(4 + 2 * hw + static_cast<std::size_t>(p.size() + s.landmarks.size()));
        row.push_back(static_cast<double>(s.y));
        row.push_back(s.held_out ? 1.0 : 0.0);
        row.push_back(s.yaw_deg);
        row.push_back(s.gain);
        row.insert(row.end(), s.x.data().begin(), s.x.data().end());
        row.insert(row.end(), s.x_g.data().begin(), s.x_g.data().end());
        row.insert(row.end(), p.data(), p.data() + p.size());
        row.insert(row.end(), s.landmarks.data(), s.landmarks.data() + s.landmarks.size());
        Tensor t({row.size()});
        std::copy(row.begin(), row.end(), t.data().begin());
        records.push_back({sample_name(i), std::move(t)});
    }
    return records;
}

Dataset dataset_from_records(const std::vector<Record>& records)
{
    Dataset ds;
    const Tensor& spec_t = find_record(records, "spec");
    ds.spec = DatasetSpec::from_vector(spec_t.values());
    try {
        ds.spec.validate();
    } catch (const InvalidArgument& e) {
        bad_content(e.what());
    }
    ds.model = model_from_records(records);
    const DatasetSpec& spec = ds.spec;
    if (ds.model.d_id() != spec.d_id || ds.model.d_exp() != spec.d_exp || ds.model.d_tex() != spec.d_tex ||
        ds.model.n_vertices() != spec.n_vertices || ds.model.landmark_indices.size() != spec.n_landmarks) {
        bad_content("model records disagree with the spec record");
    }

    const Tensor& count_t = find_record(records, "count");
    if (count_t.size() != 1 || !(count_t[0] >= 0.0) || count_t[0] != std::floor(count_t[0])) {
        bad_content("count record must be a nonnegative integer scalar");
    }
    const auto count = static_cast<std::size_t>(count_t[0]);

    std::map<std::string, const Tensor*> by_name;
    for (const Record& r : records) {
        by_name[r.name] = &r.tensor;
    }
    const std::size_t hw = spec.image_size * spec.image_size;
    const std::size_t p = ds.model.coeff_size();
    const std::size_t l2 = 2 * spec.n_landmarks;
    const std::size_t expected = 4 + 2 * hw + p + l2;
    ds.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::string name = sample_name(i);
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw FormatError(FormatError::Kind::missing_record, "missing record '" + name + "'");
        }
        const Tensor& t = *it->second;
        if (t.rank() != 1 || t.size() != expected) {
            bad_content("record '" + name + "' has shape " + to_string(t.shape()) + ", expected [" +
                        std::to_string(expected) + "]");
        }
        const double* d = t.data().data();
        Sample s;
        if (!(d[0] >= 0.0) || d[0] != std::floor(d[0]) || d[0] >= static_cast<double>(spec.n_identities)) {
            bad_content("record '" + name + "' has an invalid identity label");
        }
        s.y = static_cast<std::size_t>(d[0]);
        s.held_out = d[1] != 0.0;
        s.yaw_deg = d[2];
        s.gain = d[3];
        s.x = Tensor({spec.image_size, spec.image_size}, std::vector<double>(d + 4, d + 4 + hw));
        s.x_g = Tensor({spec.image_size, spec.image_size}, std::vector<double>(d + 4 + hw, d + 4 + 2 * hw));
        const Eigen::VectorXd flat = Eigen::Map<const Eigen::VectorXd>(d + 4 + 2 * hw, static_cast<Eigen::Index>(p));
        s.p_g = Coeffs::unflatten(flat, spec.d_id, spec.d_exp, spec.d_tex);
        s.landmarks = Eigen::Map<const Eigen::VectorXd>(d + 4 + 2 * hw + p, static_cast<Eigen::Index>(l2));
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& path)
{
    write_container(path, dataset_records(dataset));
}

Dataset read_dataset(const std::filesystem::path& path)
{
    return dataset_from_records(read_container(path));
}

std::string encode_pgm(const Tensor& image)
{
    if (image.rank() != 2 || image.size() == 0) {
        throw ShapeError("pgm: expected a non-empty rank-2 image, got " + to_string(image.shape()));
    }
    std::string out = "P5\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) + "\n255\n";
    out.reserve(out.size() + image.size());
    for (double v : image.data()) {
        const double q = std::round(255.0 * std::clamp(v, 0.0, 1.0));
        out.push_back(static_cast<char>(static_cast<unsigned char>(q)));
    }
    return out;
}

void write_pgm(const std::filesystem::path& path, const Tensor& image)
{
    write_file_atomic(path, encode_pgm(image));
}

} // namespace ffgan
