#include "ffgan/morphable_model.hpp"

#include "ffgan/error.hpp"

#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace ffgan {

namespace {

void require(bool ok, const std::string& what)
{
    if (!ok) {
        throw ShapeError(what);
    }
}

void check_dims(const MorphableModel& model, const Coeffs& c)
{
    require(static_cast<std::size_t>(c.alpha_id.size()) == model.d_id() &&
                static_cast<std::size_t>(c.alpha_exp.size()) == model.d_exp() &&
                static_cast<std::size_t>(c.alpha_tex.size()) == model.d_tex(),
            "coeffs: dimensions (" + std::to_string(c.alpha_id.size()) + "," + std::to_string(c.alpha_exp.size()) +
                "," + std::to_string(c.alpha_tex.size()) + ") do not match model (" + std::to_string(model.d_id()) +
                "," + std::to_string(model.d_exp()) + "," + std::to_string(model.d_tex()) + ")");
}

long pixel_of(double coord)
{
    return static_cast<long>(std::floor(coord + 0.5));
}

} // namespace

void MorphableModel::validate() const
{
    const auto n = static_cast<Eigen::Index>(n_vertices());
    require(mean_shape.size() == 3 * n, "model: mean_shape must have 3N entries");
    require(basis_id.rows() == 3 * n && basis_exp.rows() == 3 * n, "model: shape bases must have 3N rows");
    require(basis_tex.rows() == n, "model: texture basis must have N rows");
    require(mirror.size() == n_vertices(), "model: mirror map must have N entries");
    require(static_cast<std::size_t>(coeff_mean.size()) == coeff_size() &&
                static_cast<std::size_t>(coeff_std.size()) == coeff_size(),
            "model: coefficient statistics must have " + std::to_string(coeff_size()) + " entries");
    for (std::size_t idx : landmark_indices) {
        require(idx < n_vertices(), "model: landmark index out of range");
    }
    for (Eigen::Index i = 0; i < coeff_std.size(); ++i) {
        if (!(coeff_std[i] > 0.0)) {
            throw InvalidArgument("model: coeff_std must be strictly positive (dimension " + std::to_string(i) + ")");
        }
    }
}

Eigen::VectorXd Coeffs::flatten() const
{
    Eigen::VectorXd flat(static_cast<Eigen::Index>(size()));
    for (std::size_t i = 0; i < kPoseEntries; ++i) {
        flat[static_cast<Eigen::Index>(i)] = m[i];
    }
    flat.segment(kPoseEntries, alpha_id.size()) = alpha_id;
    flat.segment(kPoseEntries + alpha_id.size(), alpha_exp.size()) = alpha_exp;
    flat.tail(alpha_tex.size()) = alpha_tex;
    return flat;
}

Coeffs Coeffs::unflatten(const MorphableModel& model, const Eigen::VectorXd& flat)
{
    return unflatten(flat, model.d_id(), model.d_exp(), model.d_tex());
}

Coeffs Coeffs::unflatten(const Eigen::VectorXd& flat, std::size_t d_id, std::size_t d_exp, std::size_t d_tex)
{
    const std::size_t expected = kPoseEntries + d_id + d_exp + d_tex;
    require(static_cast<std::size_t>(flat.size()) == expected,
            "coeffs: flat length " + std::to_string(flat.size()) + " != " + std::to_string(expected));
    Coeffs c;
    for (std::size_t i = 0; i < kPoseEntries; ++i) {
        c.m[i] = flat[static_cast<Eigen::Index>(i)];
    }
    c.alpha_id = flat.segment(kPoseEntries, static_cast<Eigen::Index>(d_id));
    c.alpha_exp = flat.segment(static_cast<Eigen::Index>(kPoseEntries + d_id), static_cast<Eigen::Index>(d_exp));
    c.alpha_tex = flat.tail(static_cast<Eigen::Index>(d_tex));
    return c;
}

Coeffs Coeffs::zeros(const MorphableModel& model)
{
    return unflatten(model, Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.coeff_size())));
}

std::array<double, 9> rotation_matrix(double pitch, double yaw, double roll)
{
    const double cp = std::cos(pitch), sp = std::sin(pitch);
    const double cy = std::cos(yaw), sy = std::sin(yaw);
    const double cr = std::cos(roll), sr = std::sin(roll);
    // Rx(pitch) * Ry(yaw)
    const std::array<double, 9> xy = {cy, 0.0, sy, sp * sy, cp, -sp * cy, -cp * sy, sp, cp * cy};
    std::array<double, 9> r{};
    for (int j = 0; j < 3; ++j) {
        r[0 + j] = cr * xy[0 + j] - sr * xy[3 + j];
        r[3 + j] = sr * xy[0 + j] + cr * xy[3 + j];
        r[6 + j] = xy[6 + j];
    }
    return r;
}

std::array<double, kPoseEntries> pose_matrix(const Pose& pose)
{
    const auto r = rotation_matrix(pose.pitch, pose.yaw, pose.roll);
    return {pose.scale * r[0], pose.scale * r[1], pose.scale * r[2], pose.tu,
            pose.scale * r[3], pose.scale * r[4], pose.scale * r[5], pose.tw};
}

Pose recover_pose(const std::array<double, kPoseEntries>& m)
{
    const Eigen::Vector3d r0(m[0], m[1], m[2]);
    const Eigen::Vector3d r1(m[4], m[5], m[6]);
    const double n0 = r0.norm(), n1 = r1.norm();
    Pose pose;
    pose.scale = 0.5 * (n0 + n1);
    pose.tu = m[3];
    pose.tw = m[7];
    if (n0 == 0.0 || n1 == 0.0) {
        return pose;
    }
    const Eigen::Vector3d a = r0 / n0, b = r1 / n1;
    const Eigen::Vector3d c = a.cross(b);
    pose.pitch = std::asin(std::clamp(c[1], -1.0, 1.0));
    pose.yaw = std::atan2(-c[0], c[2]);
    pose.roll = std::atan2(-a[1], b[1]);
    return pose;
}

Eigen::VectorXd synthesize_shape(const MorphableModel& model, const Coeffs& c)
{
    check_dims(model, c);
    return model.mean_shape + model.basis_id * c.alpha_id + model.basis_exp * c.alpha_exp;
}

Eigen::VectorXd synthesize_texture(const MorphableModel& model, const Coeffs& c)
{
    check_dims(model, c);
    Eigen::VectorXd t = model.mean_texture + model.basis_tex * c.alpha_tex;
    return t.cwiseMax(0.0).cwiseMin(1.0);
}

Eigen::VectorXd project(const std::array<double, kPoseEntries>& m, const Eigen::VectorXd& shape)
{
    require(shape.size() % 3 == 0, "project: shape length must be a multiple of 3");
    const Eigen::Index n = shape.size() / 3;
    Eigen::VectorXd out(2 * n);
    for (Eigen::Index v = 0; v < n; ++v) {
        const double x = shape[3 * v], y = shape[3 * v + 1], z = shape[3 * v + 2];
        out[2 * v] = m[0] * x + m[1] * y + m[2] * z + m[3];
        out[2 * v + 1] = m[4] * x + m[5] * y + m[6] * z + m[7];
    }
    return out;
}

Eigen::VectorXd project(const Coeffs& c, const Eigen::VectorXd& shape)
{
    return project(c.m, shape);
}

std::size_t VisibilityMask::area() const
{
    return static_cast<std::size_t>(std::count(grid.begin(), grid.end(), std::uint8_t{1}));
}

VisibilityMask visibility_mask(const MorphableModel& model, const Coeffs& c, std::size_t height, std::size_t width)
{
    const Pose pose = recover_pose(c.m);
    if (!(pose.scale > 0.0)) {
        throw InvalidArgument("visibility_mask: degenerate projection scale " + std::to_string(pose.scale));
    }
    const Eigen::VectorXd shape = synthesize_shape(model, c);
    const Eigen::VectorXd uv = project(c.m, shape);
    // Depth axis: third row of the rotation, up to scale.
    const Eigen::Vector3d depth_axis =
        Eigen::Vector3d(c.m[0], c.m[1], c.m[2]).cross(Eigen::Vector3d(c.m[4], c.m[5], c.m[6]));

    const auto n = static_cast<Eigen::Index>(model.n_vertices());
    const auto h = static_cast<long>(height), w = static_cast<long>(width);
    std::vector<double> zbuf(height * width, -std::numeric_limits<double>::infinity());
    std::vector<long> owner(height * width, -1);
    std::vector<long> pixel(static_cast<std::size_t>(n), -1);
    for (Eigen::Index v = 0; v < n; ++v) {
        const long px = pixel_of(uv[2 * v]), py = pixel_of(uv[2 * v + 1]);
        if (px < 0 || px >= w || py < 0 || py >= h) {
            continue;
        }
        const long idx = py * w + px;
        pixel[static_cast<std::size_t>(v)] = idx;
        const double depth = depth_axis.dot(shape.segment<3>(3 * v));
        if (depth > zbuf[static_cast<std::size_t>(idx)]) {
            zbuf[static_cast<std::size_t>(idx)] = depth;
            owner[static_cast<std::size_t>(idx)] = v;
        }
    }

    Pose frontal = pose;
    frontal.pitch = frontal.yaw = frontal.roll = 0.0;
    const Eigen::VectorXd frontal_uv = project(pose_matrix(frontal), shape);

    VisibilityMask mask;
    mask.height = height;
    mask.width = width;
    mask.grid.assign(height * width, 0);
    mask.pose_source = c.m;
    for (Eigen::Index v = 0; v < n; ++v) {
        const long idx = pixel[static_cast<std::size_t>(v)];
        if (idx < 0 || owner[static_cast<std::size_t>(idx)] != v) {
            continue;
        }
        const long fx = pixel_of(frontal_uv[2 * v]), fy = pixel_of(frontal_uv[2 * v + 1]);
        for (long dy = -1; dy <= 1; ++dy) {
            for (long dx = -1; dx <= 1; ++dx) {
                const long x = fx + dx, y = fy + dy;
                if (x >= 0 && x < w && y >= 0 && y < h) {
                    mask.grid[static_cast<std::size_t>(y * w + x)] = 1;
                }
            }
        }
    }
    return mask;
}

VisibilityMask flip_mask(const VisibilityMask& mask)
{
    VisibilityMask out = mask;
    for (std::size_t y = 0; y < mask.height; ++y) {
        for (std::size_t x = 0; x < mask.width; ++x) {
            out.grid[y * mask.width + x] = mask.grid[y * mask.width + (mask.width - 1 - x)];
        }
    }
    return out;
}

Coeffs flip_coeffs(const Coeffs& c, std::size_t width)
{
    Coeffs out = c;
    out.m[1] = -c.m[1];
    out.m[2] = -c.m[2];
    out.m[3] = static_cast<double>(width) - 1.0 - c.m[3];
    out.m[4] = -c.m[4];
    return out;
}

Eigen::VectorXd normalize_coeffs(const MorphableModel& model, const Coeffs& c)
{
    check_dims(model, c);
    return (c.flatten() - model.coeff_mean).cwiseQuotient(model.coeff_std);
}

Coeffs denormalize_coeffs(const MorphableModel& model, const Eigen::VectorXd& normalized)
{
    require(static_cast<std::size_t>(normalized.size()) == model.coeff_size(),
            "denormalize: length " + std::to_string(normalized.size()) + " != " +
                std::to_string(model.coeff_size()));
    return Coeffs::unflatten(model, normalized.cwiseProduct(model.coeff_std) + model.coeff_mean);
}

double param_distance_loss(const Eigen::VectorXd& p, const Eigen::VectorXd& p_g, const Eigen::VectorXd& weights)
{
    require(p.size() == p_g.size() && p.size() == weights.size(),
            "param_distance_loss: lengths " + std::to_string(p.size()) + ", " + std::to_string(p_g.size()) + ", " +
                std::to_string(weights.size()) + " differ");
    if ((weights.array() < 0.0).any()) {
        throw InvalidArgument("param_distance_loss: weights must be nonnegative");
    }
    const Eigen::VectorXd d = p - p_g;
    return (d.array().square() * weights.array()).sum();
}

Eigen::VectorXd importance_weights(const MorphableModel& model, double pose_weight)
{
    Eigen::VectorXd w = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(model.coeff_size()));
    w.head(kPoseEntries).setConstant(pose_weight);
    return w;
}

double bbox_diagonal(const Eigen::VectorXd& points)
{
    require(points.size() >= 2 && points.size() % 2 == 0, "bbox_diagonal: need interleaved 2D points");
    const Eigen::Index n = points.size() / 2;
    double u0 = points[0], u1 = points[0], w0 = points[1], w1 = points[1];
    for (Eigen::Index i = 1; i < n; ++i) {
        u0 = std::min(u0, points[2 * i]);
        u1 = std::max(u1, points[2 * i]);
        w0 = std::min(w0, points[2 * i + 1]);
        w1 = std::max(w1, points[2 * i + 1]);
    }
    return std::hypot(u1 - u0, w1 - w0);
}

double landmark_nme(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt, double bbox_diag)
{
    require(pred.size() == gt.size() && pred.size() >= 2 && pred.size() % 2 == 0,
            "landmark_nme: need matching interleaved point sets");
    if (!(bbox_diag > 0.0)) {
        throw InvalidArgument("landmark_nme: bbox_diag must be positive");
    }
    const Eigen::Index n = pred.size() / 2;
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
        total += std::hypot(pred[2 * i] - gt[2 * i], pred[2 * i + 1] - gt[2 * i + 1]);
    }
    return 100.0 * total / static_cast<double>(n) / bbox_diag;
}

Eigen::VectorXd landmarks_2d(const MorphableModel& model, const Coeffs& c)
{
    const Eigen::VectorXd uv = project(c.m, synthesize_shape(model, c));
    Eigen::VectorXd out(static_cast<Eigen::Index>(2 * model.landmark_indices.size()));
    for (std::size_t i = 0; i < model.landmark_indices.size(); ++i) {
        const auto v = static_cast<Eigen::Index>(model.landmark_indices[i]);
        out[static_cast<Eigen::Index>(2 * i)] = uv[2 * v];
        out[static_cast<Eigen::Index>(2 * i + 1)] = uv[2 * v + 1];
    }
    return out;
}

} // namespace ffgan
