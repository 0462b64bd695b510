#pragma once

#include "ffgan/tensor.hpp"

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <vector>

namespace ffgan {

/// Number of entries of the flattened 2x4 weak-perspective matrix.
inline constexpr std::size_t kPoseEntries = 8;

/// PCA face model: shape S = mean_shape + A_id a_id + A_exp a_exp and
/// texture T = mean_texture + A_tex a_tex. Shapes are interleaved (x,y,z)
/// per vertex with x to the image right, y to the image bottom and z toward
/// the viewer.
struct MorphableModel {
    Eigen::VectorXd mean_shape;   // 3N
    Eigen::VectorXd mean_texture; // N, albedo in [0,1]
    Eigen::MatrixXd basis_id;     // 3N x d_id
    Eigen::MatrixXd basis_exp;    // 3N x d_exp
    Eigen::MatrixXd basis_tex;    // N x d_tex
    std::vector<std::size_t> landmark_indices;
    /// mirror[v] is the vertex reflected through the x = 0 plane.
    std::vector<std::size_t> mirror;
    /// Per-dimension statistics of the flattened coefficient vector [m | a_id | a_exp | a_tex].
    Eigen::VectorXd coeff_mean;
    Eigen::VectorXd coeff_std;

    std::size_t n_vertices() const { return static_cast<std::size_t>(mean_texture.size()); }
    std::size_t d_id() const { return static_cast<std::size_t>(basis_id.cols()); }
    std::size_t d_exp() const { return static_cast<std::size_t>(basis_exp.cols()); }
    std::size_t d_tex() const { return static_cast<std::size_t>(basis_tex.cols()); }
    std::size_t coeff_size() const { return kPoseEntries + d_id() + d_exp() + d_tex(); }

    /// Throws ShapeError/InvalidArgument when the parts are inconsistent.
    void validate() const;
};

/// Full parameter set p = {m, a_id, a_exp, a_tex}. m is row-major 2x4.
struct Coeffs {
    std::array<double, kPoseEntries> m{};
    Eigen::VectorXd alpha_id;
    Eigen::VectorXd alpha_exp;
    Eigen::VectorXd alpha_tex;

    std::size_t size() const
    {
        return kPoseEntries + static_cast<std::size_t>(alpha_id.size() + alpha_exp.size() + alpha_tex.size());
    }

    Eigen::VectorXd flatten() const;
    /// Splits a flat vector using the model's dimensions.
    static Coeffs unflatten(const MorphableModel& model, const Eigen::VectorXd& flat);
    static Coeffs unflatten(const Eigen::VectorXd& flat, std::size_t d_id, std::size_t d_exp, std::size_t d_tex);
    static Coeffs zeros(const MorphableModel& model);
};

/// Head pose with weak-perspective scale and pixel translation. Angles in radians.
struct Pose {
    double pitch = 0.0;
    double yaw = 0.0;
    double roll = 0.0;
    double scale = 1.0;
    double tu = 0.0;
    double tw = 0.0;
};

/// R = Rz(roll) * Rx(pitch) * Ry(yaw), row-major.
std::array<double, 9> rotation_matrix(double pitch, double yaw, double roll);
/// m = scale * [first two rows of R | t / scale].
std::array<double, kPoseEntries> pose_matrix(const Pose& pose);
/// Angles, scale and translation of a (near) scaled-rotation m; for reporting.
Pose recover_pose(const std::array<double, kPoseEntries>& m);

Eigen::VectorXd synthesize_shape(const MorphableModel& model, const Coeffs& c);
/// Clamped to [0,1].
Eigen::VectorXd synthesize_texture(const MorphableModel& model, const Coeffs& c);

/// Weak-perspective projection of an interleaved 3N shape; returns interleaved (u,w) pixel coordinates.
Eigen::VectorXd project(const Coeffs& c, const Eigen::VectorXd& shape);
Eigen::VectorXd project(const std::array<double, kPoseEntries>& m, const Eigen::VectorXd& shape);

/// Binary H x W mask of the frontalized face region that was visible under the original pose.
struct VisibilityMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> grid; // row-major, values in {0,1}
    std::array<double, kPoseEntries> pose_source{};

    std::size_t area() const;
    bool operator==(const VisibilityMask& other) const { return height == other.height && width == other.width && grid == other.grid; }
};

VisibilityMask visibility_mask(const MorphableModel& model, const Coeffs& c, std::size_t height, std::size_t width);
VisibilityMask flip_mask(const VisibilityMask& mask);

/// Coefficients of the horizontally mirrored image: yaw, roll and the
/// horizontal translation reflect about the image centre; alphas unchanged.
Coeffs flip_coeffs(const Coeffs& c, std::size_t width);

Eigen::VectorXd normalize_coeffs(const MorphableModel& model, const Coeffs& c);
Coeffs denormalize_coeffs(const MorphableModel& model, const Eigen::VectorXd& normalized);

/// (p - p_g)^T diag(weights) (p - p_g)
double param_distance_loss(const Eigen::VectorXd& p, const Eigen::VectorXd& p_g, const Eigen::VectorXd& weights);

/// Diagonal importance weights: `pose_weight` on the 8 matrix entries, 1 elsewhere.
Eigen::VectorXd importance_weights(const MorphableModel& model, double pose_weight = 5.0);

/// Mean landmark Euclidean error over bbox_diag, times 100. Points are interleaved (u,w).
double landmark_nme(const Eigen::VectorXd& pred, const Eigen::VectorXd& gt, double bbox_diag);
/// Diagonal of the tight box around interleaved 2D points.
double bbox_diagonal(const Eigen::VectorXd& points);
/// Projected landmark positions for a coefficient set.
Eigen::VectorXd landmarks_2d(const MorphableModel& model, const Coeffs& c);

} // namespace ffgan
