#pragma once

#include "ffgan/container.hpp"
#include "ffgan/morphable_model.hpp"
#include "ffgan/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ffgan {

struct DatasetSpec {
    std::uint64_t seed = 0;
    std::size_t n_identities = 20;
    std::size_t images_per_identity = 40;
    std::size_t image_size = 32;
    std::size_t d_id = 8;
    std::size_t d_exp = 4;
    std::size_t d_tex = 8;
    std::size_t n_vertices = 1024;
    std::size_t n_landmarks = 8;
    double yaw_max_deg = 90.0;
    double yaw_step_deg = 15.0;
    double gain_min = 0.6;
    double gain_max = 1.4;
    /// Image i of each identity is held out when i % holdout_period == holdout_period - 1.
    std::size_t holdout_period = 5;

    /// Throws InvalidArgument naming the offending field.
    void validate() const;
    /// Weak-perspective scale of the canonical frontal view, in pixels per model unit.
    double base_scale() const { return 0.34 * static_cast<double>(image_size); }
    double center() const { return 0.5 * (static_cast<double>(image_size) - 1.0); }
    bool is_held_out(std::size_t image_index) const { return image_index % holdout_period == holdout_period - 1; }

    std::vector<double> to_vector() const;
    static DatasetSpec from_vector(const std::vector<double>& values);
};

/// Pose, illumination and expression of one rendered view.
struct ViewParams {
    Pose pose;
    double gain = 1.0;
    double yaw_deg = 0.0;
    Eigen::VectorXd alpha_exp;
};

struct IdentityParams {
    Eigen::VectorXd alpha_id;
    Eigen::VectorXd alpha_tex;
};

struct Sample {
    Tensor x;   // [H,W]
    Tensor x_g; // [H,W], frontal, gain 1
    Coeffs p_g;
    std::size_t y = 0;
    bool held_out = false;
    double yaw_deg = 0.0;
    double gain = 1.0;
    /// Landmark pixel positions used at render time, interleaved (u,w).
    Eigen::VectorXd landmarks;
};

struct Dataset {
    DatasetSpec spec;
    MorphableModel model;
    std::vector<Sample> samples;

    std::vector<std::size_t> indices(bool held_out) const;
};

MorphableModel make_model(const DatasetSpec& spec);

std::uint64_t identity_seed(const DatasetSpec& spec, std::size_t identity);
std::uint64_t pose_seed(std::uint64_t identity_seed, std::size_t image_index);

IdentityParams draw_identity(const DatasetSpec& spec, std::uint64_t identity_seed);
ViewParams draw_view(const DatasetSpec& spec, std::uint64_t pose_seed);
/// Yaw = pitch = roll = 0 at the base scale and image centre, gain 1.
ViewParams canonical_view(const DatasetSpec& spec, const Eigen::VectorXd& alpha_exp);

Coeffs view_coeffs(const IdentityParams& identity, const ViewParams& view);

/// Point-splat render with a z-buffer: each vertex covers the 2x2 pixels at
/// floor(u), floor(u)+1 by floor(w), floor(w)+1; the nearest vertex wins.
/// Background is 0, foreground is clamp(gain * texture, 0, 1).
Tensor render(const MorphableModel& model, const Coeffs& c, double gain, std::size_t image_size);

Sample make_sample(const MorphableModel& model, const DatasetSpec& spec, const IdentityParams& identity,
                   const ViewParams& view, std::size_t label);
Sample sample_pair(const MorphableModel& model, const DatasetSpec& spec, std::uint64_t identity_seed,
                   std::uint64_t pose_seed, std::size_t label = 0);

Dataset generate_dataset(const DatasetSpec& spec);

std::vector<Record> model_records(const MorphableModel& model);
MorphableModel model_from_records(const std::vector<Record>& records);

std::vector<Record> dataset_records(const Dataset& dataset);
Dataset dataset_from_records(const std::vector<Record>& records);
void write_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Binary PGM (P5, maxval 255) of a rank-2 image in [0,1]; pixels quantized by round(255 v).
std::string encode_pgm(const Tensor& image);
void write_pgm(const std::filesystem::path& path, const Tensor& image);

} // namespace ffgan
