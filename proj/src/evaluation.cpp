#include "ffgan/evaluation.hpp"

#include "ffgan/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <tuple>

namespace ffgan {

namespace {

constexpr std::size_t kChunk = 64;

double row_distance(const Tensor& a, std::size_t i, const Tensor& b, std::size_t j)
{
    const std::size_t f = a.dim(1);
    double total = 0.0;
    for (std::size_t k = 0; k < f; ++k) {
        const double d = a[i * f + k] - b[j * f + k];
        total += d * d;
    }
    return std::sqrt(total);
}

Tensor rows(const Tensor& images, std::size_t begin, std::size_t end)
{
    Shape s = images.shape();
    const std::size_t stride = images.size() / s[0];
    s[0] = end - begin;
    return Tensor(s, std::vector<double>(images.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                         images.data().begin() + static_cast<std::ptrdiff_t>(end * stride)));
}

void append(Tensor& dst, std::size_t& offset, const Tensor& src)
{
    std::copy(src.data().begin(), src.data().end(), dst.data().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += src.size();
}

std::string format_double(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

Tensor tile(const Tensor& images, std::size_t b)
{
    const std::size_t h = images.dim(2), w = images.dim(3);
    return rows(images, b, b + 1).reshaped({h, w});
}

} // namespace

Tensor unit_rows(const Tensor& h)
{
    if (h.rank() != 2) {
        throw ShapeError("unit_rows: expected [N,F], got " + to_string(h.shape()));
    }
    Tensor out = h;
    const std::size_t n = h.dim(0), f = h.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::size_t k = 0; k < f; ++k) {
            sq += h[i * f + k] * h[i * f + k];
        }
        if (sq > 0.0) {
            const double norm = std::sqrt(sq);
            for (std::size_t k = 0; k < f; ++k) {
                out[i * f + k] = h[i * f + k] / norm;
            }
        }
    }
    return out;
}

std::string_view feature_mode_name(FeatureMode mode)
{
    switch (mode) {
    case FeatureMode::original: return "original";
    case FeatureMode::synthesized: return "syn";
    case FeatureMode::fused: return "fused";
    }
    return "unknown";
}

FeatureMode feature_mode_from_name(const std::string& name)
{
    if (name == "original") {
        return FeatureMode::original;
    }
    if (name == "syn" || name == "synthesized") {
        return FeatureMode::synthesized;
    }
    if (name == "fused") {
        return FeatureMode::fused;
    }
    throw InvalidArgument("unknown feature mode '" + name + "'");
}

std::size_t yaw_bucket(double yaw_deg)
{
    const double b = std::round(std::fabs(yaw_deg) / kYawBucketDeg);
    return std::min(static_cast<std::size_t>(b), kYawBuckets - 1);
}

FeatureSet compute_features(const TrainState& state, const TrainConfig& config, const Tensor& images)
{
    if (images.rank() != 4) {
        throw ShapeError("compute_features: expected [N,1,H,W] images, got " + to_string(images.shape()));
    }
    const std::size_t n = images.dim(0), p = state.r.arch.coeff_dim;
    const std::size_t f = state.c.arch.widths.back();
    FeatureSet out{Tensor({n, f}), Tensor({n, f}), {}};
    std::size_t off_h = 0, off_s = 0;
    for (std::size_t begin = 0; begin < n; begin += kChunk) {
        const std::size_t end = std::min(n, begin + kChunk);
        Graph g;
        const Var x = g.constant(rows(images, begin, end));
        const Var coeffs = config.ablation.drop_R ? g.constant(Tensor({end - begin, p}))
                                                  : forward_R(bind(g, state.r, false), x);
        const Var x_f = forward_G(bind(g, state.g, false), x, coeffs);
        const Bound cb = bind(g, state.c, false);
        append(out.h, off_h, unit_rows(forward_C(cb, x).h.value()));
        append(out.h_syn, off_s, unit_rows(forward_C(cb, x_f).h.value()));
        const Tensor probs = softmax_rows(forward_D(bind(g, state.d, false), x_f).value());
        for (std::size_t i = 0; i < end - begin; ++i) {
            out.p_real.push_back(probs[2 * i]);
        }
    }
    return out;
}

double fused_distance(const std::vector<double>& h1, const std::vector<double>& h2, const std::vector<double>& h1f,
                      const std::vector<double>& h2f, double p1, double p2)
{
    if (h1.size() != h2.size() || h1f.size() != h2f.size()) {
        throw ShapeError("fused_distance: feature lengths differ");
    }
    const auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
        double total = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            total += (a[i] - b[i]) * (a[i] - b[i]);
        }
        return std::sqrt(total);
    };
    const double w = std::min(p1, p2);
    return w == 0.0 ? dist(h1, h2) : dist(h1, h2) + w * dist(h1f, h2f);
}

double fused_distance(const TrainState& state, const Tensor& x1, const Tensor& p1, const Tensor& x2, const Tensor& p2)
{
    Graph g;
    const Bound gb = bind(g, state.g, false), cb = bind(g, state.c, false), db = bind(g, state.d, false);
    const auto side = [&](const Tensor& x, const Tensor& p) {
        const Var xv = g.constant(x);
        const Var xf = forward_G(gb, xv, g.constant(p));
        return std::tuple{unit_rows(forward_C(cb, xv).h.value()).values(), unit_rows(forward_C(cb, xf).h.value()).values(),
                          softmax_rows(forward_D(db, xf).value())[0]};
    };
    const auto [h1, h1f, r1] = side(x1, p1);
    const auto [h2, h2f, r2] = side(x2, p2);
    return fused_distance(h1, h2, h1f, h2f, r1, r2);
}

Tensor distance_matrix(const FeatureSet& probes, const FeatureSet& gallery, FeatureMode mode)
{
    const std::size_t np = probes.h.dim(0), ng = gallery.h.dim(0);
    Tensor out({np, ng});
    for (std::size_t i = 0; i < np; ++i) {
        for (std::size_t j = 0; j < ng; ++j) {
            double d = 0.0;
            switch (mode) {
            case FeatureMode::original: d = row_distance(probes.h, i, gallery.h, j); break;
            case FeatureMode::synthesized: d = row_distance(probes.h_syn, i, gallery.h_syn, j); break;
            case FeatureMode::fused: {
                const double w = std::min(probes.p_real[i], gallery.p_real[j]);
                d = row_distance(probes.h, i, gallery.h, j);
                if (w != 0.0) {
                    d += w * row_distance(probes.h_syn, i, gallery.h_syn, j);
                }
                break;
            }
            }
            out[i * ng + j] = d;
        }
    }
    return out;
}

Rank1Result rank1_from_distances(const Tensor& distances, const std::vector<std::size_t>& probe_labels,
                                 const std::vector<std::size_t>& gallery_labels,
                                 const std::vector<std::size_t>& probe_buckets)
{
    const std::size_t np = probe_labels.size(), ng = gallery_labels.size();
    if (distances.shape() != Shape{np, ng} || probe_buckets.size() != np || ng == 0) {
        throw ShapeError("rank1: distance matrix does not match the probe and gallery lists");
    }
    Rank1Result r;
    std::array<std::size_t, kYawBuckets> correct{};
    for (std::size_t i = 0; i < np; ++i) {
        if (probe_buckets[i] >= kYawBuckets) {
            throw InvalidArgument("rank1: yaw bucket out of range");
        }
        std::size_t best = 0;
        for (std::size_t j = 1; j < ng; ++j) {
            if (distances[i * ng + j] < distances[i * ng + best]) {
                best = j;
            }
        }
        ++r.count[probe_buckets[i]];
        correct[probe_buckets[i]] += gallery_labels[best] == probe_labels[i];
    }
    std::size_t used = 0;
    for (std::size_t b = 0; b < kYawBuckets; ++b) {
        if (r.count[b] > 0) {
            r.accuracy[b] = static_cast<double>(correct[b]) / static_cast<double>(r.count[b]);
            r.average += r.accuracy[b];
            ++used;
        }
    }
    r.average = used == 0 ? 0.0 : r.average / static_cast<double>(used);
    return r;
}

std::vector<std::size_t> gallery_indices(const Dataset& data)
{
    std::vector<std::size_t> first(data.spec.n_identities, data.samples.size());
    for (std::size_t i : data.indices(true)) {
        const std::size_t y = data.samples[i].y;
        if (y < first.size() && first[y] == data.samples.size()) {
            first[y] = i;
        }
    }
    for (std::size_t y = 0; y < first.size(); ++y) {
        if (first[y] == data.samples.size()) {
            throw InvalidArgument("gallery: identity " + std::to_string(y) + " has no held-out frontal image");
        }
    }
    return first;
}

namespace {

std::array<Rank1Result, 3> rank1_all_modes(const TrainState& state, const TrainConfig& config, const Dataset& data)
{
    const std::vector<std::size_t> gallery = gallery_indices(data);
    const std::vector<std::size_t> probes = data.indices(true);
    const FeatureSet gf = compute_features(state, config, stack_images(data, gallery, true));
    const FeatureSet pf = compute_features(state, config, stack_images(data, probes, false));
    std::vector<std::size_t> gl, pl, pb;
    for (std::size_t i : gallery) {
        gl.push_back(data.samples[i].y);
    }
    for (std::size_t i : probes) {
        pl.push_back(data.samples[i].y);
        pb.push_back(yaw_bucket(data.samples[i].yaw_deg));
    }
    std::array<Rank1Result, 3> out;
    for (FeatureMode m : {FeatureMode::original, FeatureMode::synthesized, FeatureMode::fused}) {
        out[static_cast<std::size_t>(m)] = rank1_from_distances(distance_matrix(pf, gf, m), pl, gl, pb);
    }
    return out;
}

} // namespace

Rank1Result rank1_identification(const TrainState& state, const TrainConfig& config, const Dataset& data,
                                 FeatureMode mode)
{
    return rank1_all_modes(state, config, data)[static_cast<std::size_t>(mode)];
}

std::uint64_t dataset_hash(const Dataset& data)
{
    const std::string bytes = encode_container(dataset_records(data));
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h = (h ^ c) * 0x100000001b3ULL;
    }
    return h;
}

std::vector<AblationRow> run_ablation(const TrainConfig& config, const Dataset& data, const NetworkParams& r,
                                      const NetworkParams& c, std::ostream* log, std::vector<TrainState>* trained)
{
    std::vector<AblationRow> table;
    for (const std::string& name : ablation_names()) {
        TrainConfig variant = config;
        variant.ablation = ablation_from_name(name);
        const TrainState s = train_joint(variant, data, r, c);
        AblationRow row{name, rank1_identification(s, variant, data, FeatureMode::synthesized).average,
                        dataset_hash(data), variant.seed};
        if (log) {
            *log << "ablation=" << row.name << " syn_avg=" << format_double(row.syn_average)
                 << " data_hash=" << row.data_hash << " seed=" << row.seed << '\n';
        }
        table.push_back(std::move(row));
        if (trained) {
            trained->push_back(s);
        }
    }
    return table;
}

Tensor grid_mosaic(const std::vector<std::array<Tensor, 4>>& rows)
{
    if (rows.empty()) {
        throw InvalidArgument("export_grid: no rows");
    }
    const Shape tile_shape = rows[0][0].shape();
    if (tile_shape.size() != 2) {
        throw ShapeError("export_grid: tiles must be [H,W]");
    }
    const std::size_t h = tile_shape[0], w = tile_shape[1];
    Tensor out({rows.size() * h, 4 * w});
    for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t col = 0; col < 4; ++col) {
            const Tensor& t = rows[r][col];
            if (t.shape() != tile_shape) {
                throw ShapeError("export_grid: tiles differ in shape");
            }
            for (std::size_t y = 0; y < h; ++y) {
                for (std::size_t x = 0; x < w; ++x) {
                    out[(r * h + y) * 4 * w + col * w + x] = t[y * w + x];
                }
            }
        }
    }
    return out;
}

std::vector<std::array<Tensor, 4>> grid_rows(const TrainState& state, const TrainConfig& config, const Dataset& data,
                                             const std::vector<std::size_t>& idx)
{
    const std::size_t size = data.spec.image_size;
    const Tensor x = stack_images(data, idx, false), x_g = stack_images(data, idx, true);
    const Tensor x_f = frontalize(state, config, data, idx);
    std::vector<Coeffs> pose;
    if (config.ablation.drop_R) {
        pose.assign(idx.size(), denormalize_coeffs(data.model, Eigen::VectorXd::Zero(
                                                                   static_cast<Eigen::Index>(data.model.coeff_size()))));
    } else {
        pose = predict_coeffs(state.r, data, idx);
    }
    std::vector<std::array<Tensor, 4>> out;
    for (std::size_t b = 0; b < idx.size(); ++b) {
        Tensor masked = tile(x_f, b);
        try {
            const VisibilityMask m = visibility_mask(data.model, pose[b], size, size);
            for (std::size_t i = 0; i < masked.size(); ++i) {
                masked[i] *= m.grid[i];
            }
        } catch (const InvalidArgument&) {
            masked = Tensor(masked.shape());
        }
        out.push_back({tile(x, b), tile(x_g, b), tile(x_f, b), std::move(masked)});
    }
    return out;
}

void export_grid(const std::vector<std::array<Tensor, 4>>& rows, const std::filesystem::path& path)
{
    write_pgm(path, grid_mosaic(rows));
}

std::string EvalReport::to_text() const
{
    std::string out = "nme=" + format_double(nme) + "\nheldout_l1=" + format_double(heldout_l1) + "\n";
    for (std::size_t m = 0; m < 3; ++m) {
        const std::string prefix = "rank1." + std::string(feature_mode_name(static_cast<FeatureMode>(m))) + ".";
        for (std::size_t b = 0; b < kYawBuckets; ++b) {
            if (rank1[m].count[b] > 0) {
                out += prefix + std::to_string(static_cast<int>(b * kYawBucketDeg)) + "=" +
                       format_double(rank1[m].accuracy[b]) + "\n";
            }
        }
        out += prefix + "avg=" + format_double(rank1[m].average) + "\n";
    }
    for (const AblationRow& row : ablation) {
        out += "ablation." + row.name + ".syn_avg=" + format_double(row.syn_average) + "\n";
    }
    for (std::size_t i = 0; i < grids.size(); ++i) {
        out += "grid." + std::to_string(i) + "=" + grids[i] + "\n";
    }
    return out;
}

EvalReport evaluate(const TrainState& state, const TrainConfig& config, const Dataset& data)
{
    EvalReport r;
    r.nme = config.ablation.drop_R ? mean_predictor_nme(data) : heldout_nme(state.r, data);
    r.heldout_l1 = heldout_l1(state, config, data);
    r.rank1 = rank1_all_modes(state, config, data);
    return r;
}

} // namespace ffgan
