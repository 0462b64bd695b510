#include "ffgan/error.hpp"
#include "ffgan/evaluation.hpp"
#include "ffgan/random.hpp"

#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

using namespace ffgan;

namespace {

DatasetSpec small_spec()
{
    DatasetSpec spec;
    spec.n_identities = 4;
    spec.images_per_identity = 10;
    spec.image_size = 16;
    spec.n_vertices = 256;
    return spec;
}

const Dataset& small_data()
{
    static const Dataset data = generate_dataset(small_spec());
    return data;
}

TrainConfig small_config()
{
    TrainConfig c;
    c.batch_size = 8;
    c.epochs = {2, 2, 1, 1, 1};
    return c;
}

struct Pretrained {
    NetworkParams r, c;
};

const Pretrained& small_pretrained()
{
    static const Pretrained p{pretrain_R(small_config(), small_data()).net, pretrain_C(small_config(), small_data()).net};
    return p;
}

const TrainState& small_state()
{
    static const TrainState s = train_joint(small_config(), small_data(), small_pretrained().r, small_pretrained().c);
    return s;
}

Tensor random_tensor(const Shape& shape, std::uint64_t seed)
{
    Rng rng(seed);
    Tensor t(shape);
    for (double& v : t.data()) {
        v = rng.normal();
    }
    return t;
}

FeatureSet random_features(std::size_t n, std::size_t f, std::uint64_t seed)
{
    Rng rng(seed);
    FeatureSet s{random_tensor({n, f}, seed), random_tensor({n, f}, seed + 1), {}};
    for (std::size_t i = 0; i < n; ++i) {
        s.p_real.push_back(rng.uniform());
    }
    return s;
}

Eigen::VectorXd unit(const Tensor& h)
{
    Eigen::VectorXd v(static_cast<Eigen::Index>(h.size()));
    for (std::size_t i = 0; i < h.size(); ++i) {
        v[static_cast<Eigen::Index>(i)] = h[i];
    }
    return v / v.norm();
}

std::filesystem::path temp_path(const std::string& name)
{
    return std::filesystem::temp_directory_path() / ("ffgan_evaluation_" + name);
}

} // namespace

TEST(YawBucketTest, RoundsToFifteenDegreeCentres)
{
    EXPECT_EQ(yaw_bucket(0.0), 0u);
    EXPECT_EQ(yaw_bucket(7.4), 0u);
    EXPECT_EQ(yaw_bucket(7.5), 1u);
    EXPECT_EQ(yaw_bucket(-45.0), 3u);
    EXPECT_EQ(yaw_bucket(90.0), 6u);
    EXPECT_EQ(yaw_bucket(-120.0), 6u);
}

TEST(FeatureModeTest, NamesRoundTrip)
{
    for (FeatureMode m : {FeatureMode::original, FeatureMode::synthesized, FeatureMode::fused}) {
        EXPECT_EQ(feature_mode_from_name(std::string(feature_mode_name(m))), m);
    }
    EXPECT_EQ(feature_mode_from_name("synthesized"), FeatureMode::synthesized);
    EXPECT_THROW(feature_mode_from_name("mean"), InvalidArgument);
}

TEST(UnitRowsTest, NormalizesRowsAndKeepsZeroRows)
{
    Tensor h({3, 2}, {3.0, 4.0, 0.0, 0.0, -1.0, 0.0});
    const Tensor u = unit_rows(h);
    EXPECT_EQ(u.values(), (std::vector<double>{0.6, 0.8, 0.0, 0.0, -1.0, 0.0}));
    EXPECT_THROW(unit_rows(Tensor({6})), ShapeError);
}

TEST(FusedDistanceTest, ZeroWeightIsExactlyTheOriginalDistance)
{
    const std::vector<double> h1 = {0.3, -1.2, 2.5}, h2 = {1.1, 0.4, -0.7};
    const std::vector<double> h1f = {5.0, 5.0, 5.0}, h2f = {-5.0, 0.0, 1.0};
    const double original = fused_distance(h1, h2, h1f, h1f, 0.0, 0.0);
    EXPECT_EQ(fused_distance(h1, h2, h1f, h2f, 0.0, 0.9), original);
    EXPECT_EQ(fused_distance(h1, h2, h1f, h2f, 0.7, 0.0), original);
    const Eigen::Vector3d a(0.3, -1.2, 2.5), b(1.1, 0.4, -0.7);
    EXPECT_EQ(original, (a - b).norm());
}

TEST(FusedDistanceTest, HandComputedComposition)
{
    EXPECT_NEAR(fused_distance({0.0, 0.0}, {3.0, 4.0}, {1.0, 1.0}, {1.0, 2.0}, 0.3, 0.7), 5.3, 1e-12);
    EXPECT_EQ(fused_distance({1.0, 2.0}, {1.0, 2.0}, {0.5, 0.5}, {0.5, 0.5}, 1.0, 1.0), 0.0);
    EXPECT_THROW(fused_distance({1.0}, {1.0, 2.0}, {0.0}, {0.0}, 0.5, 0.5), ShapeError);
}

TEST(FusedDistanceTest, NonnegativeAndSymmetric)
{
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> h1(5), h2(5), f1(5), f2(5);
        for (std::size_t i = 0; i < 5; ++i) {
            h1[i] = rng.normal();
            h2[i] = rng.normal();
            f1[i] = rng.normal();
            f2[i] = rng.normal();
        }
        const double p1 = rng.uniform(), p2 = rng.uniform();
        const double d = fused_distance(h1, h2, f1, f2, p1, p2);
        EXPECT_GE(d, 0.0);
        EXPECT_EQ(d, fused_distance(h2, h1, f2, f1, p2, p1));
    }
}

TEST(FusedDistanceTest, NetworkFormMatchesDirectComputation)
{
    const TrainState& s = small_state();
    const std::size_t size = small_spec().image_size, p = s.r.arch.coeff_dim;
    const Tensor x1 = random_tensor({1, 1, size, size}, 1), x2 = random_tensor({1, 1, size, size}, 2);
    const Tensor p1 = random_tensor({1, p}, 3), p2 = random_tensor({1, p}, 4);

    Graph g;
    const Bound gb = bind(g, s.g, false), cb = bind(g, s.c, false), db = bind(g, s.d, false);
    const Var f1 = forward_G(gb, g.constant(x1), g.constant(p1)), f2 = forward_G(gb, g.constant(x2), g.constant(p2));
    const Eigen::VectorXd h1 = unit(forward_C(cb, g.constant(x1)).h.value());
    const Eigen::VectorXd h2 = unit(forward_C(cb, g.constant(x2)).h.value());
    const Eigen::VectorXd s1 = unit(forward_C(cb, f1).h.value()), s2 = unit(forward_C(cb, f2).h.value());
    const auto p_real = [&](const Var& x) {
        const Tensor logits = forward_D(db, x).value();
        return 1.0 / (1.0 + std::exp(logits[1] - logits[0]));
    };
    const double expected = (h1 - h2).norm() + std::min(p_real(f1), p_real(f2)) * (s1 - s2).norm();

    EXPECT_NEAR(fused_distance(s, x1, p1, x2, p2), expected, 1e-12);
    EXPECT_EQ(fused_distance(s, x1, p1, x2, p2), fused_distance(s, x2, p2, x1, p1));
    EXPECT_EQ(fused_distance(s, x1, p1, x1, p1), 0.0);
}

TEST(FusedDistanceTest, RejectingDiscriminatorLeavesOriginalDistance)
{
    TrainState s = small_state();
    const std::size_t n = s.d.tensors.size();
    Tensor& bias = s.d.tensors[n - 1];
    ASSERT_EQ(bias.size(), 2u);
    s.d.tensors[n - 2] = Tensor(s.d.tensors[n - 2].shape());
    bias[0] = -1000.0;
    bias[1] = 0.0;
    const std::size_t size = small_spec().image_size, p = s.r.arch.coeff_dim;
    const Tensor x1 = random_tensor({1, 1, size, size}, 5), x2 = random_tensor({1, 1, size, size}, 6);
    const Tensor p1 = random_tensor({1, p}, 7), p2 = random_tensor({1, p}, 8);

    Graph g;
    const Bound cb = bind(g, s.c, false);
    const std::vector<double> h1 = unit_rows(forward_C(cb, g.constant(x1)).h.value()).values();
    const std::vector<double> h2 = unit_rows(forward_C(cb, g.constant(x2)).h.value()).values();
    EXPECT_EQ(fused_distance(s, x1, p1, x2, p2), fused_distance(h1, h2, {}, {}, 0.0, 0.0));
    EXPECT_NEAR(fused_distance(s, x1, p1, x2, p2), (unit(Tensor({h1.size()}, h1)) - unit(Tensor({h2.size()}, h2))).norm(),
                1e-12);
}

TEST(DistanceMatrixTest, ModesCombineRowDistances)
{
    const FeatureSet a = random_features(3, 4, 11), b = random_features(2, 4, 21);
    const Tensor d_o = distance_matrix(a, b, FeatureMode::original);
    const Tensor d_s = distance_matrix(a, b, FeatureMode::synthesized);
    const Tensor d_f = distance_matrix(a, b, FeatureMode::fused);
    ASSERT_EQ(d_o.shape(), (Shape{3, 2}));
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 2; ++j) {
            const auto row = [](const Tensor& t, std::size_t r) {
                return std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(r * 4),
                                           t.data().begin() + static_cast<std::ptrdiff_t>(r * 4 + 4));
            };
            EXPECT_EQ(d_f[i * 2 + j], fused_distance(row(a.h, i), row(b.h, j), row(a.h_syn, i), row(b.h_syn, j),
                                                     a.p_real[i], b.p_real[j]));
            EXPECT_EQ(d_o[i * 2 + j], fused_distance(row(a.h, i), row(b.h, j), {}, {}, 0.0, 0.0));
            EXPECT_EQ(d_s[i * 2 + j], fused_distance(row(a.h_syn, i), row(b.h_syn, j), {}, {}, 0.0, 0.0));
        }
    }
}

TEST(Rank1Test, TiesGoToTheLowestGalleryIndex)
{
    const Tensor d({3, 3}, {1.0, 1.0, 2.0, 0.5, 0.2, 0.2, 3.0, 2.0, 1.0});
    const Rank1Result r = rank1_from_distances(d, {0, 2, 2}, {0, 1, 2}, {0, 0, 6});
    EXPECT_EQ(r.count[0], 2u);
    EXPECT_EQ(r.count[6], 1u);
    EXPECT_EQ(r.accuracy[0], 0.5);
    EXPECT_EQ(r.accuracy[6], 1.0);
    EXPECT_EQ(r.average, 0.75);
}

TEST(Rank1Test, RejectsMismatchedInputs)
{
    const Tensor d({2, 2});
    EXPECT_THROW(rank1_from_distances(d, {0}, {0, 1}, {0}), ShapeError);
    EXPECT_THROW(rank1_from_distances(d, {0, 1}, {0, 1}, {0}), ShapeError);
    EXPECT_THROW(rank1_from_distances(d, {0, 1}, {0, 1}, {0, 7}), InvalidArgument);
}

TEST(Rank1Test, ProbesEqualToGalleryArePerfectInEveryMode)
{
    const FeatureSet f = random_features(12, 6, 31);
    std::vector<std::size_t> labels(12), buckets(12);
    for (std::size_t i = 0; i < 12; ++i) {
        labels[i] = i;
        buckets[i] = i % kYawBuckets;
    }
    for (FeatureMode m : {FeatureMode::original, FeatureMode::synthesized, FeatureMode::fused}) {
        const Rank1Result r = rank1_from_distances(distance_matrix(f, f, m), labels, labels, buckets);
        EXPECT_EQ(r.average, 1.0) << feature_mode_name(m);
    }
}

TEST(Rank1Test, RandomFeaturesScoreAtChance)
{
    const std::size_t n_ids = 20, n_probes = 2000;
    const FeatureSet gallery = random_features(n_ids, 16, 41), probes = random_features(n_probes, 16, 51);
    std::vector<std::size_t> gl(n_ids), pl(n_probes), pb(n_probes, 0);
    Rng rng(61);
    for (std::size_t i = 0; i < n_ids; ++i) {
        gl[i] = i;
    }
    for (std::size_t& y : pl) {
        y = rng.below(n_ids);
    }
    const double chance = 1.0 / static_cast<double>(n_ids);
    const double sigma = std::sqrt(chance * (1.0 - chance) / static_cast<double>(n_probes));
    for (FeatureMode m : {FeatureMode::original, FeatureMode::synthesized, FeatureMode::fused}) {
        const Rank1Result r = rank1_from_distances(distance_matrix(probes, gallery, m), pl, gl, pb);
        EXPECT_NEAR(r.average, chance, 3.0 * sigma) << feature_mode_name(m);
    }
}

TEST(Rank1Test, InvariantToUniformFeatureScaling)
{
    const FeatureSet gallery = random_features(10, 8, 71), probes = random_features(200, 8, 81);
    FeatureSet gs = gallery, ps = probes;
    for (FeatureSet* f : {&gs, &ps}) {
        for (double& v : f->h.data()) {
            v *= 3.7;
        }
        for (double& v : f->h_syn.data()) {
            v *= 3.7;
        }
    }
    std::vector<std::size_t> gl(10), pl(200), pb(200);
    for (std::size_t i = 0; i < 10; ++i) {
        gl[i] = i;
    }
    for (std::size_t i = 0; i < 200; ++i) {
        pl[i] = i % 10;
        pb[i] = i % kYawBuckets;
    }
    for (FeatureMode m : {FeatureMode::original, FeatureMode::synthesized, FeatureMode::fused}) {
        const Rank1Result a = rank1_from_distances(distance_matrix(probes, gallery, m), pl, gl, pb);
        const Rank1Result b = rank1_from_distances(distance_matrix(ps, gs, m), pl, gl, pb);
        EXPECT_EQ(a.accuracy, b.accuracy) << feature_mode_name(m);
    }
}

TEST(GalleryTest, FirstHeldOutSamplePerIdentity)
{
    const Dataset& data = small_data();
    const std::vector<std::size_t> g = gallery_indices(data);
    ASSERT_EQ(g.size(), small_spec().n_identities);
    for (std::size_t y = 0; y < g.size(); ++y) {
        EXPECT_EQ(data.samples[g[y]].y, y);
        EXPECT_TRUE(data.samples[g[y]].held_out);
        for (std::size_t i = 0; i < g[y]; ++i) {
            EXPECT_FALSE(data.samples[i].y == y && data.samples[i].held_out);
        }
    }
}

TEST(GalleryTest, IdentityWithoutHeldOutImageIsAnError)
{
    Dataset data = small_data();
    for (Sample& s : data.samples) {
        if (s.y == 2) {
            s.held_out = false;
        }
    }
    EXPECT_THROW(gallery_indices(data), InvalidArgument);
    EXPECT_THROW(rank1_identification(small_state(), small_config(), data, FeatureMode::original), InvalidArgument);
}

TEST(EvaluateTest, ReportIsKeyValueWithAccuraciesInRange)
{
    const std::string hash_before = encode_container(state_records(small_state(), small_config()));
    const EvalReport r = evaluate(small_state(), small_config(), small_data());
    EXPECT_EQ(encode_container(state_records(small_state(), small_config())), hash_before);

    std::map<std::string, double> kv;
    std::istringstream in(r.to_text());
    std::string line;
    while (std::getline(in, line)) {
        const std::size_t eq = line.find('=');
        ASSERT_NE(eq, std::string::npos) << line;
        kv[line.substr(0, eq)] = std::stod(line.substr(eq + 1));
    }
    EXPECT_EQ(kv.at("nme"), r.nme);
    EXPECT_EQ(kv.at("heldout_l1"), r.heldout_l1);
    for (const char* mode : {"original", "syn", "fused"}) {
        const double avg = kv.at(std::string("rank1.") + mode + ".avg");
        EXPECT_GE(avg, 0.0);
        EXPECT_LE(avg, 1.0);
    }
    for (const auto& [key, value] : kv) {
        if (key.rfind("rank1.", 0) == 0) {
            EXPECT_GE(value, 0.0) << key;
            EXPECT_LE(value, 1.0) << key;
        }
    }
}

TEST(EvaluateTest, SyntheticModeUsesZeroCoefficientsWithoutR)
{
    TrainConfig c = small_config();
    c.ablation.drop_R = true;
    TrainState s = small_state();
    const Rank1Result a = rank1_identification(s, c, small_data(), FeatureMode::synthesized);
    s.r = init_params(s.r.arch, 99);
    const Rank1Result b = rank1_identification(s, c, small_data(), FeatureMode::synthesized);
    EXPECT_EQ(a.accuracy, b.accuracy);
}

TEST(AblationTest, SevenRowsOnTheSameData)
{
    std::ostringstream log;
    std::vector<TrainState> trained;
    const std::vector<AblationRow> table =
        run_ablation(small_config(), small_data(), small_pretrained().r, small_pretrained().c, &log, &trained);
    ASSERT_EQ(table.size(), 7u);
    ASSERT_EQ(trained.size(), 7u);
    EXPECT_EQ(trained[0], small_state());
    EXPECT_EQ(trained[2].opt_d.step, 0u);
    for (std::size_t i = 0; i < table.size(); ++i) {
        EXPECT_EQ(table[i].name, ablation_names()[i]);
        EXPECT_EQ(table[i].data_hash, dataset_hash(small_data()));
        EXPECT_EQ(table[i].seed, small_config().seed);
        EXPECT_GE(table[i].syn_average, 0.0);
        EXPECT_LE(table[i].syn_average, 1.0);
    }
    EXPECT_EQ(table[0].syn_average,
              rank1_identification(small_state(), small_config(), small_data(), FeatureMode::synthesized).average);
    std::istringstream lines(log.str());
    std::string line;
    std::size_t n = 0;
    while (std::getline(lines, line)) {
        EXPECT_EQ(line.rfind("ablation=" + ablation_names()[n], 0), 0u) << line;
        ++n;
    }
    EXPECT_EQ(n, 7u);
}

TEST(GridTest, MosaicLayoutAndQuantization)
{
    const std::vector<std::size_t> idx = {0, 5};
    const auto rows = grid_rows(small_state(), small_config(), small_data(), idx);
    ASSERT_EQ(rows.size(), 2u);
    const std::size_t h = small_spec().image_size;
    const Tensor m = grid_mosaic(rows);
    ASSERT_EQ(m.shape(), (Shape{2 * h, 4 * h}));
    EXPECT_EQ(rows[1][0].values(), small_data().samples[5].x.values());
    EXPECT_EQ(rows[1][1].values(), small_data().samples[5].x_g.values());

    const auto path = temp_path("grid.pgm");
    export_grid(rows, path);
    std::ifstream in(path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string header = "P5\n" + std::to_string(4 * h) + " " + std::to_string(2 * h) + "\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + m.size());
    EXPECT_EQ(bytes.substr(0, header.size()), header);
    for (std::size_t r = 0; r < 2; ++r) {
        for (std::size_t col = 0; col < 4; ++col) {
            const Tensor& tile = rows[r][col];
            for (std::size_t y = 0; y < h; y += 3) {
                for (std::size_t x = 0; x < h; x += 3) {
                    const double v = std::clamp(tile[y * h + x], 0.0, 1.0);
                    const std::size_t at = header.size() + (r * h + y) * 4 * h + col * h + x;
                    EXPECT_EQ(static_cast<unsigned char>(bytes[at]), static_cast<unsigned char>(std::round(255.0 * v)));
                }
            }
        }
    }
    std::filesystem::remove(path);
}

TEST(GridTest, MaskedColumnIsZeroOutsideTheMask)
{
    const auto rows = grid_rows(small_state(), small_config(), small_data(), {3});
    for (std::size_t i = 0; i < rows[0][3].size(); ++i) {
        EXPECT_TRUE(rows[0][3][i] == 0.0 || rows[0][3][i] == rows[0][2][i]);
    }
}

TEST(GridTest, EmptyOrRaggedInputIsAnError)
{
    EXPECT_THROW(grid_mosaic({}), InvalidArgument);
    EXPECT_THROW(export_grid({}, temp_path("empty.pgm")), InvalidArgument);
    std::array<Tensor, 4> row{Tensor({4, 4}), Tensor({4, 4}), Tensor({4, 5}), Tensor({4, 4})};
    EXPECT_THROW(grid_mosaic({row}), ShapeError);
    EXPECT_FALSE(std::filesystem::exists(temp_path("empty.pgm")));
}
