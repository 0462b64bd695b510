#include "ffgan/error.hpp"
#include "ffgan/losses.hpp"
#include "ffgan/networks.hpp"
#include "ffgan/synth_data.hpp"

#include "gradcheck.hpp"
#include "loss_cases.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

using namespace ffgan;
using ffgan::testing::random_tensor;

namespace {

double xent_oracle(const Tensor& logits, std::size_t row, std::size_t label)
{
    const std::size_t k = logits.dim(1);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        total += std::exp(logits[row * k + j]);
    }
    return -std::log(std::max(std::exp(logits[row * k + label]) / total, 1e-12));
}

double value(const Var& v) { return v.value().item(); }

} // namespace

class LossGradientTest : public ::testing::TestWithParam<std::size_t> {};

TEST_P(LossGradientTest, MatchesCentralDifferences)
{
    const auto lc = ffgan::testing::loss_cases()[GetParam()];
    std::mt19937_64 rng(2000 + GetParam());
    for (int point = 0; point < 5; ++point) {
        std::vector<Tensor> inputs;
        do {
            inputs.clear();
            for (const Shape& s : lc.inputs) {
                inputs.push_back(random_tensor(s, rng, lc.lo, lc.hi));
            }
        } while (!lc.valid(inputs));
        EXPECT_LT(ffgan::testing::max_directional_error(lc.forward, inputs, 10, rng), 1e-4) << lc.name;
    }
}

INSTANTIATE_TEST_SUITE_P(Objectives, LossGradientTest,
                         ::testing::Range<std::size_t>(0, ffgan::testing::loss_cases().size()),
                         [](const auto& info) { return ffgan::testing::loss_cases()[info.param].name; });

TEST(LossValueTest, EveryLossIsNonnegative)
{
    std::mt19937_64 rng(4);
    for (const auto& lc : ffgan::testing::loss_cases()) {
        for (int point = 0; point < 10; ++point) {
            std::vector<Tensor> inputs;
            for (const Shape& s : lc.inputs) {
                inputs.push_back(random_tensor(s, rng, lc.lo, lc.hi));
            }
            EXPECT_GE(ffgan::testing::evaluate(lc.forward, inputs), 0.0) << lc.name;
        }
    }
}

TEST(ParamDistanceGraphTest, GradientIsTwiceWeightedDifference)
{
    std::mt19937_64 rng(6);
    const Tensor p = random_tensor({2, 12}, rng), pg = random_tensor({2, 12}, rng);
    Eigen::VectorXd w(12);
    for (Eigen::Index i = 0; i < 12; ++i) {
        w[i] = 0.25 * static_cast<double>(i + 1);
    }
    Graph g;
    const Var vp = g.parameter(p);
    const Var loss = param_distance_loss(vp, g.constant(pg), w);
    // Batch mean of the scalar form.
    double expected = 0.0;
    for (std::size_t b = 0; b < 2; ++b) {
        Eigen::VectorXd a(12), c(12);
        for (std::size_t i = 0; i < 12; ++i) {
            a[static_cast<Eigen::Index>(i)] = p[b * 12 + i];
            c[static_cast<Eigen::Index>(i)] = pg[b * 12 + i];
        }
        expected += 0.5 * param_distance_loss(a, c, w);
    }
    EXPECT_NEAR(value(loss), expected, 1e-12);
    const Tensor grad = g.backward(loss)[vp];
    for (std::size_t b = 0; b < 2; ++b) {
        for (std::size_t i = 0; i < 12; ++i) {
            const double analytic = 0.5 * 2.0 * w[static_cast<Eigen::Index>(i)] * (p[b * 12 + i] - pg[b * 12 + i]);
            EXPECT_NEAR(grad[b * 12 + i], analytic, 1e-8);
        }
    }
}

TEST(RecLossTest, Examples)
{
    std::mt19937_64 rng(8);
    const Tensor a = random_tensor({2, 1, 4, 4}, rng, 0.0, 1.0);
    Graph g;
    EXPECT_EQ(value(rec_loss(g.constant(a), g.constant(a))), 0.0);
    Tensor shifted = a;
    for (double& v : shifted.data()) {
        v += 0.125;
    }
    EXPECT_NEAR(value(rec_loss(g.constant(shifted), g.constant(a))), 0.125, 1e-15);

    const Tensor b = random_tensor({2, 1, 4, 4}, rng, 0.0, 1.0);
    double oracle = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        oracle += std::fabs(a[i] - b[i]);
    }
    EXPECT_NEAR(value(rec_loss(g.constant(a), g.constant(b))), oracle / static_cast<double>(a.size()), 1e-12);
    EXPECT_THROW(rec_loss(g.constant(a), g.constant(Tensor({2, 1, 4, 3}))), ShapeError);
}

TEST(TvLossTest, ConstantImageIsNearZero)
{
    Graph g;
    const double v = value(tv_loss(g.constant(Tensor({1, 1, 6, 6}, 0.4))));
    EXPECT_NEAR(v, std::sqrt(kTvEpsilon), 1e-15);
    EXPECT_LE(v, 2e-4);
}

TEST(TvLossTest, VerticalStepCountsOneColumn)
{
    const std::size_t h = 6, w = 8;
    Tensor img({1, 1, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = w / 2; x < w; ++x) {
            img[y * w + x] = 1.0;
        }
    }
    // Every interior row has one unit horizontal difference; the rest contribute sqrt(eps).
    const double rows = static_cast<double>(h - 1), cols = static_cast<double>(w - 1);
    const double oracle =
        (rows * std::sqrt(1.0 + kTvEpsilon) + rows * (cols - 1.0) * std::sqrt(kTvEpsilon)) / (rows * cols);
    Graph g;
    EXPECT_NEAR(value(tv_loss(g.constant(img))), oracle, 1e-12);
    EXPECT_NEAR(oracle, 1.0 / cols, 1e-3);
    EXPECT_THROW(tv_loss(g.constant(Tensor({1, 1, 1, 4}))), ShapeError);
}

TEST(SymLossTest, IdenticalOutputsGiveZero)
{
    Graph g;
    const Var c = g.constant(Tensor({2, 1, 4, 4}, 0.3));
    EXPECT_EQ(value(sym_loss(c, c, ffgan::testing::pattern_masks(2, 4, 4))), 0.0);
}

TEST(SymLossTest, SinglePixelContributesOverRootArea)
{
    const auto masks = ffgan::testing::pattern_masks(1, 4, 4);
    Tensor a({1, 1, 4, 4}, 0.2), b = a;
    // Pixel (1,1) is inside M and outside M_flip for this pattern.
    ASSERT_EQ(masks.mask[5], 1.0);
    ASSERT_EQ(masks.mask_flip[5], 0.0);
    b[5] += 0.3;
    Graph g;
    const double v = value(sym_loss(g.constant(a), g.constant(b), masks));
    EXPECT_NEAR(v, 0.3 / std::sqrt(static_cast<double>(masks.area[0])), 1e-12);
}

TEST(SymLossTest, EmptyMaskContributesZero)
{
    std::vector<VisibilityMask> empty(1), full(1);
    empty[0] = {4, 4, std::vector<std::uint8_t>(16, 0), {}};
    full[0] = {4, 4, std::vector<std::uint8_t>(16, 1), {}};
    const SymmetryMasks masks = masks_from(full, empty);
    Tensor a({1, 1, 4, 4}, 0.0), b({1, 1, 4, 4}, 0.5);
    Graph g;
    const Var pa = g.parameter(a);
    const Var loss = sym_loss(pa, g.constant(b), masks);
    EXPECT_NEAR(value(loss), 0.5, 1e-15);
    const Tensor grad = g.backward(loss)[pa];
    for (double v : grad.data()) {
        EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(SymLossTest, ExchangingInputAndMirrorSwapsTheTerms)
{
    DatasetSpec spec;
    spec.n_vertices = 576;
    const MorphableModel model = make_model(spec);
    std::mt19937_64 rng(10);
    const std::uint64_t ids = identity_seed(spec, 0);
    std::vector<Coeffs> p, p_flip;
    for (std::size_t i = 0; i < 3; ++i) {
        p.push_back(sample_pair(model, spec, ids, pose_seed(ids, i)).p_g);
        p_flip.push_back(flip_coeffs(p.back(), spec.image_size));
    }
    const Tensor a = random_tensor({3, 1, 32, 32}, rng, 0.0, 1.0), b = random_tensor({3, 1, 32, 32}, rng, 0.0, 1.0);
    Graph g;
    const double forward = value(sym_loss(g.constant(a), g.constant(b), symmetry_masks(model, p, 32)));
    const double swapped = value(sym_loss(g.constant(b), g.constant(a), symmetry_masks(model, p_flip, 32)));
    EXPECT_NEAR(forward, swapped, 1e-12);
}

TEST(SymLossTest, FrontalSymmetricInputIsAFixedPoint)
{
    DatasetSpec spec;
    spec.n_vertices = 576;
    const MorphableModel model = make_model(spec);
    Coeffs c = Coeffs::zeros(model);
    c.m = pose_matrix({0.0, 0.0, 0.0, spec.base_scale(), spec.center(), spec.center()});
    const Coeffs cf = flip_coeffs(c, spec.image_size);
    ASSERT_EQ(cf.flatten(), c.flatten());

    Tensor x = render(model, c, 1.0, spec.image_size).reshaped({1, 1, 32, 32});
    for (std::size_t y = 0; y < 32; ++y) {
        for (std::size_t u = 0; u < 16; ++u) {
            const double avg = 0.5 * (x[y * 32 + u] + x[y * 32 + 31 - u]);
            x[y * 32 + u] = x[y * 32 + 31 - u] = avg;
        }
    }
    const NetworkParams gen = init_params(generator_arch(32, model.coeff_size()), 3);
    Graph g;
    const Bound gb = bind(g, gen, false);
    const Var xv = g.constant(x);
    const Eigen::VectorXd z = normalize_coeffs(model, c), zf = normalize_coeffs(model, cf);
    const Var p1 = g.constant(Tensor({1, model.coeff_size()}, std::vector<double>(z.data(), z.data() + z.size())));
    const Var p2 = g.constant(Tensor({1, model.coeff_size()}, std::vector<double>(zf.data(), zf.data() + zf.size())));
    const Var out = forward_G(gb, xv, p1);
    const Var out_flip = forward_G(gb, flip_w(xv), p2);
    EXPECT_NEAR(value(sym_loss(out, out_flip, symmetry_masks(model, {c}, 32))), 0.0, 1e-10);
}

TEST(AdversarialLossTest, UniformDiscriminatorValues)
{
    Graph g;
    const Var zeros = g.constant(Tensor({4, 2}, 0.0));
    EXPECT_NEAR(value(d_loss(zeros, zeros)), 2.0 * std::numbers::ln2, 1e-9);
    EXPECT_NEAR(value(g_gan_loss(zeros)), std::numbers::ln2, 1e-9);
}

TEST(AdversarialLossTest, ConfidentDiscriminatorApproachesZero)
{
    Graph g;
    const Var real = g.constant(Tensor({2, 2}, {30.0, -30.0, 30.0, -30.0}));
    const Var fake = g.constant(Tensor({2, 2}, {-30.0, 30.0, -30.0, 30.0}));
    EXPECT_LT(value(d_loss(real, fake)), 1e-20);
    EXPECT_LT(value(g_gan_loss(real)), 1e-20);
}

TEST(AdversarialLossTest, MatchesSoftmaxOracle)
{
    std::mt19937_64 rng(12);
    const Tensor real = random_tensor({3, 2}, rng, -4, 4), fake = random_tensor({3, 2}, rng, -4, 4);
    double oracle = 0.0, gan = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        oracle += (xent_oracle(real, i, 0) + xent_oracle(fake, i, 1)) / 3.0;
        gan += xent_oracle(fake, i, 0) / 3.0;
    }
    Graph g;
    EXPECT_NEAR(value(d_loss(g.constant(real), g.constant(fake))), oracle, 1e-12);
    EXPECT_NEAR(value(g_gan_loss(g.constant(fake))), gan, 1e-12);
    EXPECT_THROW(d_loss(g.constant(Tensor({0, 2})), g.constant(fake)), ShapeError);
}

TEST(IdentityLossTest, UniformLogitsGiveLogK)
{
    Graph g;
    EXPECT_NEAR(value(c_loss(g.constant(Tensor({3, 7}, 0.5)), {0, 6, 3})), std::log(7.0), 1e-9);
}

TEST(IdentityLossTest, CorrectClassDominatingGivesZero)
{
    Graph g;
    const Var logits = g.constant(Tensor({1, 3}, {0.0, 50.0, 0.0}));
    EXPECT_LT(value(c_loss(logits, {1})), 1e-20);
}

TEST(IdentityLossTest, MatchesCrossEntropyOracle)
{
    std::mt19937_64 rng(14);
    const Tensor logits = random_tensor({4, 6}, rng, -3, 3);
    const std::vector<std::size_t> labels = {5, 0, 2, 2};
    double oracle = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        oracle += xent_oracle(logits, i, labels[i]) / 4.0;
    }
    Graph g;
    EXPECT_NEAR(value(c_loss(g.constant(logits), labels)), oracle, 1e-12);
    EXPECT_EQ(value(g_id_loss(g.constant(logits), labels)), value(c_loss(g.constant(logits), labels)));
}

TEST(IdentityLossTest, FeatureDistanceIsMeanSquared)
{
    Graph g;
    const Tensor h({2, 64}, 0.7);
    EXPECT_EQ(value(g_id_loss(g.constant(h), g.constant(h))), 0.0);
    Tensor shifted = h;
    for (double& v : shifted.data()) {
        v += 1.0;
    }
    EXPECT_NEAR(value(g_id_loss(g.constant(shifted), g.constant(h))), 1.0, 1e-15);
}

TEST(TotalLossTest, WeightedSumOfTerms)
{
    Graph g;
    GeneratorTerms t;
    t.rec = g.constant(Tensor::scalar(0.5));
    t.tv = g.constant(Tensor::scalar(0.25));
    t.sym = g.constant(Tensor::scalar(2.0));
    t.gan = g.constant(Tensor::scalar(0.75));
    t.id = g.constant(Tensor::scalar(3.0));
    EXPECT_EQ(value(total_g_loss(g, {}, t)), 0.0);
    EXPECT_EQ(value(total_g_loss(g, {0, 0, 1, 0, 0}, t)), 2.0);
    const LossWeights w{0.3, 1.7, 0.8, 0.6, 0.01};
    EXPECT_NEAR(value(total_g_loss(g, w, t)), 0.3 * 0.5 + 1.7 * 0.25 + 0.8 * 2.0 + 0.6 * 0.75 + 0.01 * 3.0, 1e-12);
    EXPECT_THROW(total_g_loss(g, {-1, 0, 0, 0, 0}, t), InvalidArgument);
}

TEST(IsolationTest, DetachedDiscriminatorLossLeavesGeneratorUntouched)
{
    const NetworkParams gen = init_params(generator_arch(16, 6), 1);
    const NetworkParams dis = init_params(discriminator_arch(16), 2);
    std::mt19937_64 rng(16);
    Graph g;
    const Bound gb = bind(g, gen, true), db = bind(g, dis, true);
    const Var x = g.constant(random_tensor({2, 1, 16, 16}, rng, 0, 1));
    const Var x_f = forward_G(gb, x, g.constant(random_tensor({2, 6}, rng)));
    const Var loss = d_loss(forward_D(db, x), forward_D(db, g.detach(x_f)));
    const Gradients grads = g.backward(loss);
    for (const Var& v : gb.vars) {
        for (double e : grads[v].data()) {
            ASSERT_EQ(e, 0.0);
        }
    }
    double touched = 0.0;
    for (const Var& v : db.vars) {
        for (double e : grads[v].data()) {
            touched += std::fabs(e);
        }
    }
    EXPECT_GT(touched, 0.0);
}

TEST(IsolationTest, FrozenDiscriminatorAndRecognizerReceiveNoGradient)
{
    const NetworkParams gen = init_params(generator_arch(16, 6), 1);
    const NetworkParams dis = init_params(discriminator_arch(16), 2);
    const NetworkParams rec = init_params(recognizer_arch(16, 4), 3);
    std::mt19937_64 rng(18);
    Graph g;
    const Bound gb = bind(g, gen, true), db = bind(g, dis, false), cb = bind(g, rec, false);
    const Var x = g.constant(random_tensor({2, 1, 16, 16}, rng, 0, 1));
    const Var x_f = forward_G(gb, x, g.constant(random_tensor({2, 6}, rng)));
    const Var loss = add(g_gan_loss(forward_D(db, x_f)), g_id_loss(forward_C(cb, x_f).logits, std::vector<std::size_t>{1, 3}));
    const Gradients grads = g.backward(loss);
    for (const Var& v : db.vars) {
        EXPECT_FALSE(g.requires_grad(v.id()));
        EXPECT_FALSE(grads.has(v));
    }
    for (const Var& v : cb.vars) {
        EXPECT_FALSE(grads.has(v));
    }
    double reached = 0.0;
    for (const Var& v : gb.vars) {
        for (double e : grads[v].data()) {
            reached += std::fabs(e);
        }
    }
    EXPECT_GT(reached, 0.0);
}
