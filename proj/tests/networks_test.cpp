#include "ffgan/error.hpp"
#include "ffgan/losses.hpp"
#include "ffgan/networks.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace ffgan;
using ffgan::testing::random_tensor;

namespace {

NetworkParams randomized(const Architecture& arch, std::uint64_t seed, double range = 0.5)
{
    NetworkParams net = init_params(arch, seed);
    std::mt19937_64 rng(seed);
    for (Tensor& t : net.tensors) {
        t = random_tensor(t.shape(), rng, -range, range);
    }
    return net;
}

Tensor slice_batch(const Tensor& t, std::size_t b)
{
    Shape s = t.shape();
    const std::size_t stride = t.size() / s[0];
    s[0] = 1;
    return Tensor(s, std::vector<double>(t.data().begin() + static_cast<std::ptrdiff_t>(b * stride),
                                         t.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * stride)));
}

std::vector<Architecture> small_archs()
{
    return {reconstructor_arch(16, 6), generator_arch(16, 6), discriminator_arch(16), recognizer_arch(16, 5)};
}

/// Runs the network matching `net.arch.kind` and returns its primary output.
Var run(const Bound& b, const Var& x, const Var& p)
{
    switch (b.net->arch.kind) {
    case NetKind::reconstructor: return forward_R(b, x);
    case NetKind::generator: return forward_G(b, x, p);
    case NetKind::discriminator: return forward_D(b, x);
    case NetKind::recognizer: return forward_C(b, x).logits;
    }
    return x;
}

} // namespace

TEST(ArchitectureTest, DefaultParameterCounts)
{
    EXPECT_EQ(init_params(reconstructor_arch(32, 28), 0).numel(), 31580u);
    EXPECT_EQ(init_params(generator_arch(32, 28), 0).numel(), 25921u);
    EXPECT_EQ(init_params(discriminator_arch(32), 0).numel(), 25410u);
    EXPECT_EQ(init_params(recognizer_arch(32, 20), 0).numel(), 25684u);
}

TEST(ArchitectureTest, DescriptorRoundTrip)
{
    for (const Architecture& a : small_archs()) {
        const Architecture b = Architecture::from_descriptor(a.descriptor());
        EXPECT_EQ(b.descriptor(), a.descriptor());
        EXPECT_EQ(b.parameter_shapes(), a.parameter_shapes());
    }
    std::vector<double> bad = reconstructor_arch(16, 6).descriptor();
    bad.pop_back();
    EXPECT_THROW(Architecture::from_descriptor(bad), FormatError);
    bad = reconstructor_arch(16, 6).descriptor();
    bad[0] = 7;
    EXPECT_THROW(Architecture::from_descriptor(bad), FormatError);
}

TEST(ArchitectureTest, RejectsIndivisibleImageSize)
{
    EXPECT_THROW(reconstructor_arch(24, 6), InvalidArgument);
    EXPECT_THROW(discriminator_arch(4), InvalidArgument);
    EXPECT_THROW(recognizer_arch(32, 0), InvalidArgument);
    EXPECT_THROW(generator_arch(32, 0), InvalidArgument);
}

TEST(InitTest, DeterministicPerSeedWithZeroBiases)
{
    for (const Architecture& a : small_archs()) {
        const NetworkParams n1 = init_params(a, 11), n2 = init_params(a, 11), n3 = init_params(a, 12);
        EXPECT_EQ(n1, n2);
        EXPECT_EQ(n1.hash(), n2.hash());
        EXPECT_NE(n1.hash(), n3.hash());
        const auto shapes = a.parameter_shapes();
        ASSERT_EQ(n1.names.size(), shapes.size());
        double sq = 0.0;
        std::size_t weights = 0;
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            EXPECT_EQ(n1.names[i], shapes[i].first);
            EXPECT_EQ(n1.tensors[i].shape(), shapes[i].second);
            const bool bias = n1.names[i].ends_with(".b");
            for (double v : n1.tensors[i].data()) {
                if (bias) {
                    EXPECT_EQ(v, 0.0);
                } else {
                    sq += v * v;
                    ++weights;
                }
            }
        }
        EXPECT_NEAR(std::sqrt(sq / static_cast<double>(weights)), 0.02, 0.003);
    }
}

TEST(ForwardTest, OutputShapes)
{
    std::mt19937_64 rng(1);
    Graph g;
    const Var x = g.constant(random_tensor({3, 1, 32, 32}, rng, 0, 1));
    const Var p = g.constant(random_tensor({3, 28}, rng));
    const NetworkParams r = init_params(reconstructor_arch(32, 28), 1), gen = init_params(generator_arch(32, 28), 2),
                        d = init_params(discriminator_arch(32), 3), c = init_params(recognizer_arch(32, 20), 4);
    EXPECT_EQ(forward_R(bind(g, r, false), x).shape(), (Shape{3, 28}));
    EXPECT_EQ(forward_G(bind(g, gen, false), x, p).shape(), (Shape{3, 1, 32, 32}));
    EXPECT_EQ(forward_D(bind(g, d, false), x).shape(), (Shape{3, 2}));
    const RecognizerOutput out = forward_C(bind(g, c, false), x);
    EXPECT_EQ(out.logits.shape(), (Shape{3, 20}));
    EXPECT_EQ(out.h.shape(), (Shape{3, 64}));
}

TEST(ForwardTest, RejectsWrongInputs)
{
    Graph g;
    const NetworkParams r = init_params(reconstructor_arch(16, 6), 1), gen = init_params(generator_arch(16, 6), 2);
    const Bound rb = bind(g, r, false), gb = bind(g, gen, false);
    EXPECT_THROW(forward_R(rb, g.constant(Tensor({1, 1, 32, 32}))), ShapeError);
    EXPECT_THROW(forward_R(rb, g.constant(Tensor({1, 2, 16, 16}))), ShapeError);
    EXPECT_THROW(forward_G(gb, g.constant(Tensor({2, 1, 16, 16})), g.constant(Tensor({2, 5}))), ShapeError);
    EXPECT_THROW(forward_D(rb, g.constant(Tensor({1, 1, 16, 16}))), InvalidArgument);
}

TEST(ForwardTest, ZeroHeadGivesZeroCoefficientsAndEvenOdds)
{
    std::mt19937_64 rng(2);
    NetworkParams r = init_params(reconstructor_arch(16, 6), 5), d = init_params(discriminator_arch(16), 6);
    for (NetworkParams* net : {&r, &d}) {
        for (std::size_t i = 0; i < net->names.size(); ++i) {
            if (net->names[i].starts_with("head")) {
                net->tensors[i] = Tensor(net->tensors[i].shape(), 0.0);
            }
        }
    }
    Graph g;
    const Var x = g.constant(random_tensor({2, 1, 16, 16}, rng, 0, 1));
    for (double v : forward_R(bind(g, r, false), x).value().data()) {
        EXPECT_EQ(v, 0.0);
    }
    const Tensor probs = softmax_rows(forward_D(bind(g, d, false), x).value());
    for (double v : probs.data()) {
        EXPECT_EQ(v, 0.5);
    }
}

TEST(ForwardTest, GeneratorOutputIsInUnitInterval)
{
    std::mt19937_64 rng(3);
    const Tensor x = random_tensor({4, 1, 16, 16}, rng, 0, 1), p = random_tensor({4, 6}, rng, -3, 3);
    {
        const NetworkParams gen = randomized(generator_arch(16, 6), 7, 0.2);
        Graph g;
        for (double v : forward_G(bind(g, gen, false), g.constant(x), g.constant(p)).value().data()) {
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
        }
    }
    // Large weights saturate the sigmoid to the closed interval in double precision.
    const NetworkParams gen = randomized(generator_arch(16, 6), 7, 1.0);
    Graph g;
    for (double v : forward_G(bind(g, gen, false), g.constant(x), g.constant(p)).value().data()) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(ForwardTest, DiscriminatorProbabilitiesSumToOne)
{
    std::mt19937_64 rng(4);
    const NetworkParams d = randomized(discriminator_arch(16), 8);
    Graph g;
    const Tensor probs = softmax_rows(forward_D(bind(g, d, false), g.constant(random_tensor({5, 1, 16, 16}, rng, 0, 1))).value());
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(probs[2 * i] + probs[2 * i + 1], 1.0, 1e-15);
    }
}

TEST(ForwardTest, RecognizerFeatureIgnoresHead)
{
    std::mt19937_64 rng(5);
    NetworkParams c = randomized(recognizer_arch(16, 5), 9);
    const Tensor x = random_tensor({2, 1, 16, 16}, rng, 0, 1);
    Graph g1;
    const RecognizerOutput a = forward_C(bind(g1, c, false), g1.constant(x));
    c.tensors[c.tensors.size() - 2] = random_tensor(c.tensors[c.tensors.size() - 2].shape(), rng);
    Graph g2;
    const RecognizerOutput b = forward_C(bind(g2, c, false), g2.constant(x));
    EXPECT_EQ(a.h.value(), b.h.value());
    EXPECT_NE(a.logits.value(), b.logits.value());
}

TEST(ForwardTest, BatchEquivariance)
{
    std::mt19937_64 rng(6);
    const Tensor x = random_tensor({3, 1, 16, 16}, rng, 0, 1);
    const Tensor p = random_tensor({3, 6}, rng);
    for (const Architecture& a : small_archs()) {
        const NetworkParams net = randomized(a, 10);
        Graph g;
        const Bound b = bind(g, net, false);
        const Tensor whole = run(b, g.constant(x), g.constant(p)).value();
        for (std::size_t i = 0; i < 3; ++i) {
            const Tensor one = run(b, g.constant(slice_batch(x, i)), g.constant(slice_batch(p, i))).value();
            const Tensor expect = slice_batch(whole, i);
            ASSERT_EQ(one.shape(), expect.shape());
            for (std::size_t j = 0; j < one.size(); ++j) {
                EXPECT_NEAR(one[j], expect[j], 1e-12) << net_kind_name(a.kind);
            }
        }
    }
}

TEST(ForwardTest, ForwardIsDeterministic)
{
    std::mt19937_64 rng(7);
    const Tensor x = random_tensor({2, 1, 16, 16}, rng, 0, 1), p = random_tensor({2, 6}, rng);
    for (const Architecture& a : small_archs()) {
        const NetworkParams net = randomized(a, 12);
        Graph g1, g2;
        EXPECT_EQ(run(bind(g1, net, false), g1.constant(x), g1.constant(p)).value(),
                  run(bind(g2, net, false), g2.constant(x), g2.constant(p)).value());
    }
}

class NetworkGradientTest : public ::testing::TestWithParam<std::size_t> {};

TEST_P(NetworkGradientTest, ParameterAndInputGradientsMatchCentralDifferences)
{
    const Architecture arch = small_archs()[GetParam()];
    std::mt19937_64 rng(30 + GetParam());
    const Tensor p = random_tensor({2, 6}, rng);
    // A step of 1e-7 stays on one side of every kink at least 1e-5 away.
    constexpr double kStep = 1e-7, kMargin = 1e-5;
    int accepted = 0;
    for (std::uint64_t seed = 20; accepted < 3 && seed < 60; ++seed) {
        const NetworkParams net = randomized(arch, seed);
        const Tensor x = random_tensor({2, 1, 16, 16}, rng, 0, 1);
        std::vector<Tensor> params = net.tensors;
        params.push_back(x);
        params.push_back(p);
        const std::size_t np = net.tensors.size();
        Tensor weights;
        {
            Graph g;
            weights = random_tensor(run(bind(g, net, false), g.constant(x), g.constant(p)).shape(), rng);
        }
        const auto build = [&](Graph&, const std::vector<Var>& v) {
            Bound b{&net, std::vector<Var>(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(np))};
            return ffgan::testing::weighted_sum(run(b, v[np], v[np + 1]), weights);
        };
        if (ffgan::testing::leaky_kink_margin(build, params) < kMargin) {
            continue;
        }
        ++accepted;
        EXPECT_LT(ffgan::testing::max_directional_error(build, params, 8, rng, kStep), 1e-5);
    }
    EXPECT_EQ(accepted, 3);
}

INSTANTIATE_TEST_SUITE_P(Networks, NetworkGradientTest, ::testing::Range<std::size_t>(0, 4),
                         [](const auto& info) { return std::string(net_kind_name(small_archs()[info.param].kind)); });

TEST(CompositeTest, GradientsReachReconstructorThroughGenerator)
{
    std::mt19937_64 rng(40);
    const NetworkParams r = randomized(reconstructor_arch(16, 6), 41, 0.2), gen = randomized(generator_arch(16, 6), 42, 0.2),
                        d = randomized(discriminator_arch(16), 43, 0.2), c = randomized(recognizer_arch(16, 5), 44, 0.2);
    Graph g;
    const Bound rb = bind(g, r, true), gb = bind(g, gen, true), db = bind(g, d, false), cb = bind(g, c, false);
    const Var x = g.constant(random_tensor({2, 1, 16, 16}, rng, 0, 1));
    const Var x_f = forward_G(gb, x, forward_R(rb, x));
    const Var loss = add(g_gan_loss(forward_D(db, x_f)), g_id_loss(forward_C(cb, x_f).logits, std::vector<std::size_t>{0, 4}));
    const Gradients grads = g.backward(loss);
    for (const Bound* b : {&rb, &gb}) {
        for (const Var& v : b->vars) {
            ASSERT_TRUE(grads.has(v));
        }
        double total = 0.0;
        for (double e : grads[b->vars.front()].data()) {
            total += std::fabs(e);
        }
        EXPECT_GT(total, 0.0);
    }
    for (const Var& v : db.vars) {
        EXPECT_FALSE(grads.has(v));
    }
}

TEST(RecordsTest, RoundTripAndShapeMismatch)
{
    for (const Architecture& a : small_archs()) {
        const NetworkParams net = randomized(a, 50);
        const std::vector<Record> recs = params_records(net, "net");
        const NetworkParams back = params_from_records(recs, "net");
        EXPECT_EQ(back, net);
        EXPECT_EQ(back.arch.descriptor(), a.descriptor());
        EXPECT_EQ(back.hash(), net.hash());

        std::vector<Record> broken = recs;
        for (Record& rec : broken) {
            if (rec.name == "net/" + net.names[0]) {
                rec.tensor = Tensor({1, 1, 3, 3});
            }
        }
        EXPECT_THROW(params_from_records(broken, "net"), FormatError);
        EXPECT_THROW(params_from_records(recs, "other"), FormatError);
    }
}
