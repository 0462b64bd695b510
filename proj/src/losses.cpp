#include "ffgan/losses.hpp"

#include "ffgan/error.hpp"

#include <cmath>

namespace ffgan {

namespace {

void same_shape(const Var& a, const Var& b, const char* who)
{
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(who) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
    }
}

Var filled_like(Graph& g, const Shape& shape, double value) { return g.constant(Tensor(shape, value)); }

void require_batch(const Var& v, const char* who)
{
    if (v.shape().empty() || v.shape()[0] == 0) {
        throw ShapeError(std::string(who) + ": empty batch");
    }
}

Tensor stack_masks(const std::vector<VisibilityMask>& masks, std::vector<std::size_t>& areas)
{
    if (masks.empty()) {
        throw ShapeError("symmetry masks: empty batch");
    }
    const std::size_t h = masks[0].height, w = masks[0].width;
    Tensor out({masks.size(), 1, h, w});
    areas.clear();
    for (std::size_t i = 0; i < masks.size(); ++i) {
        if (masks[i].height != h || masks[i].width != w) {
            throw ShapeError("symmetry masks: inconsistent mask sizes");
        }
        for (std::size_t j = 0; j < h * w; ++j) {
            out[i * h * w + j] = masks[i].grid[j];
        }
        areas.push_back(masks[i].area());
    }
    return out;
}

/// Batch mean of sqrt(sum(M (a-b))^2 / area), with zero-area samples contributing 0.
Var masked_rms(Graph& g, const Var& diff, const Tensor& mask, const std::vector<std::size_t>& area)
{
    const std::size_t batch = area.size();
    const Var masked = mul(diff, g.constant(mask));
    const Var per_sample = sum(square(masked), 1);
    Tensor inv_area({batch});
    for (std::size_t i = 0; i < batch; ++i) {
        inv_area[i] = area[i] == 0 ? 0.0 : 1.0 / static_cast<double>(area[i]);
    }
    return mean(sqrt(mul(per_sample, g.constant(inv_area))));
}

} // namespace

void LossWeights::validate() const
{
    for (double v : {rec, tv, sym, gan, id}) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw InvalidArgument("loss weights must be finite and nonnegative");
        }
    }
}

Var param_distance_loss(const Var& p, const Var& p_g, const Eigen::VectorXd& weights)
{
    same_shape(p, p_g, "param_distance_loss");
    const Shape& s = p.shape();
    if (s.size() != 2 || s[1] != static_cast<std::size_t>(weights.size())) {
        throw ShapeError("param_distance_loss: coefficients " + to_string(s) + " do not match " +
                         std::to_string(weights.size()) + " weights");
    }
    if ((weights.array() < 0.0).any()) {
        throw InvalidArgument("param_distance_loss: weights must be nonnegative");
    }
    Tensor w(s);
    for (std::size_t b = 0; b < s[0]; ++b) {
        for (std::size_t i = 0; i < s[1]; ++i) {
            w[b * s[1] + i] = weights[static_cast<Eigen::Index>(i)];
        }
    }
    Graph& g = *p.graph();
    return mean(sum(mul(square(sub(p, p_g)), g.constant(std::move(w))), 1));
}

Var rec_loss(const Var& x_f, const Var& x_g)
{
    same_shape(x_f, x_g, "rec_loss");
    return mean(abs(sub(x_f, x_g)));
}

Var tv_loss(const Var& x_f, double eps)
{
    const Shape& s = x_f.shape();
    if (s.size() != 4 || s[2] < 2 || s[3] < 2) {
        throw ShapeError("tv_loss: expected [B,C,H,W] with H,W >= 2, got " + to_string(s));
    }
    const Var dx = forward_diff(x_f, 0), dy = forward_diff(x_f, 1);
    Graph& g = *x_f.graph();
    const Var energy = add(add(square(dx), square(dy)), filled_like(g, dx.shape(), eps));
    return mean(sqrt(energy));
}

SymmetryMasks masks_from(const std::vector<VisibilityMask>& mask, const std::vector<VisibilityMask>& mask_flip)
{
    if (mask.size() != mask_flip.size()) {
        throw ShapeError("symmetry masks: batch sizes differ");
    }
    SymmetryMasks out;
    out.mask = stack_masks(mask, out.area);
    out.mask_flip = stack_masks(mask_flip, out.area_flip);
    return out;
}

SymmetryMasks symmetry_masks(const MorphableModel& model, const std::vector<Coeffs>& p, std::size_t image_size)
{
    std::vector<VisibilityMask> m, mf;
    for (const Coeffs& c : p) {
        m.push_back(visibility_mask(model, c, image_size, image_size));
        mf.push_back(visibility_mask(model, flip_coeffs(c, image_size), image_size, image_size));
    }
    return masks_from(m, mf);
}

Var sym_loss(const Var& g_x, const Var& g_x_flip, const SymmetryMasks& masks)
{
    same_shape(g_x, g_x_flip, "sym_loss");
    if (g_x.shape() != masks.mask.shape() || g_x.shape() != masks.mask_flip.shape()) {
        throw ShapeError("sym_loss: images " + to_string(g_x.shape()) + " do not match masks " +
                         to_string(masks.mask.shape()));
    }
    Graph& g = *g_x.graph();
    const Var diff = sub(g_x, g_x_flip);
    return add(masked_rms(g, diff, masks.mask, masks.area), masked_rms(g, diff, masks.mask_flip, masks.area_flip));
}

Var d_loss(const Var& logits_real, const Var& logits_generated)
{
    require_batch(logits_real, "d_loss");
    require_batch(logits_generated, "d_loss");
    const std::vector<std::size_t> real(logits_real.shape()[0], 0);
    const std::vector<std::size_t> generated(logits_generated.shape()[0], 1);
    return add(mean(softmax_xent(logits_real, real)), mean(softmax_xent(logits_generated, generated)));
}

Var g_gan_loss(const Var& logits_generated)
{
    require_batch(logits_generated, "g_gan_loss");
    return mean(softmax_xent(logits_generated, std::vector<std::size_t>(logits_generated.shape()[0], 0)));
}

Var c_loss(const Var& logits, const std::vector<std::size_t>& labels)
{
    require_batch(logits, "c_loss");
    return mean(softmax_xent(logits, labels));
}

Var g_id_loss(const Var& logits_f, const std::vector<std::size_t>& labels)
{
    return c_loss(logits_f, labels);
}

Var g_id_loss(const Var& h_f, const Var& h)
{
    same_shape(h_f, h, "g_id_loss");
    require_batch(h_f, "g_id_loss");
    return mean(square(sub(h_f, h)));
}

Var total_g_loss(Graph& graph, const LossWeights& weights, const GeneratorTerms& terms)
{
    weights.validate();
    std::optional<Var> total;
    const auto accumulate = [&total](const std::optional<Var>& term, double lambda) {
        if (!term || lambda == 0.0) {
            return;
        }
        const Var weighted = lambda == 1.0 ? *term : scale(*term, lambda);
        total = total ? add(*total, weighted) : weighted;
    };
    accumulate(terms.rec, weights.rec);
    accumulate(terms.tv, weights.tv);
    accumulate(terms.sym, weights.sym);
    accumulate(terms.gan, weights.gan);
    accumulate(terms.id, weights.id);
    return total ? *total : graph.constant(Tensor::scalar(0.0));
}

} // namespace ffgan
