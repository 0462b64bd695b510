#include "ffgan/graph.hpp"

#include "ffgan/error.hpp"
#include "gemm.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <string>

namespace ffgan {

namespace {

constexpr std::array<std::string_view, 24> kOpNames = {
    "leaf",   "constant", "add",    "sub",          "mul",          "scale",   "matmul", "conv2d",
    "upsample2x", "leaky_relu", "relu", "tanh",     "sigmoid",      "mean",    "sum",    "abs",
    "square", "sqrt",     "concat", "slice",        "flip_w",       "softmax_xent", "forward_diff", "reshape",
};
constexpr std::size_t kOpCount = kOpNames.size();

[[noreturn]] void shape_fail(Op op, const Shape& a, const Shape& b, const std::string& detail = {})
{
    throw ShapeError(std::string(op_name(op)) + ": incompatible shapes " + to_string(a) + " and " + to_string(b) +
                     (detail.empty() ? "" : " (" + detail + ")"));
}

void require_rank(Op op, const Tensor& t, std::size_t rank)
{
    if (t.rank() != rank) {
        throw ShapeError(std::string(op_name(op)) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(t.shape()));
    }
}

struct ConvGeometry {
    std::size_t batch, in_ch, in_h, in_w, out_ch, k, out_h, out_w;
    int stride, pad;

    std::size_t col_rows() const { return in_ch * k * k; }
    std::size_t col_cols() const { return out_h * out_w; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, int stride, int pad)
{
    require_rank(Op::conv2d, x, 4);
    require_rank(Op::conv2d, w, 4);
    if (w.dim(1) != x.dim(1) || w.dim(2) != w.dim(3)) {
        shape_fail(Op::conv2d, x.shape(), w.shape(), "channel or kernel mismatch");
    }
    if (stride < 1 || pad < 0) {
        throw InvalidArgument("conv2d: stride must be >= 1 and pad >= 0");
    }
    ConvGeometry g{};
    g.batch = x.dim(0);
    g.in_ch = x.dim(1);
    g.in_h = x.dim(2);
    g.in_w = x.dim(3);
    g.out_ch = w.dim(0);
    g.k = w.dim(2);
    g.stride = stride;
    g.pad = pad;
    const long eff_h = static_cast<long>(g.in_h) + 2L * pad - static_cast<long>(g.k);
    const long eff_w = static_cast<long>(g.in_w) + 2L * pad - static_cast<long>(g.k);
    if (eff_h < 0 || eff_w < 0) {
        shape_fail(Op::conv2d, x.shape(), w.shape(), "kernel larger than padded input");
    }
    g.out_h = static_cast<std::size_t>(eff_h / stride + 1);
    g.out_w = static_cast<std::size_t>(eff_w / stride + 1);
    return g;
}

// cols[(c*k+ky)*k+kx][oy*out_w+ox] for one image
void im2col(const ConvGeometry& g, const double* image, double* cols)
{
    const long in_h = static_cast<long>(g.in_h);
    const long in_w = static_cast<long>(g.in_w);
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        const double* plane = image + c * g.in_h * g.in_w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* row = cols + ((c * g.k + ky) * g.k + kx) * g.col_cols();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
                        row[oy * g.out_w + ox] =
                            (iy >= 0 && iy < in_h && ix >= 0 && ix < in_w) ? plane[iy * in_w + ix] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* image)
{
    const long in_h = static_cast<long>(g.in_h);
    const long in_w = static_cast<long>(g.in_w);
    for (std::size_t c = 0; c < g.in_ch; ++c) {
        double* plane = image + c * g.in_h * g.in_w;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* row = cols + ((c * g.k + ky) * g.k + kx) * g.col_cols();
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long iy = static_cast<long>(oy) * g.stride - g.pad + static_cast<long>(ky);
                    if (iy < 0 || iy >= in_h) {
                        continue;
                    }
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long ix = static_cast<long>(ox) * g.stride - g.pad + static_cast<long>(kx);
                        if (ix >= 0 && ix < in_w) {
                            plane[iy * in_w + ix] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

Tensor conv_forward(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int pad)
{
    const ConvGeometry g = conv_geometry(x, w, stride, pad);
    if (bias != nullptr && (bias->rank() != 1 || bias->dim(0) != g.out_ch)) {
        shape_fail(Op::conv2d, w.shape(), bias->shape(), "bias");
    }
    Tensor out(Shape{g.batch, g.out_ch, g.out_h, g.out_w});
    std::vector<double> cols(g.col_rows() * g.col_cols());
    const std::size_t in_stride = g.in_ch * g.in_h * g.in_w;
    const std::size_t out_stride = g.out_ch * g.col_cols();
    for (std::size_t b = 0; b < g.batch; ++b) {
        im2col(g, x.data().data() + b * in_stride, cols.data());
        double* y = out.data().data() + b * out_stride;
        if (bias != nullptr) {
            for (std::size_t o = 0; o < g.out_ch; ++o) {
                std::fill(y + o * g.col_cols(), y + (o + 1) * g.col_cols(), (*bias)[o]);
            }
        }
        detail::gemm_nn(g.out_ch, g.col_cols(), g.col_rows(), w.data().data(), cols.data(), y);
    }
    return out;
}

struct Reduction {
    std::size_t outer;
    std::size_t inner;
    Shape out_shape;
};

Reduction reduction(Op op, const Shape& shape, std::size_t keep_leading)
{
    if (keep_leading > shape.size()) {
        throw ShapeError(std::string(op_name(op)) + ": keep_leading " + std::to_string(keep_leading) +
                         " exceeds rank of " + to_string(shape));
    }
    Shape out(shape.begin(), shape.begin() + static_cast<long>(keep_leading));
    const std::size_t outer = numel(out);
    const std::size_t total = numel(shape);
    return {outer, outer == 0 ? 0 : total / outer, out};
}

// Number of elements past axis 1 and the extent of axis 1, for concat/slice.
std::pair<std::size_t, std::size_t> channel_layout(const Shape& s)
{
    std::size_t inner = 1;
    for (std::size_t i = 2; i < s.size(); ++i) {
        inner *= s[i];
    }
    return {s[1], inner};
}

template <class F>
Tensor map_unary(const Tensor& x, F f)
{
    Tensor out(x.shape());
    auto in = x.data();
    auto o = out.data();
    for (std::size_t i = 0; i < in.size(); ++i) {
        o[i] = f(in[i]);
    }
    return out;
}

void accumulate(std::optional<Tensor>& slot, Tensor contribution)
{
    if (!slot) {
        slot = std::move(contribution);
        return;
    }
    auto dst = slot->data();
    auto src = contribution.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

} // namespace

std::string_view op_name(Op op)
{
    const auto index = static_cast<std::size_t>(op);
    return index < kOpCount ? kOpNames[index] : std::string_view("unknown");
}

Op op_from_name(std::string_view name)
{
    for (std::size_t i = 0; i < kOpCount; ++i) {
        if (kOpNames[i] == name) {
            return static_cast<Op>(i);
        }
    }
    throw InvalidArgument("unknown op kind '" + std::string(name) + "'");
}

const Tensor& Var::value() const
{
    if (graph_ == nullptr) {
        throw InvalidArgument("var: not attached to a graph");
    }
    return graph_->value(id_);
}

const Tensor& Gradients::operator[](const Var& leaf) const
{
    if (leaf.graph() != graph_ || leaf.id() >= by_node_.size() || !by_node_[leaf.id()]) {
        throw InvalidArgument("gradients: var is not a parameter leaf of this graph");
    }
    return *by_node_[leaf.id()];
}

bool Gradients::has(const Var& leaf) const
{
    return leaf.graph() == graph_ && leaf.id() < by_node_.size() && by_node_[leaf.id()].has_value();
}

Var Graph::push(Node node)
{
    if (nodes_.size() >= std::numeric_limits<NodeId>::max()) {
        throw InvalidArgument("graph: node limit reached");
    }
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<NodeId>(nodes_.size() - 1));
}

Var Graph::parameter(Tensor value)
{
    return push(Node{Op::leaf, {}, {}, std::move(value), true});
}

Var Graph::constant(Tensor value)
{
    return push(Node{Op::constant, {}, {}, std::move(value), false});
}

Var Graph::detach(const Var& v)
{
    check_owned(v, Op::constant);
    return constant(nodes_[v.id()].value);
}

void Graph::check_owned(const Var& v, Op op) const
{
    if (v.graph() != this || v.id() >= nodes_.size()) {
        throw InvalidArgument(std::string(op_name(op)) + ": input does not belong to this graph");
    }
}

void Graph::reset()
{
    nodes_.clear();
    backward_done_ = false;
}

Var Graph::record(Op op, const std::vector<Var>& inputs, const Attrs& attrs)
{
    if (static_cast<std::size_t>(op) >= kOpCount) {
        throw InvalidArgument("record: unknown op kind " + std::to_string(static_cast<int>(op)));
    }
    if (op == Op::leaf || op == Op::constant) {
        throw InvalidArgument("record: leaves are created with parameter() or constant()");
    }
    for (const Var& v : inputs) {
        check_owned(v, op);
    }
    auto arity = [&](std::size_t lo, std::size_t hi) {
        if (inputs.size() < lo || inputs.size() > hi) {
            throw InvalidArgument(std::string(op_name(op)) + ": wrong number of inputs (" +
                                  std::to_string(inputs.size()) + ")");
        }
    };
    auto in = [&](std::size_t i) -> const Tensor& { return nodes_[inputs[i].id()].value; };

    Tensor out;
    switch (op) {
    case Op::add:
    case Op::sub:
    case Op::mul: {
        arity(2, 2);
        if (in(0).shape() != in(1).shape()) {
            shape_fail(op, in(0).shape(), in(1).shape());
        }
        out = Tensor(in(0).shape());
        auto a = in(0).data();
        auto b = in(1).data();
        auto o = out.data();
        for (std::size_t i = 0; i < o.size(); ++i) {
            o[i] = op == Op::add ? a[i] + b[i] : op == Op::sub ? a[i] - b[i] : a[i] * b[i];
        }
        break;
    }
    case Op::scale:
        arity(1, 1);
        out = map_unary(in(0), [s = attrs.scalar](double v) { return s * v; });
        break;
    case Op::matmul: {
        arity(2, 3);
        require_rank(op, in(0), 2);
        require_rank(op, in(1), 2);
        const std::size_t m = in(0).dim(0), k = in(0).dim(1), n = in(1).dim(1);
        if (in(1).dim(0) != k) {
            shape_fail(op, in(0).shape(), in(1).shape());
        }
        out = Tensor(Shape{m, n});
        if (inputs.size() == 3) {
            if (in(2).shape() != Shape{n}) {
                shape_fail(op, in(1).shape(), in(2).shape(), "bias");
            }
            for (std::size_t i = 0; i < m; ++i) {
                std::copy(in(2).data().begin(), in(2).data().end(), out.data().begin() + static_cast<long>(i * n));
            }
        }
        detail::gemm_nn(m, n, k, in(0).data().data(), in(1).data().data(), out.data().data());
        break;
    }
    case Op::conv2d:
        arity(2, 3);
        out = conv_forward(in(0), in(1), inputs.size() == 3 ? &in(2) : nullptr, attrs.stride, attrs.pad);
        break;
    case Op::upsample2x: {
        arity(1, 1);
        require_rank(op, in(0), 4);
        const auto& s = in(0).shape();
        const std::size_t h = s[2], w = s[3];
        out = Tensor(Shape{s[0], s[1], 2 * h, 2 * w});
        const std::size_t planes = s[0] * s[1];
        for (std::size_t p = 0; p < planes; ++p) {
            const double* src = in(0).data().data() + p * h * w;
            double* dst = out.data().data() + p * 4 * h * w;
            for (std::size_t y = 0; y < 2 * h; ++y) {
                for (std::size_t x = 0; x < 2 * w; ++x) {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        break;
    }
    case Op::leaky_relu:
        arity(1, 1);
        out = map_unary(in(0), [s = attrs.scalar](double v) { return v > 0.0 ? v : s * v; });
        break;
    case Op::relu:
        arity(1, 1);
        out = map_unary(in(0), [](double v) { return v > 0.0 ? v : 0.0; });
        break;
    case Op::tanh:
        arity(1, 1);
        out = map_unary(in(0), [](double v) { return std::tanh(v); });
        break;
    case Op::sigmoid:
        arity(1, 1);
        out = map_unary(in(0), [](double v) { return 1.0 / (1.0 + std::exp(-v)); });
        break;
    case Op::mean:
    case Op::sum: {
        arity(1, 1);
        const Reduction r = reduction(op, in(0).shape(), attrs.keep_leading);
        if (r.inner == 0) {
            throw ShapeError(std::string(op_name(op)) + ": reduction over empty extent " + to_string(in(0).shape()));
        }
        out = Tensor(r.out_shape);
        auto src = in(0).data();
        for (std::size_t o = 0; o < r.outer; ++o) {
            double acc = 0.0;
            for (std::size_t i = 0; i < r.inner; ++i) {
                acc += src[o * r.inner + i];
            }
            out[o] = op == Op::mean ? acc / static_cast<double>(r.inner) : acc;
        }
        break;
    }
    case Op::abs:
        arity(1, 1);
        out = map_unary(in(0), [](double v) { return std::fabs(v); });
        break;
    case Op::square:
        arity(1, 1);
        out = map_unary(in(0), [](double v) { return v * v; });
        break;
    case Op::sqrt:
        arity(1, 1);
        for (double v : in(0).data()) {
            if (v < 0.0) {
                throw InvalidArgument("sqrt: negative input " + std::to_string(v));
            }
        }
        out = map_unary(in(0), [](double v) { return std::sqrt(v); });
        break;
    case Op::concat: {
        arity(1, inputs.size());
        const Shape& first = in(0).shape();
        if (first.size() < 2) {
            throw ShapeError("concat: inputs need rank >= 2, got " + to_string(first));
        }
        Shape out_shape = first;
        out_shape[1] = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            Shape a = in(i).shape();
            if (a.size() != first.size()) {
                shape_fail(op, first, a);
            }
            out_shape[1] += a[1];
            a[1] = first[1];
            if (a != first) {
                shape_fail(op, first, in(i).shape());
            }
        }
        out = Tensor(out_shape);
        const auto [total_ch, inner] = channel_layout(out_shape);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            const std::size_t ch = in(i).dim(1);
            for (std::size_t b = 0; b < out_shape[0]; ++b) {
                const double* src = in(i).data().data() + b * ch * inner;
                std::copy(src, src + ch * inner, out.data().data() + (b * total_ch + offset) * inner);
            }
            offset += ch;
        }
        break;
    }
    case Op::slice: {
        arity(1, 1);
        const Shape& s = in(0).shape();
        if (s.size() < 2 || attrs.begin >= attrs.end || attrs.end > s[1]) {
            throw ShapeError("slice: range [" + std::to_string(attrs.begin) + "," + std::to_string(attrs.end) +
                             ") invalid for shape " + to_string(s));
        }
        Shape out_shape = s;
        out_shape[1] = attrs.end - attrs.begin;
        out = Tensor(out_shape);
        const auto [ch, inner] = channel_layout(s);
        const std::size_t width = out_shape[1] * inner;
        for (std::size_t b = 0; b < s[0]; ++b) {
            const double* src = in(0).data().data() + (b * ch + attrs.begin) * inner;
            std::copy(src, src + width, out.data().data() + b * width);
        }
        break;
    }
    case Op::flip_w: {
        arity(1, 1);
        const Shape& s = in(0).shape();
        if (s.empty()) {
            throw ShapeError("flip_w: scalar input");
        }
        const std::size_t w = s.back();
        out = Tensor(s);
        auto src = in(0).data();
        auto dst = out.data();
        for (std::size_t row = 0; row < src.size() / std::max<std::size_t>(w, 1); ++row) {
            for (std::size_t x = 0; x < w; ++x) {
                dst[row * w + x] = src[row * w + (w - 1 - x)];
            }
        }
        break;
    }
    case Op::softmax_xent: {
        arity(1, 1);
        require_rank(op, in(0), 2);
        const std::size_t batch = in(0).dim(0), classes = in(0).dim(1);
        if (attrs.labels.size() != batch) {
            throw ShapeError("softmax_xent: " + std::to_string(attrs.labels.size()) + " labels for logits " +
                             to_string(in(0).shape()));
        }
        out = Tensor(Shape{batch});
        const double floor_loss = -std::log(attrs.log_floor);
        for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t y = attrs.labels[b];
            if (y >= classes) {
                throw InvalidArgument("softmax_xent: label " + std::to_string(y) + " out of range");
            }
            const double* z = in(0).data().data() + b * classes;
            const double zmax = *std::max_element(z, z + classes);
            double s = 0.0;
            for (std::size_t j = 0; j < classes; ++j) {
                s += std::exp(z[j] - zmax);
            }
            out[b] = std::min(std::log(s) - (z[y] - zmax), floor_loss);
        }
        break;
    }
    case Op::forward_diff: {
        arity(1, 1);
        require_rank(op, in(0), 4);
        const auto& s = in(0).shape();
        if (s[2] < 2 || s[3] < 2) {
            throw ShapeError("forward_diff: image smaller than 2x2: " + to_string(s));
        }
        if (attrs.axis != 0 && attrs.axis != 1) {
            throw InvalidArgument("forward_diff: axis must be 0 (dx) or 1 (dy)");
        }
        const std::size_t h = s[2], w = s[3];
        out = Tensor(Shape{s[0], s[1], h - 1, w - 1});
        const std::size_t step = attrs.axis == 0 ? 1 : w;
        for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
            const double* src = in(0).data().data() + p * h * w;
            double* dst = out.data().data() + p * (h - 1) * (w - 1);
            for (std::size_t y = 0; y + 1 < h; ++y) {
                for (std::size_t x = 0; x + 1 < w; ++x) {
                    dst[y * (w - 1) + x] = src[y * w + x + step] - src[y * w + x];
                }
            }
        }
        break;
    }
    case Op::reshape:
        arity(1, 1);
        if (numel(attrs.shape) != in(0).size()) {
            shape_fail(op, in(0).shape(), attrs.shape);
        }
        out = in(0).reshaped(attrs.shape);
        break;
    default:
        throw InvalidArgument("record: unhandled op kind " + std::string(op_name(op)));
    }

    bool needs_grad = false;
    std::vector<NodeId> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
        needs_grad = needs_grad || nodes_[v.id()].requires_grad;
        ids.push_back(v.id());
    }
    return push(Node{op, std::move(ids), attrs, std::move(out), needs_grad});
}

void Graph::backprop_node(const Node& node, const Tensor& grad, std::vector<std::optional<Tensor>>& grads) const
{
    auto in = [&](std::size_t i) -> const Tensor& { return nodes_[node.inputs[i]].value; };
    auto wants = [&](std::size_t i) { return nodes_[node.inputs[i]].requires_grad; };
    auto give = [&](std::size_t i, Tensor g) { accumulate(grads[node.inputs[i]], std::move(g)); };
    auto elementwise = [&](std::size_t i, auto df) {
        if (!wants(i)) {
            return;
        }
        Tensor g(in(i).shape());
        auto x = in(i).data();
        auto y = node.value.data();
        auto go = grad.data();
        auto d = g.data();
        for (std::size_t j = 0; j < d.size(); ++j) {
            d[j] = go[j] * df(x[j], y[j]);
        }
        give(i, std::move(g));
    };

    switch (node.op) {
    case Op::add:
        for (std::size_t i = 0; i < 2; ++i) {
            if (wants(i)) {
                give(i, grad);
            }
        }
        break;
    case Op::sub:
        if (wants(0)) {
            give(0, grad);
        }
        if (wants(1)) {
            give(1, map_unary(grad, [](double v) { return -v; }));
        }
        break;
    case Op::mul:
        for (std::size_t i = 0; i < 2; ++i) {
            if (!wants(i)) {
                continue;
            }
            Tensor g(grad.shape());
            auto other = in(1 - i).data();
            for (std::size_t j = 0; j < g.size(); ++j) {
                g[j] = grad[j] * other[j];
            }
            give(i, std::move(g));
        }
        break;
    case Op::scale:
        if (wants(0)) {
            give(0, map_unary(grad, [s = node.attrs.scalar](double v) { return s * v; }));
        }
        break;
    case Op::matmul: {
        const std::size_t m = in(0).dim(0), k = in(0).dim(1), n = in(1).dim(1);
        if (wants(0)) {
            std::vector<double> bt(n * k);
            detail::transpose(k, n, in(1).data().data(), bt.data());
            Tensor g(in(0).shape());
            detail::gemm_nn(m, k, n, grad.data().data(), bt.data(), g.data().data());
            give(0, std::move(g));
        }
        if (wants(1)) {
            Tensor g(in(1).shape());
            detail::gemm_tn(k, n, m, in(0).data().data(), grad.data().data(), g.data().data());
            give(1, std::move(g));
        }
        if (node.inputs.size() == 3 && wants(2)) {
            Tensor g(in(2).shape());
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    g[j] += grad[i * n + j];
                }
            }
            give(2, std::move(g));
        }
        break;
    }
    case Op::conv2d: {
        const ConvGeometry g = conv_geometry(in(0), in(1), node.attrs.stride, node.attrs.pad);
        const std::size_t rows = g.col_rows(), cols_n = g.col_cols();
        const std::size_t in_stride = g.in_ch * g.in_h * g.in_w;
        const std::size_t out_stride = g.out_ch * cols_n;
        const bool want_x = wants(0), want_w = wants(1);
        const bool want_b = node.inputs.size() == 3 && wants(2);
        Tensor gx = want_x ? Tensor(in(0).shape()) : Tensor();
        Tensor gw = want_w ? Tensor(in(1).shape()) : Tensor();
        Tensor gb = want_b ? Tensor(in(2).shape()) : Tensor();
        std::vector<double> cols(rows * cols_n), cols_t(rows * cols_n), dcols(rows * cols_n);
        for (std::size_t b = 0; b < g.batch; ++b) {
            const double* dy = grad.data().data() + b * out_stride;
            if (want_w) {
                im2col(g, in(0).data().data() + b * in_stride, cols.data());
                detail::transpose(rows, cols_n, cols.data(), cols_t.data());
                detail::gemm_nn(g.out_ch, rows, cols_n, dy, cols_t.data(), gw.data().data());
            }
            if (want_x) {
                std::fill(dcols.begin(), dcols.end(), 0.0);
                detail::gemm_tn(rows, cols_n, g.out_ch, in(1).data().data(), dy, dcols.data());
                col2im_add(g, dcols.data(), gx.data().data() + b * in_stride);
            }
            if (want_b) {
                for (std::size_t o = 0; o < g.out_ch; ++o) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < cols_n; ++j) {
                        acc += dy[o * cols_n + j];
                    }
                    gb[o] += acc;
                }
            }
        }
        if (want_x) {
            give(0, std::move(gx));
        }
        if (want_w) {
            give(1, std::move(gw));
        }
        if (want_b) {
            give(2, std::move(gb));
        }
        break;
    }
    case Op::upsample2x: {
        if (!wants(0)) {
            break;
        }
        const auto& s = in(0).shape();
        const std::size_t h = s[2], w = s[3];
        Tensor g(s);
        for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
            const double* src = grad.data().data() + p * 4 * h * w;
            double* dst = g.data().data() + p * h * w;
            for (std::size_t y = 0; y < 2 * h; ++y) {
                for (std::size_t x = 0; x < 2 * w; ++x) {
                    dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
                }
            }
        }
        give(0, std::move(g));
        break;
    }
    case Op::leaky_relu:
        elementwise(0, [s = node.attrs.scalar](double x, double) { return x > 0.0 ? 1.0 : s; });
        break;
    case Op::relu:
        elementwise(0, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
        break;
    case Op::tanh:
        elementwise(0, [](double, double y) { return 1.0 - y * y; });
        break;
    case Op::sigmoid:
        elementwise(0, [](double, double y) { return y * (1.0 - y); });
        break;
    case Op::abs:
        elementwise(0, [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
        break;
    case Op::square:
        elementwise(0, [](double x, double) { return 2.0 * x; });
        break;
    case Op::sqrt:
        // Subgradient 0 at the kink keeps zero-distance terms finite.
        elementwise(0, [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
        break;
    case Op::mean:
    case Op::sum: {
        if (!wants(0)) {
            break;
        }
        const Reduction r = reduction(node.op, in(0).shape(), node.attrs.keep_leading);
        const double factor = node.op == Op::mean ? 1.0 / static_cast<double>(r.inner) : 1.0;
        Tensor g(in(0).shape());
        for (std::size_t o = 0; o < r.outer; ++o) {
            std::fill_n(g.data().begin() + static_cast<long>(o * r.inner), r.inner, grad[o] * factor);
        }
        give(0, std::move(g));
        break;
    }
    case Op::concat: {
        const auto [total_ch, inner] = channel_layout(node.value.shape());
        const std::size_t batch = node.value.dim(0);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < node.inputs.size(); ++i) {
            const std::size_t ch = in(i).dim(1);
            if (wants(i)) {
                Tensor g(in(i).shape());
                for (std::size_t b = 0; b < batch; ++b) {
                    const double* src = grad.data().data() + (b * total_ch + offset) * inner;
                    std::copy(src, src + ch * inner, g.data().data() + b * ch * inner);
                }
                give(i, std::move(g));
            }
            offset += ch;
        }
        break;
    }
    case Op::slice: {
        if (!wants(0)) {
            break;
        }
        const auto [ch, inner] = channel_layout(in(0).shape());
        const std::size_t width = (node.attrs.end - node.attrs.begin) * inner;
        Tensor g(in(0).shape());
        for (std::size_t b = 0; b < in(0).dim(0); ++b) {
            const double* src = grad.data().data() + b * width;
            std::copy(src, src + width, g.data().data() + (b * ch + node.attrs.begin) * inner);
        }
        give(0, std::move(g));
        break;
    }
    case Op::flip_w: {
        if (!wants(0)) {
            break;
        }
        const std::size_t w = in(0).shape().back();
        Tensor g(in(0).shape());
        for (std::size_t row = 0; row < g.size() / std::max<std::size_t>(w, 1); ++row) {
            for (std::size_t x = 0; x < w; ++x) {
                g[row * w + x] = grad[row * w + (w - 1 - x)];
            }
        }
        give(0, std::move(g));
        break;
    }
    case Op::softmax_xent: {
        if (!wants(0)) {
            break;
        }
        const std::size_t batch = in(0).dim(0), classes = in(0).dim(1);
        const double floor_loss = -std::log(node.attrs.log_floor);
        Tensor g(in(0).shape());
        for (std::size_t b = 0; b < batch; ++b) {
            if (node.value[b] >= floor_loss) {
                continue; // clamped: flat
            }
            const double* z = in(0).data().data() + b * classes;
            const double zmax = *std::max_element(z, z + classes);
            double s = 0.0;
            for (std::size_t j = 0; j < classes; ++j) {
                s += std::exp(z[j] - zmax);
            }
            for (std::size_t j = 0; j < classes; ++j) {
                const double p = std::exp(z[j] - zmax) / s;
                g[b * classes + j] = grad[b] * (p - (j == node.attrs.labels[b] ? 1.0 : 0.0));
            }
        }
        give(0, std::move(g));
        break;
    }
    case Op::forward_diff: {
        if (!wants(0)) {
            break;
        }
        const auto& s = in(0).shape();
        const std::size_t h = s[2], w = s[3];
        const std::size_t step = node.attrs.axis == 0 ? 1 : w;
        Tensor g(s);
        for (std::size_t p = 0; p < s[0] * s[1]; ++p) {
            const double* src = grad.data().data() + p * (h - 1) * (w - 1);
            double* dst = g.data().data() + p * h * w;
            for (std::size_t y = 0; y + 1 < h; ++y) {
                for (std::size_t x = 0; x + 1 < w; ++x) {
                    const double v = src[y * (w - 1) + x];
                    dst[y * w + x + step] += v;
                    dst[y * w + x] -= v;
                }
            }
        }
        give(0, std::move(g));
        break;
    }
    case Op::reshape:
        if (wants(0)) {
            give(0, grad.reshaped(in(0).shape()));
        }
        break;
    case Op::leaf:
    case Op::constant:
        break;
    }
}

Gradients Graph::backward(const Var& loss)
{
    if (loss.graph() != this || loss.id() >= nodes_.size()) {
        throw InvalidArgument("backward: loss is not a node of this graph");
    }
    if (backward_done_) {
        throw InvalidArgument("backward: already called on this graph; reset() first");
    }
    const Tensor& loss_value = nodes_[loss.id()].value;
    if (loss_value.size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss_value.shape()));
    }
    backward_done_ = true;

    std::vector<std::optional<Tensor>> grads(nodes_.size());
    grads[loss.id()] = Tensor(loss_value.shape(), 1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        const Node& node = nodes_[i];
        if (!grads[i] || !node.requires_grad || node.op == Op::leaf) {
            continue;
        }
        backprop_node(node, *grads[i], grads);
        grads[i].reset();
    }

    Gradients out;
    out.graph_ = this;
    out.by_node_.resize(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        if (nodes_[i].op == Op::leaf) {
            out.by_node_[i] = grads[i] ? std::move(*grads[i]) : Tensor(nodes_[i].value.shape());
        }
    }
    return out;
}

namespace {

Graph& graph_of(const Var& v)
{
    if (!v.valid()) {
        throw InvalidArgument("operation on a detached var");
    }
    return *v.graph();
}

} // namespace

Var add(const Var& a, const Var& b) { return graph_of(a).record(Op::add, {a, b}); }
Var sub(const Var& a, const Var& b) { return graph_of(a).record(Op::sub, {a, b}); }
Var mul(const Var& a, const Var& b) { return graph_of(a).record(Op::mul, {a, b}); }

Var scale(const Var& a, double factor)
{
    Attrs attrs;
    attrs.scalar = factor;
    return graph_of(a).record(Op::scale, {a}, attrs);
}

Var matmul(const Var& a, const Var& b) { return graph_of(a).record(Op::matmul, {a, b}); }
Var matmul(const Var& a, const Var& b, const Var& bias) { return graph_of(a).record(Op::matmul, {a, b, bias}); }

Var conv2d(const Var& x, const Var& w, int stride, int pad)
{
    Attrs attrs;
    attrs.stride = stride;
    attrs.pad = pad;
    return graph_of(x).record(Op::conv2d, {x, w}, attrs);
}

Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad)
{
    Attrs attrs;
    attrs.stride = stride;
    attrs.pad = pad;
    return graph_of(x).record(Op::conv2d, {x, w, bias}, attrs);
}

Var upsample2x(const Var& x) { return graph_of(x).record(Op::upsample2x, {x}); }

Var leaky_relu(const Var& x, double slope)
{
    Attrs attrs;
    attrs.scalar = slope;
    return graph_of(x).record(Op::leaky_relu, {x}, attrs);
}

Var relu(const Var& x) { return graph_of(x).record(Op::relu, {x}); }
Var tanh(const Var& x) { return graph_of(x).record(Op::tanh, {x}); }
Var sigmoid(const Var& x) { return graph_of(x).record(Op::sigmoid, {x}); }

Var mean(const Var& x, std::size_t keep_leading)
{
    Attrs attrs;
    attrs.keep_leading = keep_leading;
    return graph_of(x).record(Op::mean, {x}, attrs);
}

Var sum(const Var& x, std::size_t keep_leading)
{
    Attrs attrs;
    attrs.keep_leading = keep_leading;
    return graph_of(x).record(Op::sum, {x}, attrs);
}

Var abs(const Var& x) { return graph_of(x).record(Op::abs, {x}); }
Var square(const Var& x) { return graph_of(x).record(Op::square, {x}); }
Var sqrt(const Var& x) { return graph_of(x).record(Op::sqrt, {x}); }

Var concat(const std::vector<Var>& parts)
{
    if (parts.empty()) {
        throw InvalidArgument("concat: no inputs");
    }
    return graph_of(parts.front()).record(Op::concat, parts);
}

Var slice(const Var& x, std::size_t begin, std::size_t end)
{
    Attrs attrs;
    attrs.begin = begin;
    attrs.end = end;
    return graph_of(x).record(Op::slice, {x}, attrs);
}

Var flip_w(const Var& x) { return graph_of(x).record(Op::flip_w, {x}); }

Var softmax_xent(const Var& logits, std::vector<std::size_t> labels, double log_floor)
{
    Attrs attrs;
    attrs.labels = std::move(labels);
    attrs.log_floor = log_floor;
    return graph_of(logits).record(Op::softmax_xent, {logits}, attrs);
}

Var forward_diff(const Var& x, int axis)
{
    Attrs attrs;
    attrs.axis = axis;
    return graph_of(x).record(Op::forward_diff, {x}, attrs);
}

Var reshape(const Var& x, Shape shape)
{
    Attrs attrs;
    attrs.shape = std::move(shape);
    return graph_of(x).record(Op::reshape, {x}, attrs);
}

} // namespace ffgan
