#include "ffgan/networks.hpp"

#include "ffgan/error.hpp"
#include "ffgan/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace ffgan {

namespace {

constexpr double kInitStd = 0.02;

std::size_t final_resolution(const Architecture& a, std::size_t stride2_layers)
{
    return a.image_size >> stride2_layers;
}

Shape conv_w(std::size_t out, std::size_t in) { return {out, in, 3, 3}; }

bool is_bias(const std::string& name) { return name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0; }

Var conv_block(const Bound& b, std::size_t& k, const Var& x, int stride, double slope)
{
    const Var& w = b.vars[k++];
    const Var& bias = b.vars[k++];
    return leaky_relu(conv2d(x, w, bias, stride, 1), slope);
}

void check_images(const Bound& b, const Var& x, const char* who)
{
    const Shape& s = x.shape();
    const std::size_t size = b.net->arch.image_size;
    if (s.size() != 4 || s[1] != 1 || s[2] != size || s[3] != size) {
        throw ShapeError(std::string(who) + ": expected [B,1," + std::to_string(size) + "," + std::to_string(size) +
                         "] images, got " + to_string(s));
    }
}

void check_kind(const Bound& b, NetKind kind)
{
    if (b.net == nullptr || b.net->arch.kind != kind) {
        throw InvalidArgument("forward: network bound is not a " + std::string(net_kind_name(kind)));
    }
}

[[noreturn]] void bad_content(const std::string& what)
{
    throw FormatError(FormatError::Kind::bad_content, what);
}

} // namespace

std::string_view net_kind_name(NetKind kind)
{
    switch (kind) {
    case NetKind::reconstructor: return "reconstructor";
    case NetKind::generator: return "generator";
    case NetKind::discriminator: return "discriminator";
    case NetKind::recognizer: return "recognizer";
    }
    return "unknown";
}

void Architecture::validate() const
{
    const auto fail = [this](const std::string& what) {
        throw InvalidArgument(std::string(net_kind_name(kind)) + " architecture: " + what);
    };
    if (std::find(widths.begin(), widths.end(), std::size_t{0}) != widths.end()) {
        fail("widths must be positive");
    }
    std::size_t stride2 = 0;
    switch (kind) {
    case NetKind::reconstructor:
        if (widths.empty() || coeff_dim == 0) fail("needs widths and coeff_dim");
        stride2 = widths.size();
        break;
    case NetKind::generator:
        if (widths.size() < 2 || coeff_dim == 0 || fusion_channels == 0) fail("needs >= 2 widths, coeff_dim and fusion_channels");
        stride2 = widths.size();
        break;
    case NetKind::discriminator:
        if (widths.size() != 5) fail("needs exactly five conv widths");
        stride2 = 3;
        break;
    case NetKind::recognizer:
        if (widths.empty() || n_identities == 0) fail("needs widths and n_identities");
        stride2 = widths.size();
        break;
    }
    if (image_size == 0 || (image_size >> stride2) == 0 || ((image_size >> stride2) << stride2) != image_size) {
        fail("image_size " + std::to_string(image_size) + " is not divisible by 2^" + std::to_string(stride2));
    }
    if (!(slope >= 0.0)) fail("slope must be nonnegative");
}

std::vector<std::pair<std::string, Shape>> Architecture::parameter_shapes() const
{
    validate();
    std::vector<std::pair<std::string, Shape>> out;
    const auto conv = [&out](const std::string& name, std::size_t o, std::size_t i) {
        out.emplace_back(name + ".w", conv_w(o, i));
        out.emplace_back(name + ".b", Shape{o});
    };
    const auto linear = [&out](const std::string& name, std::size_t i, std::size_t o) {
        out.emplace_back(name + ".w", Shape{i, o});
        out.emplace_back(name + ".b", Shape{o});
    };
    std::size_t in = 1;
    switch (kind) {
    case NetKind::reconstructor: {
        for (std::size_t l = 0; l < widths.size(); ++l) {
            conv("conv" + std::to_string(l), widths[l], in);
            in = widths[l];
        }
        const std::size_t r = final_resolution(*this, widths.size());
        linear("head", in * r * r, coeff_dim);
        break;
    }
    case NetKind::generator: {
        const std::size_t n = widths.size();
        for (std::size_t l = 0; l < n; ++l) {
            conv("enc" + std::to_string(l), widths[l], in);
            in = widths[l];
        }
        const std::size_t r = final_resolution(*this, n);
        linear("fuse", coeff_dim, fusion_channels * r * r);
        in += fusion_channels;
        for (std::size_t l = 0; l < n; ++l) {
            const std::size_t o = l + 1 < n ? widths[n - 1 - l] : 1;
            conv("dec" + std::to_string(l), o, in);
            in = o;
        }
        break;
    }
    case NetKind::discriminator: {
        for (std::size_t l = 0; l < widths.size(); ++l) {
            conv("conv" + std::to_string(l), widths[l], in);
            in = widths[l];
        }
        const std::size_t r = final_resolution(*this, 3);
        linear("head", in * r * r, 2);
        break;
    }
    case NetKind::recognizer: {
        for (std::size_t l = 0; l < widths.size(); ++l) {
            conv("conv" + std::to_string(l), widths[l], in);
            in = widths[l];
        }
        linear("head", in, n_identities);
        break;
    }
    }
    return out;
}

std::vector<double> Architecture::descriptor() const
{
    std::vector<double> d = {static_cast<double>(kind),         static_cast<double>(image_size),
                             static_cast<double>(coeff_dim),    static_cast<double>(n_identities),
                             static_cast<double>(fusion_channels), slope,
                             static_cast<double>(widths.size())};
    for (std::size_t w : widths) {
        d.push_back(static_cast<double>(w));
    }
    return d;
}

Architecture Architecture::from_descriptor(const std::vector<double>& d)
{
    const auto whole = [](double v) { return v >= 0.0 && v == std::floor(v) && v < 1e9; };
    if (d.size() < 7 || !whole(d[6]) || d.size() != 7 + static_cast<std::size_t>(d[6])) {
        bad_content("architecture descriptor has inconsistent length");
    }
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (i != 5 && !whole(d[i])) {
            bad_content("architecture descriptor entry " + std::to_string(i) + " is not a count");
        }
    }
    if (d[0] > 3) {
        bad_content("architecture descriptor has unknown network kind");
    }
    Architecture a;
    a.kind = static_cast<NetKind>(static_cast<int>(d[0]));
    a.image_size = static_cast<std::size_t>(d[1]);
    a.coeff_dim = static_cast<std::size_t>(d[2]);
    a.n_identities = static_cast<std::size_t>(d[3]);
    a.fusion_channels = static_cast<std::size_t>(d[4]);
    a.slope = d[5];
    for (std::size_t i = 7; i < d.size(); ++i) {
        a.widths.push_back(static_cast<std::size_t>(d[i]));
    }
    try {
        a.validate();
    } catch (const InvalidArgument& e) {
        bad_content(e.what());
    }
    return a;
}

Architecture reconstructor_arch(std::size_t image_size, std::size_t coeff_dim)
{
    Architecture a;
    a.kind = NetKind::reconstructor;
    a.image_size = image_size;
    a.coeff_dim = coeff_dim;
    a.widths = {8, 16, 32, 64};
    a.validate();
    return a;
}

Architecture generator_arch(std::size_t image_size, std::size_t coeff_dim)
{
    Architecture a;
    a.kind = NetKind::generator;
    a.image_size = image_size;
    a.coeff_dim = coeff_dim;
    a.widths = {8, 16, 32};
    a.validate();
    return a;
}

Architecture discriminator_arch(std::size_t image_size)
{
    Architecture a;
    a.kind = NetKind::discriminator;
    a.image_size = image_size;
    a.widths = {8, 16, 32, 32, 32};
    a.validate();
    return a;
}

Architecture recognizer_arch(std::size_t image_size, std::size_t n_identities)
{
    Architecture a;
    a.kind = NetKind::recognizer;
    a.image_size = image_size;
    a.n_identities = n_identities;
    a.widths = {8, 16, 32, 64};
    a.validate();
    return a;
}

std::size_t NetworkParams::numel() const
{
    std::size_t n = 0;
    for (const Tensor& t : tensors) {
        n += t.size();
    }
    return n;
}

std::uint64_t NetworkParams::hash() const
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const Tensor& t : tensors) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
        for (std::size_t i = 0; i < t.size() * sizeof(double); ++i) {
            h = (h ^ bytes[i]) * 0x100000001b3ULL;
        }
    }
    return h;
}

NetworkParams init_params(const Architecture& arch, std::uint64_t seed)
{
    NetworkParams net;
    net.arch = arch;
    Rng rng(seed);
    for (auto& [name, shape] : arch.parameter_shapes()) {
        Tensor t(shape);
        if (!is_bias(name)) {
            for (double& v : t.data()) {
                v = kInitStd * rng.normal();
            }
        }
        net.names.push_back(name);
        net.tensors.push_back(std::move(t));
    }
    return net;
}

Bound bind(Graph& graph, const NetworkParams& net, bool trainable)
{
    Bound b;
    b.net = &net;
    b.vars.reserve(net.tensors.size());
    for (const Tensor& t : net.tensors) {
        b.vars.push_back(trainable ? graph.parameter(t) : graph.constant(t));
    }
    return b;
}

Var forward_R(const Bound& r, const Var& x)
{
    check_kind(r, NetKind::reconstructor);
    check_images(r, x, "forward_R");
    const Architecture& a = r.net->arch;
    std::size_t k = 0;
    Var h = x;
    for (std::size_t l = 0; l < a.widths.size(); ++l) {
        h = conv_block(r, k, h, 2, a.slope);
    }
    const std::size_t batch = x.shape()[0];
    h = reshape(h, {batch, h.value().size() / batch});
    return matmul(h, r.vars[k], r.vars[k + 1]);
}

Var forward_G(const Bound& g, const Var& x, const Var& p)
{
    check_kind(g, NetKind::generator);
    check_images(g, x, "forward_G");
    const Architecture& a = g.net->arch;
    const std::size_t batch = x.shape()[0];
    if (p.shape() != Shape{batch, a.coeff_dim}) {
        throw ShapeError("forward_G: coefficients " + to_string(p.shape()) + " do not match images " +
                         to_string(x.shape()) + " and coeff_dim " + std::to_string(a.coeff_dim));
    }
    const std::size_t n = a.widths.size();
    std::size_t k = 0;
    Var h = x;
    for (std::size_t l = 0; l < n; ++l) {
        h = conv_block(g, k, h, 2, a.slope);
    }
    const std::size_t r = final_resolution(a, n);
    Var code = leaky_relu(matmul(p, g.vars[k], g.vars[k + 1]), a.slope);
    k += 2;
    code = reshape(code, {batch, a.fusion_channels, r, r});
    h = concat({h, code});
    for (std::size_t l = 0; l < n; ++l) {
        const Var& w = g.vars[k++];
        const Var& bias = g.vars[k++];
        h = conv2d(upsample2x(h), w, bias, 1, 1);
        h = l + 1 < n ? leaky_relu(h, a.slope) : sigmoid(h);
    }
    return h;
}

Var forward_D(const Bound& d, const Var& x)
{
    check_kind(d, NetKind::discriminator);
    check_images(d, x, "forward_D");
    const Architecture& a = d.net->arch;
    std::size_t k = 0;
    Var h = x;
    for (std::size_t l = 0; l < a.widths.size(); ++l) {
        h = conv_block(d, k, h, l < 3 ? 2 : 1, a.slope);
    }
    const std::size_t batch = x.shape()[0];
    h = reshape(h, {batch, h.value().size() / batch});
    return matmul(h, d.vars[k], d.vars[k + 1]);
}

RecognizerOutput forward_C(const Bound& c, const Var& x)
{
    check_kind(c, NetKind::recognizer);
    check_images(c, x, "forward_C");
    const Architecture& a = c.net->arch;
    std::size_t k = 0;
    Var h = x;
    for (std::size_t l = 0; l < a.widths.size(); ++l) {
        h = conv_block(c, k, h, 2, a.slope);
    }
    RecognizerOutput out;
    out.h = mean(h, 2);
    out.logits = matmul(out.h, c.vars[k], c.vars[k + 1]);
    return out;
}

Tensor softmax_rows(const Tensor& logits)
{
    if (logits.rank() != 2) {
        throw ShapeError("softmax_rows: expected [B,K], got " + to_string(logits.shape()));
    }
    Tensor out(logits.shape());
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    for (std::size_t i = 0; i < rows; ++i) {
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < cols; ++j) {
            top = std::max(top, logits[i * cols + j]);
        }
        double total = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            out[i * cols + j] = std::exp(logits[i * cols + j] - top);
            total += out[i * cols + j];
        }
        for (std::size_t j = 0; j < cols; ++j) {
            out[i * cols + j] /= total;
        }
    }
    return out;
}

std::vector<Record> params_records(const NetworkParams& net, const std::string& prefix)
{
    const std::vector<double> d = net.arch.descriptor();
    std::vector<Record> out;
    out.push_back({prefix + "/arch", Tensor({d.size()}, d)});
    for (std::size_t i = 0; i < net.tensors.size(); ++i) {
        out.push_back({prefix + "/" + net.names[i], net.tensors[i]});
    }
    return out;
}

NetworkParams params_from_records(const std::vector<Record>& records, const std::string& prefix)
{
    NetworkParams net;
    net.arch = Architecture::from_descriptor(find_record(records, prefix + "/arch").values());
    for (auto& [name, shape] : net.arch.parameter_shapes()) {
        const Tensor& t = find_record(records, prefix + "/" + name);
        if (t.shape() != shape) {
            bad_content("record '" + prefix + "/" + name + "' has shape " + to_string(t.shape()) + ", expected " +
                        to_string(shape));
        }
        net.names.push_back(name);
        net.tensors.push_back(t);
    }
    return net;
}

} // namespace ffgan
