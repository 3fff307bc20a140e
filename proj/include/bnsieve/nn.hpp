#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "bnsieve/autograd.hpp"
#include "bnsieve/binary_io.hpp"
#include "bnsieve/error.hpp"
#include "bnsieve/kernels.hpp"
#include "bnsieve/rng.hpp"
#include "bnsieve/tensor.hpp"

namespace bnsieve {

enum class Mode { train, inference };

/// Which activation the defense statistics are read from.
enum class BnTap { input, output };

struct ConvLayer {
    Tensor weight;  // O x I x K x K
    Tensor bias;    // O
    kernels::Conv2dSpec spec{1, 1};
};

struct BatchNormLayer {
    std::size_t channels = 0;
    Tensor running_mean;
    Tensor running_var;
    Tensor scale;
    Tensor shift;
    double momentum = 0.1;
    double eps = 1e-5;

    /// Per-channel (a, b) with inference output a*x + b.
    [[nodiscard]] std::pair<Tensor, Tensor> inference_affine() const {
        Tensor a(Shape{channels}), b(Shape{channels});
        for (std::size_t c = 0; c < channels; ++c) {
            a[c] = scale[c] / std::sqrt(running_var[c] + eps);
            b[c] = shift[c] - running_mean[c] * a[c];
        }
        return {a, b};
    }

    void update_running(const kernels::ChannelStats& batch) {
        for (std::size_t c = 0; c < channels; ++c) {
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * batch.mean[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * batch.var[c];
        }
    }
};

struct ReluLayer {};
struct AvgPoolLayer {
    std::size_t size = 2;
};
struct FlattenLayer {};

/// y = x W + b with W stored in x out.
struct LinearLayer {
    Tensor weight;
    Tensor bias;

    [[nodiscard]] std::size_t in_features() const { return weight.dim(0); }
    [[nodiscard]] std::size_t out_features() const { return weight.dim(1); }
};

using Layer = std::variant<ConvLayer, BatchNormLayer, ReluLayer, AvgPoolLayer, FlattenLayer, LinearLayer>;

inline std::string layer_kind(const Layer& l) {
    return std::visit(
        [](const auto& x) -> std::string {
            using T = std::decay_t<decltype(x)>;
            if constexpr (std::is_same_v<T, ConvLayer>) return "conv";
            else if constexpr (std::is_same_v<T, BatchNormLayer>) return "bn";
            else if constexpr (std::is_same_v<T, ReluLayer>) return "relu";
            else if constexpr (std::is_same_v<T, AvgPoolLayer>) return "pool";
            else if constexpr (std::is_same_v<T, FlattenLayer>) return "flatten";
            else return "linear";
        },
        l);
}

/// Graph leaves bound to a model's parameters, aligned with `parameters()`.
struct ParamVars {
    std::vector<Var> vars;
};

namespace detail {

inline Var linear_forward(Graph& g, Var x, Var w, Var b) {
    Var y = matmul(x, w);
    Var ones = g.constant(Tensor(b.shape(), 1.0));
    return affine_scale_shift(y, ones, b);
}

inline Tensor linear_infer(const Tensor& x, const LinearLayer& l) {
    Tensor y = kernels::matmul(x, l.weight);
    const std::size_t out = l.out_features();
    for (std::size_t r = 0; r < y.dim(0); ++r)
        for (std::size_t j = 0; j < out; ++j) y[r * out + j] += l.bias[j];
    return y;
}

inline LinearLayer make_linear(std::size_t in, std::size_t out, Rng& rng, double gain) {
    return LinearLayer{Tensor::randn(Shape{in, out}, rng, std::sqrt(gain / static_cast<double>(in))), Tensor(Shape{out})};
}

}  // namespace detail

struct ArchDescriptor {
    std::string name = "TinyConvBN-4";
    std::size_t in_channels = 3;
    std::size_t side = 16;
};

struct ForwardOptions {
    Mode mode = Mode::inference;
    std::vector<Var>* bn_inputs = nullptr;
    std::vector<Var>* bn_outputs = nullptr;
    /// Train mode only: per-BN-layer batch statistics, for the running-stat update.
    std::vector<kernels::ChannelStats>* batch_stats = nullptr;
};

/// Convolutional extractor: conv/BN/ReLU/pool blocks, flatten, and a linear feature layer.
class FeatureExtractor {
public:
    FeatureExtractor() = default;
    FeatureExtractor(ArchDescriptor arch, std::vector<Layer> layers) : arch_(std::move(arch)), layers_(std::move(layers)) {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            if (std::holds_alternative<BatchNormLayer>(layers_[i])) bn_indices_.push_back(i);
    }

    [[nodiscard]] const ArchDescriptor& arch() const { return arch_; }
    [[nodiscard]] const std::vector<Layer>& layers() const { return layers_; }
    [[nodiscard]] std::vector<Layer>& layers() { return layers_; }
    [[nodiscard]] const std::vector<std::size_t>& bn_indices() const { return bn_indices_; }
    [[nodiscard]] std::size_t bn_count() const { return bn_indices_.size(); }
    [[nodiscard]] bool frozen() const { return frozen_; }
    void freeze() { frozen_ = true; }
    void unfreeze() { frozen_ = false; }

    [[nodiscard]] const BatchNormLayer& bn(std::size_t i) const { return std::get<BatchNormLayer>(layers_.at(bn_indices_.at(i))); }
    BatchNormLayer& bn(std::size_t i) { return std::get<BatchNormLayer>(layers_.at(bn_indices_.at(i))); }

    [[nodiscard]] std::size_t feature_width() const {
        for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
            if (auto* l = std::get_if<LinearLayer>(&*it)) return l->out_features();
        throw ContractError("feature extractor has no linear feature layer");
    }

    /// Named parameters in a fixed order.
    [[nodiscard]] std::vector<std::pair<std::string, const Tensor*>> named_parameters() const {
        std::vector<std::pair<std::string, const Tensor*>> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const std::string p = "layer" + std::to_string(i) + ".";
            if (auto* c = std::get_if<ConvLayer>(&layers_[i])) {
                out.emplace_back(p + "weight", &c->weight);
                out.emplace_back(p + "bias", &c->bias);
            } else if (auto* b = std::get_if<BatchNormLayer>(&layers_[i])) {
                out.emplace_back(p + "scale", &b->scale);
                out.emplace_back(p + "shift", &b->shift);
            } else if (auto* l = std::get_if<LinearLayer>(&layers_[i])) {
                out.emplace_back(p + "weight", &l->weight);
                out.emplace_back(p + "bias", &l->bias);
            }
        }
        return out;
    }

    [[nodiscard]] std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for (auto& [name, t] : named_parameters()) out.push_back(const_cast<Tensor*>(t));
        return out;
    }

    /// Parameters plus BN running statistics.
    [[nodiscard]] std::vector<std::pair<std::string, const Tensor*>> named_state() const {
        auto out = named_parameters();
        for (auto idx : bn_indices_) {
            const auto& b = std::get<BatchNormLayer>(layers_[idx]);
            const std::string p = "layer" + std::to_string(idx) + ".";
            out.emplace_back(p + "running_mean", &b.running_mean);
            out.emplace_back(p + "running_var", &b.running_var);
        }
        return out;
    }

    [[nodiscard]] ParamVars bind(Graph& g, bool requires_grad) const {
        ParamVars pv;
        for (auto& [name, t] : named_parameters()) pv.vars.push_back(g.leaf(*t, requires_grad));
        return pv;
    }

    /// Recorded forward pass from an N x C x H x W input to N x feature_width.
    Var forward(Graph& g, Var x, const ParamVars& params, const ForwardOptions& opt) const {
        std::size_t p = 0;
        for (const auto& layer : layers_) {
            if (auto* c = std::get_if<ConvLayer>(&layer)) {
                x = conv2d(x, params.vars[p], params.vars[p + 1], c->spec);
                p += 2;
            } else if (auto* b = std::get_if<BatchNormLayer>(&layer)) {
                if (opt.bn_inputs) opt.bn_inputs->push_back(x);
                Var scale_v = params.vars[p], shift_v = params.vars[p + 1];
                p += 2;
                if (opt.mode == Mode::train) {
                    kernels::ChannelStats st;
                    x = batch_norm_train(x, scale_v, shift_v, b->eps, &st);
                    if (opt.batch_stats) opt.batch_stats->push_back(std::move(st));
                } else {
                    Tensor invstd(Shape{b->channels});
                    for (std::size_t ch = 0; ch < b->channels; ++ch) invstd[ch] = 1.0 / std::sqrt(b->running_var[ch] + b->eps);
                    Var a = mul(scale_v, g.constant(std::move(invstd)));
                    Var shift_eff = sub(shift_v, mul(g.constant(b->running_mean), a));
                    x = affine_scale_shift(x, a, shift_eff);
                }
                if (opt.bn_outputs) opt.bn_outputs->push_back(x);
            } else if (std::holds_alternative<ReluLayer>(layer)) {
                x = relu(x);
            } else if (auto* pl = std::get_if<AvgPoolLayer>(&layer)) {
                x = avgpool2d(x, pl->size);
            } else if (std::holds_alternative<FlattenLayer>(layer)) {
                x = flatten(x);
            } else {
                x = detail::linear_forward(g, x, params.vars[p], params.vars[p + 1]);
                p += 2;
            }
        }
        return x;
    }

    /// Graph-free inference-mode forward. Optionally captures the activations
    /// entering and leaving each BN layer.
    [[nodiscard]] Tensor infer(const Tensor& input, std::vector<Tensor>* bn_inputs = nullptr,
                               std::vector<Tensor>* bn_outputs = nullptr, std::size_t stop_after_bn = SIZE_MAX) const {
        check_input(input);
        Tensor x = input;
        std::size_t bn_seen = 0;
        for (const auto& layer : layers_) {
            if (auto* c = std::get_if<ConvLayer>(&layer)) {
                x = kernels::conv2d(x, c->weight, c->bias, c->spec);
            } else if (auto* b = std::get_if<BatchNormLayer>(&layer)) {
                if (bn_inputs) bn_inputs->push_back(x);
                auto [a, sh] = b->inference_affine();
                x = kernels::affine_scale_shift(x, a, sh);
                if (bn_outputs) bn_outputs->push_back(x);
                if (++bn_seen == stop_after_bn) return x;
            } else if (std::holds_alternative<ReluLayer>(layer)) {
                x = kernels::relu(x);
            } else if (auto* pl = std::get_if<AvgPoolLayer>(&layer)) {
                x = kernels::avgpool2d(x, pl->size);
            } else if (std::holds_alternative<FlattenLayer>(layer)) {
                x = x.reshaped(Shape{x.dim(0), x.size() / x.dim(0)});
            } else {
                x = detail::linear_infer(x, std::get<LinearLayer>(layer));
            }
            if (!x.all_finite()) throw OverflowError("extractor forward: non-finite activation");
        }
        return x;
    }

    void check_input(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(1) != arch_.in_channels || x.dim(2) != arch_.side || x.dim(3) != arch_.side)
            throw DimensionError("extractor: expected N x " + std::to_string(arch_.in_channels) + " x " +
                                 std::to_string(arch_.side) + " x " + std::to_string(arch_.side) + " input, got " +
                                 shape_str(x.shape()));
    }

    /// Flat copy of all parameters (used for parameter-space perturbations).
    [[nodiscard]] std::vector<double> flat_parameters() const {
        std::vector<double> out;
        for (auto& [n, t] : named_parameters()) out.insert(out.end(), t->vec().begin(), t->vec().end());
        return out;
    }

    void assign_flat_parameters(std::span<const double> flat) {
        std::size_t off = 0;
        for (Tensor* t : parameters()) {
            if (off + t->size() > flat.size()) throw DimensionError("assign_flat_parameters: vector too short");
            std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
                      flat.begin() + static_cast<std::ptrdiff_t>(off + t->size()), t->values().begin());
            off += t->size();
        }
        if (off != flat.size()) throw DimensionError("assign_flat_parameters: vector too long");
    }

private:
    ArchDescriptor arch_;
    std::vector<Layer> layers_;
    std::vector<std::size_t> bn_indices_;
    bool frozen_ = false;
};

/// Linear classifier f on top of the extractor's features.
struct DownstreamHead {
    LinearLayer linear;

    [[nodiscard]] std::size_t in_features() const { return linear.in_features(); }
    [[nodiscard]] std::size_t classes() const { return linear.out_features(); }

    static DownstreamHead init(std::size_t in, std::size_t classes, Rng& rng) {
        return DownstreamHead{detail::make_linear(in, classes, rng, 1.0)};
    }

    [[nodiscard]] ParamVars bind(Graph& g, bool requires_grad) const {
        return ParamVars{{g.leaf(linear.weight, requires_grad), g.leaf(linear.bias, requires_grad)}};
    }

    Var forward(Graph& g, Var features, const ParamVars& p) const {
        return detail::linear_forward(g, features, p.vars[0], p.vars[1]);
    }

    [[nodiscard]] Tensor logits(const Tensor& features) const {
        if (features.rank() != 2 || features.dim(1) != in_features())
            throw DimensionError("head: features " + shape_str(features.shape()) + " for input width " +
                                 std::to_string(in_features()));
        return detail::linear_infer(features, linear);
    }

    [[nodiscard]] std::vector<std::size_t> predict(const Tensor& features) const {
        Tensor lg = logits(features);
        std::vector<std::size_t> out(lg.dim(0));
        const std::size_t c = lg.dim(1);
        for (std::size_t r = 0; r < out.size(); ++r)
            out[r] = kernels::argmax(std::span<const double>(lg.ptr() + r * c, c));
        return out;
    }

    [[nodiscard]] std::vector<Tensor*> parameters() { return {&linear.weight, &linear.bias}; }

    friend bool operator==(const DownstreamHead& a, const DownstreamHead& b) {
        return a.linear.weight == b.linear.weight && a.linear.bias == b.linear.bias;
    }
};

/// Builds TinyConvBN-4 (widths 16/32/64/64) or TinyConvBN-2 (16/32) with He-style initialization.
inline FeatureExtractor build_extractor(const ArchDescriptor& arch, std::uint64_t seed) {
    std::vector<std::size_t> widths;
    if (arch.name == "TinyConvBN-4") widths = {16, 32, 64, 64};
    else if (arch.name == "TinyConvBN-2") widths = {16, 32};
    else throw ConfigError("unknown architecture descriptor '" + arch.name + "'");
    if (arch.in_channels == 0 || arch.side >> widths.size() == 0)
        throw ConfigError("architecture " + arch.name + " needs input side >= " + std::to_string(1u << widths.size()));

    Rng rng = Rng(seed).split(0xA11C);
    std::vector<Layer> layers;
    std::size_t in = arch.in_channels, side = arch.side;
    for (auto w : widths) {
        const double fan_in = static_cast<double>(in * 9);
        layers.emplace_back(ConvLayer{Tensor::randn(Shape{w, in, 3, 3}, rng, std::sqrt(2.0 / fan_in)), Tensor(Shape{w}), {1, 1}});
        layers.emplace_back(BatchNormLayer{w, Tensor(Shape{w}, 0.0), Tensor(Shape{w}, 1.0), Tensor(Shape{w}, 1.0),
                                           Tensor(Shape{w}, 0.0)});
        layers.emplace_back(ReluLayer{});
        layers.emplace_back(AvgPoolLayer{2});
        in = w;
        side /= 2;
    }
    layers.emplace_back(FlattenLayer{});
    layers.emplace_back(detail::make_linear(in * side * side, 64, rng, 2.0));
    return FeatureExtractor(arch, std::move(layers));
}

inline FeatureExtractor build_extractor(const std::string& name, std::uint64_t seed) {
    return build_extractor(ArchDescriptor{name, 3, 16}, seed);
}

/// Penultimate feature vector per batch element.
inline Tensor extract_features(const FeatureExtractor& phi, const Tensor& batch) { return phi.infer(batch); }

/// Activations flowing into (or, with BnTap::output, out of) each BN layer, ordered by depth.
inline std::vector<Tensor> capture_bn_inputs(const FeatureExtractor& phi, const Tensor& batch, BnTap tap = BnTap::input) {
    std::vector<Tensor> captured;
    if (tap == BnTap::input) (void)phi.infer(batch, &captured, nullptr);
    else (void)phi.infer(batch, nullptr, &captured);
    return captured;
}

/// Inference over a large batch in fixed-size chunks; results concatenated in order.
inline Tensor extract_features_chunked(const FeatureExtractor& phi, const Tensor& batch, std::size_t chunk = 64) {
    const std::size_t n = batch.dim(0), per = batch.size() / n;
    std::vector<double> out;
    std::size_t width = 0;
    for (std::size_t s = 0; s < n; s += chunk) {
        const std::size_t e = std::min(n, s + chunk);
        Shape sh = batch.shape();
        sh[0] = e - s;
        Tensor part(sh, std::vector<double>(batch.vec().begin() + static_cast<std::ptrdiff_t>(s * per),
                                            batch.vec().begin() + static_cast<std::ptrdiff_t>(e * per)));
        Tensor f = phi.infer(part);
        width = f.dim(1);
        out.insert(out.end(), f.vec().begin(), f.vec().end());
    }
    return Tensor(Shape{n, width}, std::move(out));
}

// --- checkpoints -----------------------------------------------------------

namespace detail {

inline std::string sanitize_key(const std::string& key) {
    std::string s = key;
    for (auto& ch : s)
        if (ch == '.') ch = '_';
    return s + ".psv";
}

inline void write_manifest(const std::filesystem::path& dir, const std::vector<std::string>& header,
                           const std::vector<std::pair<std::string, const Tensor*>>& entries) {
    std::filesystem::create_directories(dir);
    std::ofstream m(dir / "manifest.txt", std::ios::trunc);
    if (!m) throw IoError("cannot write " + (dir / "manifest.txt").string());
    for (auto& h : header) m << "# " << h << '\n';
    for (auto& [key, t] : entries) {
        const std::string file = sanitize_key(key);
        write_tensor(dir / file, *t);
        m << key << " = " << file << '\n';
    }
}

struct Manifest {
    std::map<std::string, std::string> meta;
    std::map<std::string, std::string> files;
};

inline Manifest read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.txt");
    if (!in) throw IoError("cannot open " + (dir / "manifest.txt").string());
    Manifest out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ss(line.substr(1));
            std::string tok;
            while (ss >> tok) {
                auto eq = tok.find('=');
                if (eq != std::string::npos) out.meta[tok.substr(0, eq)] = tok.substr(eq + 1);
            }
            continue;
        }
        auto eq = line.find(" = ");
        if (eq == std::string::npos) throw FormatError("manifest: malformed line '" + line + "'", 0);
        out.files[line.substr(0, eq)] = line.substr(eq + 3);
    }
    return out;
}

}  // namespace detail

inline void save_extractor(const std::filesystem::path& dir, const FeatureExtractor& phi) {
    const auto& a = phi.arch();
    detail::write_manifest(dir,
                           {"arch=" + a.name + " in_channels=" + std::to_string(a.in_channels) +
                            " side=" + std::to_string(a.side)},
                           phi.named_state());
}

inline FeatureExtractor load_extractor(const std::filesystem::path& dir) {
    auto m = detail::read_manifest(dir);
    if (!m.meta.count("arch")) throw FormatError("extractor manifest: missing arch header", 0);
    ArchDescriptor arch{m.meta["arch"], std::stoul(m.meta.at("in_channels")), std::stoul(m.meta.at("side"))};
    FeatureExtractor phi = build_extractor(arch, 0);
    for (auto& [key, t] : phi.named_state()) {
        auto it = m.files.find(key);
        if (it == m.files.end()) throw FormatError("extractor manifest: missing key " + key, 0);
        Tensor loaded = read_tensor(dir / it->second);
        if (loaded.shape() != t->shape())
            throw DimensionError("checkpoint " + key + ": " + shape_str(loaded.shape()) + " vs " + shape_str(t->shape()));
        *const_cast<Tensor*>(t) = std::move(loaded);
    }
    return phi;
}

inline void save_head(const std::filesystem::path& dir, const DownstreamHead& head) {
    detail::write_manifest(dir, {"head"}, {{"linear.weight", &head.linear.weight}, {"linear.bias", &head.linear.bias}});
}

inline DownstreamHead load_head(const std::filesystem::path& dir) {
    auto m = detail::read_manifest(dir);
    DownstreamHead h;
    h.linear.weight = read_tensor(dir / m.files.at("linear.weight"));
    h.linear.bias = read_tensor(dir / m.files.at("linear.bias"));
    if (h.linear.weight.rank() != 2 || h.linear.bias.size() != h.linear.weight.dim(1))
        throw DimensionError("head checkpoint: inconsistent shapes");
    return h;
}

}  // namespace bnsieve
