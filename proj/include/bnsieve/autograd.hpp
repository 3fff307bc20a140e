#pragma once

// Tape-based reverse-mode differentiation. A Graph records every operation in
// creation order, which is a topological order by construction, so backward is
// a single reverse sweep.

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "bnsieve/error.hpp"
#include "bnsieve/kernels.hpp"
#include "bnsieve/tensor.hpp"

namespace bnsieve {

enum class OpKind {
    leaf,
    add,
    sub,
    mul,
    scale,
    matmul,
    conv2d,
    relu,
    avgpool2d,
    reshape,
    affine_scale_shift,
    batch_norm_train,
    softmax_cross_entropy,
    cosine_similarity,
    l2_norm,
    sum,
    sum_squares,
    batch_mean,
};

inline std::string_view op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::add: return "add";
        case OpKind::sub: return "sub";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::matmul: return "matmul";
        case OpKind::conv2d: return "conv2d";
        case OpKind::relu: return "relu";
        case OpKind::avgpool2d: return "avgpool2d";
        case OpKind::reshape: return "reshape";
        case OpKind::affine_scale_shift: return "affine_scale_shift";
        case OpKind::batch_norm_train: return "batch_norm_train";
        case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
        case OpKind::cosine_similarity: return "cosine_similarity";
        case OpKind::l2_norm: return "l2_norm";
        case OpKind::sum: return "sum";
        case OpKind::sum_squares: return "sum_squares";
        case OpKind::batch_mean: return "batch_mean";
    }
    return "?";
}

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    [[nodiscard]] const Tensor& value() const;
    [[nodiscard]] const Shape& shape() const { return value().shape(); }
};

/// Gradient of the loss with respect to every requires-grad leaf.
class Gradients {
public:
    [[nodiscard]] const Tensor& operator[](Var v) const { return at(v.id); }
    [[nodiscard]] const Tensor& at(std::size_t id) const {
        auto it = grads_.find(id);
        if (it == grads_.end()) throw ContractError("gradients: node " + std::to_string(id) + " is not a grad leaf");
        return it->second;
    }
    [[nodiscard]] const std::map<std::size_t, Tensor>& all() const { return grads_; }

private:
    friend class Graph;
    std::map<std::size_t, Tensor> grads_;
};

class Graph {
public:
    /// Receives the output gradient and one accumulator per input (null when that
    /// input does not need a gradient). Implementations add into the accumulators.
    using BackwardFn = std::function<void(const Tensor& grad_out, std::vector<Tensor*>& input_grads)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value, bool requires_grad = false) {
        nodes_.push_back(Node{OpKind::leaf, {}, std::move(value), requires_grad, true, {}});
        return Var{this, nodes_.size() - 1};
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    Var record(OpKind kind, std::vector<std::size_t> inputs, Tensor value, BackwardFn fn) {
        for (auto in : inputs)
            if (in >= nodes_.size()) throw ContractError("graph: input id precedes no recorded node");
        if (!value.all_finite())
            throw OverflowError(std::string(op_name(kind)) + ": non-finite output of shape " +
                                shape_str(value.shape()));
        bool rg = false;
        for (auto in : inputs) rg = rg || nodes_[in].requires_grad;
        nodes_.push_back(Node{kind, std::move(inputs), std::move(value), rg, false, rg ? std::move(fn) : BackwardFn{}});
        return Var{this, nodes_.size() - 1};
    }

    [[nodiscard]] const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    [[nodiscard]] bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    [[nodiscard]] OpKind kind(std::size_t id) const { return nodes_.at(id).kind; }
    [[nodiscard]] std::size_t size() const { return nodes_.size(); }

    Gradients backward(Var loss) {
        if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
        const Tensor& lv = value(loss.id);
        if (lv.size() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
        std::vector<Tensor> grads(nodes_.size());
        grads[loss.id] = Tensor(lv.shape(), 1.0);
        std::vector<Tensor*> input_grads;
        for (std::size_t id = loss.id + 1; id-- > 0;) {
            Node& node = nodes_[id];
            if (node.is_leaf || !node.requires_grad || grads[id].empty()) continue;
            input_grads.clear();
            for (auto in : node.inputs) {
                if (!nodes_[in].requires_grad) {
                    input_grads.push_back(nullptr);
                    continue;
                }
                if (grads[in].empty()) grads[in] = Tensor(nodes_[in].value.shape(), 0.0);
                input_grads.push_back(&grads[in]);
            }
            node.backward(grads[id], input_grads);
        }
        Gradients out;
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            const Node& node = nodes_[id];
            if (!node.is_leaf || !node.requires_grad) continue;
            out.grads_.emplace(id, grads[id].empty() ? Tensor(node.value.shape(), 0.0) : std::move(grads[id]));
        }
        return out;
    }

private:
    struct Node {
        OpKind kind;
        std::vector<std::size_t> inputs;
        Tensor value;
        bool requires_grad;
        bool is_leaf;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

namespace detail {

inline Graph& same_graph(Var a, Var b, std::string_view op) {
    if (a.graph == nullptr || a.graph != b.graph) throw ContractError(std::string(op) + ": operands from different graphs");
    return *a.graph;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

enum class Broadcast { none, lhs_scalar, rhs_scalar };

inline Broadcast broadcast_kind(const Tensor& a, const Tensor& b, std::string_view op) {
    if (a.shape() == b.shape()) return Broadcast::none;
    if (a.size() == 1) return Broadcast::lhs_scalar;
    if (b.size() == 1) return Broadcast::rhs_scalar;
    throw DimensionError(std::string(op) + ": shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void reduce_into(Tensor& acc, const Tensor& g, double factor = 1.0) {
    if (acc.size() == 1 && g.size() != 1) {
        double s = 0.0;
        for (double v : g.values()) s += v;
        acc[0] += factor * s;
    } else {
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += factor * g[i];
    }
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, Broadcast bc, F f) {
    const Shape& shape = bc == Broadcast::lhs_scalar ? b.shape() : a.shape();
    Tensor out(shape);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = bc == Broadcast::lhs_scalar ? a[0] : a[i];
        const double y = bc == Broadcast::rhs_scalar ? b[0] : b[i];
        out[i] = f(x, y);
    }
    return out;
}

}  // namespace detail

/// Elementwise a + b; either side may be a single-element tensor.
inline Var add(Var a, Var b) {
    Graph& g = detail::same_graph(a, b, "add");
    const auto bc = detail::broadcast_kind(a.value(), b.value(), "add");
    Tensor out = detail::zip(a.value(), b.value(), bc, [](double x, double y) { return x + y; });
    return g.record(OpKind::add, {a.id, b.id}, std::move(out), [](const Tensor& go, std::vector<Tensor*>& ig) {
        if (ig[0]) detail::reduce_into(*ig[0], go);
        if (ig[1]) detail::reduce_into(*ig[1], go);
    });
}

inline Var sub(Var a, Var b) {
    Graph& g = detail::same_graph(a, b, "sub");
    const auto bc = detail::broadcast_kind(a.value(), b.value(), "sub");
    Tensor out = detail::zip(a.value(), b.value(), bc, [](double x, double y) { return x - y; });
    return g.record(OpKind::sub, {a.id, b.id}, std::move(out), [](const Tensor& go, std::vector<Tensor*>& ig) {
        if (ig[0]) detail::reduce_into(*ig[0], go);
        if (ig[1]) detail::reduce_into(*ig[1], go, -1.0);
    });
}

inline Var mul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b, "mul");
    const auto bc = detail::broadcast_kind(a.value(), b.value(), "mul");
    Tensor out = detail::zip(a.value(), b.value(), bc, [](double x, double y) { return x * y; });
    return g.record(OpKind::mul, {a.id, b.id}, std::move(out), [a, b, bc](const Tensor& go, std::vector<Tensor*>& ig) {
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        for (std::size_t i = 0; i < go.size(); ++i) {
            const double x = bc == detail::Broadcast::lhs_scalar ? av[0] : av[i];
            const double y = bc == detail::Broadcast::rhs_scalar ? bv[0] : bv[i];
            if (ig[0]) (*ig[0])[bc == detail::Broadcast::lhs_scalar ? 0 : i] += go[i] * y;
            if (ig[1]) (*ig[1])[bc == detail::Broadcast::rhs_scalar ? 0 : i] += go[i] * x;
        }
    });
}

/// Multiply by a compile-time-free constant.
inline Var scale(Var a, double c) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * c;
    return a.graph->record(OpKind::scale, {a.id}, std::move(out), [c](const Tensor& go, std::vector<Tensor*>& ig) {
        for (std::size_t i = 0; i < go.size(); ++i) (*ig[0])[i] += c * go[i];
    });
}

inline Var matmul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b, "matmul");
    Tensor out = kernels::matmul(a.value(), b.value());
    return g.record(OpKind::matmul, {a.id, b.id}, std::move(out), [a, b](const Tensor& go, std::vector<Tensor*>& ig) {
        using kernels::CMapMat;
        using kernels::MapMat;
        const Tensor& av = a.value();
        const Tensor& bv = b.value();
        const auto m = static_cast<Eigen::Index>(av.dim(0)), k = static_cast<Eigen::Index>(av.dim(1)),
                   n = static_cast<Eigen::Index>(bv.dim(1));
        CMapMat gm(go.ptr(), m, n);
        if (ig[0]) MapMat(ig[0]->ptr(), m, k).noalias() += gm * CMapMat(bv.ptr(), k, n).transpose();
        if (ig[1]) MapMat(ig[1]->ptr(), k, n).noalias() += CMapMat(av.ptr(), m, k).transpose() * gm;
    });
}

/// 2-D convolution. `bias` may be a null Var (graph == nullptr) for no bias.
inline Var conv2d(Var x, Var w, Var bias, kernels::Conv2dSpec spec) {
    Graph& g = detail::same_graph(x, w, "conv2d");
    const bool has_bias = bias.graph != nullptr;
    if (has_bias) detail::same_graph(x, bias, "conv2d");
    Tensor out = kernels::conv2d(x.value(), w.value(), has_bias ? bias.value() : Tensor{}, spec);
    std::vector<std::size_t> inputs{x.id, w.id};
    if (has_bias) inputs.push_back(bias.id);
    return g.record(OpKind::conv2d, std::move(inputs), std::move(out),
                    [x, w, spec, has_bias](const Tensor& go, std::vector<Tensor*>& ig) {
                        kernels::conv2d_backward(x.value(), w.value(), spec, go, ig[0], ig[1],
                                                 has_bias ? ig[2] : nullptr);
                    });
}

inline Var relu(Var x) {
    return x.graph->record(OpKind::relu, {x.id}, kernels::relu(x.value()), [x](const Tensor& go, std::vector<Tensor*>& ig) {
        const Tensor& xv = x.value();
        for (std::size_t i = 0; i < go.size(); ++i)
            if (xv[i] > 0.0) (*ig[0])[i] += go[i];
    });
}

inline Var avgpool2d(Var x, std::size_t k) {
    return x.graph->record(OpKind::avgpool2d, {x.id}, kernels::avgpool2d(x.value(), k),
                           [x, k](const Tensor& go, std::vector<Tensor*>& ig) {
                               kernels::avgpool2d_backward(x.shape(), k, go, *ig[0]);
                           });
}

inline Var reshape(Var x, Shape shape) {
    return x.graph->record(OpKind::reshape, {x.id}, x.value().reshaped(std::move(shape)),
                           [](const Tensor& go, std::vector<Tensor*>& ig) {
                               for (std::size_t i = 0; i < go.size(); ++i) (*ig[0])[i] += go[i];
                           });
}

/// N x C x ... -> N x (C*...)
inline Var flatten(Var x) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw DimensionError("flatten: input " + shape_str(s) + " has no batch axis");
    return reshape(x, Shape{s[0], shape_numel(s) / s[0]});
}

/// Per-channel y = x * scale[c] + shift[c].
inline Var affine_scale_shift(Var x, Var scale_c, Var shift_c) {
    Graph& g = detail::same_graph(x, scale_c, "affine_scale_shift");
    detail::same_graph(x, shift_c, "affine_scale_shift");
    Tensor out = kernels::affine_scale_shift(x.value(), scale_c.value(), shift_c.value());
    return g.record(OpKind::affine_scale_shift, {x.id, scale_c.id, shift_c.id}, std::move(out),
                    [x, scale_c](const Tensor& go, std::vector<Tensor*>& ig) {
                        const Tensor& xv = x.value();
                        const Tensor& sv = scale_c.value();
                        const std::size_t cc = xv.dim(1), inner = kernels::per_channel_inner(xv);
                        for (std::size_t n = 0; n < xv.dim(0); ++n)
                            for (std::size_t c = 0; c < cc; ++c) {
                                const std::size_t base = (n * cc + c) * inner;
                                double gs = 0.0, gb = 0.0;
                                for (std::size_t i = 0; i < inner; ++i) {
                                    if (ig[0]) (*ig[0])[base + i] += go[base + i] * sv[c];
                                    gs += go[base + i] * xv[base + i];
                                    gb += go[base + i];
                                }
                                if (ig[1]) (*ig[1])[c] += gs;
                                if (ig[2]) (*ig[2])[c] += gb;
                            }
                    });
}

/// Training-mode batch normalization over batch and spatial axes with
/// population variance. Writes the batch statistics to `stats` when non-null.
inline Var batch_norm_train(Var x, Var gamma, Var beta, double eps, kernels::ChannelStats* stats = nullptr) {
    Graph& g = detail::same_graph(x, gamma, "batch_norm_train");
    const Tensor& xv = x.value();
    if (xv.rank() < 2 || gamma.value().size() != xv.dim(1) || beta.value().size() != xv.dim(1))
        throw DimensionError("batch_norm_train: input " + shape_str(xv.shape()) + " gamma " +
                             shape_str(gamma.shape()) + " beta " + shape_str(beta.shape()));
    auto st = kernels::channel_stats(xv);
    const std::size_t cc = xv.dim(1), inner = kernels::per_channel_inner(xv);
    std::vector<double> invstd(cc);
    for (std::size_t c = 0; c < cc; ++c) invstd[c] = 1.0 / std::sqrt(st.var[c] + eps);
    Tensor xhat(xv.shape()), out(xv.shape());
    for (std::size_t n = 0; n < xv.dim(0); ++n)
        for (std::size_t c = 0; c < cc; ++c) {
            const std::size_t base = (n * cc + c) * inner;
            for (std::size_t i = 0; i < inner; ++i) {
                xhat[base + i] = (xv[base + i] - st.mean[c]) * invstd[c];
                out[base + i] = gamma.value()[c] * xhat[base + i] + beta.value()[c];
            }
        }
    if (stats) *stats = st;
    return g.record(
        OpKind::batch_norm_train, {x.id, gamma.id, beta.id}, std::move(out),
        [gamma, xhat = std::move(xhat), invstd = std::move(invstd), cc, inner](const Tensor& go,
                                                                              std::vector<Tensor*>& ig) {
            const std::size_t nb = xhat.dim(0);
            const double m = static_cast<double>(nb * inner);
            for (std::size_t c = 0; c < cc; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < nb; ++n)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const std::size_t k = (n * cc + c) * inner + i;
                        sum_g += go[k];
                        sum_gx += go[k] * xhat[k];
                    }
                if (ig[1]) (*ig[1])[c] += sum_gx;
                if (ig[2]) (*ig[2])[c] += sum_g;
                if (ig[0]) {
                    const double gm = gamma.value()[c];
                    for (std::size_t n = 0; n < nb; ++n)
                        for (std::size_t i = 0; i < inner; ++i) {
                            const std::size_t k = (n * cc + c) * inner + i;
                            (*ig[0])[k] += gm * invstd[c] / m * (m * go[k] - sum_g - xhat[k] * sum_gx);
                        }
                }
            }
        });
}

/// Mean over the batch of -log softmax(logits)[label].
inline Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
    const Tensor& lv = logits.value();
    if (lv.rank() != 2 || lv.dim(0) != labels.size())
        throw DimensionError("softmax_cross_entropy: logits " + shape_str(lv.shape()) + " with " +
                             std::to_string(labels.size()) + " labels");
    const std::size_t b = lv.dim(0), c = lv.dim(1);
    for (auto y : labels)
        if (y >= c) throw DimensionError("softmax_cross_entropy: label " + std::to_string(y) + " >= classes " + std::to_string(c));
    Tensor logp = kernels::log_softmax(lv);
    double loss = 0.0;
    for (std::size_t r = 0; r < b; ++r) loss -= logp[r * c + labels[r]];
    loss /= static_cast<double>(b);
    return logits.graph->record(OpKind::softmax_cross_entropy, {logits.id}, Tensor::scalar(loss),
                                [logp = std::move(logp), labels = std::move(labels), b, c](const Tensor& go,
                                                                                           std::vector<Tensor*>& ig) {
                                    const double s = go[0] / static_cast<double>(b);
                                    for (std::size_t r = 0; r < b; ++r)
                                        for (std::size_t j = 0; j < c; ++j) {
                                            const double p = std::exp(logp[r * c + j]);
                                            (*ig[0])[r * c + j] += s * (p - (j == labels[r] ? 1.0 : 0.0));
                                        }
                                });
}

/// Scalar a.b / (|a||b|) over flattened values.
inline Var cosine_similarity(Var a, Var b) {
    Graph& g = detail::same_graph(a, b, "cosine_similarity");
    if (a.value().size() != b.value().size())
        throw DimensionError("cosine_similarity: shape " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const double na = kernels::norm2(a.value().values()), nb = kernels::norm2(b.value().values());
    if (na == 0.0 || nb == 0.0) throw ContractError("cosine_similarity: zero-norm operand");
    const double cs = kernels::dot(a.value().values(), b.value().values()) / (na * nb);
    return g.record(OpKind::cosine_similarity, {a.id, b.id}, Tensor::scalar(cs),
                    [a, b, na, nb, cs](const Tensor& go, std::vector<Tensor*>& ig) {
                        const Tensor& av = a.value();
                        const Tensor& bv = b.value();
                        for (std::size_t i = 0; i < av.size(); ++i) {
                            if (ig[0]) (*ig[0])[i] += go[0] * (bv[i] / (na * nb) - cs * av[i] / (na * na));
                            if (ig[1]) (*ig[1])[i] += go[0] * (av[i] / (na * nb) - cs * bv[i] / (nb * nb));
                        }
                    });
}

/// Euclidean norm of the flattened values; gradient at zero is taken as zero.
inline Var l2_norm(Var a) {
    const double n = kernels::norm2(a.value().values());
    return a.graph->record(OpKind::l2_norm, {a.id}, Tensor::scalar(n), [a, n](const Tensor& go, std::vector<Tensor*>& ig) {
        if (n == 0.0) return;
        const Tensor& av = a.value();
        for (std::size_t i = 0; i < av.size(); ++i) (*ig[0])[i] += go[0] * av[i] / n;
    });
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return a.graph->record(OpKind::sum, {a.id}, Tensor::scalar(s), [](const Tensor& go, std::vector<Tensor*>& ig) {
        for (auto& v : ig[0]->values()) v += go[0];
    });
}

inline Var sum_squares(Var a) {
    const double s = kernels::dot(a.value().values(), a.value().values());
    return a.graph->record(OpKind::sum_squares, {a.id}, Tensor::scalar(s), [a](const Tensor& go, std::vector<Tensor*>& ig) {
        const Tensor& av = a.value();
        for (std::size_t i = 0; i < av.size(); ++i) (*ig[0])[i] += 2.0 * go[0] * av[i];
    });
}

/// Mean over the leading axis; B x ... -> 1 x ...
inline Var batch_mean(Var a) {
    const Tensor& av = a.value();
    if (av.rank() < 1) throw DimensionError("batch_mean: scalar input");
    const std::size_t b = av.dim(0), inner = av.size() / b;
    Shape s = av.shape();
    s[0] = 1;
    Tensor out(s);
    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t i = 0; i < inner; ++i) out[i] += av[r * inner + i];
    for (auto& v : out.values()) v /= static_cast<double>(b);
    return a.graph->record(OpKind::batch_mean, {a.id}, std::move(out), [b, inner](const Tensor& go, std::vector<Tensor*>& ig) {
        const double f = 1.0 / static_cast<double>(b);
        for (std::size_t r = 0; r < b; ++r)
            for (std::size_t i = 0; i < inner; ++i) (*ig[0])[r * inner + i] += f * go[i];
    });
}

/// Central-difference gradient estimate of a tensor-to-scalar function.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h) {
    if (!(h > 0.0)) throw ContractError("finite_difference_grad: step must be positive");
    Tensor grad(x.shape());
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(probe);
        probe[i] = orig - h;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw OverflowError("finite_difference_grad: non-finite evaluation at coordinate " + std::to_string(i));
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

}  // namespace bnsieve
