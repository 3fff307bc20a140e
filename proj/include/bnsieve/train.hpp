#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "bnsieve/autograd.hpp"
#include "bnsieve/data.hpp"
#include "bnsieve/error.hpp"
#include "bnsieve/nn.hpp"
#include "bnsieve/rng.hpp"

namespace bnsieve {

enum class OptimizerKind { sgd, adam };

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::adam;
    double learning_rate = 0.1;
    std::size_t epochs = 60;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    double weight_decay = 0.0;
    double momentum = 0.9;  // SGD only
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
        if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    }

    /// Transfer fine-tuning defaults: Adam, lr 0.1, 60 epochs.
    static TrainConfig finetune_defaults() { return TrainConfig{}; }

    /// Extractor pretraining defaults: SGD with momentum 0.9, lr 0.01.
    static TrainConfig pretrain_defaults() {
        TrainConfig c;
        c.optimizer = OptimizerKind::sgd;
        c.learning_rate = 0.01;
        c.epochs = 20;
        c.batch_size = 32;
        c.weight_decay = 5e-4;
        return c;
    }
};

/// SGD (optionally with heavy-ball momentum) or Adam over a fixed parameter list.
class Optimizer {
public:
    explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads) {
        if (params.size() != grads.size()) throw ContractError("optimizer: params/grads length mismatch");
        if (state1_.empty()) {
            for (auto* p : params) {
                state1_.emplace_back(p->shape(), 0.0);
                state2_.emplace_back(p->shape(), 0.0);
            }
        }
        ++t_;
        const double lr = cfg_.learning_rate, wd = cfg_.weight_decay;
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor& p = *params[k];
            const Tensor& g = *grads[k];
            Tensor& m = state1_[k];
            Tensor& v = state2_[k];
            if (cfg_.optimizer == OptimizerKind::sgd) {
                for (std::size_t i = 0; i < p.size(); ++i) {
                    const double gi = g[i] + wd * p[i];
                    m[i] = cfg_.momentum * m[i] + gi;
                    p[i] -= lr * m[i];
                }
            } else {
                const double b1 = cfg_.adam_beta1, b2 = cfg_.adam_beta2;
                const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
                const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
                for (std::size_t i = 0; i < p.size(); ++i) {
                    const double gi = g[i] + wd * p[i];
                    m[i] = b1 * m[i] + (1.0 - b1) * gi;
                    v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                    p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
                }
            }
        }
    }

private:
    TrainConfig cfg_;
    std::vector<Tensor> state1_, state2_;
    std::size_t t_ = 0;
};

namespace detail {

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch, Rng& rng) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch)
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch)));
    return out;
}

inline Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
    const std::size_t per = t.size() / t.dim(0);
    Shape s = t.shape();
    s[0] = rows.size();
    Tensor out(s);
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy_n(t.ptr() + rows[r] * per, per, out.ptr() + r * per);
    return out;
}

}  // namespace detail

struct PretrainResult {
    FeatureExtractor extractor;
    DownstreamHead head;  // temporary head used only during pretraining
    double initial_loss = 0.0;
    std::vector<double> epoch_losses;
};

/// Supervised training of the extractor plus a temporary linear head, with BN
/// in training mode and running statistics accumulated per batch.
inline PretrainResult pretrain_extractor(FeatureExtractor phi, const DatasetView& data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw ConfigError("pretrain: empty dataset");
    if (phi.frozen()) throw ContractError("pretrain: extractor is frozen");
    Rng rng = Rng(cfg.seed).split(0x9E7A);
    Rng head_rng = rng.split(1);
    DownstreamHead head = DownstreamHead::init(phi.feature_width(), data.classes(), head_rng);
    const Tensor images = data.batch();
    const auto labels = data.labels();
    Optimizer opt(cfg);
    PretrainResult res;
    bool first = true;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double total = 0.0;
        std::size_t seen = 0;
        for (const auto& rows : detail::epoch_batches(data.size(), cfg.batch_size, rng)) {
            if (rows.size() < 2) continue;  // batch statistics need at least two samples
            Graph g;
            ParamVars pv = phi.bind(g, true);
            ParamVars hv = head.bind(g, true);
            std::vector<kernels::ChannelStats> stats;
            ForwardOptions fo;
            fo.mode = Mode::train;
            fo.batch_stats = &stats;
            std::vector<std::size_t> ys;
            for (auto r : rows) ys.push_back(labels[r]);
            Var x = g.constant(detail::gather_rows(images, rows));
            Var loss = softmax_cross_entropy(head.forward(g, phi.forward(g, x, pv, fo), hv), ys);
            const double lv = loss.value().item();
            if (!std::isfinite(lv)) throw TrainingError("pretrain: non-finite loss", epoch);
            if (first) {
                res.initial_loss = lv;
                first = false;
            }
            auto grads = g.backward(loss);
            std::vector<Tensor*> params = phi.parameters();
            for (auto* p : head.parameters()) params.push_back(p);
            std::vector<const Tensor*> gs;
            for (auto v : pv.vars) gs.push_back(&grads[v]);
            for (auto v : hv.vars) gs.push_back(&grads[v]);
            opt.step(params, gs);
            for (std::size_t i = 0; i < stats.size(); ++i) phi.bn(i).update_running(stats[i]);
            total += lv * static_cast<double>(rows.size());
            seen += rows.size();
        }
        const double mean = total / static_cast<double>(std::max<std::size_t>(seen, 1));
        if (!std::isfinite(mean)) throw TrainingError("pretrain: diverged", epoch);
        res.epoch_losses.push_back(mean);
    }
    res.extractor = std::move(phi);
    res.head = std::move(head);
    return res;
}

/// Trains `head` on fixed feature vectors (N x width) with the given labels.
inline DownstreamHead train_head_on_features(DownstreamHead head, const Tensor& features,
                                             const std::vector<std::size_t>& labels, const TrainConfig& cfg) {
    cfg.validate();
    if (labels.empty()) throw ConfigError("finetune: empty dataset");
    if (features.rank() != 2 || features.dim(0) != labels.size() || features.dim(1) != head.in_features())
        throw DimensionError("finetune: features " + shape_str(features.shape()) + " for " +
                             std::to_string(labels.size()) + " labels and head width " +
                             std::to_string(head.in_features()));
    Rng rng = Rng(cfg.seed).split(0xF17E);
    Optimizer opt(cfg);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& rows : detail::epoch_batches(labels.size(), cfg.batch_size, rng)) {
            Graph g;
            ParamVars hv = head.bind(g, true);
            std::vector<std::size_t> ys;
            for (auto r : rows) ys.push_back(labels[r]);
            Var loss = softmax_cross_entropy(head.forward(g, g.constant(detail::gather_rows(features, rows)), hv), ys);
            if (!std::isfinite(loss.value().item())) throw TrainingError("finetune: non-finite loss", epoch);
            auto grads = g.backward(loss);
            opt.step(head.parameters(), {&grads[hv.vars[0]], &grads[hv.vars[1]]});
        }
    }
    return head;
}

/// Fresh head initialized from `seed`, sized for the extractor and class count.
inline DownstreamHead init_head(const FeatureExtractor& phi, std::size_t classes, std::uint64_t seed) {
    Rng rng = Rng(seed).split(0x4EAD);
    return DownstreamHead::init(phi.feature_width(), classes, rng);
}

/// Trains only the head; the extractor must be frozen and is never touched.
inline DownstreamHead transfer_finetune(const FeatureExtractor& phi, DownstreamHead head, const DatasetView& data,
                                        const TrainConfig& cfg) {
    if (!phi.frozen()) throw ContractError("transfer_finetune: extractor must be frozen");
    cfg.validate();
    if (data.empty()) throw ConfigError("transfer_finetune: empty dataset");
    return train_head_on_features(std::move(head), extract_features_chunked(phi, data.batch()), data.labels(), cfg);
}

inline double accuracy_from_features(const DownstreamHead& head, const Tensor& features,
                                     const std::vector<std::size_t>& labels) {
    if (labels.empty()) return 0.0;
    const auto pred = head.predict(features);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) ok += pred[i] == labels[i];
    return static_cast<double>(ok) / static_cast<double>(labels.size());
}

/// Fraction of points whose argmax logit equals the label.
inline double evaluate_accuracy(const FeatureExtractor& phi, const DownstreamHead& head, const DatasetView& data) {
    if (data.empty()) return 0.0;
    return accuracy_from_features(head, extract_features_chunked(phi, data.batch()), data.labels());
}

}  // namespace bnsieve
