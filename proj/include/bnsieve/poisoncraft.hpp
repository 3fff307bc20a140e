#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "bnsieve/autograd.hpp"
#include "bnsieve/binary_io.hpp"
#include "bnsieve/data.hpp"
#include "bnsieve/error.hpp"
#include "bnsieve/kernels.hpp"
#include "bnsieve/nn.hpp"
#include "bnsieve/rng.hpp"

namespace bnsieve {

enum class AttackKind { fc, bp, gm };

inline std::string to_string(AttackKind a) {
    switch (a) {
        case AttackKind::fc: return "fc";
        case AttackKind::bp: return "bp";
        case AttackKind::gm: return "gm";
    }
    return "?";
}

/// Feature maps matched by Bullseye Polytope.
enum class BpTaps {
    bn_inputs_and_features,  // every BN-layer input plus the final feature vector
    features_only,
};

/// Which parameters gradient matching aligns.
enum class GmParams { full, head };

struct CraftConfig {
    std::size_t iterations = 300;
    double epsilon = 30.0 / 255.0;
    /// Signed-gradient step; zero selects epsilon / 30.
    double step_size = 0.0;
    double fc_beta = 0.01;
    std::size_t restarts = 1;
    std::uint64_t seed = 0;
    /// Reject steps that raise the objective and halve the step instead.
    bool backtrack = true;
    BpTaps bp_taps = BpTaps::features_only;
    GmParams gm_params = GmParams::head;
    /// The gradient-matching objective needs d/dx of a parameter gradient. This
    /// engine is first order, so that term is a central finite difference of
    /// input gradients along the parameter direction, with this step.
    std::string gm_second_order = "finite-difference";
    double gm_fd_step = 1e-4;

    [[nodiscard]] double effective_step() const { return step_size > 0.0 ? step_size : epsilon / 30.0; }

    void validate() const {
        if (iterations < 1) throw ConfigError("craft: iterations must be >= 1");
        if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("craft: epsilon must be in [0, 1]");
        if (restarts < 1) throw ConfigError("craft: restarts must be >= 1");
        if (fc_beta < 0.0) throw ConfigError("craft: fc_beta must be >= 0");
        if (gm_second_order != "finite-difference")
            throw ConfigError("craft: unsupported gm second-order mode '" + gm_second_order + "'");
        if (!(gm_fd_step > 0.0)) throw ConfigError("craft: gm_fd_step must be > 0");
    }
};

struct PoisonSet {
    std::vector<std::size_t> base_ids;
    std::vector<Tensor> images;     // C x H x W each
    std::vector<double> loss_trace;  // objective after each iteration (entry 0 = initial)

    [[nodiscard]] std::size_t size() const { return images.size(); }
};

/// Elementwise clamp into [x0 - eps, x0 + eps], then into [0, 1].
inline Tensor project_linf(const Tensor& x, const Tensor& x0, double eps) {
    if (x.shape() != x0.shape())
        throw DimensionError("project_linf: shape " + shape_str(x.shape()) + " vs " + shape_str(x0.shape()));
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        out[i] = std::clamp(std::clamp(x[i], x0[i] - eps, x0[i] + eps), 0.0, 1.0);
    return out;
}

/// Checks the emitted poisons respect the l-inf ball and the pixel range.
inline void check_poison_constraints(const PoisonSet& ps, const std::vector<Tensor>& bases, double eps) {
    for (std::size_t k = 0; k < ps.images.size(); ++k)
        for (std::size_t i = 0; i < ps.images[k].size(); ++i) {
            const double v = ps.images[k][i];
            if (v < 0.0 || v > 1.0 || std::abs(v - bases[k][i]) > eps + 1e-12)
                throw ContractError("poison " + std::to_string(k) + " violates the perturbation constraint");
        }
}

/// Objective value per item (or a single joint value) plus the gradient with
/// respect to the stacked poison batch.
struct CraftEval {
    std::vector<double> per_item;
    Tensor grad;

    [[nodiscard]] double total() const {
        double s = 0.0;
        for (double v : per_item) s += v;
        return s;
    }
};

using CraftObjective = std::function<CraftEval(const Tensor& batch)>;

namespace detail {

inline void check_eval(const CraftEval& e, std::size_t iteration) {
    for (double v : e.per_item)
        if (!std::isfinite(v)) throw CraftingError("non-finite crafting loss", iteration);
    if (!e.grad.all_finite()) throw CraftingError("non-finite crafting gradient", iteration);
}

inline Tensor project_batch(const Tensor& x, const Tensor& x0, double eps) { return project_linf(x, x0, eps); }

/// Signed-gradient projected descent. With `separable` every row is its own
/// problem (per-row acceptance and step size); otherwise one joint objective.
inline PoisonSet signed_pgd(const CraftObjective& objective, const Tensor& bases, const CraftConfig& cfg,
                            bool separable) {
    const std::size_t k = bases.dim(0), per = bases.size() / k;
    PoisonSet best;
    double best_total = std::numeric_limits<double>::infinity();
    for (std::size_t restart = 0; restart < cfg.restarts; ++restart) {
        Tensor x = bases;
        if (restart > 0) {
            Rng rng = Rng(cfg.seed).split(restart);
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += rng.uniform(-cfg.epsilon, cfg.epsilon);
        }
        x = project_batch(x, bases, cfg.epsilon);
        CraftEval cur = objective(x);
        check_eval(cur, 0);
        std::vector<double> trace{cur.total()};
        const std::size_t groups = separable ? k : 1;
        std::vector<double> step(groups, cfg.effective_step());
        for (std::size_t it = 1; it <= cfg.iterations; ++it) {
            Tensor cand(x.shape());
            for (std::size_t r = 0; r < k; ++r) {
                const double s = step[separable ? r : 0];
                for (std::size_t i = r * per; i < (r + 1) * per; ++i) {
                    const double g = cur.grad[i];
                    cand[i] = x[i] - s * (g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0));
                }
            }
            cand = project_batch(cand, bases, cfg.epsilon);
            CraftEval next = objective(cand);
            check_eval(next, it);
            if (!cfg.backtrack) {
                x = std::move(cand);
                cur = std::move(next);
            } else if (!separable) {
                if (next.total() <= cur.total()) {
                    x = std::move(cand);
                    cur = std::move(next);
                } else {
                    step[0] *= 0.5;
                }
            } else {
                for (std::size_t r = 0; r < k; ++r) {
                    if (next.per_item[r] <= cur.per_item[r]) {
                        std::copy_n(cand.ptr() + r * per, per, x.ptr() + r * per);
                        std::copy_n(next.grad.ptr() + r * per, per, cur.grad.ptr() + r * per);
                        cur.per_item[r] = next.per_item[r];
                    } else {
                        step[r] *= 0.5;
                    }
                }
            }
            trace.push_back(cur.total());
        }
        if (cur.total() < best_total) {
            best_total = cur.total();
            best.images.clear();
            for (std::size_t r = 0; r < k; ++r) best.images.push_back(x.row(r).reshaped(bases.row(r).shape()));
            best.loss_trace = std::move(trace);
        }
    }
    return best;
}

inline Tensor tile_rows(const Tensor& row, std::size_t n) {
    std::vector<double> d;
    d.reserve(row.size() * n);
    for (std::size_t i = 0; i < n; ++i) d.insert(d.end(), row.vec().begin(), row.vec().end());
    Shape s{n};
    s.insert(s.end(), row.shape().begin() + 1, row.shape().end());
    return Tensor(std::move(s), std::move(d));
}

inline Tensor as_batch(const Tensor& image) {
    Shape s{1};
    s.insert(s.end(), image.shape().begin(), image.shape().end());
    return image.reshaped(std::move(s));
}

inline void require_inference_ready(const FeatureExtractor& phi, const char* who) {
    if (!phi.frozen()) throw ContractError(std::string(who) + ": extractor must be frozen");
}

}  // namespace detail

/// Feature-collision objective per poison: |phi(x) - phi(t)|^2 + beta |x - b|^2.
inline CraftObjective fc_objective(const FeatureExtractor& phi, const Tensor& bases, const Tensor& target, double beta) {
    const Tensor target_feat = phi.infer(detail::as_batch(target));
    return [&phi, bases, target_feat, beta](const Tensor& x) {
        const std::size_t k = x.dim(0), per = x.size() / k;
        Graph g;
        ParamVars pv = phi.bind(g, false);
        Var xv = g.leaf(x, true);
        Var feats = phi.forward(g, xv, pv, {});
        Var df = sub(feats, g.constant(detail::tile_rows(target_feat, k)));
        Var dx = sub(xv, g.constant(bases));
        Var loss = add(sum_squares(df), scale(sum_squares(dx), beta));
        CraftEval e;
        const Tensor& dfv = df.value();
        const Tensor& dxv = dx.value();
        const std::size_t fw = dfv.size() / k;
        for (std::size_t r = 0; r < k; ++r) {
            double f = 0.0, p = 0.0;
            for (std::size_t i = 0; i < fw; ++i) f += dfv[r * fw + i] * dfv[r * fw + i];
            for (std::size_t i = 0; i < per; ++i) p += dxv[r * per + i] * dxv[r * per + i];
            e.per_item.push_back(f + beta * p);
        }
        e.grad = g.backward(loss)[xv];
        return e;
    };
}

/// Feature collision: each poison independently pulled onto the target in feature space.
inline PoisonSet craft_fc(const FeatureExtractor& phi, const std::vector<Tensor>& bases, const Tensor& target,
                          const CraftConfig& cfg) {
    cfg.validate();
    detail::require_inference_ready(phi, "craft_fc");
    if (bases.empty()) return PoisonSet{};
    const Tensor base_batch = stack(bases);
    PoisonSet ps = detail::signed_pgd(fc_objective(phi, base_batch, target, cfg.fc_beta), base_batch, cfg, true);
    check_poison_constraints(ps, bases, cfg.epsilon);
    return ps;
}

/// Bullseye objective: (1/2m) sum_j |t_j - mean_i phi_j(x_i)|^2 / |t_j| over m tap layers.
inline CraftObjective bp_objective(const FeatureExtractor& phi, const Tensor& target, BpTaps taps) {
    std::vector<Tensor> target_taps;
    {
        std::vector<Tensor> bn_in;
        Tensor feat = phi.infer(detail::as_batch(target), &bn_in);
        if (taps == BpTaps::bn_inputs_and_features) target_taps = std::move(bn_in);
        target_taps.push_back(std::move(feat));
    }
    std::vector<double> inv_norms;
    for (const auto& t : target_taps) {
        const double n = kernels::norm2(t.values());
        if (n == 0.0) throw CraftingError("bullseye: target tap has zero norm", 0);
        inv_norms.push_back(1.0 / n);
    }
    return [&phi, target_taps, inv_norms, taps](const Tensor& x) {
        Graph g;
        ParamVars pv = phi.bind(g, false);
        Var xv = g.leaf(x, true);
        std::vector<Var> bn_in;
        ForwardOptions fo;
        if (taps == BpTaps::bn_inputs_and_features) fo.bn_inputs = &bn_in;
        Var feats = phi.forward(g, xv, pv, fo);
        bn_in.push_back(feats);
        const double m = static_cast<double>(bn_in.size());
        Var loss = g.constant(Tensor::scalar(0.0));
        for (std::size_t j = 0; j < bn_in.size(); ++j) {
            Var diff = sub(batch_mean(bn_in[j]), g.constant(target_taps[j]));
            loss = add(loss, scale(sum_squares(diff), inv_norms[j] / (2.0 * m)));
        }
        CraftEval e;
        e.per_item.push_back(loss.value().item());
        e.grad = g.backward(loss)[xv];
        return e;
    };
}

/// Bullseye Polytope: joint optimization of all poisons so their mean tap
/// features approach the target's at every tap layer.
inline PoisonSet craft_bp(const FeatureExtractor& phi, const std::vector<Tensor>& bases, const Tensor& target,
                          const CraftConfig& cfg) {
    cfg.validate();
    detail::require_inference_ready(phi, "craft_bp");
    if (bases.empty()) return PoisonSet{};
    const Tensor base_batch = stack(bases);
    PoisonSet ps = detail::signed_pgd(bp_objective(phi, target, cfg.bp_taps), base_batch, cfg, false);
    check_poison_constraints(ps, bases, cfg.epsilon);
    return ps;
}

// --- gradient matching ---------------------------------------------------------

/// Victim proxy (extractor + head) viewed as one flat parameter vector theta.
class GradientProxy {
public:
    GradientProxy(const FeatureExtractor& phi, const DownstreamHead& head, GmParams which)
        : phi_(phi), head_(head), which_(which) {}

    [[nodiscard]] std::vector<double> theta() const {
        std::vector<double> out;
        if (which_ == GmParams::full) out = phi_.flat_parameters();
        out.insert(out.end(), head_.linear.weight.vec().begin(), head_.linear.weight.vec().end());
        out.insert(out.end(), head_.linear.bias.vec().begin(), head_.linear.bias.vec().end());
        return out;
    }

    /// Gradient of sum_i CE(f(x_i), y) with respect to theta, and the summed loss.
    [[nodiscard]] std::pair<std::vector<double>, double> param_grad(const Tensor& x, std::size_t label) const {
        Graph g;
        const bool full = which_ == GmParams::full;
        ParamVars pv = phi_.bind(g, full);
        ParamVars hv = head_.bind(g, true);
        Var logits = head_.forward(g, phi_.forward(g, g.constant(x), pv, {}), hv);
        const std::size_t n = x.dim(0);
        Var loss = scale(softmax_cross_entropy(logits, std::vector<std::size_t>(n, label)), static_cast<double>(n));
        auto grads = g.backward(loss);
        std::vector<double> out;
        if (full)
            for (auto v : pv.vars) out.insert(out.end(), grads[v].vec().begin(), grads[v].vec().end());
        for (auto v : hv.vars) out.insert(out.end(), grads[v].vec().begin(), grads[v].vec().end());
        return {std::move(out), loss.value().item()};
    }

    /// Input gradient of sum_i CE(f(x_i; theta + delta), y).
    [[nodiscard]] Tensor input_grad(const Tensor& x, std::size_t label, std::span<const double> delta) const {
        FeatureExtractor phi = phi_;
        DownstreamHead head = head_;
        std::size_t off = 0;
        if (which_ == GmParams::full) {
            auto flat = phi.flat_parameters();
            for (auto& v : flat) v += delta[off++];
            phi.assign_flat_parameters(flat);
        }
        for (auto* t : head.parameters())
            for (auto& v : t->values()) v += delta[off++];
        Graph g;
        ParamVars pv = phi.bind(g, false);
        ParamVars hv = head.bind(g, false);
        Var xv = g.leaf(x, true);
        Var logits = head.forward(g, phi.forward(g, xv, pv, {}), hv);
        const std::size_t n = x.dim(0);
        Var loss = scale(softmax_cross_entropy(logits, std::vector<std::size_t>(n, label)), static_cast<double>(n));
        return g.backward(loss)[xv];
    }

private:
    const FeatureExtractor& phi_;
    const DownstreamHead& head_;
    GmParams which_;
};

/// 1 - cos(g_target, sum_i grad_theta L(x_i, y_base)); the input gradient uses a
/// central difference of input gradients along the cosine's parameter-space gradient.
inline CraftObjective gm_objective(const GradientProxy& proxy, const std::vector<double>& target_grad,
                                   std::size_t base_label, double fd_step) {
    const double tnorm = kernels::norm2(target_grad);
    if (tnorm == 0.0) throw CraftingError("gradient matching: target gradient has zero norm", 0);
    return [&proxy, target_grad, tnorm, base_label, fd_step](const Tensor& x) {
        auto [pg, loss] = proxy.param_grad(x, base_label);
        const double pnorm = kernels::norm2(pg);
        if (pnorm == 0.0) throw CraftingError("gradient matching: poison gradient has zero norm", 0);
        const double cs = kernels::dot(target_grad, pg) / (tnorm * pnorm);
        // dJ/dG for J = 1 - cos(g_t, G)
        std::vector<double> v(pg.size());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = -(target_grad[i] / (tnorm * pnorm) - cs * pg[i] / (pnorm * pnorm));
        const double vnorm = kernels::norm2(v);
        CraftEval e;
        e.per_item.push_back(1.0 - cs);
        if (vnorm == 0.0) {
            e.grad = Tensor(x.shape(), 0.0);
            return e;
        }
        std::vector<double> dp(v.size()), dm(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            dp[i] = fd_step * v[i] / vnorm;
            dm[i] = -dp[i];
        }
        Tensor gp = proxy.input_grad(x, base_label, dp);
        Tensor gm = proxy.input_grad(x, base_label, dm);
        e.grad = Tensor(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) e.grad[i] = vnorm * (gp[i] - gm[i]) / (2.0 * fd_step);
        return e;
    };
}

/// Gradient matching against the victim proxy (extractor + head).
inline PoisonSet craft_gm(const FeatureExtractor& phi, const DownstreamHead& head, const std::vector<Tensor>& bases,
                          std::size_t base_label, const Tensor& target, const CraftConfig& cfg) {
    cfg.validate();
    detail::require_inference_ready(phi, "craft_gm");
    if (bases.empty()) return PoisonSet{};
    GradientProxy proxy(phi, head, cfg.gm_params);
    const auto target_grad = proxy.param_grad(detail::as_batch(target), base_label).first;
    const Tensor base_batch = stack(bases);
    PoisonSet ps = detail::signed_pgd(gm_objective(proxy, target_grad, base_label, cfg.gm_fd_step), base_batch, cfg, false);
    check_poison_constraints(ps, bases, cfg.epsilon);
    return ps;
}

/// True iff the head classifies the target as the base class.
inline bool attack_success(const FeatureExtractor& phi, const DownstreamHead& head, const PoisonTask& task) {
    return head.predict(phi.infer(detail::as_batch(task.target.image)))[0] == task.base_class;
}

// --- export -----------------------------------------------------------------------

/// manifest.txt ("base_id file" per poison), one PSV1 tensor per poison, loss_trace.csv.
inline void export_poison_set(const std::filesystem::path& dir, const PoisonSet& ps) {
    if (ps.base_ids.size() != ps.images.size()) throw ContractError("export_poison_set: ids/images length mismatch");
    std::filesystem::create_directories(dir);
    std::ofstream m(dir / "manifest.txt", std::ios::trunc);
    if (!m) throw IoError("cannot write " + (dir / "manifest.txt").string());
    for (std::size_t k = 0; k < ps.images.size(); ++k) {
        const std::string file = "poison_" + std::to_string(ps.base_ids[k]) + ".psv";
        write_tensor(dir / file, ps.images[k]);
        m << ps.base_ids[k] << ' ' << file << '\n';
    }
    std::ofstream t(dir / "loss_trace.csv", std::ios::trunc);
    if (!t) throw IoError("cannot write " + (dir / "loss_trace.csv").string());
    t.precision(17);
    t << "iteration,loss\n";
    for (std::size_t i = 0; i < ps.loss_trace.size(); ++i) t << i << ',' << ps.loss_trace[i] << '\n';
}

inline PoisonSet import_poison_set(const std::filesystem::path& dir) {
    std::ifstream m(dir / "manifest.txt");
    if (!m) throw IoError("cannot open " + (dir / "manifest.txt").string());
    PoisonSet ps;
    std::string line;
    while (std::getline(m, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::size_t id = 0;
        std::string file;
        if (!(ss >> id >> file)) throw FormatError("poison manifest: malformed line '" + line + "'", 0);
        ps.base_ids.push_back(id);
        ps.images.push_back(read_tensor(dir / file));
    }
    std::ifstream t(dir / "loss_trace.csv");
    if (t) {
        std::getline(t, line);
        while (std::getline(t, line)) {
            const auto comma = line.find(',');
            if (comma != std::string::npos) ps.loss_trace.push_back(std::stod(line.substr(comma + 1)));
        }
    }
    return ps;
}

}  // namespace bnsieve
