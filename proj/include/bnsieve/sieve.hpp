#pragma once

// Characteristic-vector poison filtering. Nothing in this header can see
// provenance: every entry point takes a DatasetView or plain arrays.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bnsieve/data.hpp"
#include "bnsieve/error.hpp"
#include "bnsieve/kernels.hpp"
#include "bnsieve/nn.hpp"

namespace bnsieve {

struct LayerStats {
    std::vector<double> mean;
    std::vector<double> var;  // population variance, >= 0

    friend bool operator==(const LayerStats&, const LayerStats&) = default;
};

/// Per-BN-layer (channel mean, channel variance), ordered by depth.
struct CharacteristicVector {
    std::vector<LayerStats> layers;

    friend bool operator==(const CharacteristicVector&, const CharacteristicVector&) = default;
};

struct Centroid {
    std::size_t label = 0;
    CharacteristicVector cv;
};

struct DistanceConfig {
    std::vector<double> gamma;  // one weight per BN layer; empty = all ones
    double beta = 0.5;

    [[nodiscard]] std::vector<double> weights(std::size_t layers) const {
        if (gamma.empty()) return std::vector<double>(layers, 1.0);
        if (gamma.size() != layers)
            throw ContractError("distance config: " + std::to_string(gamma.size()) + " gamma weights for " +
                                std::to_string(layers) + " layers");
        return gamma;
    }

    void validate() const {
        if (beta < 0.0 || beta > 1.0) throw ConfigError("distance config: beta must be in [0, 1]");
        if (!gamma.empty()) {
            bool any = false;
            for (double g : gamma) {
                if (g < 0.0) throw ConfigError("distance config: gamma weights must be >= 0");
                any = any || g > 0.0;
            }
            if (!any) throw ConfigError("distance config: at least one gamma weight must be positive");
        }
    }

    /// gamma_i proportional to depth (1, 2, ..., l).
    static DistanceConfig depth_weighted(std::size_t layers, double beta = 0.5) {
        DistanceConfig c;
        for (std::size_t i = 0; i < layers; ++i) c.gamma.push_back(static_cast<double>(i + 1));
        c.beta = beta;
        return c;
    }
};

inline constexpr std::size_t kRemovedLabel = std::numeric_limits<std::size_t>::max();

struct PointVerdict {
    std::size_t id = 0;
    std::size_t label = 0;
    std::size_t real_label = 0;
    std::vector<double> distances;  // one per class centroid (sieve); empty for the spectral baseline
    double score = 0.0;             // spectral outlier score (spectral baseline only)
};

struct FilterReport {
    std::vector<PointVerdict> points;
    std::vector<std::size_t> kept;
    std::vector<std::size_t> removed;

    [[nodiscard]] const PointVerdict& verdict(std::size_t id) const {
        for (const auto& p : points)
            if (p.id == id) return p;
        throw ContractError("filter report: unknown id " + std::to_string(id));
    }

    [[nodiscard]] bool was_removed(std::size_t id) const {
        return std::find(removed.begin(), removed.end(), id) != removed.end();
    }
};

// --- statistics ----------------------------------------------------------------

namespace detail {

inline LayerStats per_sample_stats(const Tensor& act, std::size_t n) {
    const std::size_t c_count = act.dim(1), inner = kernels::per_channel_inner(act);
    LayerStats s{std::vector<double>(c_count), std::vector<double>(c_count)};
    const double m = static_cast<double>(inner);
    for (std::size_t c = 0; c < c_count; ++c) {
        const double* p = act.ptr() + (n * c_count + c) * inner;
        double acc = 0.0;
        for (std::size_t i = 0; i < inner; ++i) acc += p[i];
        const double mu = acc / m;
        double sq = 0.0;
        for (std::size_t i = 0; i < inner; ++i) sq += (p[i] - mu) * (p[i] - mu);
        s.mean[c] = mu;
        s.var[c] = sq / m;
    }
    return s;
}

inline void require_bn(const FeatureExtractor& phi) {
    if (phi.bn_count() == 0) throw ContractError("characteristic vector: model has no batch-normalization layers");
}

}  // namespace detail

/// Characteristic vectors of every image in a batch (N x C x H x W).
inline std::vector<CharacteristicVector> characteristic_vectors(const FeatureExtractor& phi, const Tensor& batch,
                                                                BnTap tap = BnTap::input, std::size_t chunk = 64) {
    detail::require_bn(phi);
    const std::size_t n = batch.dim(0), per = batch.size() / n;
    std::vector<CharacteristicVector> out;
    out.reserve(n);
    for (std::size_t s = 0; s < n; s += chunk) {
        const std::size_t e = std::min(n, s + chunk);
        Shape sh = batch.shape();
        sh[0] = e - s;
        Tensor part(sh, std::vector<double>(batch.vec().begin() + static_cast<std::ptrdiff_t>(s * per),
                                            batch.vec().begin() + static_cast<std::ptrdiff_t>(e * per)));
        auto acts = capture_bn_inputs(phi, part, tap);
        for (std::size_t r = 0; r < e - s; ++r) {
            CharacteristicVector cv;
            for (const auto& a : acts) cv.layers.push_back(detail::per_sample_stats(a, r));
            out.push_back(std::move(cv));
        }
    }
    return out;
}

/// Characteristic vector of a single C x H x W (or 1 x C x H x W) datapoint.
inline CharacteristicVector characteristic_vector(const FeatureExtractor& phi, const Tensor& x, BnTap tap = BnTap::input) {
    Tensor b = x;
    if (x.rank() == 3) b = x.reshaped(Shape{1, x.dim(0), x.dim(1), x.dim(2)});
    if (b.rank() != 4 || b.dim(0) != 1) throw DimensionError("characteristic_vector: expected one datapoint, got " + shape_str(x.shape()));
    return characteristic_vectors(phi, b, tap).front();
}

/// Pools per-point statistics into the statistics of the concatenated
/// activations (all members have equal spatial size per layer): pooled mean is
/// the mean of means, pooled variance is mean within-point variance plus the
/// spread of the point means.
inline CharacteristicVector pool_characteristic_vectors(const std::vector<const CharacteristicVector*>& members) {
    if (members.empty()) throw ContractError("pool: no members");
    CharacteristicVector out;
    const double n = static_cast<double>(members.size());
    for (std::size_t l = 0; l < members.front()->layers.size(); ++l) {
        const std::size_t cc = members.front()->layers[l].mean.size();
        LayerStats s{std::vector<double>(cc, 0.0), std::vector<double>(cc, 0.0)};
        for (std::size_t c = 0; c < cc; ++c) {
            double mu = 0.0;
            for (auto* m : members) mu += m->layers[l].mean[c];
            mu /= n;
            double within = 0.0, between = 0.0;
            for (auto* m : members) {
                within += m->layers[l].var[c];
                const double d = m->layers[l].mean[c] - mu;
                between += d * d;
            }
            s.mean[c] = mu;
            s.var[c] = (within + between) / n;
        }
        out.layers.push_back(std::move(s));
    }
    return out;
}

/// One centroid per class from precomputed per-point vectors.
inline std::vector<Centroid> centroids_from_cvs(const std::vector<CharacteristicVector>& cvs,
                                                const std::vector<std::size_t>& labels, std::size_t classes) {
    std::vector<Centroid> out;
    for (std::size_t y = 0; y < classes; ++y) {
        std::vector<const CharacteristicVector*> members;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == y) members.push_back(&cvs[i]);
        if (members.empty()) throw ContractError("class_centroids: class " + std::to_string(y) + " is empty");
        out.push_back(Centroid{y, pool_characteristic_vectors(members)});
    }
    return out;
}

/// Centroid characteristic vector of every class, pooled over all members
/// (poisons included, since the defense cannot tell them apart).
inline std::vector<Centroid> class_centroids(const FeatureExtractor& phi, const DatasetView& data, BnTap tap = BnTap::input) {
    return centroids_from_cvs(characteristic_vectors(phi, data.batch(), tap), data.labels(), data.classes());
}

// --- distances -------------------------------------------------------------------

/// 1 - a.b / (|a||b|). Zero-norm input is an error.
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine_distance: length " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    const double na = kernels::norm2(a), nb = kernels::norm2(b);
    if (na == 0.0 || nb == 0.0) throw ContractError("cosine_distance: degenerate zero-norm vector");
    return 1.0 - kernels::dot(a, b) / (na * nb);
}

/// cosine_distance extended to zero vectors: 0 if both are zero, 1 if exactly one is.
inline double cosine_distance_total(std::span<const double> a, std::span<const double> b) {
    const bool za = kernels::norm2(a) == 0.0, zb = kernels::norm2(b) == 0.0;
    if (za && zb) return 0.0;
    if (za || zb) return 1.0;
    return cosine_distance(a, b);
}

/// sum_i gamma_i (beta cos(mean_i) + (1 - beta) cos(var_i)).
inline double cv_distance(const CharacteristicVector& x, const CharacteristicVector& c, const DistanceConfig& cfg) {
    if (x.layers.size() != c.layers.size())
        throw ContractError("cv_distance: " + std::to_string(x.layers.size()) + " layers vs " +
                            std::to_string(c.layers.size()));
    const auto gamma = cfg.weights(x.layers.size());
    double d = 0.0;
    for (std::size_t i = 0; i < x.layers.size(); ++i) {
        if (gamma[i] == 0.0) continue;
        d += gamma[i] * (cfg.beta * cosine_distance_total(x.layers[i].mean, c.layers[i].mean) +
                         (1.0 - cfg.beta) * cosine_distance_total(x.layers[i].var, c.layers[i].var));
    }
    return d;
}

inline double cv_distance(const CharacteristicVector& x, const Centroid& c, const DistanceConfig& cfg) {
    return cv_distance(x, c.cv, cfg);
}

/// Index of the nearest centroid; ties go to the smallest class id.
inline std::size_t nearest_centroid(const std::vector<double>& distances) {
    std::size_t best = 0;
    for (std::size_t y = 1; y < distances.size(); ++y)
        if (distances[y] < distances[best]) best = y;
    return best;
}

/// Real label y^r of every point: label of the nearest centroid.
inline std::map<std::size_t, std::size_t> assign_real_labels(const FeatureExtractor& phi, const DatasetView& data,
                                                             const std::vector<Centroid>& centroids,
                                                             const DistanceConfig& cfg, BnTap tap = BnTap::input) {
    if (centroids.size() != data.classes()) throw ContractError("assign_real_labels: centroids do not cover all classes");
    const auto cvs = characteristic_vectors(phi, data.batch(), tap);
    std::map<std::size_t, std::size_t> out;
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::vector<double> d;
        for (const auto& c : centroids) d.push_back(cv_distance(cvs[i], c, cfg));
        out[data[i].id] = centroids[nearest_centroid(d)].label;
    }
    return out;
}

/// Filtering from precomputed characteristic vectors: centroids over the whole
/// set, nearest-centroid real label, keep iff real label equals dataset label.
inline FilterReport filter_from_cvs(const std::vector<std::size_t>& ids, const std::vector<std::size_t>& labels,
                                    const std::vector<CharacteristicVector>& cvs, std::size_t classes,
                                    const DistanceConfig& cfg) {
    cfg.validate();
    const auto centroids = centroids_from_cvs(cvs, labels, classes);
    FilterReport rep;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        PointVerdict v{ids[i], labels[i], 0, {}, 0.0};
        for (const auto& c : centroids) v.distances.push_back(cv_distance(cvs[i], c, cfg));
        v.real_label = nearest_centroid(v.distances);
        (v.real_label == v.label ? rep.kept : rep.removed).push_back(v.id);
        rep.points.push_back(std::move(v));
    }
    return rep;
}

inline FilterReport filter_dataset(const FeatureExtractor& phi, const DatasetView& data, const DistanceConfig& cfg,
                                   BnTap tap = BnTap::input) {
    return filter_from_cvs(data.ids(), data.labels(), characteristic_vectors(phi, data.batch(), tap), data.classes(), cfg);
}

// --- spectral signatures baseline ---------------------------------------------------

/// Per class: center the feature rows, score each by its squared projection on
/// the top principal direction, remove the floor(fraction * n) highest scores
/// (ties: higher id first). Classes of size 1 are skipped.
inline FilterReport spectral_from_features(const std::vector<std::size_t>& ids, const std::vector<std::size_t>& labels,
                                           const Tensor& features, std::size_t classes, double removal_fraction,
                                           std::ostream* warn = &std::cerr) {
    if (!(removal_fraction > 0.0 && removal_fraction < 1.0))
        throw ConfigError("spectral: removal_fraction must be in (0, 1)");
    const std::size_t width = features.dim(1);
    FilterReport rep;
    rep.points.resize(ids.size());
    std::vector<bool> removed(ids.size(), false);
    for (std::size_t y = 0; y < classes; ++y) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == y) rows.push_back(i);
        for (auto r : rows) rep.points[r] = PointVerdict{ids[r], labels[r], labels[r], {}, 0.0};
        if (rows.size() < 2) {
            if (!rows.empty() && warn) *warn << "spectral: skipping class " << y << " with a single member\n";
            continue;
        }
        Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width));
        for (std::size_t a = 0; a < rows.size(); ++a)
            for (std::size_t b = 0; b < width; ++b) m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = features[rows[a] * width + b];
        m.rowwise() -= m.colwise().mean();
        const Eigen::MatrixXd cov = m.transpose() * m;
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
        const Eigen::VectorXd top = es.eigenvectors().col(static_cast<Eigen::Index>(width) - 1);
        const bool degenerate = es.eigenvalues()(static_cast<Eigen::Index>(width) - 1) <= 0.0;
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t a = 0; a < rows.size(); ++a) {
            const double proj = degenerate ? 0.0 : m.row(static_cast<Eigen::Index>(a)).dot(top);
            rep.points[rows[a]].score = proj * proj;
            scored.emplace_back(proj * proj, rows[a]);
        }
        std::sort(scored.begin(), scored.end(), [&](const auto& p, const auto& q) {
            if (p.first != q.first) return p.first > q.first;
            return ids[p.second] > ids[q.second];
        });
        const auto n_remove = static_cast<std::size_t>(std::floor(removal_fraction * static_cast<double>(rows.size()) + 1e-9));
        for (std::size_t k = 0; k < n_remove; ++k) removed[scored[k].second] = true;
    }
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (removed[i]) {
            rep.points[i].real_label = kRemovedLabel;
            rep.removed.push_back(ids[i]);
        } else {
            rep.kept.push_back(ids[i]);
        }
    }
    return rep;
}

inline FilterReport spectral_filter_baseline(const FeatureExtractor& phi, const DatasetView& data,
                                             double removal_fraction = 0.2) {
    return spectral_from_features(data.ids(), data.labels(), extract_features_chunked(phi, data.batch()), data.classes(),
                                  removal_fraction);
}

// --- histogram export ------------------------------------------------------------------

struct HistogramRow {
    std::size_t id = 0;
    std::string provenance;  // clean | poisoned
    double distance_to_base = 0.0;
    double distance_to_target = 0.0;
    std::string real_or_failed;  // real | failed | n/a
};

/// Rows for every base-class point in the report. Provenance and the poison
/// set's realness come from the experiment harness, never from the defense.
inline std::vector<HistogramRow> export_distance_histogram(const FilterReport& report, std::size_t base_class,
                                                           std::size_t target_class,
                                                           const std::function<Provenance(std::size_t)>& provenance_of,
                                                           bool poison_set_is_real) {
    std::vector<HistogramRow> rows;
    for (const auto& p : report.points) {
        if (p.label != base_class) continue;
        if (p.distances.size() <= std::max(base_class, target_class))
            throw ContractError("histogram: report lacks per-centroid distances");
        const Provenance prov = provenance_of(p.id);
        rows.push_back(HistogramRow{p.id, to_string(prov), p.distances[base_class], p.distances[target_class],
                                    prov == Provenance::clean ? "n/a" : (poison_set_is_real ? "real" : "failed")});
    }
    return rows;
}

inline std::string histogram_csv(const std::vector<HistogramRow>& rows) {
    std::ostringstream os;
    os.precision(17);
    os << "id,provenance,distance_to_base,distance_to_target,real_or_failed\n";
    for (const auto& r : rows)
        os << r.id << ',' << r.provenance << ',' << r.distance_to_base << ',' << r.distance_to_target << ','
           << r.real_or_failed << '\n';
    return os.str();
}

// --- serialization ------------------------------------------------------------------------

inline nlohmann::ordered_json filter_report_json(const FilterReport& r) {
    nlohmann::ordered_json j;
    j["points"] = nlohmann::ordered_json::array();
    for (const auto& p : r.points) {
        nlohmann::ordered_json q;
        q["id"] = p.id;
        q["label"] = p.label;
        if (p.real_label == kRemovedLabel) q["real_label"] = nullptr;
        else q["real_label"] = p.real_label;
        q["distances"] = p.distances;
        q["score"] = p.score;
        j["points"].push_back(std::move(q));
    }
    j["kept"] = r.kept;
    j["removed"] = r.removed;
    return j;
}

inline FilterReport filter_report_from_json(const nlohmann::json& j) {
    try {
        FilterReport r;
        for (const auto& q : j.at("points")) {
            PointVerdict p;
            p.id = q.at("id").get<std::size_t>();
            p.label = q.at("label").get<std::size_t>();
            p.real_label = q.at("real_label").is_null() ? kRemovedLabel : q.at("real_label").get<std::size_t>();
            p.distances = q.at("distances").get<std::vector<double>>();
            p.score = q.at("score").get<double>();
            r.points.push_back(std::move(p));
        }
        r.kept = j.at("kept").get<std::vector<std::size_t>>();
        r.removed = j.at("removed").get<std::vector<std::size_t>>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("filter report: ") + e.what(), 0);
    }
}

}  // namespace bnsieve
