#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <set>
#include <sstream>

#include "bnsieve/sieve.hpp"
#include "support/oracles.hpp"
#include "support/world.hpp"

using namespace bnsieve;

namespace {

LayerStats stats(std::vector<double> m, std::vector<double> v) { return LayerStats{std::move(m), std::move(v)}; }

}  // namespace

TEST(CharacteristicVector, MatchesElementLoop) {
    Rng rng(1);
    auto phi = oracle::random_extractor("TinyConvBN-4", rng, 16);
    Tensor x = Tensor::rand({5, 3, 16, 16}, rng);
    auto cvs = characteristic_vectors(phi, x, BnTap::input, 2);
    auto acts = capture_bn_inputs(phi, x);
    ASSERT_EQ(cvs.size(), 5u);
    for (std::size_t n = 0; n < 5; ++n) {
        ASSERT_EQ(cvs[n].layers.size(), 4u);
        CharacteristicVector ref;
        for (const auto& a : acts) ref.layers.push_back(oracle::naive_sample_stats(a, n));
        EXPECT_LE(oracle::max_abs_diff(cvs[n], ref), 1e-12);
        for (const auto& l : cvs[n].layers)
            for (double v : l.var) EXPECT_GE(v, 0.0);
        EXPECT_EQ(characteristic_vector(phi, x.row(n)), cvs[n]);
    }
}

TEST(CharacteristicVector, ConstantActivationHasZeroVariance) {
    // Zero input through a fresh extractor: the first BN input is the (zero) conv bias.
    auto phi = build_extractor("TinyConvBN-2", 2);
    phi.freeze();
    auto cv = characteristic_vector(phi, Tensor({3, 16, 16}));
    for (double m : cv.layers[0].mean) EXPECT_EQ(m, 0.0);
    for (double v : cv.layers[0].var) EXPECT_EQ(v, 0.0);
}

TEST(CharacteristicVector, IdenticalPointsIdenticalVectors) {
    Rng rng(3);
    auto phi = oracle::random_extractor("TinyConvBN-2", rng, 16);
    Tensor img = Tensor::rand({3, 16, 16}, rng);
    EXPECT_EQ(characteristic_vector(phi, img), characteristic_vector(phi, img));
}

TEST(CharacteristicVector, ModelWithoutBnIsContractError) {
    auto phi = build_extractor("TinyConvBN-2", 1);
    std::vector<Layer> plain;
    for (const auto& l : phi.layers())
        if (!std::holds_alternative<BatchNormLayer>(l)) plain.push_back(l);
    FeatureExtractor nobn(phi.arch(), plain);
    EXPECT_THROW(characteristic_vector(nobn, Tensor({3, 16, 16})), ContractError);
}

TEST(Centroids, MatchConcatenationOracle) {
    Rng rng(4);
    auto phi = oracle::random_extractor("TinyConvBN-4", rng, 16);
    for (int batch = 0; batch < 5; ++batch) {
        std::vector<DataPoint> pts;
        for (std::size_t i = 0; i < 9; ++i) pts.push_back({i, Tensor::rand({3, 16, 16}, rng), i % 3});
        DatasetView d(pts, 3);
        auto cents = class_centroids(phi, d);
        auto acts = capture_bn_inputs(phi, d.batch());
        ASSERT_EQ(cents.size(), 3u);
        for (std::size_t y = 0; y < 3; ++y) {
            EXPECT_EQ(cents[y].label, y);
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < 9; ++i)
                if (i % 3 == y) rows.push_back(i);
            EXPECT_LE(oracle::max_abs_diff(cents[y].cv, oracle::concat_centroid(acts, rows)), 1e-12);
        }
    }
}

TEST(Centroids, SingletonAndIdenticalMembers) {
    Rng rng(5);
    auto phi = oracle::random_extractor("TinyConvBN-2", rng, 16);
    Tensor img = Tensor::rand({3, 16, 16}, rng);
    DatasetView single({{0, img, 0}, {1, Tensor::rand({3, 16, 16}, rng), 1}}, 2);
    auto c = class_centroids(phi, single);
    EXPECT_LE(oracle::max_abs_diff(c[0].cv, characteristic_vector(phi, img)), 1e-15);

    DatasetView same({{0, img, 0}, {1, img, 0}, {2, img, 0}, {3, img, 1}}, 2);
    auto c2 = class_centroids(phi, same);
    EXPECT_LE(oracle::max_abs_diff(c2[0].cv, characteristic_vector(phi, img)), 1e-12);
}

TEST(Centroids, EmptyClassIsContractError) {
    Rng rng(6);
    auto phi = oracle::random_extractor("TinyConvBN-2", rng, 16);
    DatasetView d({{0, Tensor::rand({3, 16, 16}, rng), 0}}, 2);
    try {
        class_centroids(phi, d);
        FAIL();
    } catch (const ContractError& e) {
        EXPECT_NE(std::string(e.what()).find("class 1"), std::string::npos);
    }
}

TEST(Cosine, Examples) {
    std::vector<double> a{1, 0}, b{1, 1}, o{0, 1}, z{0, 0};
    EXPECT_NEAR(cosine_distance(a, a), 0.0, 1e-15);
    EXPECT_NEAR(cosine_distance(a, o), 1.0, 1e-15);
    EXPECT_NEAR(cosine_distance(a, b), 1.0 - 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(cosine_distance(a, std::vector<double>{-2, 0}), 2.0, 1e-15);
    EXPECT_THROW(cosine_distance(a, z), ContractError);
    EXPECT_THROW(cosine_distance(a, std::vector<double>{1, 0, 0}), DimensionError);
    EXPECT_EQ(cosine_distance_total(z, z), 0.0);
    EXPECT_EQ(cosine_distance_total(a, z), 1.0);
}

TEST(CvDistance, Examples) {
    Rng rng(7);
    auto x = oracle::random_cv(rng, 3, 4);
    EXPECT_NEAR(cv_distance(x, x, DistanceConfig{}), 0.0, 1e-14);

    // Hand computation, one layer, gamma 1, beta 0.5:
    // means (1,0) vs (1,1): 1 - 1/sqrt2; vars (1,2) vs (2,1): 1 - 4/5.
    CharacteristicVector p{{stats({1, 0}, {1, 2})}}, c{{stats({1, 1}, {2, 1})}};
    DistanceConfig cfg{{1.0}, 0.5};
    EXPECT_NEAR(cv_distance(p, c, cfg), 0.5 * (1.0 - 1.0 / std::sqrt(2.0)) + 0.5 * (1.0 - 0.8), 1e-15);

    EXPECT_THROW(cv_distance(p, CharacteristicVector{{stats({1}, {1}), stats({1}, {1})}}, cfg), ContractError);
    EXPECT_THROW((DistanceConfig{{0.0, 0.0}, 0.5}.validate()), ConfigError);
    EXPECT_THROW((DistanceConfig{{}, 1.5}.validate()), ConfigError);
}

TEST(CvDistance, Properties) {
    Rng rng(8);
    for (int t = 0; t < 200; ++t) {
        const std::size_t layers = 1 + rng.below(4), ch = 1 + rng.below(6);
        auto a = oracle::random_cv(rng, layers, ch), b = oracle::random_cv(rng, layers, ch);
        auto cfg = oracle::random_cfg(rng, layers);
        EXPECT_GE(cv_distance(a, b, cfg), 0.0);
        EXPECT_NEAR(cv_distance(a, a, cfg), 0.0, 1e-12);
        // beta = 1: variance changes are invisible
        cfg.beta = 1.0;
        auto a2 = a;
        for (auto& l : a2.layers)
            for (auto& v : l.var) v = rng.uniform(0.01, 5.0);
        EXPECT_EQ(cv_distance(a, b, cfg), cv_distance(a2, b, cfg));
    }
}

TEST(CvDistance, PositiveGammaScalingKeepsArgmin) {
    Rng rng(9);
    for (int t = 0; t < 200; ++t) {
        const std::size_t layers = 1 + rng.below(4), classes = 2 + rng.below(5);
        auto x = oracle::random_cv(rng, layers, 3);
        std::vector<CharacteristicVector> cents;
        for (std::size_t c = 0; c < classes; ++c) cents.push_back(oracle::random_cv(rng, layers, 3));
        auto cfg = oracle::random_cfg(rng, layers);
        auto scaled = cfg;
        const double s = rng.uniform(0.01, 100.0);
        for (auto& g : scaled.gamma) g *= s;
        std::vector<double> d1, d2;
        for (const auto& c : cents) {
            d1.push_back(cv_distance(x, c, cfg));
            d2.push_back(cv_distance(x, c, scaled));
        }
        EXPECT_EQ(nearest_centroid(d1), nearest_centroid(d2));
    }
}

TEST(NearestCentroid, ZeroDistanceAndTies) {
    EXPECT_EQ(nearest_centroid({0.3, 0.2, 0.5, 0.0, 0.1}), 3u);
    EXPECT_EQ(nearest_centroid({0.4, 0.1, 0.1}), 1u);
    EXPECT_EQ(nearest_centroid({0.1, 0.1}), 0u);
}

TEST(Filter, PartitionAndMovedPoint) {
    Rng rng(10);
    std::vector<CharacteristicVector> cvs;
    std::vector<std::size_t> ids, labels;
    // three well-separated clusters of CVs
    std::vector<CharacteristicVector> centers;
    for (std::size_t c = 0; c < 3; ++c) centers.push_back(oracle::random_cv(rng, 2, 5));
    for (std::size_t i = 0; i < 30; ++i) {
        auto cv = centers[i % 3];
        for (auto& l : cv.layers) {
            for (auto& m : l.mean) m += rng.normal(0.0, 0.01);
            for (auto& v : l.var) v *= 1.0 + rng.uniform(-0.01, 0.01);
        }
        cvs.push_back(cv);
        ids.push_back(100 + i);
        labels.push_back(i % 3);
    }
    // point 0 (class 0) carries class 2's statistics
    cvs[0] = centers[2];
    auto rep = filter_from_cvs(ids, labels, cvs, 3, DistanceConfig{});
    EXPECT_TRUE(rep.was_removed(100));
    EXPECT_EQ(rep.verdict(100).real_label, 2u);
    std::set<std::size_t> all(rep.kept.begin(), rep.kept.end());
    for (auto id : rep.removed) EXPECT_TRUE(all.insert(id).second);
    EXPECT_EQ(all, std::set<std::size_t>(ids.begin(), ids.end()));
    for (const auto& p : rep.points) EXPECT_EQ(rep.was_removed(p.id), p.real_label != p.label);
    EXPECT_EQ(rep.removed.size(), 1u);

    auto again = filter_from_cvs(ids, labels, cvs, 3, DistanceConfig{});
    EXPECT_EQ(again.kept, rep.kept);
    EXPECT_EQ(filter_report_json(again).dump(), filter_report_json(rep).dump());
}

TEST(Filter, CleanDeskScaleSetKeepsAlmostEverything) {
    const auto& w = world::get();
    const auto& d = w.splits.finetune;
    auto rep = filter_dataset(w.phi, d, DistanceConfig{});
    auto labels = assign_real_labels(w.phi, d, class_centroids(w.phi, d), DistanceConfig{});
    std::size_t agree = 0;
    for (const auto& p : d.points()) agree += labels.at(p.id) == p.label;
    EXPECT_GE(static_cast<double>(agree) / static_cast<double>(d.size()), 0.98);
    EXPECT_LE(static_cast<double>(rep.removed.size()) / static_cast<double>(d.size()), 0.02);
}

TEST(Filter, ReportJsonRoundTrip) {
    FilterReport r;
    r.points.push_back(PointVerdict{1, 0, 0, {0.1, 0.2}, 0.0});
    r.points.push_back(PointVerdict{2, 1, kRemovedLabel, {}, 3.5});
    r.kept = {1};
    r.removed = {2};
    auto back = filter_report_from_json(nlohmann::json::parse(filter_report_json(r).dump()));
    EXPECT_EQ(back.points[1].real_label, kRemovedLabel);
    EXPECT_EQ(back.points[0].distances, r.points[0].distances);
    EXPECT_EQ(back.kept, r.kept);
    EXPECT_EQ(back.removed, r.removed);
    EXPECT_THROW(filter_report_from_json(nlohmann::json::parse("{\"points\": 3}")), FormatError);
}

TEST(Spectral, DegenerateClassRemovesHighestIds) {
    Tensor f(Shape{10, 3}, 1.0);
    std::vector<std::size_t> ids, labels;
    for (std::size_t i = 0; i < 10; ++i) {
        ids.push_back(i);
        labels.push_back(0);
    }
    std::ostringstream warn;
    auto rep = spectral_from_features(ids, labels, f, 1, 0.2, &warn);
    for (const auto& p : rep.points) EXPECT_EQ(p.score, 0.0);
    EXPECT_EQ(std::set<std::size_t>(rep.removed.begin(), rep.removed.end()), (std::set<std::size_t>{8, 9}));
}

TEST(Spectral, OutlierScoresHighestAndSingletonsSkipped) {
    Rng rng(11);
    Tensor f = Tensor::randn({11, 4}, rng, 0.1);
    std::vector<std::size_t> ids, labels;
    for (std::size_t i = 0; i < 10; ++i) {
        ids.push_back(i);
        labels.push_back(0);
    }
    for (std::size_t j = 0; j < 4; ++j) f[3 * 4 + j] += 10.0;
    ids.push_back(10);
    labels.push_back(1);  // singleton class
    std::ostringstream warn;
    auto rep = spectral_from_features(ids, labels, f, 2, 0.1, &warn);
    EXPECT_TRUE(rep.was_removed(3));
    EXPECT_EQ(rep.removed.size(), 1u);
    EXPECT_FALSE(rep.was_removed(10));
    EXPECT_NE(warn.str().find("class 1"), std::string::npos);
    EXPECT_THROW(spectral_from_features(ids, labels, f, 2, 0.0, &warn), ConfigError);
}

TEST(Spectral, ScoresMatchDenseSvd) {
    Rng rng(12);
    for (int t = 0; t < 10; ++t) {
        Tensor f = Tensor::randn({10, 4}, rng);
        std::vector<std::size_t> ids(10), labels(10, 0);
        for (std::size_t i = 0; i < 10; ++i) ids[i] = i;
        auto rep = spectral_from_features(ids, labels, f, 1, 0.2, nullptr);
        Eigen::MatrixXd m(10, 4);
        for (int i = 0; i < 10; ++i)
            for (int j = 0; j < 4; ++j) m(i, j) = f[static_cast<std::size_t>(i * 4 + j)];
        m.rowwise() -= m.colwise().mean();
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinV);
        const Eigen::VectorXd v = svd.matrixV().col(0);
        for (int i = 0; i < 10; ++i) {
            const double s = std::pow(m.row(i).dot(v), 2);
            EXPECT_NEAR(rep.points[static_cast<std::size_t>(i)].score, s, 1e-10 * std::max(1.0, s));
        }
    }
}

TEST(Histogram, RowsCoverBaseClassWithProvenance) {
    FilterReport r;
    r.points = {PointVerdict{1, 0, 0, {0.1, 0.4, 0.9}, 0}, PointVerdict{2, 0, 2, {0.5, 0.4, 0.2}, 0},
                PointVerdict{3, 1, 1, {0.3, 0.1, 0.2}, 0}};
    auto prov = [](std::size_t id) { return id == 2 ? Provenance::poisoned : Provenance::clean; };
    auto rows = export_distance_histogram(r, 0, 2, prov, true);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].provenance, "clean");
    EXPECT_EQ(rows[0].real_or_failed, "n/a");
    EXPECT_EQ(rows[1].provenance, "poisoned");
    EXPECT_EQ(rows[1].real_or_failed, "real");
    EXPECT_DOUBLE_EQ(rows[1].distance_to_target, 0.2);
    EXPECT_EQ(export_distance_histogram(r, 0, 2, prov, false)[1].real_or_failed, "failed");
    auto csv = histogram_csv(rows);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "id,provenance,distance_to_base,distance_to_target,real_or_failed");
}
