#include <gtest/gtest.h>

#include "bnsieve/data.hpp"
#include "bnsieve/train.hpp"
#include "support/oracles.hpp"

using namespace bnsieve;

namespace {

// Two Gaussian blobs in feature space, 100 per class.
void blobs(Tensor& features, std::vector<std::size_t>& labels, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = 200, d = 4;
    features = Tensor({n, d});
    labels.clear();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = i % 2;
        for (std::size_t j = 0; j < d; ++j) features[i * d + j] = rng.normal(y ? 1.5 : -1.5, 0.5);
        labels.push_back(y);
    }
}

TrainConfig quick(std::size_t epochs = 20) {
    TrainConfig c;
    c.learning_rate = 0.05;
    c.epochs = epochs;
    c.batch_size = 32;
    c.seed = 5;
    return c;
}

}  // namespace

TEST(TrainHead, SeparableBlobsReachHighAccuracy) {
    Tensor f;
    std::vector<std::size_t> y;
    blobs(f, y, 1);
    Rng hr(2);
    auto head = train_head_on_features(DownstreamHead::init(4, 2, hr), f, y, quick());
    EXPECT_GE(accuracy_from_features(head, f, y), 0.95);
}

TEST(TrainHead, ZeroEpochsIsConfigError) {
    Tensor f;
    std::vector<std::size_t> y;
    blobs(f, y, 1);
    Rng hr(2);
    EXPECT_THROW(train_head_on_features(DownstreamHead::init(4, 2, hr), f, y, quick(0)), ConfigError);
    TrainConfig bad = quick();
    bad.learning_rate = 0.0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(TrainHead, IdenticalSeedsGiveIdenticalWeights) {
    Tensor f;
    std::vector<std::size_t> y;
    blobs(f, y, 1);
    Rng a(2), b(2);
    EXPECT_EQ(train_head_on_features(DownstreamHead::init(4, 2, a), f, y, quick(5)),
              train_head_on_features(DownstreamHead::init(4, 2, b), f, y, quick(5)));
}

TEST(Optimizer, AdamStepMatchesFormula) {
    TrainConfig c;
    c.optimizer = OptimizerKind::adam;
    c.learning_rate = 0.1;
    Optimizer opt(c);
    Tensor p = Tensor::from({1.0, -2.0});
    const Tensor g = Tensor::from({0.5, -0.25});
    std::vector<double> m(2, 0.0), v(2, 0.0), ref{1.0, -2.0};
    for (int t = 1; t <= 3; ++t) {
        opt.step({&p}, {&g});
        for (std::size_t i = 0; i < 2; ++i) {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            const double mh = m[i] / (1 - std::pow(0.9, t)), vh = v[i] / (1 - std::pow(0.999, t));
            ref[i] -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
            EXPECT_NEAR(p[i], ref[i], 1e-12);
        }
    }
}

TEST(Optimizer, SgdMomentumStepMatchesFormula) {
    TrainConfig c;
    c.optimizer = OptimizerKind::sgd;
    c.learning_rate = 0.01;
    c.momentum = 0.9;
    c.weight_decay = 5e-4;
    Optimizer opt(c);
    Tensor p = Tensor::from({1.0});
    const Tensor g = Tensor::from({2.0});
    double ref = 1.0, buf = 0.0;
    for (int t = 0; t < 3; ++t) {
        opt.step({&p}, {&g});
        buf = 0.9 * buf + (2.0 + 5e-4 * ref);
        ref -= 0.01 * buf;
        EXPECT_NEAR(p[0], ref, 1e-12);
    }
}

TEST(Finetune, RequiresFrozenExtractorAndData) {
    auto phi = build_extractor("TinyConvBN-2", 1);
    Rng rng(3);
    DatasetView data({{0, Tensor::rand({3, 16, 16}, rng), 0}, {1, Tensor::rand({3, 16, 16}, rng), 1}}, 2);
    auto head = init_head(phi, 2, 4);
    EXPECT_THROW(transfer_finetune(phi, head, data, quick(1)), ContractError);
    phi.freeze();
    EXPECT_THROW(transfer_finetune(phi, head, DatasetView(std::vector<DataPoint>{}, 2), quick(1)), ConfigError);
}

TEST(Finetune, ExtractorUntouchedAndAccuracyHigh) {
    Rng rng(4);
    auto phi = oracle::random_extractor("TinyConvBN-2", rng, 16);
    const auto before = phi.flat_parameters();
    std::vector<Tensor> running_before;
    for (std::size_t i = 0; i < phi.bn_count(); ++i) running_before.push_back(phi.bn(i).running_mean);
    auto data = synth_dataset(4, 20, 16, 9);
    TrainConfig c = TrainConfig::finetune_defaults();
    c.epochs = 30;
    c.seed = 6;
    auto head = transfer_finetune(phi, init_head(phi, 4, 7), data, c);
    EXPECT_EQ(phi.flat_parameters(), before);
    for (std::size_t i = 0; i < phi.bn_count(); ++i) EXPECT_EQ(phi.bn(i).running_mean, running_before[i]);
    EXPECT_GE(evaluate_accuracy(phi, head, data), 0.9);
}

TEST(Accuracy, MatchesNaiveLoopAndComplement) {
    Rng rng(5);
    auto phi = oracle::random_extractor("TinyConvBN-2", rng, 16);
    auto data = synth_dataset(2, 15, 16, 10);
    auto head = init_head(phi, 2, 11);
    const double acc = evaluate_accuracy(phi, head, data);
    std::size_t ok = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Tensor f = extract_features(phi, data[i].image.reshaped({1, 3, 16, 16}));
        ok += head.predict(f)[0] == data[i].label;
    }
    EXPECT_DOUBLE_EQ(acc, static_cast<double>(ok) / static_cast<double>(data.size()));

    // Flip every label of a 2-class set: accuracy becomes the complement.
    std::vector<DataPoint> flipped = data.points();
    for (auto& p : flipped) p.label = 1 - p.label;
    EXPECT_NEAR(evaluate_accuracy(phi, head, DatasetView(flipped, 2)), 1.0 - acc, 1e-12);
}

TEST(Accuracy, AllCorrectToySet) {
    DownstreamHead h;
    h.linear.weight = Tensor({2, 2}, std::vector<double>{1, 0, 0, 1});
    h.linear.bias = Tensor({2});
    Tensor f({3, 2}, std::vector<double>{1, 0, 0, 1, 2, 0});
    EXPECT_DOUBLE_EQ(accuracy_from_features(h, f, {0, 1, 0}), 1.0);
}

TEST(Pretrain, LossDecreasesAndIsDeterministic) {
    auto data = synth_dataset(4, 16, 16, 12);
    TrainConfig c = TrainConfig::pretrain_defaults();
    c.epochs = 4;
    c.seed = 3;
    auto a = pretrain_extractor(build_extractor("TinyConvBN-2", 1), data, c);
    auto b = pretrain_extractor(build_extractor("TinyConvBN-2", 1), data, c);
    EXPECT_LT(a.epoch_losses.back(), a.initial_loss);
    EXPECT_EQ(a.extractor.flat_parameters(), b.extractor.flat_parameters());
    for (std::size_t i = 0; i < a.extractor.bn_count(); ++i) {
        EXPECT_EQ(a.extractor.bn(i).running_var, b.extractor.bn(i).running_var);
        // running statistics moved away from their initial values
        EXPECT_NE(a.extractor.bn(i).running_var, Tensor(a.extractor.bn(i).running_var.shape(), 1.0));
    }
}
