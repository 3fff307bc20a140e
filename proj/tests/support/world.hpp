#pragma once

// Small seeded desk-scale setup shared by the attack and defense tests:
// TinyConvBN-2 pretrained on a disjoint synthetic split, plus the clean
// fine-tuning set and held-out targets.

#include "bnsieve/experiment.hpp"

namespace world {

using namespace bnsieve;

inline ExperimentConfig config() {
    ExperimentConfig cfg;
    cfg.seed = 3;
    cfg.arch = "TinyConvBN-2";
    cfg.data.per_class = 30;
    cfg.data.pretrain_per_class = 40;
    cfg.data.test_per_class = 20;
    cfg.pretrain.epochs = 8;
    cfg.targets = 4;
    return cfg;
}

struct World {
    ExperimentConfig cfg;
    Splits splits;
    FeatureExtractor phi;
};

inline const World& get() {
    static const World w = [] {
        World x{config(), {}, {}};
        x.splits = make_splits(x.cfg);
        x.phi = pretrain_stage(x.cfg, x.splits);
        return x;
    }();
    return w;
}

}  // namespace world
