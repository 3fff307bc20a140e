#pragma once

// Config-driven pipeline: pretrain -> craft -> (defend) -> fine-tune -> evaluate,
// swept over attacks, defenses, epsilons and poison budgets. This is the only
// code that reads provenance.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include "json.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "bnsieve/data.hpp"
#include "bnsieve/error.hpp"
#include "bnsieve/nn.hpp"
#include "bnsieve/poisoncraft.hpp"
#include "bnsieve/sieve.hpp"
#include "bnsieve/train.hpp"

namespace bnsieve {

enum class DefenseKind { none, sieve, spectral };

inline std::string to_string(DefenseKind d) {
    switch (d) {
        case DefenseKind::none: return "none";
        case DefenseKind::sieve: return "sieve";
        case DefenseKind::spectral: return "spectral";
    }
    return "?";
}

inline AttackKind parse_attack(const std::string& s) {
    if (s == "fc") return AttackKind::fc;
    if (s == "bp") return AttackKind::bp;
    if (s == "gm") return AttackKind::gm;
    throw ConfigError("unknown attack '" + s + "' (expected fc, bp or gm)");
}

inline DefenseKind parse_defense(const std::string& s) {
    if (s == "none") return DefenseKind::none;
    if (s == "sieve") return DefenseKind::sieve;
    if (s == "spectral") return DefenseKind::spectral;
    throw ConfigError("unknown defense '" + s + "' (expected none, sieve or spectral)");
}

struct DataConfig {
    std::string source = "synthetic";  // synthetic | cifar
    std::size_t classes = 10;
    std::size_t per_class = 50;  // fine-tuning set
    std::size_t pretrain_per_class = 100;
    std::size_t test_per_class = 50;
    std::size_t side = 16;
    double noise_sigma = 0.05;
    double contrast_jitter = 0.2;
    std::uint64_t world_seed = SynthOptions{}.world_seed;
    // CIFAR-binary inputs (source = cifar).
    std::string pretrain_file, finetune_file, test_file, targets_file;
};

struct ExperimentConfig {
    std::uint64_t seed = 1;
    DataConfig data;
    std::string arch = "TinyConvBN-4";
    BnTap tap = BnTap::input;
    TrainConfig pretrain = TrainConfig::pretrain_defaults();
    TrainConfig finetune = TrainConfig::finetune_defaults();
    std::vector<AttackKind> attacks{AttackKind::fc, AttackKind::bp, AttackKind::gm};
    CraftConfig craft;
    std::vector<DefenseKind> defenses{DefenseKind::none, DefenseKind::sieve, DefenseKind::spectral};
    DistanceConfig distance;
    double spectral_fraction = 0.2;
    std::size_t targets = 20;
    std::size_t base_class = 8;
    std::size_t target_class = 6;
    std::vector<double> epsilons{30.0 / 255.0};
    std::vector<double> budgets{0.14};
    BudgetBasis budget_basis = BudgetBasis::base_class;

    void validate() const {
        if (data.source != "synthetic" && data.source != "cifar")
            throw ConfigError("data.source must be synthetic or cifar");
        if (data.classes < 2) throw ConfigError("data.classes must be >= 2");
        if (data.per_class < 1 || data.test_per_class < 1 || data.pretrain_per_class < 1)
            throw ConfigError("data: per-class counts must be >= 1");
        if (data.source == "cifar" && (data.pretrain_file.empty() || data.finetune_file.empty() ||
                                       data.test_file.empty() || data.targets_file.empty()))
            throw ConfigError("data.source = cifar needs pretrain_file, finetune_file, test_file and targets_file");
        if (base_class >= data.classes || target_class >= data.classes)
            throw ConfigError("targets: base_class/target_class out of range");
        if (base_class == target_class) throw ConfigError("targets: base_class equals target_class");
        if (targets < 1) throw ConfigError("targets.count must be >= 1");
        if (attacks.empty()) throw ConfigError("attack.kinds must be nonempty");
        if (defenses.empty()) throw ConfigError("defense.kinds must be nonempty");
        if (epsilons.empty()) throw ConfigError("sweep.epsilons must be nonempty");
        if (budgets.empty()) throw ConfigError("sweep.budgets must be nonempty");
        for (double e : epsilons)
            if (!(e >= 0.0 && e <= 1.0)) throw ConfigError("sweep.epsilons: values must be in [0, 1]");
        for (double b : budgets)
            if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("sweep.budgets: values must be in [0, 1]");
        if (!(spectral_fraction > 0.0 && spectral_fraction < 1.0))
            throw ConfigError("defense.spectral_fraction must be in (0, 1)");
        pretrain.validate();
        finetune.validate();
        CraftConfig c = craft;
        c.epsilon = epsilons.front();
        c.validate();
        distance.validate();
    }
};

// --- config parsing ------------------------------------------------------------

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
}

/// "0.12", "30/255" or "14%".
inline double parse_number(const std::string& key, const std::string& raw) {
    const std::string s = trim(raw);
    try {
        std::size_t used = 0;
        if (auto slash = s.find('/'); slash != std::string::npos) {
            const double num = std::stod(s.substr(0, slash), &used);
            const double den = std::stod(s.substr(slash + 1));
            if (den == 0.0) throw ConfigError(key + ": zero denominator");
            return num / den;
        }
        if (!s.empty() && s.back() == '%') return std::stod(s.substr(0, s.size() - 1)) / 100.0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw ConfigError(key + ": trailing characters in '" + s + "'");
        return v;
    } catch (const std::logic_error&) {
        throw ConfigError(key + ": not a number: '" + s + "'");
    }
}

class IniReader {
public:
    explicit IniReader(boost::property_tree::ptree tree) : tree_(std::move(tree)) {
        static const std::map<std::string, std::vector<std::string>> known{
            {"experiment", {"seed"}},
            {"data",
             {"source", "classes", "per_class", "pretrain_per_class", "test_per_class", "side", "noise_sigma",
              "contrast_jitter", "world_seed", "pretrain_file", "finetune_file", "test_file", "targets_file"}},
            {"model", {"arch", "bn_tap"}},
            {"pretrain", {"optimizer", "learning_rate", "epochs", "batch_size", "weight_decay", "momentum", "seed"}},
            {"finetune", {"optimizer", "learning_rate", "epochs", "batch_size", "weight_decay", "momentum", "seed"}},
            {"attack",
             {"kinds", "iterations", "step_size", "fc_beta", "restarts", "backtrack", "bp_taps", "gm_params",
              "gm_second_order", "gm_fd_step"}},
            {"defense", {"kinds", "beta", "gamma", "spectral_fraction"}},
            {"targets", {"count", "base_class", "target_class"}},
            {"sweep", {"epsilons", "budgets", "budget_basis"}},
        };
        for (const auto& [section, body] : tree_) {
            auto it = known.find(section);
            if (it == known.end()) throw ConfigError("config: unknown section [" + section + "]");
            if (body.empty() && !body.data().empty())
                throw ConfigError("config: key '" + section + "' outside any section");
            for (const auto& [key, _] : body)
                if (std::find(it->second.begin(), it->second.end(), key) == it->second.end())
                    throw ConfigError("config: unknown key " + section + "." + key);
        }
    }

    [[nodiscard]] std::optional<std::string> raw(const std::string& path) const {
        if (auto v = tree_.get_optional<std::string>(boost::property_tree::ptree::path_type(path, '.')))
            return trim(*v);
        return std::nullopt;
    }

    void number(const std::string& path, double& out) const {
        if (auto v = raw(path)) out = parse_number(path, *v);
    }

    void count(const std::string& path, std::size_t& out) const {
        if (auto v = raw(path)) out = to_count(path, *v);
    }

    void seed(const std::string& path, std::uint64_t& out) const {
        if (auto v = raw(path)) out = to_count(path, *v);
    }

    void text(const std::string& path, std::string& out) const {
        if (auto v = raw(path)) out = *v;
    }

    void flag(const std::string& path, bool& out) const {
        if (auto v = raw(path)) {
            if (*v == "true" || *v == "1" || *v == "yes") out = true;
            else if (*v == "false" || *v == "0" || *v == "no") out = false;
            else throw ConfigError(path + ": expected a boolean, got '" + *v + "'");
        }
    }

private:
    static std::uint64_t to_count(const std::string& path, const std::string& v) {
        if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
            throw ConfigError(path + ": expected a non-negative integer, got '" + v + "'");
        try {
            return std::stoull(v);
        } catch (const std::out_of_range&) {
            throw ConfigError(path + ": integer out of range");
        }
    }

    boost::property_tree::ptree tree_;
};

inline void read_train(const IniReader& r, const std::string& sec, TrainConfig& t) {
    if (auto v = r.raw(sec + ".optimizer")) {
        if (*v == "sgd") t.optimizer = OptimizerKind::sgd;
        else if (*v == "adam") t.optimizer = OptimizerKind::adam;
        else throw ConfigError(sec + ".optimizer: expected sgd or adam");
    }
    r.number(sec + ".learning_rate", t.learning_rate);
    r.count(sec + ".epochs", t.epochs);
    r.count(sec + ".batch_size", t.batch_size);
    r.number(sec + ".weight_decay", t.weight_decay);
    r.number(sec + ".momentum", t.momentum);
    r.seed(sec + ".seed", t.seed);
}

}  // namespace detail

/// Parses the sectioned key-value config. Every key is optional.
inline ExperimentConfig parse_config(const std::string& text) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    const detail::IniReader r(std::move(tree));
    ExperimentConfig c;
    r.seed("experiment.seed", c.seed);

    r.text("data.source", c.data.source);
    r.count("data.classes", c.data.classes);
    r.count("data.per_class", c.data.per_class);
    r.count("data.pretrain_per_class", c.data.pretrain_per_class);
    r.count("data.test_per_class", c.data.test_per_class);
    r.count("data.side", c.data.side);
    r.number("data.noise_sigma", c.data.noise_sigma);
    r.number("data.contrast_jitter", c.data.contrast_jitter);
    r.seed("data.world_seed", c.data.world_seed);
    r.text("data.pretrain_file", c.data.pretrain_file);
    r.text("data.finetune_file", c.data.finetune_file);
    r.text("data.test_file", c.data.test_file);
    r.text("data.targets_file", c.data.targets_file);

    r.text("model.arch", c.arch);
    if (auto v = r.raw("model.bn_tap")) {
        if (*v == "input") c.tap = BnTap::input;
        else if (*v == "output") c.tap = BnTap::output;
        else throw ConfigError("model.bn_tap: expected input or output");
    }

    detail::read_train(r, "pretrain", c.pretrain);
    detail::read_train(r, "finetune", c.finetune);

    if (auto v = r.raw("attack.kinds")) {
        c.attacks.clear();
        for (const auto& s : detail::split_list(*v)) c.attacks.push_back(parse_attack(s));
    }
    r.count("attack.iterations", c.craft.iterations);
    r.number("attack.step_size", c.craft.step_size);
    r.number("attack.fc_beta", c.craft.fc_beta);
    r.count("attack.restarts", c.craft.restarts);
    r.flag("attack.backtrack", c.craft.backtrack);
    if (auto v = r.raw("attack.bp_taps")) {
        if (*v == "features") c.craft.bp_taps = BpTaps::features_only;
        else if (*v == "bn_inputs_and_features") c.craft.bp_taps = BpTaps::bn_inputs_and_features;
        else throw ConfigError("attack.bp_taps: expected features or bn_inputs_and_features");
    }
    if (auto v = r.raw("attack.gm_params")) {
        if (*v == "head") c.craft.gm_params = GmParams::head;
        else if (*v == "full") c.craft.gm_params = GmParams::full;
        else throw ConfigError("attack.gm_params: expected head or full");
    }
    r.text("attack.gm_second_order", c.craft.gm_second_order);
    r.number("attack.gm_fd_step", c.craft.gm_fd_step);

    if (auto v = r.raw("defense.kinds")) {
        c.defenses.clear();
        for (const auto& s : detail::split_list(*v)) c.defenses.push_back(parse_defense(s));
    }
    r.number("defense.beta", c.distance.beta);
    if (auto v = r.raw("defense.gamma")) {
        c.distance.gamma.clear();
        for (const auto& s : detail::split_list(*v)) c.distance.gamma.push_back(detail::parse_number("defense.gamma", s));
    }
    r.number("defense.spectral_fraction", c.spectral_fraction);

    r.count("targets.count", c.targets);
    r.count("targets.base_class", c.base_class);
    r.count("targets.target_class", c.target_class);

    if (auto v = r.raw("sweep.epsilons")) {
        c.epsilons.clear();
        for (const auto& s : detail::split_list(*v)) c.epsilons.push_back(detail::parse_number("sweep.epsilons", s));
    }
    if (auto v = r.raw("sweep.budgets")) {
        c.budgets.clear();
        for (const auto& s : detail::split_list(*v)) c.budgets.push_back(detail::parse_number("sweep.budgets", s));
    }
    if (auto v = r.raw("sweep.budget_basis")) {
        if (*v == "base_class") c.budget_basis = BudgetBasis::base_class;
        else if (*v == "dataset") c.budget_basis = BudgetBasis::dataset;
        else throw ConfigError("sweep.budget_basis: expected base_class or dataset");
    }
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

// --- pipeline pieces ---------------------------------------------------------------

/// Independent seed for a named pipeline stream.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) { return Rng(master).split(stream).next_u64(); }

namespace streams {
inline constexpr std::uint64_t finetune_split = 1, test_split = 2, pretrain_split = 3, target_split = 4;
inline constexpr std::uint64_t extractor_init = 10, pretrain = 11, head_init = 12, finetune = 13;
inline constexpr std::uint64_t slots = 20, craft = 21, proxy_head = 22;
}  // namespace streams

struct Splits {
    DatasetView finetune;
    DatasetView test;
    DatasetView pretrain;
    std::vector<DataPoint> targets;  // held out of every other split
};

inline constexpr std::size_t kTestIdBase = 100000, kPretrainIdBase = 200000, kTargetIdBase = 300000;

inline Splits make_splits(const ExperimentConfig& cfg) {
    Splits s;
    if (cfg.data.source == "cifar") {
        s.finetune = load_image_batch(cfg.data.finetune_file, cfg.data.classes, 0);
        s.test = load_image_batch(cfg.data.test_file, cfg.data.classes, kTestIdBase);
        s.pretrain = load_image_batch(cfg.data.pretrain_file, cfg.data.classes, kPretrainIdBase);
        const auto pool = load_image_batch(cfg.data.targets_file, cfg.data.classes, kTargetIdBase);
        for (const auto& p : pool.points())
            if (p.label == cfg.target_class && s.targets.size() < cfg.targets) s.targets.push_back(p);
    } else {
        SynthOptions so;
        so.noise_sigma = cfg.data.noise_sigma;
        so.contrast_jitter = cfg.data.contrast_jitter;
        so.world_seed = cfg.data.world_seed;
        const auto& d = cfg.data;
        so.first_id = 0;
        s.finetune = synth_dataset(d.classes, d.per_class, d.side, derive_seed(cfg.seed, streams::finetune_split), so);
        so.first_id = kTestIdBase;
        s.test = synth_dataset(d.classes, d.test_per_class, d.side, derive_seed(cfg.seed, streams::test_split), so);
        so.first_id = kPretrainIdBase;
        s.pretrain = synth_dataset(d.classes, d.pretrain_per_class, d.side, derive_seed(cfg.seed, streams::pretrain_split), so);
        so.first_id = kTargetIdBase;
        const auto pool = synth_dataset(d.classes, cfg.targets, d.side, derive_seed(cfg.seed, streams::target_split), so);
        for (const auto& p : pool.points())
            if (p.label == cfg.target_class) s.targets.push_back(p);
    }
    if (s.targets.size() < cfg.targets)
        throw ConfigError("only " + std::to_string(s.targets.size()) + " target-class images available for " +
                          std::to_string(cfg.targets) + " targets");
    if (s.finetune.classes() != cfg.data.classes) throw ConfigError("finetune split class count mismatch");
    return s;
}

inline ArchDescriptor arch_for(const ExperimentConfig& cfg, const Splits& s) {
    const auto& img = s.finetune[0].image;
    ArchDescriptor a;
    a.name = cfg.arch;
    a.in_channels = img.dim(0);
    a.side = img.dim(1);
    return a;
}

/// Pretrains the extractor on the pretraining split and freezes it.
inline FeatureExtractor pretrain_stage(const ExperimentConfig& cfg, const Splits& s) {
    auto phi = build_extractor(arch_for(cfg, s), derive_seed(cfg.seed, streams::extractor_init));
    TrainConfig pc = cfg.pretrain;
    if (pc.seed == 0) pc.seed = derive_seed(cfg.seed, streams::pretrain);
    auto res = pretrain_extractor(std::move(phi), s.pretrain, pc);
    res.extractor.freeze();
    return std::move(res.extractor);
}

inline TrainConfig finetune_config(const ExperimentConfig& cfg) {
    TrainConfig fc = cfg.finetune;
    if (fc.seed == 0) fc.seed = derive_seed(cfg.seed, streams::finetune);
    return fc;
}

inline DownstreamHead victim_head_init(const ExperimentConfig& cfg, const FeatureExtractor& phi) {
    return init_head(phi, cfg.data.classes, derive_seed(cfg.seed, streams::head_init));
}

inline PoisonTask make_task(const ExperimentConfig& cfg, const DataPoint& target, double epsilon, double budget) {
    return PoisonTask{target, cfg.base_class, PoisonBudget::of_fraction(budget, cfg.budget_basis), epsilon};
}

inline std::vector<std::size_t> poison_slots(const ExperimentConfig& cfg, const DatasetView& ft, const PoisonTask& task,
                                             std::size_t target_index) {
    return select_poison_slots(ft, task, derive_seed(cfg.seed, streams::slots * 1000003 + target_index));
}

/// Crafts one poison set; bases are the images currently at `slots`.
inline PoisonSet craft_stage(const ExperimentConfig& cfg, AttackKind attack, const FeatureExtractor& phi,
                             const DatasetView& ft, const PoisonTask& task, const std::vector<std::size_t>& slots,
                             std::size_t target_index) {
    std::vector<Tensor> bases;
    for (auto id : slots) bases.push_back(ft[*ft.row_of(id)].image);
    CraftConfig cc = cfg.craft;
    cc.epsilon = task.epsilon;
    cc.seed = derive_seed(cfg.seed, streams::craft * 1000003 + target_index);
    PoisonSet ps;
    switch (attack) {
        case AttackKind::fc: ps = craft_fc(phi, bases, task.target.image, cc); break;
        case AttackKind::bp: ps = craft_bp(phi, bases, task.target.image, cc); break;
        case AttackKind::gm: {
            // The attacker's own proxy head: fresh initialization from an attacker seed.
            const auto proxy = init_head(phi, ft.classes(), derive_seed(cfg.seed, streams::proxy_head));
            ps = craft_gm(phi, proxy, bases, task.base_class, task.target.image, cc);
            break;
        }
    }
    ps.base_ids = slots;
    return ps;
}

// --- report types ------------------------------------------------------------------

struct CellReport {
    AttackKind attack = AttackKind::fc;
    DefenseKind defense = DefenseKind::none;
    double epsilon = 0.0;
    double budget = 0.0;
    std::size_t poisons_per_target = 0;
    bool failed = false;
    std::string error;
    std::size_t targets = 0;
    std::size_t effective_targets = 0;  // undefended attack succeeded
    std::size_t successes = 0;          // among effective targets (all targets for defense = none)
    std::size_t successes_all_targets = 0;
    double attack_success_rate = 0.0;
    double test_accuracy = 0.0;
    double clean_accuracy = 0.0;
    std::size_t poisons_total = 0;
    std::size_t poisons_removed = 0;
    std::size_t real_poisons_total = 0;
    std::size_t real_poisons_removed = 0;
    std::size_t clean_points_total = 0;
    std::size_t clean_points_removed = 0;
    // Sieve only: poisons nearer the target-class centroid than the base-class one.
    std::size_t real_closer_to_target = 0;
    std::size_t failed_poisons_total = 0;
    std::size_t failed_closer_to_target = 0;

    [[nodiscard]] double poisons_removed_rate() const { return ratio(poisons_removed, poisons_total); }
    [[nodiscard]] double real_poisons_removed_rate() const { return ratio(real_poisons_removed, real_poisons_total); }
    [[nodiscard]] double clean_removed_rate() const { return ratio(clean_points_removed, clean_points_total); }
    [[nodiscard]] double real_closer_rate() const { return ratio(real_closer_to_target, real_poisons_total); }
    [[nodiscard]] double failed_closer_rate() const { return ratio(failed_closer_to_target, failed_poisons_total); }

    static double ratio(std::size_t a, std::size_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }
};

struct HistogramFile {
    std::string name;
    std::vector<std::pair<std::size_t, HistogramRow>> rows;  // (target index, row)
};

struct ExperimentReport {
    std::uint64_t seed = 0;
    std::string arch;
    double clean_accuracy = 0.0;
    std::vector<CellReport> cells;
    std::vector<HistogramFile> histograms;

    [[nodiscard]] const CellReport& cell(AttackKind a, DefenseKind d, double eps, double budget) const {
        for (const auto& c : cells)
            if (c.attack == a && c.defense == d && std::abs(c.epsilon - eps) < 1e-12 && std::abs(c.budget - budget) < 1e-12)
                return c;
        throw ContractError("report: no cell " + to_string(a) + "/" + to_string(d));
    }

    [[nodiscard]] bool any_failed() const {
        return std::any_of(cells.begin(), cells.end(), [](const CellReport& c) { return c.failed; });
    }
};

struct Timing {
    double total_seconds = 0.0;
    double setup_seconds = 0.0;
    struct Group {
        std::string attack;
        double epsilon, budget, seconds;
    };
    std::vector<Group> groups;
};

// --- sweep ---------------------------------------------------------------------------

struct RunOptions {
    std::size_t jobs = 1;
    std::ostream* log = nullptr;
    const FeatureExtractor* extractor = nullptr;  // skip pretraining when given
    Timing* timing = nullptr;
};

namespace detail {

struct DefenseOutcome {
    bool ok = true;
    std::string error;
    bool success = false;
    double accuracy = 0.0;
    std::size_t poisons_removed = 0, clean_removed = 0, closer = 0;
    std::vector<HistogramRow> histogram;
};

struct UnitOutcome {
    bool ok = true;
    std::string error;
    bool success = false;  // undefended
    std::size_t poisons = 0, clean_points = 0;
    std::vector<DefenseOutcome> defenses;  // parallel to cfg.defenses
    double seconds = 0.0;
};

struct Unit {
    std::size_t attack, eps, budget, target;
};

struct Setup {
    Splits splits;
    FeatureExtractor phi;
    DownstreamHead head_init;
    TrainConfig finetune;
    Tensor ft_features;
    Tensor test_features;
    std::vector<CharacteristicVector> ft_cvs;
    double clean_accuracy = 0.0;
};

inline Tensor replace_rows(const Tensor& all, const std::vector<std::size_t>& rows, const Tensor& repl) {
    Tensor out = all;
    const std::size_t per = all.size() / all.dim(0);
    for (std::size_t k = 0; k < rows.size(); ++k) std::copy_n(repl.ptr() + k * per, per, out.ptr() + rows[k] * per);
    return out;
}

inline UnitOutcome run_unit(const ExperimentConfig& cfg, const Setup& st, const Unit& u) {
    UnitOutcome out;
    const auto t0 = std::chrono::steady_clock::now();
    const auto& ft = st.splits.finetune;
    const AttackKind attack = cfg.attacks[u.attack];
    std::string stage = "craft";
    try {
        const PoisonTask task = make_task(cfg, st.splits.targets[u.target], cfg.epsilons[u.eps], cfg.budgets[u.budget]);
        task.validate(ft);
        const auto slots = poison_slots(cfg, ft, task, u.target);
        const PoisonSet ps = craft_stage(cfg, attack, st.phi, ft, task, slots, u.target);

        Dataset poisoned(ft);
        poisoned.insert_poisons(slots, ps.images);
        const DatasetView& view = poisoned.view();
        std::vector<std::size_t> rows;
        for (auto id : slots) rows.push_back(*ft.row_of(id));
        out.poisons = slots.size();
        out.clean_points = ft.size() - slots.size();

        stage = "features";
        Tensor feats = st.ft_features, pcv_batch;
        std::vector<CharacteristicVector> cvs = st.ft_cvs;
        if (!slots.empty()) {
            const Tensor pb = stack(ps.images);
            feats = replace_rows(st.ft_features, rows, st.phi.infer(pb));
            const auto pcv = characteristic_vectors(st.phi, pb, cfg.tap);
            for (std::size_t k = 0; k < rows.size(); ++k) cvs[rows[k]] = pcv[k];
        }
        const auto labels = view.labels();
        const auto ids = view.ids();

        auto fit_and_score = [&](const std::vector<std::size_t>& keep_rows, DefenseOutcome& d) {
            Tensor f = detail::gather_rows(feats, keep_rows);
            std::vector<std::size_t> y;
            for (auto r : keep_rows) y.push_back(labels[r]);
            const auto head = train_head_on_features(st.head_init, f, y, st.finetune);
            d.success = attack_success(st.phi, head, task);
            d.accuracy = accuracy_from_features(head, st.test_features, st.splits.test.labels());
        };

        stage = "finetune";
        std::vector<std::size_t> all_rows(view.size());
        std::iota(all_rows.begin(), all_rows.end(), std::size_t{0});
        DefenseOutcome undefended;
        fit_and_score(all_rows, undefended);
        out.success = undefended.success;

        for (const auto defense : cfg.defenses) {
            DefenseOutcome d;
            try {
                if (defense == DefenseKind::none) {
                    d = undefended;
                } else {
                    stage = "defense";
                    FilterReport rep = defense == DefenseKind::sieve
                                           ? filter_from_cvs(ids, labels, cvs, view.classes(), cfg.distance)
                                           : spectral_from_features(ids, labels, feats, view.classes(),
                                                                    cfg.spectral_fraction, nullptr);
                    std::vector<std::size_t> keep_rows;
                    for (auto id : rep.kept) keep_rows.push_back(*view.row_of(id));
                    std::sort(keep_rows.begin(), keep_rows.end());
                    for (auto id : rep.removed)
                        (poisoned.provenance_of(id) == Provenance::poisoned ? d.poisons_removed : d.clean_removed)++;
                    if (defense == DefenseKind::sieve) {
                        for (auto id : slots) {
                            const auto& v = rep.verdict(id);
                            d.closer += v.distances[cfg.target_class] < v.distances[cfg.base_class];
                        }
                        d.histogram = export_distance_histogram(
                            rep, cfg.base_class, cfg.target_class,
                            [&](std::size_t id) { return poisoned.provenance_of(id); }, out.success);
                    }
                    stage = "finetune";
                    fit_and_score(keep_rows, d);
                }
            } catch (const std::exception& e) {
                d.ok = false;
                d.error = stage + ": " + e.what();
            }
            out.defenses.push_back(std::move(d));
        }
    } catch (const std::exception& e) {
        out.ok = false;
        out.error = stage + ": " + e.what();
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

inline std::string fmt_eps(double eps) {
    std::ostringstream os;
    os << std::setprecision(6) << eps * 255.0;
    return os.str();
}

inline std::string fmt_pct(double b) {
    std::ostringstream os;
    os << std::setprecision(6) << b * 100.0;
    return os.str();
}

}  // namespace detail

inline std::string cell_stem(AttackKind a, DefenseKind d, double eps, double budget) {
    return to_string(a) + "_eps" + detail::fmt_eps(eps) + "_budget" + detail::fmt_pct(budget) + "_" + to_string(d);
}

/// Frozen extractor, clean head and cached clean features/vectors for a config.
inline detail::Setup prepare_setup(const ExperimentConfig& cfg, const RunOptions& opt) {
    detail::Setup st;
    st.splits = make_splits(cfg);
    if (opt.extractor) {
        st.phi = *opt.extractor;
        st.phi.freeze();
    } else {
        if (opt.log) *opt.log << "pretraining " << cfg.arch << " on " << st.splits.pretrain.size() << " images\n";
        st.phi = pretrain_stage(cfg, st.splits);
    }
    st.head_init = victim_head_init(cfg, st.phi);
    st.finetune = finetune_config(cfg);
    st.ft_features = extract_features_chunked(st.phi, st.splits.finetune.batch());
    st.test_features = extract_features_chunked(st.phi, st.splits.test.batch());
    st.ft_cvs = characteristic_vectors(st.phi, st.splits.finetune.batch(), cfg.tap);
    const auto clean = train_head_on_features(st.head_init, st.ft_features, st.splits.finetune.labels(), st.finetune);
    st.clean_accuracy = accuracy_from_features(clean, st.test_features, st.splits.test.labels());
    return st;
}

inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    const detail::Setup st = prepare_setup(cfg, opt);
    const double setup_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opt.log) *opt.log << "clean accuracy " << st.clean_accuracy << "\n";

    std::vector<detail::Unit> units;
    for (std::size_t a = 0; a < cfg.attacks.size(); ++a)
        for (std::size_t e = 0; e < cfg.epsilons.size(); ++e)
            for (std::size_t b = 0; b < cfg.budgets.size(); ++b)
                for (std::size_t t = 0; t < cfg.targets; ++t) units.push_back({a, e, b, t});

    std::vector<detail::UnitOutcome> results(units.size());
    std::atomic<std::size_t> next{0}, done{0};
    std::mutex log_mu;
    auto worker = [&] {
        for (std::size_t i = next++; i < units.size(); i = next++) {
            results[i] = detail::run_unit(cfg, st, units[i]);
            const std::size_t n = ++done;
            if (opt.log) {
                std::lock_guard lock(log_mu);
                const auto& u = units[i];
                *opt.log << "[" << n << "/" << units.size() << "] " << to_string(cfg.attacks[u.attack])
                         << " eps=" << detail::fmt_eps(cfg.epsilons[u.eps]) << "/255 budget="
                         << detail::fmt_pct(cfg.budgets[u.budget]) << "% target=" << u.target << " "
                         << (results[i].ok ? (results[i].success ? "flipped" : "held") : "FAILED: " + results[i].error)
                         << "\n";
            }
        }
    };
    const std::size_t jobs = std::max<std::size_t>(1, std::min(opt.jobs, units.size()));
    std::vector<std::thread> pool;
    for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
    worker();
    for (auto& th : pool) th.join();

    ExperimentReport rep;
    rep.seed = cfg.seed;
    rep.arch = cfg.arch;
    rep.clean_accuracy = st.clean_accuracy;
    Timing timing;
    timing.setup_seconds = setup_seconds;
    for (std::size_t a = 0; a < cfg.attacks.size(); ++a)
        for (std::size_t e = 0; e < cfg.epsilons.size(); ++e)
            for (std::size_t b = 0; b < cfg.budgets.size(); ++b) {
                const std::size_t first = ((a * cfg.epsilons.size() + e) * cfg.budgets.size() + b) * cfg.targets;
                double secs = 0.0;
                for (std::size_t t = 0; t < cfg.targets; ++t) secs += results[first + t].seconds;
                timing.groups.push_back({to_string(cfg.attacks[a]), cfg.epsilons[e], cfg.budgets[b], secs});
                for (std::size_t d = 0; d < cfg.defenses.size(); ++d) {
                    CellReport c;
                    c.attack = cfg.attacks[a];
                    c.defense = cfg.defenses[d];
                    c.epsilon = cfg.epsilons[e];
                    c.budget = cfg.budgets[b];
                    c.clean_accuracy = st.clean_accuracy;
                    c.targets = cfg.targets;
                    HistogramFile hist{cell_stem(c.attack, c.defense, c.epsilon, c.budget), {}};
                    double acc = 0.0;
                    for (std::size_t t = 0; t < cfg.targets; ++t) {
                        const auto& r = results[first + t];
                        if (!r.ok) {
                            if (!c.failed) c.error = "target " + std::to_string(t) + ": " + r.error;
                            c.failed = true;
                            continue;
                        }
                        const auto& o = r.defenses[d];
                        if (!o.ok) {
                            if (!c.failed) c.error = "target " + std::to_string(t) + ": " + o.error;
                            c.failed = true;
                            continue;
                        }
                        c.poisons_per_target = r.poisons;
                        c.effective_targets += r.success;
                        c.successes_all_targets += o.success;
                        if (c.defense == DefenseKind::none || r.success) c.successes += o.success;
                        acc += o.accuracy;
                        c.poisons_total += r.poisons;
                        c.poisons_removed += o.poisons_removed;
                        c.clean_points_total += r.clean_points;
                        c.clean_points_removed += o.clean_removed;
                        if (r.success) {
                            c.real_poisons_total += r.poisons;
                            c.real_poisons_removed += o.poisons_removed;
                            c.real_closer_to_target += o.closer;
                        } else {
                            c.failed_poisons_total += r.poisons;
                            c.failed_closer_to_target += o.closer;
                        }
                        for (const auto& row : o.histogram) hist.rows.emplace_back(t, row);
                    }
                    if (!c.failed) {
                        c.test_accuracy = acc / static_cast<double>(cfg.targets);
                        const std::size_t denom = c.defense == DefenseKind::none ? c.targets : c.effective_targets;
                        c.attack_success_rate = CellReport::ratio(c.successes, denom);
                    }
                    if (c.defense == DefenseKind::sieve) rep.histograms.push_back(std::move(hist));
                    rep.cells.push_back(std::move(c));
                }
            }
    timing.total_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (opt.timing) *opt.timing = timing;
    return rep;
}

// --- report emission ---------------------------------------------------------------------

enum class ReportFormat { json, csv, markdown };

inline nlohmann::ordered_json cell_to_json(const CellReport& c) {
    nlohmann::ordered_json j;
    j["attack"] = to_string(c.attack);
    j["defense"] = to_string(c.defense);
    j["epsilon"] = c.epsilon;
    j["budget"] = c.budget;
    j["poisons_per_target"] = c.poisons_per_target;
    j["status"] = c.failed ? "failed" : "ok";
    j["error"] = c.error;
    j["targets"] = c.targets;
    j["effective_targets"] = c.effective_targets;
    j["successes"] = c.successes;
    j["successes_all_targets"] = c.successes_all_targets;
    j["attack_success_rate"] = c.attack_success_rate;
    j["test_accuracy"] = c.test_accuracy;
    j["clean_accuracy"] = c.clean_accuracy;
    j["poisons_total"] = c.poisons_total;
    j["poisons_removed"] = c.poisons_removed;
    j["real_poisons_total"] = c.real_poisons_total;
    j["real_poisons_removed"] = c.real_poisons_removed;
    j["clean_points_total"] = c.clean_points_total;
    j["clean_points_removed"] = c.clean_points_removed;
    j["real_closer_to_target"] = c.real_closer_to_target;
    j["failed_poisons_total"] = c.failed_poisons_total;
    j["failed_closer_to_target"] = c.failed_closer_to_target;
    return j;
}

inline CellReport cell_from_json(const nlohmann::json& j) {
    CellReport c;
    c.attack = parse_attack(j.at("attack").get<std::string>());
    c.defense = parse_defense(j.at("defense").get<std::string>());
    c.epsilon = j.at("epsilon").get<double>();
    c.budget = j.at("budget").get<double>();
    c.poisons_per_target = j.at("poisons_per_target").get<std::size_t>();
    c.failed = j.at("status").get<std::string>() == "failed";
    c.error = j.at("error").get<std::string>();
    c.targets = j.at("targets").get<std::size_t>();
    c.effective_targets = j.at("effective_targets").get<std::size_t>();
    c.successes = j.at("successes").get<std::size_t>();
    c.successes_all_targets = j.at("successes_all_targets").get<std::size_t>();
    c.attack_success_rate = j.at("attack_success_rate").get<double>();
    c.test_accuracy = j.at("test_accuracy").get<double>();
    c.clean_accuracy = j.at("clean_accuracy").get<double>();
    c.poisons_total = j.at("poisons_total").get<std::size_t>();
    c.poisons_removed = j.at("poisons_removed").get<std::size_t>();
    c.real_poisons_total = j.at("real_poisons_total").get<std::size_t>();
    c.real_poisons_removed = j.at("real_poisons_removed").get<std::size_t>();
    c.clean_points_total = j.at("clean_points_total").get<std::size_t>();
    c.clean_points_removed = j.at("clean_points_removed").get<std::size_t>();
    c.real_closer_to_target = j.at("real_closer_to_target").get<std::size_t>();
    c.failed_poisons_total = j.at("failed_poisons_total").get<std::size_t>();
    c.failed_closer_to_target = j.at("failed_closer_to_target").get<std::size_t>();
    return c;
}

inline nlohmann::ordered_json report_to_json(const ExperimentReport& r) {
    nlohmann::ordered_json j;
    j["seed"] = r.seed;
    j["arch"] = r.arch;
    j["clean_accuracy"] = r.clean_accuracy;
    j["cells"] = nlohmann::ordered_json::array();
    for (const auto& c : r.cells) j["cells"].push_back(cell_to_json(c));
    return j;
}

inline ExperimentReport report_from_json(const nlohmann::json& j) {
    try {
        ExperimentReport r;
        r.seed = j.at("seed").get<std::uint64_t>();
        r.arch = j.at("arch").get<std::string>();
        r.clean_accuracy = j.at("clean_accuracy").get<double>();
        for (const auto& c : j.at("cells")) r.cells.push_back(cell_from_json(c));
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("report: ") + e.what(), 0);
    }
}

namespace detail {

inline std::string fixed(double v, int digits) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(digits) << v;
    return os.str();
}

inline std::string report_csv(const ExperimentReport& r) {
    std::ostringstream os;
    os << "attack,defense,epsilon,budget,poisons_per_target,status,targets,effective_targets,successes,"
          "attack_success_rate,test_accuracy,clean_accuracy,poisons_removed_rate,real_poisons_removed_rate,"
          "clean_removed_rate,real_closer_rate,failed_closer_rate\n";
    os << std::setprecision(17);
    for (const auto& c : r.cells)
        os << to_string(c.attack) << ',' << to_string(c.defense) << ',' << c.epsilon << ',' << c.budget << ','
           << c.poisons_per_target << ',' << (c.failed ? "failed" : "ok") << ',' << c.targets << ','
           << c.effective_targets << ',' << c.successes << ',' << c.attack_success_rate << ',' << c.test_accuracy
           << ',' << c.clean_accuracy << ',' << c.poisons_removed_rate() << ',' << c.real_poisons_removed_rate() << ','
           << c.clean_removed_rate() << ',' << c.real_closer_rate() << ',' << c.failed_closer_rate() << '\n';
    return os.str();
}

/// Attack rows, defense column groups (Attack Succ. / Test Acc. / Clean Acc.),
/// one table per (epsilon, budget).
inline std::string report_markdown(const ExperimentReport& r) {
    std::vector<AttackKind> attacks;
    std::vector<DefenseKind> defenses;
    std::vector<std::pair<double, double>> settings;
    for (const auto& c : r.cells) {
        if (std::find(attacks.begin(), attacks.end(), c.attack) == attacks.end()) attacks.push_back(c.attack);
        if (std::find(defenses.begin(), defenses.end(), c.defense) == defenses.end()) defenses.push_back(c.defense);
        const std::pair<double, double> s{c.epsilon, c.budget};
        if (std::find(settings.begin(), settings.end(), s) == settings.end()) settings.push_back(s);
    }
    std::ostringstream os;
    os << "# Poisoning sweep (" << r.arch << ", seed " << r.seed << ")\n\n";
    os << "Rates in percent. Defended attack success is over targets whose undefended attack succeeded.\n";
    for (const auto& [eps, budget] : settings) {
        os << "\n## epsilon " << fmt_eps(eps) << "/255, poison budget " << fmt_pct(budget) << "%\n\n";
        os << "| Attack |";
        for (auto d : defenses) os << ' ' << to_string(d) << " Attack Succ. | " << to_string(d) << " Test Acc. | "
                                   << to_string(d) << " Clean Acc. |";
        os << "\n|---|";
        for (std::size_t i = 0; i < defenses.size(); ++i) os << "---:|---:|---:|";
        os << '\n';
        for (auto a : attacks) {
            os << "| " << (a == AttackKind::fc ? "FC" : a == AttackKind::bp ? "BP" : "GM") << " |";
            for (auto d : defenses) {
                const auto& c = r.cell(a, d, eps, budget);
                if (c.failed) {
                    os << " failed | failed | failed |";
                } else {
                    os << ' ' << fixed(100.0 * c.attack_success_rate, 2) << " | " << fixed(100.0 * c.test_accuracy, 2)
                       << " | " << fixed(100.0 * c.clean_accuracy, 2) << " |";
                }
            }
            os << '\n';
        }
    }
    return os.str();
}

}  // namespace detail

inline std::string render_report(const ExperimentReport& r, ReportFormat f) {
    switch (f) {
        case ReportFormat::json: return report_to_json(r).dump(2) + "\n";
        case ReportFormat::csv: return detail::report_csv(r);
        case ReportFormat::markdown: return detail::report_markdown(r);
    }
    return "";
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

inline void emit_report(const ExperimentReport& r, ReportFormat f, const std::filesystem::path& path) {
    write_text(path, render_report(r, f));
}

inline std::string histogram_file_csv(const HistogramFile& h) {
    std::ostringstream os;
    os.precision(17);
    os << "target,id,provenance,distance_to_base,distance_to_target,real_or_failed\n";
    for (const auto& [t, row] : h.rows)
        os << t << ',' << row.id << ',' << row.provenance << ',' << row.distance_to_base << ','
           << row.distance_to_target << ',' << row.real_or_failed << '\n';
    return os.str();
}

inline std::string timing_json(const Timing& t) {
    nlohmann::ordered_json j;
    j["total_seconds"] = t.total_seconds;
    j["setup_seconds"] = t.setup_seconds;
    j["groups"] = nlohmann::ordered_json::array();
    for (const auto& g : t.groups)
        j["groups"].push_back({{"attack", g.attack}, {"epsilon", g.epsilon}, {"budget", g.budget}, {"seconds", g.seconds}});
    return j.dump(2) + "\n";
}

/// report.json, report.csv, report.md and histograms/<cell>.csv under `dir`.
inline void write_report_bundle(const ExperimentReport& r, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir / "histograms", ec);
    if (ec) throw IoError("cannot create " + (dir / "histograms").string() + ": " + ec.message());
    emit_report(r, ReportFormat::json, dir / "report.json");
    emit_report(r, ReportFormat::csv, dir / "report.csv");
    emit_report(r, ReportFormat::markdown, dir / "report.md");
    for (const auto& h : r.histograms) write_text(dir / "histograms" / (h.name + ".csv"), histogram_file_csv(h));
}

}  // namespace bnsieve
