#include "CLI11.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "bnsieve/experiment.hpp"

namespace fs = std::filesystem;
using namespace bnsieve;

namespace {

constexpr int kOk = 0, kFatal = 1, kPartial = 2;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::size_t jobs = 1;
};

ExperimentConfig load(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    cfg.validate();
    return cfg;
}

void add_common(CLI::App* app, Common& c) {
    app->add_option("--config", c.config, "experiment config (sectioned key = value)");
    app->add_option("--seed", c.seed, "master seed (overrides experiment.seed)");
    app->add_option("--out", c.out, "output directory");
    app->add_option("--jobs", c.jobs, "worker threads")->check(CLI::PositiveNumber);
}

FeatureExtractor extractor_or_pretrain(const std::string& dir, const ExperimentConfig& cfg, const Splits& s) {
    if (!dir.empty()) {
        auto phi = load_extractor(dir);
        phi.freeze();
        return phi;
    }
    std::cerr << "no --extractor given; pretraining\n";
    return pretrain_stage(cfg, s);
}

double pick(const std::vector<double>& values, std::optional<double> v) { return v ? *v : values.front(); }

/// Rewrites "--stage NAME" into the subcommand form.
std::vector<std::string> normalize_args(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    for (std::size_t i = 0; i < args.size(); ++i) {
        std::string stage;
        if (args[i] == "--stage" && i + 1 < args.size()) {
            stage = args[i + 1];
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
        } else if (args[i].rfind("--stage=", 0) == 0) {
            stage = args[i].substr(8);
            args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
        } else {
            continue;
        }
        args.insert(args.begin(), stage);
        break;
    }
    std::reverse(args.begin(), args.end());  // CLI11 consumes from the back
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bnsieve: clean-label poisoning lab with a batch-norm statistics filter"};
    app.require_subcommand(1);
    Common common;

    auto* pretrain = app.add_subcommand("pretrain", "pretrain and save the feature extractor");
    add_common(pretrain, common);

    std::string extractor_dir, data_dir, head_dir, attack = "gm", defense = "sieve", report_in;
    std::optional<double> epsilon, budget;
    std::size_t target_index = 0;

    auto* craft = app.add_subcommand("craft", "craft one poison set and write the poisoned fine-tuning set");
    add_common(craft, common);
    craft->add_option("--extractor", extractor_dir, "extractor directory from the pretrain stage");
    craft->add_option("--attack", attack, "fc, bp or gm");
    craft->add_option("--epsilon", epsilon, "l-inf budget (default: first sweep value)");
    craft->add_option("--budget", budget, "poison budget fraction (default: first sweep value)");
    craft->add_option("--target-index", target_index, "index into the held-out target list");

    auto* filter = app.add_subcommand("filter", "filter a dataset export with a defense");
    add_common(filter, common);
    filter->add_option("--extractor", extractor_dir, "extractor directory");
    filter->add_option("--data", data_dir, "dataset export directory")->required();
    filter->add_option("--defense", defense, "sieve or spectral");

    auto* finetune = app.add_subcommand("finetune", "fine-tune a fresh head on a dataset export");
    add_common(finetune, common);
    finetune->add_option("--extractor", extractor_dir, "extractor directory");
    finetune->add_option("--data", data_dir, "dataset export directory")->required();

    auto* evaluate = app.add_subcommand("evaluate", "test accuracy and target verdict for a head");
    add_common(evaluate, common);
    evaluate->add_option("--extractor", extractor_dir, "extractor directory");
    evaluate->add_option("--head", head_dir, "head directory")->required();
    evaluate->add_option("--target-index", target_index, "index into the held-out target list");

    auto* sweep = app.add_subcommand("sweep", "run the full grid and write the report bundle");
    add_common(sweep, common);
    sweep->add_option("--extractor", extractor_dir, "reuse a saved extractor instead of pretraining");

    auto* report = app.add_subcommand("report", "re-render report.csv/report.md from a report.json");
    add_common(report, common);
    report->add_option("--in", report_in, "report.json")->required();

    try {
        auto args = normalize_args(argc, argv);
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kFatal;
    }

    try {
        const fs::path out = common.out;
        if (*pretrain) {
            const auto cfg = load(common);
            const auto splits = make_splits(cfg);
            const auto phi = pretrain_stage(cfg, splits);
            save_extractor(out / "extractor", phi);
            std::cout << "extractor written to " << (out / "extractor").string() << "\n";
        } else if (*craft) {
            const auto cfg = load(common);
            const auto splits = make_splits(cfg);
            if (target_index >= splits.targets.size()) throw ConfigError("--target-index out of range");
            const auto phi = extractor_or_pretrain(extractor_dir, cfg, splits);
            const auto task = make_task(cfg, splits.targets[target_index], pick(cfg.epsilons, epsilon), pick(cfg.budgets, budget));
            task.validate(splits.finetune);
            const auto slots = poison_slots(cfg, splits.finetune, task, target_index);
            const auto ps = craft_stage(cfg, parse_attack(attack), phi, splits.finetune, task, slots, target_index);
            Dataset poisoned(splits.finetune);
            poisoned.insert_poisons(slots, ps.images);
            export_poison_set(out / "poisons", ps);
            export_dataset(out / "poisoned", poisoned);
            std::cout << ps.images.size() << " poisons; objective " << ps.loss_trace.front() << " -> "
                      << ps.loss_trace.back() << "\n";
        } else if (*filter) {
            const auto cfg = load(common);
            const auto splits = make_splits(cfg);
            const auto phi = extractor_or_pretrain(extractor_dir, cfg, splits);
            const Dataset data = import_dataset(data_dir);
            const auto kind = parse_defense(defense);
            if (kind == DefenseKind::none) throw ConfigError("filter: --defense must be sieve or spectral");
            // The defense only ever sees the provenance-free view.
            const FilterReport rep = kind == DefenseKind::sieve ? filter_dataset(phi, data.view(), cfg.distance, cfg.tap)
                                                                : spectral_filter_baseline(phi, data.view(), cfg.spectral_fraction);
            fs::create_directories(out);
            write_text(out / "filter_report.json", filter_report_json(rep).dump(2) + "\n");
            Dataset kept(data.view().subset(rep.kept));
            std::vector<std::size_t> kept_poisons;
            std::vector<Tensor> kept_images;
            for (auto id : rep.kept)
                if (data.provenance_of(id) == Provenance::poisoned) {
                    kept_poisons.push_back(id);
                    kept_images.push_back(data.view()[*data.view().row_of(id)].image);
                }
            kept.insert_poisons(kept_poisons, kept_images);
            export_dataset(out / "filtered", kept);
            if (kind == DefenseKind::sieve) {
                HistogramFile h{"histogram", {}};
                const bool real = !data.poisoned_ids().empty();  // realness unknown at this stage; see sweep
                for (const auto& row : export_distance_histogram(
                         rep, cfg.base_class, cfg.target_class, [&](std::size_t id) { return data.provenance_of(id); }, real))
                    h.rows.emplace_back(0, row);
                write_text(out / "histogram.csv", histogram_file_csv(h));
            }
            std::cout << "kept " << rep.kept.size() << ", removed " << rep.removed.size() << "\n";
        } else if (*finetune) {
            const auto cfg = load(common);
            const auto splits = make_splits(cfg);
            const auto phi = extractor_or_pretrain(extractor_dir, cfg, splits);
            const Dataset data = import_dataset(data_dir);
            const auto head = transfer_finetune(phi, victim_head_init(cfg, phi), data.view(), finetune_config(cfg));
            save_head(out / "head", head);
            std::cout << "head written to " << (out / "head").string() << "\n";
        } else if (*evaluate) {
            const auto cfg = load(common);
            const auto splits = make_splits(cfg);
            if (target_index >= splits.targets.size()) throw ConfigError("--target-index out of range");
            const auto phi = extractor_or_pretrain(extractor_dir, cfg, splits);
            const auto head = load_head(head_dir);
            const auto task = make_task(cfg, splits.targets[target_index], cfg.epsilons.front(), cfg.budgets.front());
            nlohmann::ordered_json j;
            j["test_accuracy"] = evaluate_accuracy(phi, head, splits.test);
            j["target_index"] = target_index;
            j["target_id"] = task.target.id;
            j["attack_success"] = attack_success(phi, head, task);
            fs::create_directories(out);
            write_text(out / "evaluation.json", j.dump(2) + "\n");
            std::cout << j.dump() << "\n";
        } else if (*sweep) {
            const auto cfg = load(common);
            std::optional<FeatureExtractor> phi;
            if (!extractor_dir.empty()) phi = load_extractor(extractor_dir);
            Timing timing;
            RunOptions opt;
            opt.jobs = common.jobs;
            opt.log = &std::cerr;
            opt.extractor = phi ? &*phi : nullptr;
            opt.timing = &timing;
            const auto rep = run_experiment(cfg, opt);
            write_report_bundle(rep, out);
            write_text(out / "timing.json", timing_json(timing));
            std::cout << render_report(rep, ReportFormat::markdown);
            if (rep.any_failed()) {
                std::cerr << "some cells failed; see report.json\n";
                return kPartial;
            }
        } else if (*report) {
            const auto bytes = read_file_bytes(report_in);
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(bytes.begin(), bytes.end());
            } catch (const nlohmann::json::parse_error& e) {
                throw FormatError(std::string("report: ") + e.what(), e.byte);
            }
            const auto rep = report_from_json(j);
            fs::create_directories(out);
            emit_report(rep, ReportFormat::csv, out / "report.csv");
            emit_report(rep, ReportFormat::markdown, out / "report.md");
            std::cout << render_report(rep, ReportFormat::markdown);
            if (rep.any_failed()) return kPartial;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kFatal;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFatal;
    }
    return kOk;
}
