// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance <path-to-bnsieve-cli> <configs-dir> [--jobs N]
//
// Criteria 1-3 run in-process against independent oracles; 4-10 drive the CLI
// over the two fixed-seed grids (potency.ini, budget_sweep.ini) and read back
// report.json.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <thread>

#include "bnsieve/experiment.hpp"
#include "support/oracles.hpp"

using namespace bnsieve;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void verdict(int n, bool ok, const std::string& what, const std::string& detail, double seconds) {
    std::ostringstream t;
    t << std::fixed << std::setprecision(1) << seconds;
    std::cout << (ok ? "PASS" : "FAIL") << "  criterion " << n << ": " << what << " -- " << detail << " (" << t.str()
              << " s)" << std::endl;
    failures += !ok;
}

double since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string num(double v, int digits = 3) {
    std::ostringstream os;
    os << std::setprecision(digits) << v;
    return os.str();
}

std::string pct(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << 100.0 * v << "%";
    return os.str();
}

// --- 1: gradients --------------------------------------------------------------------------

void gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    const double tol = 1e-5;
    double worst = 0.0;
    std::string worst_name;
    const auto prims = oracle::primitives();
    for (std::size_t p = 0; p < prims.size(); ++p) {
        Rng rng = Rng(2024).split(p);
        for (int k = 0; k < 100; ++k) {
            const double e = prims[p].run(rng);
            if (e > worst) worst = e, worst_name = prims[p].name;
        }
    }
    Rng rng(77);
    int composed = 0, skipped = 0;
    double worst_composed = 0.0;
    while (composed < 100) {
        const double e = oracle::composed_case(rng);
        if (e < 0) {
            ++skipped;
            continue;
        }
        worst_composed = std::max(worst_composed, e);
        ++composed;
    }
    const bool ok = worst <= tol && worst_composed <= tol;
    verdict(1, ok, "backward vs central differences",
            std::to_string(prims.size()) + " primitives x 100 cases, worst " + num(worst) + " (" + worst_name +
                "); composed TinyConvBN-2 x 100, worst " + num(worst_composed) + " (" + std::to_string(skipped) +
                " near-kink draws redrawn); tol " + num(tol),
            since(t0));
}

// --- 2: statistics oracles -----------------------------------------------------------------

void statistics() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(31);
    double worst = 0.0;
    for (int b = 0; b < 20; ++b) {
        auto phi = oracle::random_extractor(b % 2 ? "TinyConvBN-4" : "TinyConvBN-2", rng, 16);
        const std::size_t n = 4 + rng.below(7), classes = 2 + rng.below(3);
        std::vector<DataPoint> pts;
        for (std::size_t i = 0; i < n; ++i) pts.push_back({i, Tensor::rand({3, 16, 16}, rng), i % classes});
        DatasetView d(pts, classes);
        const Tensor x = d.batch();
        const auto acts = capture_bn_inputs(phi, x);
        const auto cvs = characteristic_vectors(phi, x, BnTap::input, 3);
        for (std::size_t i = 0; i < n; ++i) {
            CharacteristicVector ref;
            for (const auto& a : acts) ref.layers.push_back(oracle::naive_sample_stats(a, i));
            worst = std::max(worst, oracle::max_abs_diff(cvs[i], ref));
        }
        const auto cents = class_centroids(phi, d);
        for (std::size_t y = 0; y < classes; ++y) {
            std::vector<std::size_t> rows;
            for (std::size_t i = 0; i < n; ++i)
                if (pts[i].label == y) rows.push_back(i);
            worst = std::max(worst, oracle::max_abs_diff(cents[y].cv, oracle::concat_centroid(acts, rows)));
        }
    }
    verdict(2, worst <= 1e-12, "characteristic vectors and centroids vs element/concatenation oracles",
            "20 minibatches, worst abs diff " + num(worst) + "; tol 1e-12", since(t0));
}

// --- 3: distance properties ----------------------------------------------------------------

void distance_properties() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(41);
    const int n = 250;
    int neg = 0, nonzero = 0, var_seen = 0, argmin_moved = 0;
    for (int t = 0; t < n; ++t) {
        const std::size_t layers = 1 + rng.below(4), ch = 1 + rng.below(6), classes = 2 + rng.below(5);
        auto a = oracle::random_cv(rng, layers, ch), b = oracle::random_cv(rng, layers, ch);
        auto cfg = oracle::random_cfg(rng, layers);
        neg += cv_distance(a, b, cfg) < 0.0;
        nonzero += std::abs(cv_distance(a, a, cfg)) > 1e-12;

        auto blind = cfg;
        blind.beta = 1.0;
        auto a2 = a;
        for (auto& l : a2.layers)
            for (auto& v : l.var) v = rng.uniform(0.01, 5.0);
        var_seen += cv_distance(a, b, blind) != cv_distance(a2, b, blind);

        std::vector<CharacteristicVector> cents;
        for (std::size_t c = 0; c < classes; ++c) cents.push_back(oracle::random_cv(rng, layers, ch));
        auto scaled = cfg;
        const double s = rng.uniform(0.01, 100.0);
        for (auto& g : scaled.gamma) g *= s;
        std::vector<double> d1, d2;
        for (const auto& c : cents) {
            d1.push_back(cv_distance(a, c, cfg));
            d2.push_back(cv_distance(a, c, scaled));
        }
        argmin_moved += nearest_centroid(d1) != nearest_centroid(d2);
    }
    const bool ok = neg == 0 && nonzero == 0 && var_seen == 0 && argmin_moved == 0;
    verdict(3, ok, "cv_distance properties",
            std::to_string(n) + " instances each; violations: negative " + std::to_string(neg) + ", nonzero at identity " +
                std::to_string(nonzero) + ", variance-sensitive at beta=1 " + std::to_string(var_seen) +
                ", argmin moved under gamma scaling " + std::to_string(argmin_moved),
            since(t0));
}

// --- grids ---------------------------------------------------------------------------------

struct Grid {
    ExperimentReport report;
    std::string json;
    double seconds = 0.0;
    int exit_code = -1;
};

Grid run_grid(const std::string& cli, const fs::path& config, const fs::path& out, unsigned jobs) {
    Grid g;
    fs::remove_all(out);
    const std::string cmd = "\"" + cli + "\" sweep --config \"" + config.string() + "\" --out \"" + out.string() +
                            "\" --jobs " + std::to_string(jobs) + " > \"" + (out.string() + ".log") + "\" 2>&1";
    const auto t0 = std::chrono::steady_clock::now();
    const int rc = std::system(cmd.c_str());
    g.seconds = since(t0);
    g.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    if (fs::exists(out / "report.json")) {
        const auto bytes = read_file_bytes(out / "report.json");
        g.json.assign(bytes.begin(), bytes.end());
        g.report = report_from_json(nlohmann::json::parse(g.json));
    }
    return g;
}

const AttackKind kAttacks[] = {AttackKind::fc, AttackKind::bp, AttackKind::gm};

std::string name(AttackKind a) { return a == AttackKind::fc ? "FC" : a == AttackKind::bp ? "BP" : "GM"; }

bool usable(const Grid& g, int criterion, const std::string& what) {
    if (!g.report.cells.empty() && !g.report.any_failed()) return true;
    verdict(criterion, false, what,
            "grid did not complete (exit " + std::to_string(g.exit_code) + ", " + std::to_string(g.report.cells.size()) +
                " cells)",
            0.0);
    return false;
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 3) {
        std::cerr << "usage: acceptance <bnsieve-cli> <configs-dir> [--jobs N]\n";
        return 2;
    }
    const std::string cli = argv[1];
    const fs::path configs = argv[2];
    unsigned jobs = std::max(1u, std::thread::hardware_concurrency());
    for (int i = 3; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--jobs") jobs = static_cast<unsigned>(std::stoul(argv[i + 1]));

    gradients();
    statistics();
    distance_properties();

    const fs::path work = fs::temp_directory_path() / "bnsieve_acceptance";
    fs::create_directories(work);
    const Grid a = run_grid(cli, configs / "potency.ini", work / "grid_a", jobs);
    std::cout << "      grid A (eps 30/255, budget 14%): " << num(a.seconds) << " s, exit " << a.exit_code
              << ", clean accuracy " << pct(a.report.clean_accuracy) << std::endl;
    const Grid b = run_grid(cli, configs / "budget_sweep.ini", work / "grid_b", jobs);
    std::cout << "      grid B (eps 20/255, budgets 4-20%): " << num(b.seconds) << " s, exit " << b.exit_code << std::endl;
    const double eps_a = 30.0 / 255.0, budget_a = 0.14, eps_b = 20.0 / 255.0;

    // 4
    if (usable(a, 4, "undefended attack potency")) {
        bool ok = true;
        std::string detail;
        for (auto at : kAttacks) {
            const auto& c = a.report.cell(at, DefenseKind::none, eps_a, budget_a);
            const double floor = at == AttackKind::fc ? 0.4 : 0.7;
            ok &= c.attack_success_rate >= floor;
            detail += name(at) + " " + pct(c.attack_success_rate) + " (>= " + pct(floor) + ", " +
                      std::to_string(c.successes) + "/" + std::to_string(c.targets) + ")  ";
        }
        verdict(4, ok, "undefended attack potency", detail, a.seconds);
    }

    // 5
    if (usable(a, 5, "sieve defense rate")) {
        bool ok = true;
        std::string detail;
        for (auto at : kAttacks) {
            const auto& c = a.report.cell(at, DefenseKind::sieve, eps_a, budget_a);
            ok &= c.attack_success_rate <= 0.1 && c.real_poisons_removed_rate() >= 0.9;
            detail += name(at) + " success " + pct(c.attack_success_rate) + ", real removed " +
                      std::to_string(c.real_poisons_removed) + "/" + std::to_string(c.real_poisons_total) + "  ";
        }
        verdict(5, ok, "sieve defense rate (success <= 10%, real poisons removed >= 90%)", detail, 0.0);
    }

    // 6
    if (usable(a, 6, "accuracy preservation")) {
        bool ok = true;
        std::string detail;
        for (auto at : kAttacks) {
            const auto& c = a.report.cell(at, DefenseKind::sieve, eps_a, budget_a);
            const double gap = std::abs(c.test_accuracy - c.clean_accuracy);
            ok &= gap <= 0.02 + 1e-12 && c.clean_removed_rate() <= 0.02 + 1e-12;
            detail += name(at) + " acc " + pct(c.test_accuracy) + " vs clean " + pct(c.clean_accuracy) +
                      ", clean removed " + pct(c.clean_removed_rate()) + "  ";
        }
        verdict(6, ok, "accuracy preservation (|gap| <= 2 pts, clean removal <= 2%)", detail, 0.0);
    }

    // 7: pooled over every sieve cell of both grids; real poisons are rare in
    // some cells and failed ones absent from others.
    if (usable(a, 7, "separation") && usable(b, 7, "separation")) {
        std::size_t rc = 0, rt = 0, fc = 0, ft = 0, arc = 0, art = 0, afc = 0, aft = 0;
        for (const Grid* g : {&a, &b})
            for (const auto& c : g->report.cells) {
                if (c.defense != DefenseKind::sieve) continue;
                rc += c.real_closer_to_target, rt += c.real_poisons_total;
                fc += c.failed_closer_to_target, ft += c.failed_poisons_total;
                if (g == &a) {
                    arc += c.real_closer_to_target, art += c.real_poisons_total;
                    afc += c.failed_closer_to_target, aft += c.failed_poisons_total;
                }
            }
        const double real = CellReport::ratio(rc, rt), failed = CellReport::ratio(fc, ft);
        const bool ok = rt > 0 && ft > 0 && real >= 0.9 && failed < real;
        verdict(7, ok, "separation (real poisons nearer the target centroid >= 90%, failed strictly lower)",
                "pooled: real " + std::to_string(rc) + "/" + std::to_string(rt) + " = " + pct(real) + ", failed " +
                    std::to_string(fc) + "/" + std::to_string(ft) + " = " + pct(failed) + "; grid A alone: real " +
                    std::to_string(arc) + "/" + std::to_string(art) + ", failed " + std::to_string(afc) + "/" +
                    std::to_string(aft),
                0.0);
    }

    // 8
    if (usable(a, 8, "baseline ordering")) {
        const auto& sp = a.report.cell(AttackKind::gm, DefenseKind::spectral, eps_a, budget_a);
        const auto& sv = a.report.cell(AttackKind::gm, DefenseKind::sieve, eps_a, budget_a);
        verdict(8, sp.attack_success_rate > sv.attack_success_rate, "baseline ordering (spectral GM success > sieve GM success)",
                "spectral " + pct(sp.attack_success_rate) + " (removed " + std::to_string(sp.poisons_removed) + "/" +
                    std::to_string(sp.poisons_total) + " poisons), sieve " + pct(sv.attack_success_rate),
                0.0);
    }

    // 9
    if (usable(b, 9, "budget sweep")) {
        bool ok = true;
        std::string detail;
        for (double budget : {0.04, 0.08, 0.14, 0.20}) {
            std::string row;
            for (auto at : kAttacks) {
                const auto& c = b.report.cell(at, DefenseKind::sieve, eps_b, budget);
                ok &= c.attack_success_rate <= 0.1;
                row += " " + name(at) + " " + pct(c.attack_success_rate);
            }
            detail += pct(budget) + ":" + row + "  ";
        }
        verdict(9, ok, "sieve success <= 10% across budgets at eps 20/255", detail, b.seconds);
    }

    // 10
    {
        const Grid a2 = run_grid(cli, configs / "potency.ini", work / "grid_a_again", jobs);
        const bool ok = !a.json.empty() && a.json == a2.json;
        verdict(10, ok, "byte-identical report.json across two runs of grid A",
                std::to_string(a.json.size()) + " vs " + std::to_string(a2.json.size()) + " bytes, " +
                    (ok ? "identical" : "different"),
                a2.seconds);
    }

    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criterion/criteria failed")
              << std::endl;
    return failures == 0 ? 0 : 1;
}
