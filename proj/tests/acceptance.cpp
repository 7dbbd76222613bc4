// Acceptance harness: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "oracles.hpp"
#include "phoenix/cli.hpp"
#include "phoenix/run_config.hpp"
#include "random_graph.hpp"

using namespace phoenix;
namespace fs = std::filesystem;

namespace {

// Tolerances and budgets.
constexpr double kGradRelTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kGradSeconds = 120.0;
constexpr double kPosteriorTol = 1e-9;
constexpr double kMonteCarloSeconds = 60.0;
constexpr double kFedAvgTol = 1e-6;
constexpr double kMetricTol = 1e-9;
constexpr double kTrendRunSeconds = 30.0 * 60.0;
constexpr std::size_t kMinScenarios = 12;
constexpr std::size_t kPropertyTraces = 1000;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

bool same_params(const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        if (it == b.end() || !bitwise_equal(t, it->second)) return false;
    }
    return true;
}

// 1 -------------------------------------------------------------------------
Verdict gradient_correctness() {
    const auto start = Clock::now();
    std::size_t checked = 0, failures = 0;
    double worst = 0.0;
    std::set<Op> seen;
    for (std::uint64_t seed = 1000; seed < 1050; ++seed) {
        auto c = testing::make_random_graph(seed);
        for (std::size_t i = 0; i < c.graph.size(); ++i) seen.insert(c.graph.op(NodeId{i}));
        const auto r = testing::finite_difference_check(c, kGradStep, kGradRelTol);
        checked += r.checked;
        failures += r.failures;
        worst = std::max(worst, r.worst_relative);
    }
    std::size_t missing = 0;
    for (std::size_t op = 0; op < static_cast<std::size_t>(Op::Argmax); ++op) {
        if (!seen.contains(static_cast<Op>(op))) ++missing;
    }
    const double secs = seconds_since(start);
    return {failures == 0 && missing == 0 && secs < kGradSeconds,
            fmt("50 graphs, %zu scalars, %zu failures, worst rel %.2e, %zu primitives missing, %.1fs", checked,
                failures, worst, missing, secs)};
}

// 2 -------------------------------------------------------------------------
Verdict schedule_exactness() {
    const NoiseSchedule lin = make_linear_schedule(1000);
    const bool endpoints = lin.beta_at(1) == 1e-4 && lin.beta_at(1000) == 0.02;
    const NoiseSchedule cos = make_cosine_schedule(1000);
    bool decreasing = true;
    for (int t = 1; t <= 1000; ++t) decreasing = decreasing && cos.alpha_bar_at(t) < cos.alpha_bar_at(t - 1);
    const bool small_end = cos.alpha_bar_at(1000) < 0.01;
    double worst = 0.0;
    for (const NoiseSchedule* s : {&lin, &cos}) {
        double ab = 1.0;
        for (int t = 1; t <= s->T; ++t) {
            const double ab_prev = ab;
            ab *= 1.0 - s->beta_at(t);
            // The first step has no posterior; its variance is beta_1.
            const double expected = t == 1 ? s->beta_at(1) : (1.0 - ab_prev) / (1.0 - ab) * s->beta_at(t);
            worst = std::max(worst, std::abs(s->posterior_variance_at(t) - expected));
        }
    }
    return {endpoints && decreasing && small_end && worst <= kPosteriorTol,
            fmt("linear endpoints %s, cosine decreasing %s, alpha_bar_T %.3e, posterior worst %.1e",
                endpoints ? "exact" : "inexact", decreasing ? "yes" : "no", cos.alpha_bar_at(1000), worst)};
}

// 3 -------------------------------------------------------------------------
Verdict forward_equivalence() {
    const auto start = Clock::now();
    bool pass = true;
    std::string detail;
    for (const auto& [name, schedule] : {std::pair{"cosine", make_cosine_schedule(50)},
                                         std::pair{"linear", make_linear_schedule(50)}}) {
        for (const auto& m : testing::forward_process_moments(schedule, {1, 25, 50}, 10000, 0.6, 31)) {
            pass = pass && m.pass();
            detail += fmt("%s t=%d mean %+.2fse var %+.2fse; ", name, m.t, (m.mean - m.expected_mean) / m.mean_se,
                          (m.var - m.expected_var) / m.var_se);
        }
    }
    const double secs = seconds_since(start);
    return {pass && secs < kMonteCarloSeconds, detail + fmt("%.1fs", secs)};
}

// 4 -------------------------------------------------------------------------
Verdict fedavg_oracle() {
    const auto two = testing::fedavg_sgd_oracle({37, 91}, 5);
    const auto five = testing::fedavg_sgd_oracle({12, 30, 7, 22, 19}, 6);
    return {two.max_abs_diff <= kFedAvgTol && five.max_abs_diff <= kFedAvgTol,
            fmt("k=2 max |diff| %.2e over %zu, k=5 max |diff| %.2e over %zu", two.max_abs_diff, two.compared,
                five.max_abs_diff, five.compared)};
}

// 5 -------------------------------------------------------------------------
Verdict sharing_arithmetic() {
    bool pass = true;
    std::string detail;
    for (const auto& r : testing::check_sharing_rows(17)) {
        pass = pass && r.pass();
        detail += fmt("(%g,%g)->(%zu,%zu..%zu) ", r.row.beta_pct, r.row.alpha_pct, r.server, r.client_min,
                      r.client_max);
    }
    return {pass, detail};
}

// 6 -------------------------------------------------------------------------
Verdict filter_state_machine() {
    const auto scenarios = testing::filter_scenarios();
    std::size_t ok = 0;
    std::string first_failure;
    for (const auto& sc : scenarios) {
        const auto r = testing::run_filter_scenario(sc);
        if (r.pass) {
            ++ok;
        } else if (first_failure.empty()) {
            first_failure = r.name + ": " + r.detail;
        }
    }
    const auto prop = testing::filter_property_test(kPropertyTraces, 4242);
    std::string detail = fmt("%zu/%zu scenarios, %zu traces / %zu steps, %zu violations", ok, scenarios.size(),
                             prop.traces, prop.steps, prop.violations);
    if (!first_failure.empty()) detail += "; " + first_failure;
    if (prop.violations > 0) detail += "; " + prop.first_violation;
    return {ok == scenarios.size() && scenarios.size() >= kMinScenarios && prop.violations == 0 &&
                prop.traces == kPropertyTraces,
            detail};
}

// 7 -------------------------------------------------------------------------
Verdict metric_oracles() {
    double worst = 0.0;
    auto track = [&](double got, double want) { worst = std::max(worst, std::abs(got - want)); };

    auto one_d = [](double mean, double var) {
        FeatureStats s;
        s.mean = {mean};
        s.covariance = Matrix(1, 1, var);
        s.count = 2;
        return s;
    };
    Rng rng(71);
    const FeatureStats a = gaussian_stats(testing::random_points(rng, 50, 6));
    track(frechet_distance(a, a), 0.0);
    track(frechet_distance(one_d(0, 1), one_d(2, 1)), 4.0);

    Matrix uniform(100, 10, 0.1);
    track(inception_style_score(uniform, 10).mean, 1.0);
    Matrix onehot(100, 10, 0.0);
    for (std::size_t i = 0; i < 100; ++i) onehot(i, i % 10) = 1.0;
    track(inception_style_score(onehot, 10).mean, 10.0);

    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng r(seed);
        const Matrix real = testing::random_points(r, 20, 2);
        const Matrix gen = testing::random_points(r, 20, 2, 0.5);
        const PrecisionRecall got = knn_precision_recall(real, gen, 3);
        const PrecisionRecall want = testing::brute_force_precision_recall(real, gen, 3);
        track(got.precision, want.precision);
        track(got.recall, want.recall);
    }

    track(tv_distance({10, 0, 0, 0, 0, 0, 0, 0, 0, 0}, {1, 1, 1, 1, 1, 1, 1, 1, 1, 1}), 0.9);
    return {worst <= kMetricTol, fmt("worst |error| %.2e", worst)};
}

// 8 -------------------------------------------------------------------------
Verdict personalization_retention() {
    RunConfig rc = RunConfig::preset("desk");
    rc.partition.mode = "label_skew";
    rc.federation.personalization = true;
    const FederationConfig fc = rc.federation_config();
    const LoadedData data = load_datasets(rc);
    const DenoiserModel initial = build_unet(rc.model, rc.seed);
    const PartitionPlan plan =
        partition_label_skew(data.train, fc.client_count, rc.partition.classes_per_client, rc.seed);
    const auto personal = initial.personal_names();

    std::size_t leaks = 0, moved = 0, rounds = 0, missing = 0;
    bool live = false;
    std::vector<TensorMap> before;
    FederationHooks hooks;
    hooks.on_updates = [&](int, const std::vector<ClientUpdate>& ups, const std::vector<ClientState>& clients) {
        for (const auto& u : ups) {
            for (const auto& [name, t] : u.base_params) leaks += personal.contains(name);
        }
        before.clear();
        for (const auto& c : clients) before.push_back(c.personal_params);
    };
    hooks.on_round = [&](int round, const DenoiserModel&, const std::vector<ClientState>& clients) {
        ++rounds;
        for (std::size_t i = 0; i < clients.size(); ++i) {
            if (!same_params(clients[i].personal_params, before[i])) ++moved;
            std::set<std::string> names;
            for (const auto& [name, t] : clients[i].personal_params) names.insert(name);
            if (names != personal) ++missing;
        }
        if (round == 1) {
            live = true;
            for (std::size_t i = 0; i < clients.size(); ++i) {
                for (std::size_t j = 0; j < i; ++j) {
                    live = live && !same_params(clients[i].personal_params, clients[j].personal_params);
                }
            }
        }
    };
    const auto start = Clock::now();
    run_federation(initial, plan.assignments, fc, data.train, nullptr, hooks);
    return {rounds == 5 && leaks == 0 && moved == 0 && missing == 0 && live,
            fmt("%zu rounds, %zu personal names leaked, %zu clients changed by aggregation, distinct after round 1: "
                "%s, %.0fs",
                rounds, leaks, moved, live ? "yes" : "no", seconds_since(start))};
}

// 9 -------------------------------------------------------------------------
struct TrendRun {
    MetricsReport report;
    double seconds = 0.0;
};

TrendRun desk_trend_run(const RunConfig& rc, const LoadedData& data, const EvalClassifier& clf, bool sharing) {
    const auto start = Clock::now();
    const FederationConfig fc = rc.federation_config();
    DenoiserModel initial = build_unet(rc.model, rc.seed);
    std::vector<std::vector<std::size_t>> clients;
    if (sharing) {
        const SharingPlan sp = data_sharing_split(data.train, fc.client_count, 25.0, 100.0,
                                                  rc.partition.classes_per_client, rc.seed);
        initial = warmup_train(initial, data.train, sp.shared_pool, fc).model;
        clients = sp.merged_clients;
    } else {
        clients = partition_label_skew(data.train, fc.client_count, rc.partition.classes_per_client, rc.seed)
                      .assignments;
    }
    const FederationResult res = run_federation(initial, clients, fc, data.train);
    const Tensor samples =
        generate(res.model, fc.schedule, rc.metrics.final_sample_count, derive_seed(rc.seed, {kEvalStream, 0}));
    EvaluationOptions eo;
    eo.k = rc.metrics.k;
    eo.is_splits = rc.metrics.is_splits;
    return {evaluate_samples(clf, samples, data.test, eo), seconds_since(start)};
}

Verdict directional_trend() {
    int recall_wins = 0, tv_wins = 0;
    double slowest = 0.0;
    std::string detail;
    for (std::uint64_t seed : {1, 2, 3}) {
        RunConfig rc = RunConfig::preset("desk");
        rc.seed = seed;
        const LoadedData data = load_datasets(rc);
        ClassifierTraining t;
        t.epochs = rc.metrics.classifier_epochs;
        const EvalClassifier clf = train_eval_classifier(data.train, t, seed);
        const TrendRun base = desk_trend_run(rc, data, clf, false);
        const TrendRun share = desk_trend_run(rc, data, clf, true);
        recall_wins += share.report.recall >= base.report.recall;
        tv_wins += share.report.tv_distance <= base.report.tv_distance;
        slowest = std::max({slowest, base.seconds, share.seconds});
        detail += fmt("seed %llu recall %.3f->%.3f tv %.3f->%.3f; ", static_cast<unsigned long long>(seed),
                      base.report.recall, share.report.recall, base.report.tv_distance, share.report.tv_distance);
    }
    return {recall_wins >= 2 && tv_wins >= 2 && slowest < kTrendRunSeconds,
            detail + fmt("recall wins %d/3, tv wins %d/3, slowest run %.0fs", recall_wins, tv_wins, slowest)};
}

// 10 ------------------------------------------------------------------------
Verdict reproducibility(const fs::path& work) {
    const fs::path root = work / "reproducibility";
    fs::remove_all(root);
    fs::create_directories(root);
    nlohmann::json cfg;
    cfg["preset"] = "desk";
    cfg["partition"] = {{"mode", "data_sharing"}};
    cfg["federation"] = {{"personalization", true}, {"threshold_filtering", true}, {"record_wall_time", false}};
    cfg["run_id"] = "repro";
    {
        std::ofstream out(root / "config.json");
        out << cfg.dump(2);
    }
    const std::string config = (root / "config.json").string();
    const auto start = Clock::now();
    std::string failed;
    for (const char* workers : {"1", "4"}) {
        const std::string out = (root / (std::string("w") + workers)).string();
        auto run = [&](std::vector<std::string> args) {
            std::vector<std::string> full{"phoenix", "--config", config, "--out", out, "--workers", workers};
            full.insert(full.end(), args.begin(), args.end());
            std::ostringstream chatter;
            std::streambuf* saved = std::cout.rdbuf(chatter.rdbuf());
            const int code = run_cli(full);
            std::cout.rdbuf(saved);
            if (code != kExitOk && failed.empty()) failed = args.front() + " with workers " + workers;
        };
        run({"partition"});
        run({"warmup"});
        run({"train"});
        run({"generate", "--checkpoint", out + "/runs/repro/round_5.phxc", "--count", "16", "--name", "gen"});
        run({"evaluate", "--samples", out + "/gen/samples.phxt", "--name", "gen_metrics"});
    }
    if (!failed.empty()) return {false, "command failed: " + failed};

    std::size_t compared = 0, differing = 0;
    std::string first_diff;
    for (const auto& entry : fs::recursive_directory_iterator(root / "w1")) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), root / "w1");
        // The echoed config records --workers and --out, the two inputs that differ.
        if (rel == fs::path("runs") / "repro" / "config.json") continue;
        ++compared;
        if (slurp(entry.path()) != slurp(root / "w4" / rel)) {
            if (differing++ == 0) first_diff = rel.string();
        }
    }
    const bool has_log = fs::exists(root / "w1" / "runs" / "repro" / "run_log.csv") &&
                         fs::exists(root / "w1" / "runs" / "repro" / "final_samples.phxt") &&
                         fs::exists(root / "w1" / "gen" / "samples.phxt");
    std::string detail = fmt("%zu files compared, %zu differ, %.0fs", compared, differing, seconds_since(start));
    if (!first_diff.empty()) detail += "; first: " + first_diff;
    return {has_log && differing == 0 && compared > 0, detail};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::string work = "acceptance_work";
    std::vector<int> only;
    app.add_option("--work", work, "Scratch directory");
    app.add_option("--only", only, "Run only these criteria");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    const std::vector<std::pair<int, std::function<Verdict()>>> criteria{
        {1, gradient_correctness},
        {2, schedule_exactness},
        {3, forward_equivalence},
        {4, fedavg_oracle},
        {5, sharing_arithmetic},
        {6, filter_state_machine},
        {7, metric_oracles},
        {8, personalization_retention},
        {9, directional_trend},
        {10, [&] { return reproducibility(work); }},
    };
    int failures = 0;
    for (const auto& [id, check] : criteria) {
        if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v = {false, std::string("threw: ") + e.what()};
        }
        failures += !v.pass;
        std::printf("criterion %d: %s (%s)\n", id, v.pass ? "PASS" : "FAIL", v.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
