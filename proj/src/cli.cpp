#include "phoenix/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "phoenix/run_config.hpp"

namespace phoenix {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct GlobalOptions {
    std::string config = "desk";
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> workers;
};

std::string read_text(const fs::path& path, const std::string& what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(what + " not found: " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw Error("failed writing " + path.string());
}

std::uint64_t parse_u64(const char* text, const char* what) {
    try {
        std::size_t used = 0;
        const std::string s(text);
        const auto v = std::stoull(s, &used);
        if (used != s.size() || s.front() == '-') throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw ConfigError(std::string(what) + " is not an unsigned integer: '" + text + "'");
    }
}

RunConfig resolve_config(const GlobalOptions& g) {
    RunConfig c;
    if (fs::exists(g.config)) {
        c = RunConfig::from_json(read_text(g.config, "config"));
    } else if (g.config == "desk" || g.config == "paper") {
        c = RunConfig::preset(g.config);
    } else {
        throw ConfigError("config not found: " + g.config);
    }
    if (const char* s = std::getenv("PHOENIX_SEED")) c.seed = parse_u64(s, "PHOENIX_SEED");
    if (const char* o = std::getenv("PHOENIX_OUT")) c.output_dir = o;
    if (g.seed) c.seed = *g.seed;
    if (g.out) c.output_dir = *g.out;
    if (g.workers) c.workers = *g.workers;
    c.validate();
    return c;
}

fs::path run_dir(const RunConfig& c) { return fs::path(c.output_dir) / "runs" / c.run_id; }

PlanFile load_plan(const RunConfig& c) {
    const PlanFile plan = plan_from_json(read_text(fs::path(c.output_dir) / "plan.json", "partition plan"));
    if (plan.mode != c.partition.mode) {
        throw ConfigError("plan mode '" + plan.mode + "' does not match config mode '" + c.partition.mode + "'");
    }
    if (plan.clients.size() != c.federation.client_count) {
        throw ConfigError("plan has " + std::to_string(plan.clients.size()) + " clients, config expects " +
                          std::to_string(c.federation.client_count));
    }
    return plan;
}

void check_plan_indices(const PlanFile& plan, const Dataset& train) {
    auto check = [&](const std::vector<std::size_t>& v) {
        for (std::size_t i : v) {
            if (i >= train.size()) throw ConfigError("plan index " + std::to_string(i) + " exceeds dataset size");
        }
    };
    for (const auto& c : plan.clients) check(c);
    check(plan.shared_pool);
}

EvalClassifier ensure_classifier(const RunConfig& c, const Dataset& train) {
    const fs::path path = fs::path(c.output_dir) / "classifier.phxc";
    if (fs::exists(path)) return EvalClassifier::from_checkpoint(load_checkpoint(path));
    ClassifierTraining t;
    t.epochs = c.metrics.classifier_epochs;
    EvalClassifier clf = train_eval_classifier(train, t, c.seed);
    save_checkpoint(path, clf.to_checkpoint());
    return clf;
}

void save_model(const fs::path& path, const DenoiserModel& m) { save_checkpoint(path, m.to_checkpoint()); }

void save_samples(const fs::path& dir, const Tensor& batch) {
    fs::create_directories(dir);
    save_tensor(dir / "samples.phxt", batch);
    const Shape one(batch.shape().begin() + 1, batch.shape().end());
    const std::size_t per = shape_size(one);
    const char* ext = one[0] == 1 ? ".pgm" : ".ppm";
    for (std::size_t i = 0; i < batch.dim(0); ++i) {
        Tensor img(one);
        std::copy_n(batch.storage().begin() + static_cast<std::ptrdiff_t>(i * per), per, img.storage().begin());
        char name[32];
        std::snprintf(name, sizeof name, "sample_%04zu", i);
        save_netpbm(dir / (std::string(name) + ext), img);
    }
}

int cmd_partition(const RunConfig& c) {
    const LoadedData data = load_datasets(c);
    const std::size_t k = c.federation.client_count;
    PlanFile plan;
    if (c.partition.mode == "iid") {
        plan = to_plan_file(partition_iid(data.train, k, c.seed), c.seed);
    } else if (c.partition.mode == "label_skew") {
        plan = to_plan_file(partition_label_skew(data.train, k, c.partition.classes_per_client, c.seed), c.seed);
    } else {
        plan = to_plan_file(data_sharing_split(data.train, k, c.partition.beta_pct, c.partition.alpha_pct,
                                               c.partition.classes_per_client, c.seed));
    }
    fs::create_directories(c.output_dir);
    write_text(fs::path(c.output_dir) / "plan.json", plan_to_json(plan));
    std::string csv = "client,class,count\n";
    auto add_rows = [&](const std::string& who, const std::vector<std::size_t>& idx) {
        std::vector<int> labels;
        for (std::size_t i : idx) labels.push_back(data.train.labels[i]);
        const auto counts = class_counts(labels, data.train.num_classes);
        for (std::size_t cls = 0; cls < counts.size(); ++cls) {
            csv += who + "," + std::to_string(cls) + "," + std::to_string(counts[cls]) + "\n";
        }
    };
    for (std::size_t i = 0; i < plan.clients.size(); ++i) add_rows(std::to_string(i), plan.clients[i]);
    if (!plan.shared_pool.empty()) add_rows("shared", plan.shared_pool);
    write_text(fs::path(c.output_dir) / "plan_class_counts.csv", csv);
    std::cout << "wrote plan for " << plan.clients.size() << " clients (" << plan.mode << ")\n";
    return kExitOk;
}

int cmd_warmup(const RunConfig& c) {
    const PlanFile plan = load_plan(c);
    if (plan.mode != "data_sharing") throw ConfigError("warmup needs a data_sharing plan");
    const LoadedData data = load_datasets(c);
    check_plan_indices(plan, data.train);
    const WarmupResult w = warmup_train(build_unet(c.model, c.seed), data.train, plan.shared_pool, c.federation_config());
    const fs::path dir = run_dir(c);
    fs::create_directories(dir);
    save_model(dir / "round_0.phxc", w.model);
    std::string csv = "epoch,loss\n";
    for (std::size_t e = 0; e < w.epoch_losses.size(); ++e) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%zu,%.9g\n", e + 1, w.epoch_losses[e]);
        csv += buf;
    }
    write_text(dir / "warmup_loss.csv", csv);
    std::cout << "warmup: " << w.epoch_losses.size() << " epochs on " << plan.shared_pool.size() << " samples\n";
    return kExitOk;
}

// Final samples: from the global model, or split across the connected
// clients' own models when personalization is on.
Tensor final_samples(const RunConfig& c, const FederationResult& res, const NoiseSchedule& schedule) {
    const std::size_t n = c.metrics.final_sample_count;
    if (!c.federation.personalization) {
        return generate(res.model, schedule, n, derive_seed(c.seed, {kEvalStream, 0}), c.workers);
    }
    std::vector<std::size_t> connected;
    for (std::size_t i = 0; i < res.clients.size(); ++i) {
        if (res.filter.status[i] != ClientStatus::disconnected) connected.push_back(i);
    }
    Shape shape = {n, c.model.image_channels, c.model.image_side, c.model.image_side};
    Tensor out(shape);
    const std::size_t per = shape_size(shape) / n;
    std::size_t at = 0;
    for (std::size_t j = 0; j < connected.size(); ++j) {
        const std::size_t share = n / connected.size() + (j < n % connected.size() ? 1 : 0);
        if (share == 0) continue;
        const DenoiserModel m = assemble_client_model(res.model, res.clients[connected[j]], true);
        const Tensor part = generate(m, schedule, share, derive_seed(c.seed, {kEvalStream, 0, connected[j]}), c.workers);
        std::copy(part.storage().begin(), part.storage().end(), out.storage().begin() + static_cast<std::ptrdiff_t>(at));
        at += share * per;
    }
    return out;
}

int cmd_train(const RunConfig& c) {
    const PlanFile plan = load_plan(c);
    const fs::path dir = run_dir(c);
    if (plan.mode == "data_sharing" && !fs::exists(dir / "round_0.phxc")) {
        throw ConfigError("warmup checkpoint missing: " + (dir / "round_0.phxc").string() + " (run warmup first)");
    }
    const LoadedData data = load_datasets(c);
    check_plan_indices(plan, data.train);
    DenoiserModel initial = plan.mode == "data_sharing"
                                ? DenoiserModel::from_checkpoint(c.model, load_checkpoint(dir / "round_0.phxc"))
                                : build_unet(c.model, c.seed);
    fs::create_directories(dir);
    if (plan.mode != "data_sharing") save_model(dir / "round_0.phxc", initial);
    write_text(dir / "config.json", c.to_json());

    const EvalClassifier classifier = ensure_classifier(c, data.train);
    const FederationConfig fc = c.federation_config();
    std::optional<MetricsContext> ctx;
    if (fc.threshold_filtering) ctx = make_metrics_context(classifier, data.test, c.feature_space(), c.metrics.k);

    FederationHooks hooks;
    hooks.on_round = [&](int round, const DenoiserModel& m, const std::vector<ClientState>&) {
        save_model(dir / ("round_" + std::to_string(round) + ".phxc"), m);
    };
    const FederationResult res = [&] {
        try {
            return run_federation(initial, plan.clients, fc, data.train, ctx ? &*ctx : nullptr, hooks);
        } catch (const ConfigError&) {
            throw;
        } catch (const Error& e) {
            throw RunError(e.what());
        }
    }();
    write_text(dir / "run_log.csv", res.log.to_csv());
    if (fc.personalization) {
        for (const auto& client : res.clients) {
            std::vector<CheckpointEntry> entries;
            for (const auto& [name, value] : client.personal_params) entries.push_back({name, value, true});
            if (!entries.empty()) {
                save_checkpoint(dir / ("client_" + std::to_string(client.id) + "_personal.phxc"), entries);
            }
        }
    }

    const Tensor samples = final_samples(c, res, fc.schedule);
    save_tensor(dir / "final_samples.phxt", samples);
    EvaluationOptions eo;
    eo.feature_space = c.feature_space();
    eo.k = c.metrics.k;
    eo.is_splits = c.metrics.is_splits;
    eo.workers = c.workers;
    const MetricsReport report = evaluate_samples(classifier, samples, data.test, eo);

    ordered_json s;
    s["run_id"] = c.run_id;
    s["strategy"] = c.strategy_label();
    s["beta_pct"] = c.partition.mode == "data_sharing" ? ordered_json(c.partition.beta_pct) : ordered_json();
    s["alpha_pct"] = c.partition.mode == "data_sharing" ? ordered_json(c.partition.alpha_pct) : ordered_json();
    s["drop_policy"] = fc.threshold_filtering
                           ? (fc.filter.policy == DropPolicy::lowest_precision
                                  ? std::string("lowest_precision")
                                  : "threshold_" + std::to_string(fc.filter.threshold).substr(0, 4))
                           : std::string("none");
    s["seed"] = c.seed;
    s["server_rounds"] = fc.server_rounds;
    std::vector<std::size_t> dropped;
    for (std::size_t i = 0; i < res.filter.status.size(); ++i) {
        if (res.filter.status[i] == ClientStatus::disconnected) dropped.push_back(i);
    }
    s["disconnected"] = dropped;
    s["metrics"] = ordered_json::parse(report_to_json(report));
    write_text(dir / "summary.json", s.dump(2) + "\n");
    std::cout << "run " << c.run_id << ": fid " << report.fid << " precision " << report.precision << " recall "
              << report.recall << " tv " << report.tv_distance << "\n";
    return kExitOk;
}

int cmd_generate(const RunConfig& c, const std::string& checkpoint, std::size_t count, const std::string& name) {
    if (count < 1) throw ConfigError("--count must be at least 1");
    if (name.empty() || name.find_first_of("/\\") != std::string::npos) throw ConfigError("--name must be a plain name");
    DenoiserModel model = [&] {
        try {
            return DenoiserModel::from_checkpoint(c.model, load_checkpoint(checkpoint));
        } catch (const ArgumentError& e) {
            throw FormatError(checkpoint + ": " + e.what());
        } catch (const ShapeError& e) {
            throw FormatError(checkpoint + ": " + e.what());
        }
    }();
    const Tensor batch = generate(model, c.schedule(), count, c.seed, c.workers);
    save_samples(fs::path(c.output_dir) / name, batch);
    std::cout << "wrote " << count << " samples to " << (fs::path(c.output_dir) / name).string() << "\n";
    return kExitOk;
}

int cmd_evaluate(const RunConfig& c, const std::string& samples_path, std::string classifier_path,
                 const std::string& name) {
    if (name.empty() || name.find_first_of("/\\") != std::string::npos) throw ConfigError("--name must be a plain name");
    if (classifier_path.empty()) classifier_path = (fs::path(c.output_dir) / "classifier.phxc").string();
    if (!fs::exists(samples_path)) throw ConfigError("samples not found: " + samples_path);
    if (!fs::exists(classifier_path)) throw ConfigError("classifier checkpoint not found: " + classifier_path);
    const Tensor samples = load_tensor(samples_path);
    const EvalClassifier classifier = EvalClassifier::from_checkpoint(load_checkpoint(classifier_path));
    const LoadedData data = load_datasets(c);
    EvaluationOptions eo;
    eo.feature_space = c.feature_space();
    eo.k = c.metrics.k;
    eo.is_splits = c.metrics.is_splits;
    eo.workers = c.workers;
    const MetricsReport report = evaluate_samples(classifier, samples, data.test, eo);
    fs::create_directories(c.output_dir);
    write_text(fs::path(c.output_dir) / (name + ".json"), report_to_json(report));
    write_text(fs::path(c.output_dir) / (name + "_histogram.csv"), sorted_histogram_csv(report));
    std::cout << report_to_json(report);
    return kExitOk;
}

int cmd_report(const RunConfig& c, const std::vector<std::string>& dirs) {
    struct Row {
        std::string run_id;
        std::string line;
    };
    std::vector<Row> rows;
    for (const auto& d : dirs) {
        const fs::path p = fs::path(d) / "summary.json";
        if (!fs::exists(p)) {
            std::cerr << "warning: no summary.json in " << d << ", skipped\n";
            continue;
        }
        try {
            const auto s = nlohmann::json::parse(read_text(p, "summary"));
            const MetricsReport r = report_from_json(s.at("metrics").dump());
            auto opt = [&](const char* key) {
                return s.contains(key) && !s[key].is_null() ? s[key].dump() : std::string();
            };
            char metrics[256];
            std::snprintf(metrics, sizeof metrics, "%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", r.fid, r.is_mean, r.is_std,
                          r.precision, r.recall, r.tv_distance);
            const std::string id = s.at("run_id").get<std::string>();
            rows.push_back({id, id + "," + s.at("strategy").get<std::string>() + "," + opt("beta_pct") + "," +
                                    opt("alpha_pct") + "," + s.at("drop_policy").get<std::string>() + "," + metrics});
        } catch (const std::exception& e) {
            std::cerr << "warning: unreadable summary in " << d << " (" << e.what() << "), skipped\n";
        }
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.run_id < b.run_id; });
    std::string csv = "run_id,strategy,beta_pct,alpha_pct,drop_policy,fid,is_mean,is_std,precision,recall,tv_distance\n";
    for (const auto& r : rows) csv += r.line + "\n";
    fs::create_directories(c.output_dir);
    write_text(fs::path(c.output_dir) / "report.csv", csv);
    std::cout << csv;
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    std::vector<const char*> argv;
    for (const auto& a : args) argv.push_back(a.c_str());
    return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"Federated diffusion simulator"};
    app.require_subcommand(1);
    GlobalOptions g;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t workers = 1;
    app.add_option("--config", g.config, "Config JSON path or preset name (desk, paper)");
    auto* seed_opt = app.add_option("--seed", seed, "Global seed");
    auto* out_opt = app.add_option("--out", out, "Output directory");
    auto* workers_opt = app.add_option("--workers", workers, "Worker thread cap")->check(CLI::PositiveNumber);

    auto* partition = app.add_subcommand("partition", "Write the client partition plan");
    auto* warmup = app.add_subcommand("warmup", "Train the warmup model on the shared pool");
    auto* train = app.add_subcommand("train", "Run federated training and final evaluation");
    auto* gen = app.add_subcommand("generate", "Sample images from a checkpoint");
    std::string checkpoint;
    std::size_t count = 10;
    std::string gen_name = "samples";
    gen->add_option("--checkpoint", checkpoint, "PHXC checkpoint")->required();
    gen->add_option("--count", count, "Number of samples");
    gen->add_option("--name", gen_name, "Subdirectory of the output directory");
    auto* eval = app.add_subcommand("evaluate", "Score samples against the reference split");
    std::string samples_path, classifier_path, eval_name = "metrics";
    eval->add_option("--samples", samples_path, "PHXT sample batch")->required();
    eval->add_option("--classifier", classifier_path, "Classifier checkpoint (default <out>/classifier.phxc)");
    eval->add_option("--name", eval_name, "Report file stem");
    auto* report = app.add_subcommand("report", "Tabulate run summaries");
    std::vector<std::string> run_dirs;
    report->add_option("runs", run_dirs, "Run directories")->required();
    for (auto* sub : {partition, warmup, train, gen, eval, report}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitInput;
    }
    if (*seed_opt) g.seed = seed;
    if (*out_opt) g.out = out;
    if (*workers_opt) g.workers = workers;

    try {
        const RunConfig c = resolve_config(g);
        if (*partition) return cmd_partition(c);
        if (*warmup) return cmd_warmup(c);
        if (*train) return cmd_train(c);
        if (*gen) return cmd_generate(c, checkpoint, count, gen_name);
        if (*eval) return cmd_evaluate(c, samples_path, classifier_path, eval_name);
        return cmd_report(c, run_dirs);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const ArgumentError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace phoenix
