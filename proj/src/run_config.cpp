#include "phoenix/run_config.hpp"

#include <set>

#include <json.hpp>

namespace phoenix {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
void read(const json& obj, const char* key, T& field, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        field = obj.at(key).get<T>();
    } catch (const json::exception&) {
        throw ConfigError(where + "." + key + " has the wrong type");
    }
}

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

}  // namespace

void RunConfig::validate() const {
    if (dataset.kind == "toy") {
        if (dataset.classes < 2 || dataset.classes > kToyTemplateCount) {
            throw ConfigError("dataset.classes must lie in [2, " + std::to_string(kToyTemplateCount) + "]");
        }
        if (dataset.per_class < 1 || dataset.test_per_class < 1) throw ConfigError("dataset sizes must be positive");
        if (dataset.side < 4) throw ConfigError("dataset.side must be at least 4");
        if (model.image_channels != 1 || model.image_side != dataset.side) {
            throw ConfigError("model image shape does not match the toy dataset");
        }
    } else if (dataset.kind == "cifar10") {
        if (dataset.path.empty()) throw ConfigError("dataset.path is required for cifar10");
        if (model.image_channels != 3 || model.image_side != 32) {
            throw ConfigError("model image shape does not match CIFAR-10");
        }
    } else {
        throw ConfigError("dataset.kind must be toy or cifar10, got '" + dataset.kind + "'");
    }
    if (partition.mode != "iid" && partition.mode != "label_skew" && partition.mode != "data_sharing") {
        throw ConfigError("partition.mode must be iid, label_skew or data_sharing, got '" + partition.mode + "'");
    }
    if (partition.classes_per_client < 1) throw ConfigError("partition.classes_per_client must be positive");
    if (partition.mode == "data_sharing") {
        if (!(partition.beta_pct > 0.0 && partition.beta_pct <= 100.0)) {
            throw ConfigError("partition.beta_pct must lie in (0, 100]");
        }
        if (!(partition.alpha_pct >= 0.0 && partition.alpha_pct <= 100.0)) {
            throw ConfigError("partition.alpha_pct must lie in [0, 100]");
        }
    }
    try {
        model.validate();
    } catch (const ArgumentError& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    if (diffusion.schedule != "cosine" && diffusion.schedule != "linear") {
        throw ConfigError("diffusion.schedule must be cosine or linear");
    }
    if (diffusion.T < 2) throw ConfigError("diffusion.T must be at least 2");
    if (metrics.feature_space != "classifier" && metrics.feature_space != "pixels") {
        throw ConfigError("metrics.feature_space must be classifier or pixels");
    }
    if (metrics.k < 1) throw ConfigError("metrics.k must be positive");
    if (metrics.is_splits < 1) throw ConfigError("metrics.is_splits must be positive");
    if (metrics.final_sample_count < metrics.k + 1) throw ConfigError("metrics.final_sample_count is below k + 1");
    if (federation.threshold_filtering && federation.eval_sample_count < metrics.k + 1) {
        throw ConfigError("federation.eval_sample_count is below k + 1");
    }
    if (run_id.empty() || run_id.find_first_of("/\\") != std::string::npos || run_id == "." || run_id == "..") {
        throw ConfigError("run_id must be a plain directory name");
    }
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
    if (workers < 1) throw ConfigError("workers must be at least 1");
    federation_config().validate();
}

NoiseSchedule RunConfig::schedule() const {
    return diffusion.schedule == "linear" ? make_linear_schedule(diffusion.T) : make_cosine_schedule(diffusion.T);
}

FederationConfig RunConfig::federation_config() const {
    FederationConfig f = federation;
    f.schedule = schedule();
    f.seed = seed;
    f.workers = workers;
    f.filter.eval_start_round = f.eval_start_round;
    return f;
}

FeatureSpace RunConfig::feature_space() const {
    return metrics.feature_space == "pixels" ? FeatureSpace::pixels : FeatureSpace::classifier;
}

std::string RunConfig::strategy_label() const {
    std::string label = partition.mode == "data_sharing" ? "data_sharing"
                        : partition.mode == "iid"        ? "baseline_iid"
                                                         : "baseline_non_iid";
    if (federation.personalization) label += "+personalization";
    if (federation.threshold_filtering) label += "+filtering";
    return label;
}

RunConfig RunConfig::preset(const std::string& name) {
    RunConfig c;
    if (name == "desk") {
        c.run_id = "desk";
        c.dataset.per_class = 500;
        c.federation.client_count = 4;
        c.federation.server_rounds = 5;
        c.federation.local_epochs = 5;
        c.federation.batch_size = 8;
        c.federation.learning_rate = 2e-3;
        c.federation.warmup_epochs = 5;
        c.federation.eval_sample_count = 100;
        c.federation.eval_start_round = 3;
        return c;
    }
    if (name == "paper") {
        c.model_preset = "paper";
        c.model = DenoiserConfig::paper();
        c.dataset = DatasetSpec{.kind = "cifar10", .path = "data/cifar-10-batches-bin"};
        c.diffusion.T = 1000;
        c.run_id = "paper";
        c.federation.client_count = 10;
        c.federation.server_rounds = 10;
        c.federation.local_epochs = 100;
        c.federation.batch_size = 128;
        c.federation.learning_rate = 1e-4;
        c.federation.warmup_epochs = 5;
        c.federation.eval_sample_count = 1000;
        c.federation.eval_start_round = 5;
        c.metrics.final_sample_count = 10000;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "'");
}

RunConfig RunConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown(j, {"preset", "dataset", "partition", "model", "diffusion", "federation", "metrics", "seed",
                       "run_id", "output_dir", "workers"},
                   "config");
    std::string preset_name = "desk";
    read(j, "preset", preset_name, "config");
    RunConfig c = preset(preset_name);

    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        reject_unknown(d, {"kind", "classes", "per_class", "test_per_class", "side", "path"}, "dataset");
        read(d, "kind", c.dataset.kind, "dataset");
        read(d, "classes", c.dataset.classes, "dataset");
        read(d, "per_class", c.dataset.per_class, "dataset");
        read(d, "test_per_class", c.dataset.test_per_class, "dataset");
        read(d, "side", c.dataset.side, "dataset");
        read(d, "path", c.dataset.path, "dataset");
    }
    if (j.contains("partition")) {
        const json& p = j["partition"];
        reject_unknown(p, {"mode", "classes_per_client", "beta_pct", "alpha_pct"}, "partition");
        read(p, "mode", c.partition.mode, "partition");
        read(p, "classes_per_client", c.partition.classes_per_client, "partition");
        read(p, "beta_pct", c.partition.beta_pct, "partition");
        read(p, "alpha_pct", c.partition.alpha_pct, "partition");
    }
    if (j.contains("model")) {
        const json& m = j["model"];
        reject_unknown(m, {"preset", "image_channels", "image_side", "base_channels", "depth", "blocks_per_stage",
                           "time_embed_dim", "norm_groups"},
                       "model");
        if (m.contains("preset")) {
            read(m, "preset", c.model_preset, "model");
            if (c.model_preset == "desk") {
                c.model = DenoiserConfig::desk();
            } else if (c.model_preset == "paper") {
                c.model = DenoiserConfig::paper();
            } else {
                throw ConfigError("unknown model preset '" + c.model_preset + "'");
            }
        }
        bool explicit_field = false;
        for (const char* key : {"image_channels", "image_side", "base_channels", "depth", "blocks_per_stage",
                                "time_embed_dim", "norm_groups"}) {
            explicit_field = explicit_field || m.contains(key);
        }
        read(m, "image_channels", c.model.image_channels, "model");
        read(m, "image_side", c.model.image_side, "model");
        read(m, "base_channels", c.model.base_channels, "model");
        read(m, "depth", c.model.depth, "model");
        read(m, "blocks_per_stage", c.model.blocks_per_stage, "model");
        read(m, "time_embed_dim", c.model.time_embed_dim, "model");
        read(m, "norm_groups", c.model.norm_groups, "model");
        if (explicit_field) c.model_preset = "custom";
    }
    if (j.contains("diffusion")) {
        const json& d = j["diffusion"];
        reject_unknown(d, {"schedule", "T"}, "diffusion");
        read(d, "schedule", c.diffusion.schedule, "diffusion");
        read(d, "T", c.diffusion.T, "diffusion");
    }
    if (j.contains("federation")) {
        const json& f = j["federation"];
        reject_unknown(f, {"client_count", "server_rounds", "local_epochs", "batch_size", "learning_rate",
                           "personalization", "threshold_filtering", "drop_policy", "threshold", "immediate",
                           "min_active_clients", "eval_sample_count", "eval_start_round", "warmup_epochs",
                           "optimizer", "record_wall_time"},
                       "federation");
        auto& fc = c.federation;
        read(f, "client_count", fc.client_count, "federation");
        read(f, "server_rounds", fc.server_rounds, "federation");
        read(f, "local_epochs", fc.local_epochs, "federation");
        read(f, "batch_size", fc.batch_size, "federation");
        read(f, "learning_rate", fc.learning_rate, "federation");
        read(f, "personalization", fc.personalization, "federation");
        read(f, "threshold_filtering", fc.threshold_filtering, "federation");
        read(f, "threshold", fc.filter.threshold, "federation");
        read(f, "immediate", fc.filter.immediate, "federation");
        read(f, "min_active_clients", fc.filter.min_active_clients, "federation");
        read(f, "eval_sample_count", fc.eval_sample_count, "federation");
        read(f, "eval_start_round", fc.eval_start_round, "federation");
        read(f, "warmup_epochs", fc.warmup_epochs, "federation");
        read(f, "record_wall_time", fc.record_wall_time, "federation");
        if (f.contains("drop_policy")) {
            std::string p;
            read(f, "drop_policy", p, "federation");
            if (p == "lowest_precision") {
                fc.filter.policy = DropPolicy::lowest_precision;
            } else if (p == "fixed_threshold") {
                fc.filter.policy = DropPolicy::fixed_threshold;
            } else {
                throw ConfigError("federation.drop_policy must be lowest_precision or fixed_threshold");
            }
        }
        if (f.contains("optimizer")) {
            std::string o;
            read(f, "optimizer", o, "federation");
            if (o != "adam" && o != "sgd") throw ConfigError("federation.optimizer must be adam or sgd");
            fc.optimizer = o == "adam" ? OptimizerKind::adam : OptimizerKind::sgd;
        }
    }
    if (j.contains("metrics")) {
        const json& m = j["metrics"];
        reject_unknown(m, {"feature_space", "k", "is_splits", "final_sample_count", "classifier_epochs"}, "metrics");
        read(m, "feature_space", c.metrics.feature_space, "metrics");
        read(m, "k", c.metrics.k, "metrics");
        read(m, "is_splits", c.metrics.is_splits, "metrics");
        read(m, "final_sample_count", c.metrics.final_sample_count, "metrics");
        read(m, "classifier_epochs", c.metrics.classifier_epochs, "metrics");
    }
    read(j, "seed", c.seed, "config");
    read(j, "run_id", c.run_id, "config");
    read(j, "output_dir", c.output_dir, "config");
    read(j, "workers", c.workers, "config");
    return c;
}

std::string RunConfig::to_json() const {
    ordered_json j;
    j["dataset"] = {{"kind", dataset.kind}};
    if (dataset.kind == "toy") {
        j["dataset"]["classes"] = dataset.classes;
        j["dataset"]["per_class"] = dataset.per_class;
        j["dataset"]["test_per_class"] = dataset.test_per_class;
        j["dataset"]["side"] = dataset.side;
    } else {
        j["dataset"]["path"] = dataset.path;
    }
    j["partition"] = {{"mode", partition.mode},
                      {"classes_per_client", partition.classes_per_client},
                      {"beta_pct", partition.beta_pct},
                      {"alpha_pct", partition.alpha_pct}};
    j["model"] = {{"image_channels", model.image_channels}, {"image_side", model.image_side},
                  {"base_channels", model.base_channels},   {"depth", model.depth},
                  {"blocks_per_stage", model.blocks_per_stage}, {"time_embed_dim", model.time_embed_dim},
                  {"norm_groups", model.norm_groups}};
    j["diffusion"] = {{"schedule", diffusion.schedule}, {"T", diffusion.T}};
    const auto& f = federation;
    j["federation"] = {{"client_count", f.client_count},
                       {"server_rounds", f.server_rounds},
                       {"local_epochs", f.local_epochs},
                       {"batch_size", f.batch_size},
                       {"learning_rate", f.learning_rate},
                       {"personalization", f.personalization},
                       {"threshold_filtering", f.threshold_filtering},
                       {"drop_policy", policy_name(f.filter.policy)},
                       {"threshold", f.filter.threshold},
                       {"immediate", f.filter.immediate},
                       {"min_active_clients", f.filter.min_active_clients},
                       {"eval_sample_count", f.eval_sample_count},
                       {"eval_start_round", f.eval_start_round},
                       {"warmup_epochs", f.warmup_epochs},
                       {"optimizer", optimizer_name(f.optimizer)},
                       {"record_wall_time", f.record_wall_time}};
    j["metrics"] = {{"feature_space", metrics.feature_space},
                    {"k", metrics.k},
                    {"is_splits", metrics.is_splits},
                    {"final_sample_count", metrics.final_sample_count},
                    {"classifier_epochs", metrics.classifier_epochs}};
    j["seed"] = seed;
    j["run_id"] = run_id;
    j["output_dir"] = output_dir;
    j["workers"] = workers;
    return j.dump(2) + "\n";
}

LoadedData load_datasets(const RunConfig& config) {
    LoadedData d;
    if (config.dataset.kind == "toy") {
        d.train = make_toy_dataset(config.dataset.classes, config.dataset.per_class, config.dataset.side,
                                   derive_seed(config.seed, {kDataStream, 0}));
        d.test = make_toy_dataset(config.dataset.classes, config.dataset.test_per_class, config.dataset.side,
                                  derive_seed(config.seed, {kDataStream, 1}));
    } else {
        d.train = load_cifar10(config.dataset.path, true);
        d.test = load_cifar10(config.dataset.path, false);
    }
    return d;
}

}  // namespace phoenix
