#pragma once

#include <cstdint>
#include <string>

#include "phoenix/classifier.hpp"
#include "phoenix/data.hpp"
#include "phoenix/denoiser.hpp"
#include "phoenix/diffusion.hpp"
#include "phoenix/federation.hpp"

namespace phoenix {

struct DatasetSpec {
    std::string kind = "toy";  // toy | cifar10
    // toy
    int classes = 4;
    std::size_t per_class = 250;
    std::size_t test_per_class = 100;
    std::size_t side = 8;
    // cifar10
    std::string path;
};

struct PartitionSpec {
    std::string mode = "label_skew";  // iid | label_skew | data_sharing
    std::size_t classes_per_client = 2;
    double beta_pct = 25.0;
    double alpha_pct = 100.0;
};

struct DiffusionSpec {
    std::string schedule = "cosine";  // cosine | linear
    int T = 50;
};

struct MetricsSpec {
    std::string feature_space = "classifier";  // classifier | pixels
    std::size_t k = 3;
    std::size_t is_splits = 10;
    std::size_t final_sample_count = 400;
    std::size_t classifier_epochs = 8;
};

// One JSON document describing a whole pipeline run.
struct RunConfig {
    DatasetSpec dataset;
    PartitionSpec partition;
    std::string model_preset = "desk";
    DenoiserConfig model;
    DiffusionSpec diffusion;
    FederationConfig federation;  // schedule, seed and workers are filled from the fields here
    MetricsSpec metrics;
    std::uint64_t seed = 1;
    std::string run_id = "run";
    std::string output_dir = "out";
    std::size_t workers = 1;

    // Throws ConfigError describing the first invalid field.
    void validate() const;

    NoiseSchedule schedule() const;
    FederationConfig federation_config() const;
    FeatureSpace feature_space() const;
    // Short strategy description used in reports, e.g. "data_sharing".
    std::string strategy_label() const;

    // "desk" or "paper"; ConfigError for unknown names.
    static RunConfig preset(const std::string& name);
    // Unknown keys are rejected. Missing keys keep the preset named by
    // "preset" (default "desk").
    static RunConfig from_json(const std::string& text);
    std::string to_json() const;
};

// Dataset the config describes: train split and held-out reference split.
struct LoadedData {
    Dataset train;
    Dataset test;
};
LoadedData load_datasets(const RunConfig& config);

}  // namespace phoenix
