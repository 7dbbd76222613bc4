#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "phoenix/classifier.hpp"
#include "phoenix/data.hpp"
#include "phoenix/denoiser.hpp"
#include "phoenix/diffusion.hpp"
#include "phoenix/filter.hpp"
#include "phoenix/optim.hpp"
#include "phoenix/rng.hpp"

namespace phoenix {

enum class OptimizerKind { adam, sgd };

struct FederationConfig {
    std::size_t client_count = 4;
    int server_rounds = 5;
    int local_epochs = 5;
    // 0 selects full-batch training.
    std::size_t batch_size = 32;
    double learning_rate = 1e-3;
    NoiseSchedule schedule;
    bool personalization = false;
    bool threshold_filtering = false;
    FilterConfig filter;
    std::size_t eval_sample_count = 100;
    int eval_start_round = 5;
    int warmup_epochs = 5;
    OptimizerKind optimizer = OptimizerKind::adam;
    std::size_t workers = 1;
    // When false, wall_ms is logged as 0 so logs are byte-comparable.
    bool record_wall_time = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct ClientState {
    std::size_t id = 0;
    std::vector<std::size_t> data_indices;
    TensorMap personal_params;
    AdamState optimizer_state;
    Rng rng{0};

    // rng seeded from derive_seed(global_seed, {kClientStream, id}).
    static ClientState create(std::size_t id, std::vector<std::size_t> indices, std::uint64_t global_seed);
};

struct ClientUpdate {
    std::size_t client_id = 0;
    TensorMap base_params;
    std::size_t sample_count = 0;
    double train_loss = 0.0;
    bool faulted = false;
    bool skipped = false;
};

// Trains `params` in place over `indices` of `data`. Each epoch shuffles the
// indices with `rng`, then for every batch draws step indices and noise via
// draw_training_noise(rng, ...) and applies one optimizer step. Returns the
// mean batch loss of each epoch.
std::vector<double> train_denoiser(TensorMap& params, const DenoiserConfig& model_config, const Dataset& data,
                                   std::span<const std::size_t> indices, int epochs, std::size_t batch_size,
                                   const NoiseSchedule& schedule, OptimizerKind optimizer, double learning_rate,
                                   AdamState& adam, Rng& rng);

struct WarmupResult {
    DenoiserModel model;
    std::vector<double> epoch_losses;
};

// Centralized training of `initial` on the shared pool for warmup_epochs.
WarmupResult warmup_train(const DenoiserModel& initial, const Dataset& data, std::span<const std::size_t> shared_pool,
                          const FederationConfig& config);

// Global base parameters combined with the client's stored personal
// parameters (the global ones while the client has none).
DenoiserModel assemble_client_model(const DenoiserModel& global, const ClientState& client, bool personalization);

ClientUpdate local_train(ClientState& client, const DenoiserModel& global, const Dataset& data,
                         const FederationConfig& config);

// Sample-count weighted mean per parameter, accumulated in double in
// ascending client id order.
TensorMap fedavg(const std::vector<ClientUpdate>& updates);

struct MetricsContext {
    // Maps images to feature rows; required.
    std::function<Matrix(const Tensor&)> featurize;
    Matrix reference_features;
    std::size_t k = 3;
};

MetricsContext make_metrics_context(const EvalClassifier& classifier, const Dataset& reference, FeatureSpace space,
                                    std::size_t k = 3);

// Generates eval_sample_count samples from `model` seeded by (seed, round,
// client id) and scores them against the context's reference features.
PrecisionRecall evaluate_client(const ClientState& client, const DenoiserModel& model, const MetricsContext& context,
                                const FederationConfig& config, int round);

struct RunLogRow {
    int round = 0;
    std::size_t client_id = 0;
    std::string status;
    std::size_t samples = 0;
    double train_loss = std::numeric_limits<double>::quiet_NaN();
    double precision = std::numeric_limits<double>::quiet_NaN();
    double recall = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t bytes_up = 0;
    std::uint64_t bytes_down = 0;
    std::uint64_t wall_ms = 0;
};

struct RunLog {
    std::vector<RunLogRow> rows;

    // round,client_id,status,samples,train_loss,precision,recall,bytes_up,bytes_down,wall_ms
    std::string to_csv() const;
};

struct FederationHooks {
    // Replaces evaluate_client when set.
    std::function<PrecisionRecall(const ClientState&, const DenoiserModel&, int round)> evaluate;
    // Sees the updates entering aggregation each round.
    std::function<void(int round, const std::vector<ClientUpdate>&, const std::vector<ClientState>&)> on_updates;
    // Sees the new global model after each aggregation.
    std::function<void(int round, const DenoiserModel&, const std::vector<ClientState>&)> on_round;
};

struct FederationResult {
    DenoiserModel model;
    RunLog log;
    std::vector<ClientState> clients;
    FilterState filter;
};

// Executes server_rounds rounds of broadcast, local training, optional
// evaluation + filtering, and aggregation over the surviving updates.
FederationResult run_federation(const DenoiserModel& initial, const std::vector<std::vector<std::size_t>>& client_data,
                                const FederationConfig& config, const Dataset& data,
                                const MetricsContext* metrics = nullptr, const FederationHooks& hooks = {});

}  // namespace phoenix
