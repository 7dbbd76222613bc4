#include "phoenix/federation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "phoenix/parallel.hpp"

namespace phoenix {

void FederationConfig::validate() const {
    if (client_count < 1) throw ConfigError("client_count must be at least 1");
    if (server_rounds < 1) throw ConfigError("server_rounds must be at least 1");
    if (local_epochs < 1) throw ConfigError("local_epochs must be at least 1");
    if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be non-negative");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (schedule.T < 1) throw ConfigError("federation needs a noise schedule");
    if (threshold_filtering) {
        if (client_count < 2) throw ConfigError("threshold filtering needs at least 2 clients");
        if (eval_start_round > server_rounds) throw ConfigError("eval_start_round exceeds server_rounds");
        if (eval_start_round < 1) throw ConfigError("eval_start_round must be at least 1");
        if (eval_sample_count < 1) throw ConfigError("eval_sample_count must be positive");
    }
    if (workers < 1) throw ConfigError("workers must be at least 1");
}

ClientState ClientState::create(std::size_t id, std::vector<std::size_t> indices, std::uint64_t global_seed) {
    ClientState c;
    c.id = id;
    c.data_indices = std::move(indices);
    c.rng = Rng(derive_seed(global_seed, {kClientStream, id}));
    return c;
}

std::vector<double> train_denoiser(TensorMap& params, const DenoiserConfig& model_config, const Dataset& data,
                                   std::span<const std::size_t> indices, int epochs, std::size_t batch_size,
                                   const NoiseSchedule& schedule, OptimizerKind optimizer, double learning_rate,
                                   AdamState& adam, Rng& rng) {
    std::vector<std::size_t> order(indices.begin(), indices.end());
    const std::size_t batch = batch_size == 0 ? order.size() : batch_size;
    adam.learning_rate = learning_rate;
    std::vector<double> losses;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t first = 0; first < order.size(); first += batch) {
            const std::size_t m = std::min(batch, order.size() - first);
            const Tensor x0 = data.images_at(std::span<const std::size_t>(order.data() + first, m));
            const TrainingDraw draw = draw_training_noise(rng, x0.shape(), schedule.T);
            Graph g = training_loss_graph<float>(model_config, x0, draw.t, draw.noise, schedule);
            const double loss = g.forward(params)[0];
            if (!std::isfinite(loss)) throw NumericError("non-finite training loss");
            const TensorMap grads = g.backward();
            if (optimizer == OptimizerKind::adam) {
                adam_step(params, grads, adam);
            } else {
                sgd_step(params, grads, learning_rate);
            }
            total += loss;
            ++batches;
        }
        losses.push_back(total / static_cast<double>(batches));
    }
    return losses;
}

WarmupResult warmup_train(const DenoiserModel& initial, const Dataset& data, std::span<const std::size_t> shared_pool,
                          const FederationConfig& config) {
    if (shared_pool.empty()) throw ArgumentError("warmup needs a non-empty shared pool");
    WarmupResult out{initial, {}};
    if (config.warmup_epochs == 0) return out;
    TensorMap params = initial.params();
    AdamState adam;
    Rng rng(derive_seed(config.seed, {kWarmupStream}));
    out.epoch_losses = train_denoiser(params, initial.config(), data, shared_pool, config.warmup_epochs,
                                      config.batch_size, config.schedule, config.optimizer, config.learning_rate, adam,
                                      rng);
    out.model.set_params(params);
    return out;
}

DenoiserModel assemble_client_model(const DenoiserModel& global, const ClientState& client, bool personalization) {
    DenoiserModel m = global;
    if (personalization && !client.personal_params.empty()) m.set_params(client.personal_params);
    return m;
}

ClientUpdate local_train(ClientState& client, const DenoiserModel& global, const Dataset& data,
                         const FederationConfig& config) {
    ClientUpdate u;
    u.client_id = client.id;
    if (client.data_indices.empty()) {
        u.skipped = true;
        return u;
    }
    TensorMap params = assemble_client_model(global, client, config.personalization).params();
    try {
        const auto losses = train_denoiser(params, global.config(), data, client.data_indices, config.local_epochs,
                                           config.batch_size, config.schedule, config.optimizer,
                                           config.learning_rate, client.optimizer_state, client.rng);
        u.train_loss = losses.back();
    } catch (const NumericError&) {
        u.faulted = true;
        u.train_loss = std::numeric_limits<double>::quiet_NaN();
        return u;
    }
    u.sample_count = client.data_indices.size();
    if (config.personalization) {
        const auto personal = global.personal_names();
        client.personal_params.clear();
        for (auto& [name, value] : params) {
            if (personal.contains(name)) {
                client.personal_params.emplace(name, std::move(value));
            } else {
                u.base_params.emplace(name, std::move(value));
            }
        }
    } else {
        u.base_params = std::move(params);
    }
    return u;
}

TensorMap fedavg(const std::vector<ClientUpdate>& updates) {
    if (updates.empty()) throw ArgumentError("fedavg needs at least one update");
    std::vector<const ClientUpdate*> order;
    for (const auto& u : updates) order.push_back(&u);
    std::stable_sort(order.begin(), order.end(),
                     [](const ClientUpdate* a, const ClientUpdate* b) { return a->client_id < b->client_id; });
    const TensorMap& first = order.front()->base_params;
    for (const ClientUpdate* u : order) {
        for (const auto& [name, value] : first) {
            auto it = u->base_params.find(name);
            if (it == u->base_params.end()) {
                throw AggregationError("update from client " + std::to_string(u->client_id) + " lacks '" + name + "'");
            }
            if (it->second.shape() != value.shape()) {
                throw AggregationError("update from client " + std::to_string(u->client_id) + " has shape " +
                                       shape_string(it->second.shape()) + " for '" + name + "'");
            }
        }
        for (const auto& [name, value] : u->base_params) {
            if (!first.contains(name)) {
                throw AggregationError("update from client " + std::to_string(u->client_id) + " has extra '" + name +
                                       "'");
            }
        }
    }
    double total = 0.0;
    for (const ClientUpdate* u : order) total += static_cast<double>(u->sample_count);
    if (total == 0.0) throw ArgumentError("fedavg total sample count is zero");

    TensorMap out;
    for (const auto& [name, value] : first) {
        std::vector<double> acc(value.size(), 0.0);
        for (const ClientUpdate* u : order) {
            const double w = static_cast<double>(u->sample_count);
            const Tensor& t = u->base_params.at(name);
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * t[i];
        }
        Tensor avg(value.shape());
        for (std::size_t i = 0; i < acc.size(); ++i) avg[i] = static_cast<float>(acc[i] / total);
        out.emplace(name, std::move(avg));
    }
    return out;
}

MetricsContext make_metrics_context(const EvalClassifier& classifier, const Dataset& reference, FeatureSpace space,
                                    std::size_t k) {
    MetricsContext ctx;
    ctx.k = k;
    if (space == FeatureSpace::classifier) {
        ctx.featurize = [classifier](const Tensor& images) { return classifier.features(images); };
    } else {
        ctx.featurize = [](const Tensor& images) { return Matrix::from_tensor(images); };
    }
    ctx.reference_features = ctx.featurize(reference.images);
    return ctx;
}

PrecisionRecall evaluate_client(const ClientState& client, const DenoiserModel& model, const MetricsContext& context,
                                const FederationConfig& config, int round) {
    if (!context.featurize || context.reference_features.rows == 0) {
        throw ConfigError("metrics context has no reference features");
    }
    const auto seed = derive_seed(config.seed, {kEvalStream, static_cast<std::uint64_t>(round), client.id});
    const Tensor samples = generate(model, config.schedule, config.eval_sample_count, seed);
    return knn_precision_recall(context.reference_features, context.featurize(samples), context.k);
}

std::string RunLog::to_csv() const {
    std::string out = "round,client_id,status,samples,train_loss,precision,recall,bytes_up,bytes_down,wall_ms\n";
    auto num = [](double v, const char* fmt) {
        if (std::isnan(v)) return std::string();
        char buf[64];
        std::snprintf(buf, sizeof buf, fmt, v);
        return std::string(buf);
    };
    for (const auto& r : rows) {
        out += std::to_string(r.round) + "," + std::to_string(r.client_id) + "," + r.status + "," +
               std::to_string(r.samples) + "," + num(r.train_loss, "%.9g") + "," + num(r.precision, "%.6f") + "," +
               num(r.recall, "%.6f") + "," + std::to_string(r.bytes_up) + "," + std::to_string(r.bytes_down) + "," +
               std::to_string(r.wall_ms) + "\n";
    }
    return out;
}

namespace {

std::uint64_t payload_bytes(const TensorMap& params) {
    std::uint64_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return 4 * n;
}

}  // namespace

FederationResult run_federation(const DenoiserModel& initial, const std::vector<std::vector<std::size_t>>& client_data,
                                const FederationConfig& config, const Dataset& data, const MetricsContext* metrics,
                                const FederationHooks& hooks) {
    config.validate();
    if (client_data.size() != config.client_count) {
        throw ConfigError("plan has " + std::to_string(client_data.size()) + " clients, config expects " +
                          std::to_string(config.client_count));
    }
    const std::size_t k = config.client_count;
    FilterConfig fc = config.filter;
    fc.eval_start_round = config.eval_start_round;
    FederationResult res{initial, {}, {}, FilterState::initial(k, fc)};
    for (std::size_t i = 0; i < k; ++i) res.clients.push_back(ClientState::create(i, client_data[i], config.seed));

    const std::uint64_t full_bytes = 4 * initial.scalar_count();
    std::uint64_t base_bytes = 0;
    {
        const auto base = initial.base_names();
        for (const auto& p : initial.parameters()) {
            if (base.contains(p.name)) base_bytes += 4 * p.value.size();
        }
    }

    for (int round = 1; round <= config.server_rounds; ++round) {
        std::vector<std::size_t> connected;
        for (std::size_t i = 0; i < k; ++i) {
            if (res.filter.status[i] != ClientStatus::disconnected) connected.push_back(i);
        }
        std::vector<ClientUpdate> updates(k);
        std::vector<std::uint64_t> wall(k, 0), down(k, 0);
        for (std::size_t i : connected) {
            down[i] = config.personalization && !res.clients[i].personal_params.empty() ? base_bytes : full_bytes;
        }
        parallel_for(connected.size(), config.workers, [&](std::size_t j) {
            const std::size_t i = connected[j];
            const auto start = std::chrono::steady_clock::now();
            updates[i] = local_train(res.clients[i], res.model, data, config);
            if (config.record_wall_time) {
                wall[i] = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                                         std::chrono::steady_clock::now() - start)
                                                         .count());
            }
        });

        std::vector<std::optional<PrecisionRecall>> scores(k);
        std::set<std::size_t> disconnected_now;
        if (config.threshold_filtering && round >= config.eval_start_round) {
            if (!hooks.evaluate && metrics == nullptr) throw ConfigError("filtering needs a metrics context");
            std::vector<std::size_t> judged;
            std::set<std::size_t> excused;
            for (std::size_t i : connected) {
                if (updates[i].faulted || updates[i].skipped) {
                    excused.insert(i);
                } else {
                    judged.push_back(i);
                }
            }
            parallel_for(judged.size(), config.workers, [&](std::size_t j) {
                const std::size_t i = judged[j];
                DenoiserModel m = res.model;
                m.set_params(updates[i].base_params);
                if (config.personalization) m.set_params(res.clients[i].personal_params);
                scores[i] = hooks.evaluate ? hooks.evaluate(res.clients[i], m, round)
                                           : evaluate_client(res.clients[i], m, *metrics, config, round);
            });
            std::map<std::size_t, PrecisionRecall> round_metrics;
            for (std::size_t i : judged) round_metrics.emplace(i, *scores[i]);
            auto [next, outcome] = filter_step(res.filter, round_metrics, round, excused);
            res.filter = std::move(next);
            disconnected_now.insert(outcome.disconnected.begin(), outcome.disconnected.end());
        }

        std::vector<ClientUpdate> accepted;
        for (std::size_t i : connected) {
            if (!updates[i].faulted && !updates[i].skipped && !disconnected_now.contains(i)) {
                accepted.push_back(updates[i]);
            }
        }
        if (accepted.empty()) {
            throw RunError("round " + std::to_string(round) + ": no client update left to aggregate");
        }
        if (hooks.on_updates) hooks.on_updates(round, accepted, res.clients);
        res.model.set_params(fedavg(accepted));
        if (hooks.on_round) hooks.on_round(round, res.model, res.clients);

        for (std::size_t i = 0; i < k; ++i) {
            RunLogRow row;
            row.round = round;
            row.client_id = i;
            const bool trained = std::find(connected.begin(), connected.end(), i) != connected.end();
            if (!trained) {
                row.status = "disconnected";
            } else {
                const ClientUpdate& u = updates[i];
                row.status = u.faulted ? "faulted" : u.skipped ? "skipped" : status_name(res.filter.status[i]);
                row.samples = u.sample_count;
                row.train_loss = u.faulted || u.skipped ? std::numeric_limits<double>::quiet_NaN() : u.train_loss;
                if (scores[i]) {
                    row.precision = scores[i]->precision;
                    row.recall = scores[i]->recall;
                }
                row.bytes_down = down[i];
                row.bytes_up = u.faulted || u.skipped ? 0 : payload_bytes(u.base_params);
                row.wall_ms = wall[i];
            }
            res.log.rows.push_back(std::move(row));
        }
    }
    return res;
}

}  // namespace phoenix
