#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "phoenix/federation.hpp"

using namespace phoenix;

namespace {

ClientUpdate scalar_update(std::size_t id, std::size_t count, float value) {
    ClientUpdate u;
    u.client_id = id;
    u.sample_count = count;
    u.base_params.emplace("w", Tensor({1}, value));
    return u;
}

FederationConfig small_config(std::uint64_t seed) {
    FederationConfig cfg;
    cfg.server_rounds = 2;
    cfg.local_epochs = 1;
    cfg.batch_size = 8;
    cfg.learning_rate = 2e-3;
    cfg.schedule = make_cosine_schedule(50);
    cfg.eval_sample_count = 8;
    cfg.eval_start_round = 1;
    cfg.seed = seed;
    return cfg;
}

std::vector<std::vector<std::size_t>> even_split(std::size_t n, std::size_t k) {
    std::vector<std::vector<std::size_t>> parts(k);
    for (std::size_t i = 0; i < n; ++i) parts[i % k].push_back(i);
    return parts;
}

bool same_params(const TensorMap& a, const TensorMap& b) {
    if (a.size() != b.size()) return false;
    for (const auto& [name, t] : a) {
        auto it = b.find(name);
        if (it == b.end() || !bitwise_equal(t, it->second)) return false;
    }
    return true;
}

// Mean training loss over fixed draws, for before/after comparisons.
double fixed_loss(const DenoiserModel& model, const Dataset& data, const std::vector<std::size_t>& pool,
                  const NoiseSchedule& schedule, std::uint64_t seed) {
    Rng rng(seed);
    const Tensor x0 = data.images_at(pool);
    double total = 0.0;
    for (int rep = 0; rep < 4; ++rep) {
        const TrainingDraw draw = draw_training_noise(rng, x0.shape(), schedule.T);
        Graph g = training_loss_graph<float>(model.config(), x0, draw.t, draw.noise, schedule);
        total += g.forward(model.params())[0];
    }
    return total / 4.0;
}

}  // namespace

TEST_CASE("fedavg weighted mean") {
    const TensorMap one = fedavg({scalar_update(0, 7, 1.25f)});
    CHECK(one.at("w")[0] == 1.25f);
    CHECK(fedavg({scalar_update(0, 5, 0.0f), scalar_update(1, 5, 2.0f)}).at("w")[0] == 1.0f);
    CHECK(fedavg({scalar_update(0, 1, 0.0f), scalar_update(1, 3, 4.0f)}).at("w")[0] == 3.0f);

    std::vector<ClientUpdate> ups{scalar_update(0, 3, 0.3f), scalar_update(1, 5, -1.7f), scalar_update(2, 2, 4.1f)};
    const float base = fedavg(ups).at("w")[0];
    std::vector<ClientUpdate> rev{ups[2], ups[0], ups[1]};
    CHECK(fedavg(rev).at("w")[0] == base);
    for (auto& u : ups) u.sample_count *= 7;
    CHECK(fedavg(ups).at("w")[0] == base);

    ClientUpdate extra = scalar_update(3, 1, 0.0f);
    extra.base_params.emplace("v", Tensor({1}, 0.0f));
    CHECK_THROWS_AS(fedavg({scalar_update(0, 1, 0.0f), extra}), AggregationError);
    ClientUpdate reshaped = scalar_update(1, 1, 0.0f);
    reshaped.base_params["w"] = Tensor({2}, 0.0f);
    CHECK_THROWS_AS(fedavg({scalar_update(0, 1, 0.0f), reshaped}), AggregationError);
    CHECK_THROWS_AS(fedavg({scalar_update(0, 0, 1.0f), scalar_update(1, 0, 2.0f)}), ArgumentError);
    CHECK_THROWS_AS(fedavg({}), ArgumentError);
}

TEST_CASE("federated SGD step equals the centralized weighted step") {
    const auto two = testing::fedavg_sgd_oracle({6, 10}, 3);
    CHECK(two.compared == 83617);
    CHECK(two.max_abs_diff <= 1e-6);
    const auto five = testing::fedavg_sgd_oracle({3, 4, 5, 6, 7}, 4);
    CHECK(five.max_abs_diff <= 1e-6);
}

TEST_CASE("local training name sets") {
    const Dataset data = make_toy_dataset(4, 4, 8, 1);
    const DenoiserModel global = build_unet(DenoiserConfig::desk(), 1);
    FederationConfig cfg = small_config(1);

    ClientState plain = ClientState::create(0, {0, 1, 2, 3, 4, 5}, 1);
    const ClientUpdate full = local_train(plain, global, data, cfg);
    CHECK(full.sample_count == 6);
    CHECK(full.base_params.size() == global.parameters().size());
    CHECK(plain.personal_params.empty());

    cfg.personalization = true;
    ClientState pers = ClientState::create(0, {0, 1, 2, 3, 4, 5}, 1);
    const ClientUpdate split = local_train(pers, global, data, cfg);
    std::set<std::string> sent, kept;
    for (const auto& [name, t] : split.base_params) sent.insert(name);
    for (const auto& [name, t] : pers.personal_params) kept.insert(name);
    CHECK(sent == global.base_names());
    CHECK(kept == global.personal_names());
    // Same stream, same data: the two runs trained identical parameters.
    for (const auto& [name, t] : split.base_params) CHECK(bitwise_equal(t, full.base_params.at(name)));
    for (const auto& [name, t] : pers.personal_params) CHECK(bitwise_equal(t, full.base_params.at(name)));

    ClientState empty = ClientState::create(1, {}, 1);
    const ClientUpdate none = local_train(empty, global, data, cfg);
    CHECK(none.skipped);
    CHECK(none.base_params.empty());
}

TEST_CASE("one full-batch Adam step matches the closed form") {
    // The first bias-corrected step is -lr * g / (|g| + eps) per scalar.
    const Dataset data = make_toy_dataset(4, 3, 8, 2);
    const DenoiserModel global = build_unet(DenoiserConfig::desk(), 2);
    FederationConfig cfg = small_config(2);
    cfg.batch_size = 0;
    cfg.learning_rate = 1e-3;
    std::vector<std::size_t> idx{0, 2, 4, 6, 8, 10};
    ClientState client = ClientState::create(2, idx, 2);
    const ClientUpdate u = local_train(client, global, data, cfg);

    Rng rng(derive_seed(2, {kClientStream, 2}));
    std::vector<std::size_t> order = idx;
    rng.shuffle(order);
    const Tensor x0 = data.images_at(order);
    const TrainingDraw draw = draw_training_noise(rng, x0.shape(), cfg.schedule.T);
    Graph g = training_loss_graph<float>(global.config(), x0, draw.t, draw.noise, cfg.schedule);
    g.forward(global.params());
    const TensorMap grads = g.backward();
    double worst = 0.0;
    for (const auto& [name, w] : global.params()) {
        const Tensor& gr = grads.at(name);
        const Tensor& got = u.base_params.at(name);
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = gr[j];
            const double expected = w[j] - 1e-3 * gj / (std::abs(gj) + 1e-8);
            worst = std::max(worst, std::abs(got[j] - expected));
        }
    }
    CHECK(worst <= 1e-6);
    CHECK(client.optimizer_state.step_count == 1);
}

TEST_CASE("warmup training") {
    const Dataset data = make_toy_dataset(4, 16, 8, 3);
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < data.size(); i += 2) pool.push_back(i);
    const DenoiserModel initial = build_unet(DenoiserConfig::desk(), 3);
    FederationConfig cfg = small_config(3);
    cfg.warmup_epochs = 0;
    CHECK(same_params(warmup_train(initial, data, pool, cfg).model.params(), initial.params()));

    cfg.warmup_epochs = 3;
    for (std::uint64_t seed : {1, 2, 3}) {
        cfg.seed = seed;
        const DenoiserModel start = build_unet(DenoiserConfig::desk(), seed);
        const WarmupResult w = warmup_train(start, data, pool, cfg);
        CHECK(w.epoch_losses.size() == 3);
        const double before = fixed_loss(start, data, pool, cfg.schedule, 99);
        const double after = fixed_loss(w.model, data, pool, cfg.schedule, 99);
        CAPTURE(seed);
        CHECK(after <= before);
        if (seed == 1) {
            CHECK(same_params(warmup_train(start, data, pool, cfg).model.params(), w.model.params()));
        }
    }
    CHECK_THROWS_AS(warmup_train(initial, data, std::vector<std::size_t>{}, cfg), ArgumentError);
}

TEST_CASE("personal parameters stay on the clients") {
    const Dataset data = make_toy_dataset(4, 8, 8, 4);
    const DenoiserModel initial = build_unet(DenoiserConfig::desk(), 4);
    FederationConfig cfg = small_config(4);
    cfg.server_rounds = 3;
    cfg.personalization = true;
    const auto personal = initial.personal_names();
    std::vector<TensorMap> snapshot;
    int rounds_seen = 0;
    bool leaked = false, changed = false, distinct = true;
    FederationHooks hooks;
    hooks.on_updates = [&](int, const std::vector<ClientUpdate>& ups, const std::vector<ClientState>& clients) {
        for (const auto& u : ups) {
            for (const auto& [name, t] : u.base_params) leaked = leaked || personal.contains(name);
        }
        snapshot.clear();
        for (const auto& c : clients) snapshot.push_back(c.personal_params);
    };
    hooks.on_round = [&](int, const DenoiserModel&, const std::vector<ClientState>& clients) {
        ++rounds_seen;
        for (std::size_t i = 0; i < clients.size(); ++i) {
            changed = changed || !same_params(clients[i].personal_params, snapshot[i]);
            for (std::size_t j = 0; j < i; ++j) {
                distinct = distinct && !same_params(clients[i].personal_params, clients[j].personal_params);
            }
        }
    };
    const FederationResult res = run_federation(initial, even_split(data.size(), 4), cfg, data, nullptr, hooks);
    CHECK(rounds_seen == 3);
    CHECK_FALSE(leaked);
    CHECK_FALSE(changed);
    CHECK(distinct);
    // The global copy of the personal block never moves.
    for (const auto& name : personal) CHECK(bitwise_equal(res.model.param(name), initial.param(name)));
    for (const auto& c : res.clients) {
        const DenoiserModel m = assemble_client_model(res.model, c, true);
        for (const auto& name : personal) CHECK(bitwise_equal(m.param(name), c.personal_params.at(name)));
    }
}

TEST_CASE("a single client federation equals its local model") {
    const Dataset data = make_toy_dataset(4, 4, 8, 5);
    const DenoiserModel initial = build_unet(DenoiserConfig::desk(), 5);
    FederationConfig cfg = small_config(5);
    cfg.client_count = 1;
    cfg.server_rounds = 1;
    std::vector<std::size_t> all(data.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    const FederationResult res = run_federation(initial, {all}, cfg, data);
    ClientState c = ClientState::create(0, all, 5);
    const ClientUpdate u = local_train(c, initial, data, cfg);
    CHECK(same_params(res.model.params(), u.base_params));
}

TEST_CASE("filtering through an injected evaluator") {
    const Dataset data = make_toy_dataset(4, 4, 8, 6);
    const DenoiserModel initial = build_unet(DenoiserConfig::desk(), 6);
    FederationConfig cfg = small_config(6);
    cfg.server_rounds = 3;
    cfg.threshold_filtering = true;
    cfg.filter.policy = DropPolicy::lowest_precision;
    std::vector<std::vector<std::size_t>> aggregated;
    FederationHooks hooks;
    hooks.evaluate = [](const ClientState& c, const DenoiserModel&, int) {
        return PrecisionRecall{c.id == 2 ? 0.1 : 0.9, 0.5};
    };
    hooks.on_updates = [&](int, const std::vector<ClientUpdate>& ups, const std::vector<ClientState>&) {
        std::vector<std::size_t> ids;
        for (const auto& u : ups) ids.push_back(u.client_id);
        aggregated.push_back(ids);
    };
    const FederationResult res = run_federation(initial, even_split(data.size(), 4), cfg, data, nullptr, hooks);
    REQUIRE(aggregated.size() == 3);
    CHECK(aggregated[0] == std::vector<std::size_t>{0, 1, 2, 3});
    CHECK(aggregated[1] == std::vector<std::size_t>{0, 1, 3});
    CHECK(aggregated[2] == std::vector<std::size_t>{0, 1, 3});
    CHECK(res.filter.status[2] == ClientStatus::disconnected);
    REQUIRE(res.log.rows.size() == 12);
    CHECK(res.log.rows[2].status == "warned");
    CHECK(res.log.rows[2].precision == doctest::Approx(0.1));
    CHECK(res.log.rows[6].status == "disconnected");
    CHECK(res.log.rows[10].status == "disconnected");
    CHECK(res.log.rows[10].samples == 0);
    CHECK(res.log.rows[10].bytes_up == 0);
    CHECK(std::isnan(res.log.rows[10].train_loss));

    cfg.threshold_filtering = true;
    CHECK_THROWS_AS(run_federation(initial, even_split(data.size(), 4), cfg, data), ConfigError);
}

TEST_CASE("faulted and skipped clients") {
    Dataset data = make_toy_dataset(4, 4, 8, 7);
    const DenoiserModel initial = build_unet(DenoiserConfig::desk(), 7);
    FederationConfig cfg = small_config(7);
    cfg.client_count = 3;
    cfg.server_rounds = 1;
    // Client 1 owns the poisoned images.
    for (std::size_t p = 0; p < 64; ++p) data.images[5 * 64 + p] = std::numeric_limits<float>::quiet_NaN();
    std::vector<std::vector<std::size_t>> parts{{0, 1, 2, 3}, {4, 5, 6, 7}, {}};
    const FederationResult res = run_federation(initial, parts, cfg, data);
    REQUIRE(res.log.rows.size() == 3);
    CHECK(res.log.rows[0].status == "active");
    CHECK(res.log.rows[1].status == "faulted");
    CHECK(res.log.rows[2].status == "skipped");
    ClientState c0 = ClientState::create(0, parts[0], 7);
    CHECK(same_params(res.model.params(), local_train(c0, initial, data, cfg).base_params));

    std::vector<std::vector<std::size_t>> doomed{{4, 5}, {5, 6}, {}};
    CHECK_THROWS_AS(run_federation(initial, doomed, cfg, data), RunError);
    CHECK_THROWS_AS(run_federation(initial, {{0}, {1}}, cfg, data), ConfigError);
}

TEST_CASE("federation replays deterministically across worker counts") {
    const Dataset data = make_toy_dataset(4, 4, 8, 8);
    const DenoiserModel initial = build_unet(DenoiserConfig::desk(), 8);
    FederationConfig cfg = small_config(8);
    cfg.record_wall_time = false;
    cfg.personalization = true;
    cfg.threshold_filtering = true;
    cfg.eval_start_round = 2;
    const EvalClassifier clf = train_eval_classifier(data, {1, 16, 2e-3}, 8);
    const MetricsContext ctx = make_metrics_context(clf, data, FeatureSpace::classifier);
    const auto parts = even_split(data.size(), 4);
    const FederationResult a = run_federation(initial, parts, cfg, data, &ctx);
    cfg.workers = 4;
    const FederationResult b = run_federation(initial, parts, cfg, data, &ctx);
    CHECK(a.log.to_csv() == b.log.to_csv());
    CHECK(same_params(a.model.params(), b.model.params()));
    for (const auto& row : a.log.rows) CHECK(row.wall_ms == 0);
    CHECK_FALSE(std::isnan(a.log.rows[4].precision));
}

TEST_CASE("client evaluation") {
    const Dataset data = make_toy_dataset(4, 4, 8, 9);
    const DenoiserModel model = build_unet(DenoiserConfig::desk(), 9);
    FederationConfig cfg = small_config(9);
    const ClientState client = ClientState::create(0, {0}, 9);
    Rng rng(1);
    const Matrix ref = testing::random_points(rng, 8, 3);

    MetricsContext same;
    same.reference_features = ref;
    same.featurize = [ref](const Tensor&) { return ref; };
    const PrecisionRecall s = evaluate_client(client, model, same, cfg, 1);
    CHECK(s.precision == 1.0);
    CHECK(s.recall == 1.0);

    MetricsContext far = same;
    far.featurize = [ref](const Tensor&) {
        Matrix m = ref;
        for (double& v : m.data) v += 100.0;
        return m;
    };
    const PrecisionRecall f = evaluate_client(client, model, far, cfg, 1);
    CHECK(f.precision == 0.0);
    CHECK(f.recall == 0.0);

    MetricsContext pixels = make_metrics_context(EvalClassifier{}, data, FeatureSpace::pixels);
    const Tensor samples = generate(model, cfg.schedule, cfg.eval_sample_count,
                                    derive_seed(cfg.seed, {kEvalStream, 1, 0}));
    const PrecisionRecall want =
        testing::brute_force_precision_recall(pixels.reference_features, Matrix::from_tensor(samples), 3);
    const PrecisionRecall got = evaluate_client(client, model, pixels, cfg, 1);
    CHECK(got.precision == doctest::Approx(want.precision).epsilon(1e-12));
    CHECK(got.recall == doctest::Approx(want.recall).epsilon(1e-12));

    CHECK_THROWS_AS(evaluate_client(client, model, MetricsContext{}, cfg, 1), ConfigError);
}

TEST_CASE("run log CSV") {
    RunLog log;
    RunLogRow a;
    a.round = 1;
    a.client_id = 2;
    a.status = "active";
    a.samples = 10;
    a.train_loss = 0.5;
    a.bytes_up = 40;
    a.bytes_down = 44;
    log.rows.push_back(a);
    RunLogRow b = a;
    b.status = "warned";
    b.precision = 0.25;
    b.recall = 1.0;
    b.wall_ms = 7;
    log.rows.push_back(b);
    CHECK(log.to_csv() ==
          "round,client_id,status,samples,train_loss,precision,recall,bytes_up,bytes_down,wall_ms\n"
          "1,2,active,10,0.5,,,40,44,0\n"
          "1,2,warned,10,0.5,0.250000,1.000000,40,44,7\n");
}

TEST_CASE("federation config validation") {
    FederationConfig cfg = small_config(1);
    CHECK_NOTHROW(cfg.validate());
    auto broken = [&](auto mutate) {
        FederationConfig c = cfg;
        mutate(c);
        return c;
    };
    CHECK_THROWS_AS(broken([](FederationConfig& c) { c.client_count = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](FederationConfig& c) { c.local_epochs = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](FederationConfig& c) { c.learning_rate = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](FederationConfig& c) { c.workers = 0; }).validate(), ConfigError);
    CHECK_THROWS_AS(broken([](FederationConfig& c) {
                        c.threshold_filtering = true;
                        c.eval_start_round = 3;
                    }).validate(),
                    ConfigError);
}
