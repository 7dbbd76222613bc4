#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "doctest.h"
#include "phoenix/cli.hpp"
#include "phoenix/run_config.hpp"

using namespace phoenix;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("phoenix_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void spill(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

// Seconds-scale pipeline: tiny toy data, T = 10, one round.
nlohmann::json tiny_config(const fs::path& out, const std::string& mode = "label_skew") {
    nlohmann::json j;
    j["dataset"] = {{"per_class", 8}, {"test_per_class", 8}};
    j["partition"] = {{"mode", mode}};
    j["diffusion"] = {{"T", 10}};
    j["federation"] = {{"client_count", 2},  {"server_rounds", 1}, {"local_epochs", 1},
                       {"batch_size", 8},    {"warmup_epochs", 1}, {"eval_start_round", 1},
                       {"record_wall_time", false}};
    j["metrics"] = {{"final_sample_count", 8}, {"classifier_epochs", 1}, {"is_splits", 2}};
    j["output_dir"] = out.string();
    j["run_id"] = "tiny";
    return j;
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j, const std::string& name = "config.json") {
    const fs::path p = dir / name;
    spill(p, j.dump(2));
    return p;
}

int cli(std::vector<std::string> args) {
    args.insert(args.begin(), "phoenix");
    return run_cli(args);
}

}  // namespace

TEST_CASE("exit codes") {
    const fs::path dir = scratch_dir("exit");
    CHECK(cli({}) == kExitInput);
    CHECK(cli({"--help"}) == kExitOk);
    CHECK(cli({"frobnicate"}) == kExitInput);
    CHECK(cli({"--config", (dir / "missing.json").string(), "partition"}) == kExitInput);

    nlohmann::json bad = tiny_config(dir / "out");
    bad["federation"]["learning_rate"] = -1.0;
    CHECK(cli({"--config", write_config(dir, bad).string(), "partition"}) == kExitInput);
    CHECK_FALSE(fs::exists(dir / "out"));
    bad = tiny_config(dir / "out");
    bad["colour"] = "blue";
    CHECK(cli({"--config", write_config(dir, bad).string(), "partition"}) == kExitInput);

    const fs::path cfg = write_config(dir, tiny_config(dir / "out"));
    CHECK(cli({"--config", cfg.string(), "train"}) == kExitInput);
    CHECK(cli({"--config", cfg.string(), "warmup"}) == kExitInput);

    // A plan whose clients own nothing leaves nothing to aggregate.
    fs::create_directories(dir / "out");
    PlanFile empty;
    empty.mode = "label_skew";
    empty.clients = {{}, {}};
    spill(dir / "out" / "plan.json", plan_to_json(empty));
    CHECK(cli({"--config", cfg.string(), "train"}) == kExitRuntime);

    spill(dir / "broken.phxc", "PHXC garbage");
    CHECK(cli({"--config", cfg.string(), "generate", "--checkpoint", (dir / "broken.phxc").string()}) == kExitInput);
}

TEST_CASE("partition command") {
    const fs::path dir = scratch_dir("partition");
    const fs::path cfg = write_config(dir, tiny_config(dir / "out", "iid"));
    REQUIRE(cli({"--config", cfg.string(), "partition"}) == kExitOk);
    const std::string first = slurp(dir / "out" / "plan.json");
    const PlanFile plan = plan_from_json(first);
    CHECK(plan.mode == "iid");
    REQUIRE(plan.clients.size() == 2);
    CHECK(plan.clients[0].size() == 16);
    CHECK(plan.clients[1].size() == 16);
    REQUIRE(cli({"--config", cfg.string(), "partition"}) == kExitOk);
    CHECK(slurp(dir / "out" / "plan.json") == first);
    const std::string counts = slurp(dir / "out" / "plan_class_counts.csv");
    CHECK(counts.rfind("client,class,count\n", 0) == 0);

    nlohmann::json four = tiny_config(dir / "out4", "iid");
    four["federation"]["client_count"] = 4;
    REQUIRE(cli({"--config", write_config(dir, four, "four.json").string(), "partition"}) == kExitOk);
    const PlanFile p4 = plan_from_json(slurp(dir / "out4" / "plan.json"));
    REQUIRE(p4.clients.size() == 4);
    for (const auto& c : p4.clients) CHECK(c.size() == 8);
}

TEST_CASE("warmup command") {
    const fs::path dir = scratch_dir("warmup");
    nlohmann::json j = tiny_config(dir / "out", "data_sharing");
    j["federation"]["warmup_epochs"] = 0;
    const fs::path cfg = write_config(dir, j);
    REQUIRE(cli({"--config", cfg.string(), "partition"}) == kExitOk);
    REQUIRE(cli({"--config", cfg.string(), "warmup"}) == kExitOk);
    const RunConfig rc = RunConfig::from_json(j.dump());
    const DenoiserModel fresh = build_unet(rc.model, rc.seed);
    const auto entries = load_checkpoint(dir / "out" / "runs" / "tiny" / "round_0.phxc");
    const DenoiserModel loaded = DenoiserModel::from_checkpoint(rc.model, entries);
    for (const auto& [name, t] : fresh.params()) CHECK(bitwise_equal(t, loaded.param(name)));
    CHECK(slurp(dir / "out" / "runs" / "tiny" / "warmup_loss.csv") == "epoch,loss\n");

    j["federation"]["warmup_epochs"] = 2;
    const fs::path cfg2 = write_config(dir, j);
    REQUIRE(cli({"--config", cfg2.string(), "warmup"}) == kExitOk);
    const std::string losses = slurp(dir / "out" / "runs" / "tiny" / "warmup_loss.csv");
    CHECK(std::count(losses.begin(), losses.end(), '\n') == 3);
}

TEST_CASE("train, generate, evaluate and report") {
    const fs::path dir = scratch_dir("pipeline");
    nlohmann::json j = tiny_config(dir / "out");
    j["federation"]["client_count"] = 1;
    j["partition"]["mode"] = "iid";
    const fs::path cfg = write_config(dir, j);
    REQUIRE(cli({"--config", cfg.string(), "partition"}) == kExitOk);
    REQUIRE(cli({"--config", cfg.string(), "train"}) == kExitOk);
    const fs::path run = dir / "out" / "runs" / "tiny";
    const std::string log = slurp(run / "run_log.csv");
    CHECK(std::count(log.begin(), log.end(), '\n') == 2);
    CHECK(fs::exists(run / "round_1.phxc"));
    CHECK(fs::exists(run / "config.json"));
    const auto summary = nlohmann::json::parse(slurp(run / "summary.json"));
    CHECK(summary.at("strategy") == "baseline_iid");
    CHECK(summary.at("metrics").at("n_generated") == 8);

    REQUIRE(cli({"--config", cfg.string(), "generate", "--checkpoint", (run / "round_1.phxc").string(), "--count",
                 "10", "--name", "gen"}) == kExitOk);
    std::size_t images = 0;
    for (const auto& e : fs::directory_iterator(dir / "out" / "gen")) images += e.path().extension() == ".pgm";
    CHECK(images == 10);
    const Tensor batch = load_tensor(dir / "out" / "gen" / "samples.phxt");
    CHECK(batch.shape() == Shape{10, 1, 8, 8});
    const RunConfig rc = RunConfig::from_json(j.dump());
    const DenoiserModel model = DenoiserModel::from_checkpoint(rc.model, load_checkpoint(run / "round_1.phxc"));
    CHECK(bitwise_equal(batch, generate(model, rc.schedule(), 10, rc.seed)));
    const std::string first_image = slurp(dir / "out" / "gen" / "sample_0003.pgm");
    REQUIRE(cli({"--config", cfg.string(), "generate", "--checkpoint", (run / "round_1.phxc").string(), "--count",
                 "10", "--name", "gen"}) == kExitOk);
    CHECK(slurp(dir / "out" / "gen" / "sample_0003.pgm") == first_image);

    REQUIRE(cli({"--config", cfg.string(), "evaluate", "--samples", (dir / "out" / "gen" / "samples.phxt").string(),
                 "--name", "gen_metrics"}) == kExitOk);
    const EvalClassifier clf = EvalClassifier::from_checkpoint(load_checkpoint(dir / "out" / "classifier.phxc"));
    EvaluationOptions eo;
    eo.is_splits = 2;
    const MetricsReport direct = evaluate_samples(clf, batch, load_datasets(rc).test, eo);
    CHECK(slurp(dir / "out" / "gen_metrics.json") == report_to_json(direct));
    CHECK(slurp(dir / "out" / "gen_metrics_histogram.csv") == sorted_histogram_csv(direct));

    // Samples of the wrong size are an input error.
    save_tensor(dir / "odd.phxt", Tensor({4, 1, 4, 4}));
    CHECK(cli({"--config", cfg.string(), "evaluate", "--samples", (dir / "odd.phxt").string()}) == kExitInput);

    // Report: a second run id, plus a directory with no summary.
    fs::create_directories(dir / "out" / "runs" / "alpha");
    auto other = summary;
    other["run_id"] = "alpha";
    spill(dir / "out" / "runs" / "alpha" / "summary.json", other.dump());
    fs::create_directories(dir / "empty");
    REQUIRE(cli({"--config", cfg.string(), "report", run.string(), (dir / "empty").string(),
                 (dir / "out" / "runs" / "alpha").string()}) == kExitOk);
    const std::string table = slurp(dir / "out" / "report.csv");
    std::istringstream rows(table);
    std::string header, r1, r2, extra;
    std::getline(rows, header);
    std::getline(rows, r1);
    std::getline(rows, r2);
    CHECK(header == "run_id,strategy,beta_pct,alpha_pct,drop_policy,fid,is_mean,is_std,precision,recall,tv_distance");
    CHECK(r1.rfind("alpha,baseline_iid,,,none,", 0) == 0);
    CHECK(r2.rfind("tiny,baseline_iid,,,none,", 0) == 0);
    CHECK_FALSE(std::getline(rows, extra));
}

TEST_CASE("environment and flag overrides") {
    const fs::path dir = scratch_dir("env");
    nlohmann::json j = tiny_config(dir / "from_config", "iid");
    const fs::path cfg = write_config(dir, j);
    ::setenv("PHOENIX_OUT", (dir / "from_env").string().c_str(), 1);
    ::setenv("PHOENIX_SEED", "77", 1);
    const int env_code = cli({"--config", cfg.string(), "partition"});
    const int flag_code = cli({"--config", cfg.string(), "--out", (dir / "from_flag").string(), "--seed", "77",
                               "partition"});
    ::setenv("PHOENIX_SEED", "not-a-number", 1);
    const int bad_code = cli({"--config", cfg.string(), "partition"});
    ::unsetenv("PHOENIX_OUT");
    ::unsetenv("PHOENIX_SEED");
    CHECK(env_code == kExitOk);
    CHECK(flag_code == kExitOk);
    CHECK(bad_code == kExitInput);
    CHECK_FALSE(fs::exists(dir / "from_config"));
    const PlanFile env_plan = plan_from_json(slurp(dir / "from_env" / "plan.json"));
    CHECK(env_plan.seed == 77);
    CHECK(slurp(dir / "from_flag" / "plan.json") == slurp(dir / "from_env" / "plan.json"));
}

TEST_CASE("shipped configs match the presets") {
    const fs::path root = PHOENIX_SOURCE_DIR;
    for (const char* name : {"desk", "paper"}) {
        CAPTURE(name);
        const RunConfig file = RunConfig::from_json(slurp(root / "configs" / (std::string(name) + ".json")));
        CHECK(file.to_json() == RunConfig::preset(name).to_json());
    }
    CHECK_NOTHROW(RunConfig::preset("desk").validate());
    CHECK_NOTHROW(RunConfig::preset("paper").validate());
    CHECK_THROWS_AS(RunConfig::preset("huge"), ConfigError);
    const RunConfig desk = RunConfig::preset("desk");
    CHECK(RunConfig::from_json(desk.to_json()).to_json() == desk.to_json());
    CHECK(desk.federation.client_count == 4);
    CHECK(desk.diffusion.T == 50);
    CHECK(desk.federation.local_epochs == 5);
    CHECK(desk.federation.server_rounds == 5);
    const RunConfig paper = RunConfig::preset("paper");
    CHECK(paper.federation.client_count == 10);
    CHECK(paper.diffusion.T == 1000);
    CHECK(paper.federation.local_epochs == 100);
    CHECK(paper.federation.server_rounds == 10);
}
