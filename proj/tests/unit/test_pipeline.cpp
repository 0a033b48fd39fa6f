#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "helpers.hpp"
#include "mixdistill/errors.hpp"
#include "mixdistill/pipeline.hpp"

using namespace mixdistill;
using namespace testing;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json tiny_config(const fs::path& out) {
  auto doc = nlohmann::json::parse(R"({
    "system": "vanderpol",
    "seed": 4,
    "experts": [
      {"label": "kappa_1", "type": "lqr", "Q": [[1, 0], [0, 1]], "R": [[1]], "gain_scale": 0.2},
      {"label": "kappa_2", "type": "linear", "gain": [[-1, -2]]}
    ],
    "mixing": {"epochs": 2, "episodes_per_epoch": 2, "actor_hidden": [8], "critic_hidden": [8]},
    "distill": {"dataset_size": 300, "epochs": 2, "hidden": [8]},
    "evaluate": {"n": 20},
    "verify": {"target_epsilon": 2.0, "max_partitions": 16, "reach_steps": 3,
               "reach_initial_box": [[-0.1, 0.1], [-0.1, 0.1]], "subgrid_cells": 8,
               "audit_trajectories": 20}
  })");
  doc["output_dir"] = out.string();
  return doc;
}

}  // namespace

TEST_CASE("config errors") {
  const fs::path dir = fs::temp_directory_path() / "mixdistill_cfg_test";
  fs::create_directories(dir);
  {
    std::ofstream(dir / "broken.json") << "{\n  \"system\": \"vanderpol\",\n  \"seed\": ,\n}";
  }
  try {
    load_config(dir / "broken.json");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"system": "vanderpol"})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(R"({"system": "moon", "seed": 1})")), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(
                      R"({"system": "vanderpol", "seed": 1, "mixing": {"weight_bounds": [0.5, 3]}})")),
                  ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json::parse(
                      R"({"system": "vanderpol", "seed": 1, "distill": {"p": 2}})")),
                  ConfigError);
  CHECK_THROWS_AS(stage_outputs(ExperimentConfig{}, "deploy"), ConfigError);
}

TEST_CASE("stage seeds are derived from the global seed and the stage name") {
  CHECK(stage_seed(1, "distill") == derive_seed(1, "distill"));
  CHECK(stage_seed(1, "distill") != stage_seed(1, "evaluate"));
  CHECK(stage_names().size() == 6);
}

TEST_CASE("report without evaluation output is a dependency error") {
  const fs::path out = fs::temp_directory_path() / "mixdistill_report_only";
  fs::remove_all(out);
  ExperimentConfig cfg = config_from_json(tiny_config(out));
  CHECK_THROWS_AS(run_stage(cfg, "report"), DependencyError);
  CHECK_THROWS_AS(run_stage(cfg, "distill"), DependencyError);
}

TEST_CASE("tiny pipeline runs end to end and is deterministic") {
  const fs::path a = fs::temp_directory_path() / "mixdistill_tiny_a";
  const fs::path b = fs::temp_directory_path() / "mixdistill_tiny_b";
  fs::remove_all(a);
  fs::remove_all(b);
  const auto ra = run_pipeline(config_from_json(tiny_config(a)));
  const auto rb = run_pipeline(config_from_json(tiny_config(b)));
  CHECK(ra.size() == 6);
  for (const char* f : {"eval/comparison.csv", "report/table1.csv", "report/table2.csv", "verify/summary.csv",
                        "mixing/training_log.csv", "distill/student_robust.json"}) {
    CAPTURE(f);
    CHECK(fs::exists(a / f));
    CHECK(slurp(a / f) == slurp(b / f));
  }
  const std::string table = slurp(a / "report/table1.csv");
  for (const char* label : {"kappa_1", "kappa_2", "A_W", "kappa_D", "kappa_star"}) CHECK(table.find(label) != std::string::npos);
  const auto manifest = nlohmann::json::parse(slurp(a / "manifest.json"));
  CHECK(manifest.contains("seed"));

  const auto resumed = run_pipeline(config_from_json(tiny_config(a)), true);
  CHECK(resumed.empty());
}

TEST_CASE("evaluate with preloaded controllers needs no training") {
  const fs::path dir = fs::temp_directory_path() / "mixdistill_eval_only";
  fs::remove_all(dir);
  fs::create_directories(dir);
  MatrixXd k(1, 2);
  k << -1, -3;
  nn::save_network(single_layer(k, VectorXd::Zero(1), Activation::kIdentity), dir / "student.json");
  auto doc = tiny_config(dir / "run");
  doc["evaluate"]["controllers"] = nlohmann::json::array({{{"label", "pre"}, {"kind", "network"}, {"path", "student.json"}}});
  ExperimentConfig cfg = config_from_json(doc, dir);
  run_stage(cfg, "evaluate");
  CHECK(fs::exists(dir / "run/eval/comparison.csv"));
  CHECK_FALSE(fs::exists(dir / "run/mixing"));
  CHECK(slurp(dir / "run/eval/comparison.csv").find(",pre,") != std::string::npos);

  auto zero = doc;
  zero["evaluate"]["attack_bound"] = 0.0;
  zero["evaluate"]["noise_bound"] = 0.0;
  zero["output_dir"] = (dir / "zero").string();
  run_stage(config_from_json(zero, dir), "evaluate");
  const auto rows = read_comparison_csv(dir / "zero/eval/comparison.csv");
  CHECK(rows[0].S_r_attack.value() == rows[0].S_r_clean);
  CHECK(rows[0].S_r_noise.value() == rows[0].S_r_clean);
}
