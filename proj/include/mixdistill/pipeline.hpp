#pragma once

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mixdistill/distill.hpp"
#include "mixdistill/dynamics.hpp"
#include "mixdistill/eval.hpp"
#include "mixdistill/experts.hpp"
#include "mixdistill/mixing.hpp"
#include "mixdistill/verify.hpp"

namespace mixdistill {

/// How to obtain one expert.
struct ExpertSpec {
  enum class Kind { kLqr, kLinear, kDdpg, kFile };
  Kind kind = Kind::kLqr;
  std::string label;
  // lqr: u = gain_scale * (-K s), K from (A, B, Q, R); A and B default to
  // the linearization at the origin.
  Eigen::MatrixXd a, b, q, r;
  double gain_scale = 1.0;
  // linear
  Eigen::MatrixXd gain;
  Eigen::VectorXd offset;
  // ddpg
  DdpgConfig ddpg;
  // file
  std::filesystem::path path;
};

enum class DistillMode { kPostHoc, kInterleaved };

/// A controller the evaluate stage loads directly instead of from the run
/// directory.
struct ControllerSpec {
  enum class Kind { kNetwork, kExpert };
  Kind kind = Kind::kNetwork;
  std::string label;
  std::filesystem::path path;
};

struct VerifySettings {
  PartitionConfig partition;
  std::optional<Box> reach_initial_box;  // empty -> initial set
  int reach_steps = 15;
  std::vector<Box> candidate_boxes;
  int invariant_cells = 8;
  int subgrid_cells = 0;                 // 0 disables the subgrid search
  std::optional<Box> subgrid_region;     // empty -> state box
  int audit_trajectories = 1500;
  int audit_steps = -1;                  // -1 -> horizon
};

struct ExperimentConfig {
  SystemSpec system;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "run";
  std::vector<ExpertSpec> experts;
  MixingConfig mixing;
  double training_noise = 0.0;  // fraction of half-range, applied while training the policy
  DistillConfig distill;
  double delta_fraction = 0.1;
  DistillMode distill_mode = DistillMode::kPostHoc;
  int dataset_size = 20000;
  CollectMode collect_mode = CollectMode::kRollout;
  EvalConfig evaluate;
  std::vector<ControllerSpec> eval_controllers;  // empty -> run-directory artifacts
  int trace_count = 1;
  VerifySettings verify;
};

/// Throws ConfigError (bad values, missing files) or ParseError (bad JSON).
/// Relative paths inside the document resolve against `base_dir`.
ExperimentConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
ExperimentConfig load_config(const std::filesystem::path& path);

/// Stage seed = derive_seed(global seed, stage name).
std::uint64_t stage_seed(std::uint64_t global, const std::string& stage);

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"train-expert", "train-mixing", "distill",
                                              "evaluate",     "verify",       "report"};
  return names;
}

struct StageOutcome {
  std::string stage;
  std::vector<std::string> artifacts;  // relative to the run directory
  double milliseconds = 0.0;
  bool inconclusive = false;
};

/// Runs one stage against the run directory. Reads upstream artifacts from
/// disk and throws DependencyError naming any that are missing.
StageOutcome run_stage(const ExperimentConfig& cfg, const std::string& stage);

/// All stages in order. With `resume`, stages whose outputs already exist are
/// skipped. Each stage updates manifest.json.
std::vector<StageOutcome> run_pipeline(const ExperimentConfig& cfg, bool resume = false);

/// Relative artifact paths a stage produces.
std::vector<std::string> stage_outputs(const ExperimentConfig& cfg, const std::string& stage);

}  // namespace mixdistill
