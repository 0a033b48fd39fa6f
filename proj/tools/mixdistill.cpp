// Command-line driver for the training / distillation / verification pipeline.
#include <CLI11.hpp>

#include <iostream>
#include <optional>

#include "mixdistill/errors.hpp"
#include "mixdistill/pipeline.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kStageFailure = 3;
constexpr int kInconclusive = 4;

struct Options {
  std::string config;
  std::string stage;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool resume = false;
};

void add_common(CLI::App* cmd, Options& opt) {
  cmd->add_option("--config", opt.config, "experiment config (JSON)")->required();
  cmd->add_option("--seed", opt.seed, "override the global seed");
  cmd->add_option("--out", opt.out, "override the run directory");
}

int run(const Options& opt, const std::vector<std::string>& stages, bool resume) {
  mixdistill::ExperimentConfig cfg;
  try {
    cfg = mixdistill::load_config(opt.config);
    if (opt.seed) cfg.seed = *opt.seed;
    if (!opt.out.empty()) cfg.output_dir = opt.out;
  } catch (const mixdistill::Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  bool inconclusive = false;
  for (const auto& stage : stages) {
    if (resume) {
      const auto outputs = mixdistill::stage_outputs(cfg, stage);
      bool done = true;
      for (const auto& rel : outputs) done = done && std::filesystem::exists(cfg.output_dir / rel);
      if (done) {
        std::cout << stage << ": up to date\n";
        continue;
      }
    }
    try {
      const auto outcome = mixdistill::run_stage(cfg, stage);
      std::cout << stage << ": " << outcome.artifacts.size() << " artifacts, " << outcome.milliseconds / 1000.0
                << " s\n";
      inconclusive = inconclusive || outcome.inconclusive;
    } catch (const mixdistill::ConfigError& e) {
      std::cerr << "stage " << stage << ": config error: " << e.what() << '\n';
      return kConfigError;
    } catch (const std::exception& e) {
      std::cerr << "stage " << stage << " failed: " << e.what() << '\n';
      return kStageFailure;
    }
  }
  if (inconclusive) {
    std::cerr << "verification inconclusive (see verify/verification.json)\n";
    return kInconclusive;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Expert mixing, robust distillation and reachability analysis"};
  app.require_subcommand(1);
  Options opt;

  auto* all = app.add_subcommand("run", "run every stage in order, or one with --stage");
  add_common(all, opt);
  all->add_option("--stage", opt.stage, "run only this stage");
  all->add_flag("--resume", opt.resume, "skip stages whose outputs already exist");

  std::vector<CLI::App*> stage_cmds;
  for (const auto& name : mixdistill::stage_names()) {
    auto* cmd = app.add_subcommand(name, "run the " + name + " stage");
    add_common(cmd, opt);
    stage_cmds.push_back(cmd);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  if (all->parsed()) {
    if (!opt.stage.empty()) {
      const auto& names = mixdistill::stage_names();
      if (std::find(names.begin(), names.end(), opt.stage) == names.end()) {
        std::cerr << "unknown stage '" << opt.stage << "'\n";
        return kConfigError;
      }
      return run(opt, {opt.stage}, opt.resume);
    }
    return run(opt, mixdistill::stage_names(), opt.resume);
  }
  for (auto* cmd : stage_cmds) {
    if (cmd->parsed()) return run(opt, {cmd->get_name()}, false);
  }
  return kConfigError;
}
