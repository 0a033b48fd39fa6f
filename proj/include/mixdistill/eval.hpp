#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mixdistill/dynamics.hpp"
#include "mixdistill/nn.hpp"

namespace mixdistill {

/// Safe count and energy over one batch of paired rollouts. Energy is the
/// mean over safe trajectories only and is empty when none was safe.
struct EvalSlice {
  double rate = 0.0;
  std::optional<double> energy;
  int safe = 0;
  int n = 0;
};

/// Draws n initial states from X0 and one disturbance seed per sample from
/// `rng`, then rolls out each. Equal rng states give paired samples.
EvalSlice evaluate_closed_loop(const Controller& controller, const SystemSpec& spec, int n,
                               const PerturbationModel& pm, Rng& rng);

double safe_control_rate(const Controller& controller, const SystemSpec& spec, int n,
                         const PerturbationModel& pm, Rng& rng);
std::optional<double> energy(const Controller& controller, const SystemSpec& spec, int n, Rng& rng);

/// Per-step FGSM against `student`, bound = fraction * state half-range.
/// A zero fraction is exactly the clean evaluation.
EvalSlice attack_eval(const nn::Network& student, const SystemSpec& spec, int n, double attack_bound,
                      Rng& rng, AttackLoss loss = AttackLoss::kOutputDeviation,
                      const Controller& reference = nullptr);
/// Uniform observation noise, bound = fraction * state half-range.
EvalSlice noise_eval(const Controller& controller, const SystemSpec& spec, int n, double noise_bound,
                     Rng& rng);

struct EvalConfig {
  int n = 500;
  double attack_bound = 0.1;  // fraction of each dimension's half-range
  double noise_bound = 0.1;
  AttackLoss attack_loss = AttackLoss::kOutputDeviation;
  std::uint64_t seed = 0;

  void validate() const;
};

/// A controller to evaluate. `network` enables the attack column and the
/// Lipschitz bound; `reference` is only used by the reference-distance attack.
struct EvalEntry {
  std::string name;   // artifact identifier, e.g. a file path
  std::string label;  // table label, e.g. kappa_star
  Controller controller;
  const nn::Network* network = nullptr;
  Controller reference;
};

struct EvalReport {
  std::string controller;
  std::string label;
  double S_r_clean = 0.0;
  std::optional<double> S_r_attack;
  std::optional<double> S_r_noise;
  std::optional<double> energy;
  std::optional<double> energy_attack;
  std::optional<double> energy_noise;
  std::optional<double> lipschitz;
  int n = 0;
  std::uint64_t seed = 0;
  double attack_bound = 0.0;
  double noise_bound = 0.0;
};

/// One row per entry. Every entry sees the same initial states and
/// disturbance sequences.
std::vector<EvalReport> compare(const std::vector<EvalEntry>& entries, const SystemSpec& spec,
                                const EvalConfig& cfg);

void write_comparison_csv(const std::vector<EvalReport>& rows, const std::filesystem::path& path);
std::string comparison_csv(const std::vector<EvalReport>& rows);
nlohmann::json to_json(const EvalReport& r);
std::vector<EvalReport> read_comparison_csv(const std::filesystem::path& path);

/// Columns: step, u1..um, s1..sn (state before the control is applied).
void write_control_trace(const Trajectory& tr, const std::filesystem::path& path);

}  // namespace mixdistill
