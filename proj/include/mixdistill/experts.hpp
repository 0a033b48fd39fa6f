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
#include "mixdistill/polynomial.hpp"
#include "mixdistill/reward.hpp"

namespace mixdistill {

/// A pre-existing controller kappa_i : state -> control. Evaluation returns
/// the raw output; clipping to the input bound happens where controls are
/// applied.
class Expert {
 public:
  enum class Kind { kNeural, kLinear, kPolynomial };

  static Expert neural(nn::Network net, std::string label);
  /// u = gain * s + offset.
  static Expert linear(Eigen::MatrixXd gain, Eigen::VectorXd offset, std::string label);
  /// One polynomial per control component, variables are the state.
  static Expert polynomial(std::vector<Polynomial> outputs, std::string label);

  Eigen::VectorXd evaluate(const Eigen::VectorXd& s) const;

  Kind kind() const { return kind_; }
  const std::string& label() const { return label_; }
  void set_label(std::string label) { label_ = std::move(label); }
  int state_dim() const { return state_dim_; }
  int output_dim() const { return output_dim_; }

  /// Differentiable form when one exists: the network itself, or a single
  /// identity layer for linear experts. Null for polynomial experts.
  const nn::Network* network() const { return network_ ? &*network_ : nullptr; }
  const std::vector<Polynomial>& polynomials() const { return polynomials_; }

  /// Throws ValidationError unless the expert maps spec states to spec controls.
  void check_against(const SystemSpec& spec) const;

 private:
  Kind kind_ = Kind::kLinear;
  std::string label_;
  int state_dim_ = 0;
  int output_dim_ = 0;
  std::optional<nn::Network> network_;
  std::vector<Polynomial> polynomials_;
};

struct LqrResult {
  Expert expert;
  Eigen::MatrixXd cost_to_go;  // P
  Eigen::MatrixXd gain;        // K, with u = -K s
  int iterations = 0;
  double closed_loop_spectral_radius = 0.0;
};

/// Discrete-time LQR by fixed-point iteration of the Riccati map
/// P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA until successive iterates differ
/// by at most `tolerance` (max-abs). Throws SynthesisError when the iteration
/// does not settle within `max_iterations` or the closed loop is not stable.
LqrResult lqr_synthesize(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                         const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                         const std::string& label = "lqr", double tolerance = 1e-10,
                         int max_iterations = 100000);

/// ||P - riccati_map(P)||_max.
double riccati_residual(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b,
                        const Eigen::MatrixXd& q, const Eigen::MatrixXd& r,
                        const Eigen::MatrixXd& p);

double spectral_radius(const Eigen::MatrixXd& m);

struct DdpgConfig {
  std::vector<int> actor_hidden{32, 32};
  std::vector<int> critic_hidden{64, 64};
  double actor_learning_rate = 1e-3;
  double critic_learning_rate = 1e-3;
  int replay_capacity = 100000;
  int batch_size = 64;
  double target_smoothing = 0.005;
  double exploration_noise = 0.2;  // std-dev in normalized action units
  int episodes = 300;
  int warmup_steps = 500;
  double gamma = 0.99;
  RewardSpec reward;
  int eval_samples = 100;
  std::uint64_t seed = 0;

  void validate() const;
};

struct DdpgResult {
  Expert expert;
  std::vector<double> episode_returns;
  double safe_rate = 0.0;  // clean, over eval_samples initial states
};

/// Minimal DDPG: deterministic tanh actor scaled onto the input box, Q
/// critic on (state, normalized action), uniform replay, Polyak targets.
/// The returned network has the input scaling baked in as a final identity
/// layer. Throws TrainingError if a loss goes non-finite.
DdpgResult ddpg_train(const SystemSpec& spec, const DdpgConfig& cfg,
                      const std::string& label = "ddpg");

nlohmann::json to_json(const Expert& e);
/// Accepts the network file format or {"kind": "linear"|"polynomial", ...}.
Expert expert_from_json(const nlohmann::json& doc, const std::string& label = "");
void save_expert(const Expert& e, const std::filesystem::path& path);
Expert load_expert(const std::filesystem::path& path);
Expert load_expert(const std::filesystem::path& path, const SystemSpec& spec);

}  // namespace mixdistill
