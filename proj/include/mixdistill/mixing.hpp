#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mixdistill/dynamics.hpp"
#include "mixdistill/experts.hpp"
#include "mixdistill/nn.hpp"
#include "mixdistill/reward.hpp"

namespace mixdistill {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

/// Adaptive mixing policy. The actor maps a state to 2n outputs: n Gaussian
/// means followed by n log standard deviations. Weights are
/// a_i = bound_i * tanh(z_i) with z ~ N(mean, std), so every action lies in
/// the box [-bound, bound].
struct MixingPolicy {
  nn::Network actor;
  nn::Network critic;
  Eigen::VectorXd weight_bounds;
  std::vector<std::string> expert_labels;

  int experts() const { return static_cast<int>(weight_bounds.size()); }
  bool contains(const Eigen::VectorXd& weights) const;

  /// Fresh policy. The actor's output layer is scaled down so initial means
  /// sit near zero, and log-std outputs start at `initial_log_std`.
  static MixingPolicy create(int state_dim, Eigen::VectorXd weight_bounds,
                             const std::vector<int>& actor_hidden,
                             const std::vector<int>& critic_hidden, double initial_log_std,
                             Rng& rng);
};

enum class ActMode { kSample, kMean };

struct PolicyAction {
  Eigen::VectorXd weights;     // a, inside the bound box
  Eigen::VectorXd pre_squash;  // z
  double log_prob = 0.0;       // log density of a (change of variables included)
};

PolicyAction policy_act(const MixingPolicy& policy, const Eigen::VectorXd& s, ActMode mode,
                        Rng& rng);

/// log density of weights a = bound * tanh(z) under N(mean, exp(log_std)).
double squashed_log_prob(const Eigen::VectorXd& z, const Eigen::VectorXd& mean,
                         const Eigen::VectorXd& log_std, const Eigen::VectorXd& bounds);

/// clip(sum_i a_i * kappa_i(s), U).
Eigen::VectorXd mix_control(const Eigen::VectorXd& weights,
                            const std::vector<Eigen::VectorXd>& expert_outputs,
                            const Box& input_bound);

/// Controller that evaluates the experts and the policy (mean mode) on the
/// state it is given. Keeps references to policy and experts.
Controller make_mixed_controller(const MixingPolicy& policy, const std::vector<Expert>& experts,
                                 const SystemSpec& spec);
/// Constant weights; handy for switching baselines and tests.
Controller make_fixed_weight_controller(Eigen::VectorXd weights, const std::vector<Expert>& experts,
                                        const SystemSpec& spec);

/// On-policy data for one epoch. `episode_end[t]` marks the last step of an
/// episode; `terminal[t]` says it ended by a safety violation (no bootstrap),
/// otherwise `bootstrap_value[t]` is V(s_T) at the time-limit cut.
struct RolloutBuffer {
  std::vector<Eigen::VectorXd> states;
  std::vector<Eigen::VectorXd> pre_squash;
  std::vector<Eigen::VectorXd> controls;  // applied (clipped) mixed control
  std::vector<double> log_probs;
  std::vector<double> rewards;
  std::vector<double> values;
  std::vector<bool> terminal;
  std::vector<bool> episode_end;
  std::vector<double> bootstrap_value;

  std::vector<double> advantages;  // raw GAE, filled by compute_advantages
  std::vector<double> returns;

  std::size_t size() const { return rewards.size(); }
  bool empty() const { return rewards.empty(); }
  void clear();
  void push(const Eigen::VectorXd& s, const PolicyAction& a, const Eigen::VectorXd& u, double reward,
            double value);
  void end_episode(bool terminal_violation, double bootstrap);
};

/// Generalized advantage estimation. Throws StateError on an empty buffer.
void compute_advantages(RolloutBuffer& buffer, double gamma, double gae_lambda);

enum class PpoVariant { kKlPenalty, kClip };

struct PpoConfig {
  PpoVariant variant = PpoVariant::kKlPenalty;
  int epochs = 10;
  int minibatch_size = 64;
  double actor_learning_rate = 3e-4;
  double critic_learning_rate = 1e-3;
  double initial_beta = 1.0;
  double kl_target = 0.01;
  double clip_epsilon = 0.2;
  bool normalize_advantages = true;
};

struct PpoDiagnostics {
  double mean_kl = 0.0;
  double ratio_mean = 1.0;
  double ratio_min = 1.0;
  double ratio_max = 1.0;
  double beta = 0.0;
  double value_loss = 0.0;
};

/// Holds optimizer state and the adaptive KL weight across updates.
class PpoTrainer {
 public:
  PpoTrainer(const MixingPolicy& policy, PpoConfig config);

  /// Maximizes E[ratio * A - beta * KL(old || new)] over minibatches; the
  /// old policy is the actor at entry. Afterwards beta doubles if the mean KL
  /// exceeds 2 * target and halves if it is below target / 2.
  PpoDiagnostics update(MixingPolicy& policy, const RolloutBuffer& buffer, Rng& rng);

  double beta() const { return beta_; }
  const PpoConfig& config() const { return config_; }

 private:
  PpoConfig config_;
  double beta_;
  nn::Adam actor_opt_;
  nn::Adam critic_opt_;
};

/// Per-sample probability ratio and KL(old || new) of `policy` against
/// `old_actor` on the buffer.
struct RatioKl {
  std::vector<double> ratio;
  std::vector<double> kl;
};
RatioKl ratio_and_kl(const MixingPolicy& policy, const nn::Network& old_actor,
                     const RolloutBuffer& buffer);

struct MixingConfig {
  int epochs = 100;
  int episodes_per_epoch = 8;
  Eigen::VectorXd weight_bounds;  // empty -> 3 per expert
  std::vector<int> actor_hidden{64, 64};
  std::vector<int> critic_hidden{64, 64};
  double initial_log_std = -0.5;
  double gae_lambda = 0.95;
  PpoConfig ppo;
  RewardSpec reward;
  std::uint64_t seed = 0;
  /// Called after each epoch's update with the data that epoch collected.
  std::function<void(int epoch, const MixingPolicy&, const RolloutBuffer&)> on_epoch;
};

struct EpochLog {
  int epoch = 0;
  double mean_return = 0.0;
  double mean_kl = 0.0;
  double safe_fraction = 0.0;
  double mean_energy = 0.0;
};

struct MixingResult {
  MixingPolicy policy;
  std::vector<EpochLog> log;
};

/// PPO training of the mixing policy with experts in the loop. Each epoch
/// freezes theta_old, collects episodes from random initial states, and
/// performs one PPO update. Expert failures are rethrown with epoch/step
/// context.
MixingResult train_mixing(const SystemSpec& spec, const std::vector<Expert>& experts,
                          const PerturbationModel& pm, const MixingConfig& cfg);

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path);

/// Writes actor.json, critic.json and policy.json (bounds, n, labels).
void save_policy(const MixingPolicy& policy, const std::filesystem::path& dir);
MixingPolicy load_policy(const std::filesystem::path& dir);

}  // namespace mixdistill
