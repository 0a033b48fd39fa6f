#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mixdistill/box.hpp"
#include "mixdistill/interval.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill {

namespace nn {
class Network;
}

/// Discrete-time plant update s' = f(s, u, w). The interval overload is the
/// natural interval extension of the same expression.
class Plant {
 public:
  virtual ~Plant() = default;
  virtual Eigen::VectorXd step(const Eigen::VectorXd& s, const Eigen::VectorXd& u,
                               const Eigen::VectorXd& w, double tau) const = 0;
  virtual IntervalVector step(const IntervalVector& s, const IntervalVector& u,
                              const IntervalVector& w, double tau) const = 0;
};

struct SystemSpec {
  std::string name;
  int state_dim = 0;
  int input_dim = 0;
  int disturbance_dim = 0;
  std::shared_ptr<const Plant> plant;
  Box safe_region;        // may be unbounded along some coordinates
  Box initial_set;
  Box input_bound;
  Box disturbance_bound;
  double tau = 0.0;
  int horizon = 0;

  /// Throws ValidationError when an invariant (X0 in X, tau > 0, T >= 1,
  /// consistent dimensions) fails.
  void validate() const;

  SystemSpec with_initial_set(Box x0) const;
  SystemSpec with_disturbance(Box omega) const;
  SystemSpec with_horizon(int t) const;
  /// Width of each safe-region coordinate, falling back to the initial set
  /// where the safe region is unbounded.
  Eigen::VectorXd state_range() const;
  /// The safe region with unbounded coordinates replaced by the initial set's.
  Box state_box() const;
};

/// Names: "vanderpol", "system3d", "cartpole". Throws ConfigError otherwise.
SystemSpec builtin_system(const std::string& name);

/// Polynomial system from JSON (see README for the schema).
SystemSpec system_from_json(const nlohmann::json& doc);
SystemSpec load_system(const std::filesystem::path& path);

Box box_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const Box& box);

/// Throws DomainError on non-finite arguments and ShapeError on mismatched
/// dimensions.
Eigen::VectorXd step(const SystemSpec& spec, const Eigen::VectorXd& s, const Eigen::VectorXd& u,
                     const Eigen::VectorXd& w);
IntervalVector interval_step(const SystemSpec& spec, const IntervalVector& s,
                             const IntervalVector& u, const IntervalVector& w);

enum class AttackLoss {
  kOutputDeviation,  // maximize ||net(s + d) - net(s)||^2
  kReferenceDistance  // maximize ||net(s + d) - reference(s)||^2
};

/// Observation perturbation applied to the state the controller sees.
struct PerturbationModel {
  enum class Kind { kNone, kUniformNoise, kFgsmAttack };

  Kind kind = Kind::kNone;
  Eigen::VectorXd bound;                  // per-dimension Delta
  const nn::Network* target = nullptr;    // attacked network (not owned)
  AttackLoss loss = AttackLoss::kOutputDeviation;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> reference;

  static PerturbationModel none() { return {}; }
  static PerturbationModel uniform_noise(Eigen::VectorXd bound);
  static PerturbationModel fgsm(Eigen::VectorXd bound, const nn::Network& target,
                                AttackLoss loss = AttackLoss::kOutputDeviation);
};

/// Observed state. Uniform noise draws Uniform(-Delta, Delta) per coordinate.
/// The FGSM attack takes one signed step of size Delta along the input
/// gradient of the attack loss; the output-deviation loss has zero gradient
/// at s, so its gradient is taken at a random start inside [-Delta/2, Delta/2].
Eigen::VectorXd observe(const Eigen::VectorXd& s, const PerturbationModel& pm, Rng& rng);

using Controller = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;
using RewardFn = std::function<double(const Eigen::VectorXd& next_state, const Eigen::VectorXd& u)>;

/// Separate streams so that changing the perturbation never shifts the
/// disturbance sequence (paired comparisons depend on this).
struct RolloutStreams {
  Rng disturbance;
  Rng perturbation;

  static RolloutStreams from_seed(std::uint64_t seed);
};

struct Trajectory {
  std::vector<Eigen::VectorXd> states;    // true states, length controls + 1
  std::vector<Eigen::VectorXd> observed;  // what the controller saw
  std::vector<Eigen::VectorXd> controls;  // applied (clipped) controls
  std::vector<Eigen::VectorXd> disturbances;
  std::vector<double> rewards;
  bool safe = true;
  std::optional<int> first_violation_step;  // index into states
  bool controller_fault = false;

  std::size_t steps() const { return controls.size(); }
  double energy() const;  // sum of 1-norms of applied controls
};

/// Closed-loop simulation for up to spec.horizon steps, stopping at the first
/// state outside the safe region. A non-finite controller output ends the
/// trajectory as unsafe with `controller_fault` set.
Trajectory rollout(const SystemSpec& spec, const Controller& controller, const Eigen::VectorXd& s0,
                   const PerturbationModel& pm, RolloutStreams& streams,
                   const RewardFn& reward = nullptr);

std::vector<Eigen::VectorXd> sample_initial_states(const SystemSpec& spec, int n, Rng& rng);

/// Central-difference linearization of the update map at (s, u) with w = 0.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> linearize(const SystemSpec& spec,
                                                      const Eigen::VectorXd& s,
                                                      const Eigen::VectorXd& u,
                                                      double h = 1e-6);

}  // namespace mixdistill
