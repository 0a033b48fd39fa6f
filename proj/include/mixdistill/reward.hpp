#pragma once

#include <Eigen/Dense>

#include "mixdistill/dynamics.hpp"

namespace mixdistill {

/// r = punishment if the next state is unsafe, else h(||u||_1) with
/// h(x) = energy_offset - energy_slope * x.
struct RewardSpec {
  double punishment = -100.0;
  double energy_offset = 1.0;
  double energy_slope = 0.02;
  double gamma = 0.99;

  double energy_term(double u_norm1) const { return energy_offset - energy_slope * u_norm1; }
  /// Checks positivity of the h coefficients, gamma in (0, 1], and that the
  /// punishment is below h everywhere on the input box.
  void validate(const Box& input_bound) const;
};

double reward(const Eigen::VectorXd& next_state, const Eigen::VectorXd& u, const SystemSpec& spec,
              const RewardSpec& rs);

inline RewardFn make_reward_fn(const SystemSpec& spec, const RewardSpec& rs) {
  return [&spec, rs](const Eigen::VectorXd& s, const Eigen::VectorXd& u) {
    return reward(s, u, spec, rs);
  };
}

}  // namespace mixdistill
