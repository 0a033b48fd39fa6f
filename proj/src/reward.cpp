#include "mixdistill/reward.hpp"

#include <algorithm>
#include <cmath>

#include "mixdistill/errors.hpp"

namespace mixdistill {

void RewardSpec::validate(const Box& input_bound) const {
  if (!(energy_offset > 0.0) || !(energy_slope > 0.0)) {
    throw ConfigError("reward: energy offset and slope must be positive");
  }
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("reward: gamma must lie in (0, 1]");
  double max_norm = 0.0;
  for (int i = 0; i < input_bound.dim(); ++i) {
    max_norm += std::max(std::abs(input_bound.lo(i)), std::abs(input_bound.hi(i)));
  }
  if (!(punishment < energy_term(max_norm))) {
    throw ConfigError("reward: punishment must be below the smallest energy reward");
  }
}

double reward(const Eigen::VectorXd& next_state, const Eigen::VectorXd& u, const SystemSpec& spec,
              const RewardSpec& rs) {
  if (!spec.safe_region.contains(next_state)) return rs.punishment;
  return rs.energy_term(u.lpNorm<1>());
}

}  // namespace mixdistill
