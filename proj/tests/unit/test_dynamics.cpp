#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "mixdistill/dynamics.hpp"
#include "mixdistill/errors.hpp"
#include "mixdistill/reward.hpp"

using namespace mixdistill;
using namespace testing;

namespace {

VectorXd zero_w(const SystemSpec& s) { return VectorXd::Zero(s.disturbance_dim); }
VectorXd zero_u(const SystemSpec& s) { return VectorXd::Zero(s.input_dim); }

}  // namespace

TEST_CASE("builtin systems") {
  const SystemSpec vdp = builtin_system("vanderpol");
  CHECK(vdp.tau == 0.05);
  CHECK(vdp.horizon == 100);
  CHECK(vdp.safe_region == Box({{-2, 2}, {-2, 2}}));
  CHECK(vdp.input_bound == Box({{-20, 20}}));
  CHECK(vdp.disturbance_bound == Box({{-0.05, 0.05}}));

  const SystemSpec s3 = builtin_system("system3d");
  CHECK(s3.initial_set == Box::cube(3, -0.5, 0.5));
  CHECK(s3.safe_region == Box::cube(3, -0.5, 0.5));

  const SystemSpec cp = builtin_system("cartpole");
  CHECK(cp.horizon == 200);
  CHECK(cp.tau == 0.02);
  CHECK(cp.initial_set == Box::cube(4, -0.2, 0.2));
  CHECK(cp.safe_region.hi(0) == 2.4);
  CHECK(cp.safe_region.hi(2) == 0.209);
  CHECK(std::isinf(cp.safe_region.hi(1)));

  CHECK_THROWS_AS(builtin_system("pendulum"), ConfigError);
}

TEST_CASE("exact single steps") {
  const SystemSpec vdp = builtin_system("vanderpol");
  CHECK(step(vdp, vec({0, 0}), zero_u(vdp), zero_w(vdp)) == vec({0, 0}));
  const VectorXd s = step(vdp, vec({1, 1}), zero_u(vdp), zero_w(vdp));
  CHECK(std::abs(s[0] - 1.05) <= 1e-12);
  CHECK(std::abs(s[1] - 0.95) <= 1e-12);

  const SystemSpec s3 = builtin_system("system3d");
  const VectorXd t = step(s3, vec({0, 0, 1}), zero_u(s3), zero_w(s3));
  CHECK((t - vec({0.025, 0.05, 1})).cwiseAbs().maxCoeff() <= 1e-12);

  const SystemSpec cp = builtin_system("cartpole");
  CHECK(step(cp, VectorXd::Zero(4), zero_u(cp), zero_w(cp)) == VectorXd::Zero(4));
}

TEST_CASE("step argument checks") {
  const SystemSpec vdp = builtin_system("vanderpol");
  CHECK_THROWS_AS(step(vdp, vec({0, 0, 0}), zero_u(vdp), zero_w(vdp)), ShapeError);
  CHECK_THROWS_AS(step(vdp, vec({0, NAN}), zero_u(vdp), zero_w(vdp)), DomainError);
}

TEST_CASE("interval step encloses point steps and reproduces them on points") {
  const SystemSpec vdp = builtin_system("vanderpol");
  const auto r = interval_step(vdp, to_intervals(Box::point(vec({0, 0}))), {Interval(0.0)},
                               to_intervals(vdp.disturbance_bound));
  CHECK(r[0].lo == 0.0);
  CHECK(r[0].hi == 0.0);
  CHECK(r[1].lo == doctest::Approx(-0.05));
  CHECK(r[1].hi == doctest::Approx(0.05));

  Rng rng(4);
  for (const char* name : {"vanderpol", "system3d", "cartpole"}) {
    const SystemSpec spec = builtin_system(name);
    for (int k = 0; k < 50; ++k) {
      const Box x = Box::point(spec.initial_set.sample(rng)).inflate(VectorXd::Constant(spec.state_dim, 0.01));
      const Box u = Box::point(spec.input_bound.sample(rng)).inflate(VectorXd::Constant(spec.input_dim, 0.5));
      const Box enclosure = to_box(interval_step(spec, to_intervals(x), to_intervals(u),
                                                 to_intervals(spec.disturbance_bound)));
      for (int j = 0; j < 20; ++j) {
        CHECK(enclosure.contains(step(spec, x.sample(rng), u.sample(rng), spec.disturbance_bound.sample(rng))));
      }
      const VectorXd p = x.center(), q = u.center(), w = spec.disturbance_bound.center();
      const Box pt = to_box(interval_step(spec, to_intervals(Box::point(p)), to_intervals(Box::point(q)),
                                          to_intervals(Box::point(w))));
      CHECK(pt == Box::point(step(spec, p, q, w)));
    }
  }
}

TEST_CASE("interval arithmetic") {
  CHECK_THROWS_AS(Interval(1.0, 0.0), DomainError);
  const Interval s = square(Interval(-1.0, 2.0));
  CHECK(s.lo == 0.0);
  CHECK(s.hi == 4.0);
  const Interval si = sin(Interval(0.0, 3.2));
  CHECK(si.hi >= 1.0);
  CHECK(si.lo <= std::sin(3.2));
  const Interval c = cos(Interval(-0.1, 0.1));
  CHECK(c.hi >= 1.0);
  CHECK(c.lo <= std::cos(0.1));
  CHECK_THROWS_AS(Interval(1.0) / Interval(-1.0, 1.0), DomainError);
}

TEST_CASE("observation perturbations") {
  Rng rng(1);
  const VectorXd s = vec({0.3, -0.2});
  CHECK(observe(s, PerturbationModel::none(), rng) == s);
  CHECK(observe(s, PerturbationModel::uniform_noise(VectorXd::Zero(2)), rng) == s);
  const auto pm = PerturbationModel::uniform_noise(vec({0.1, 0.1}));
  double max_abs = 0.0, sum_abs = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const VectorXd d = observe(s, pm, rng) - s;
    max_abs = std::max(max_abs, d.cwiseAbs().maxCoeff());
    sum_abs += d.cwiseAbs().sum();
  }
  CHECK(max_abs <= 0.1 + 1e-15);
  CHECK(sum_abs / (2.0 * n) == doctest::Approx(0.05).epsilon(0.02));
  CHECK_THROWS_AS(PerturbationModel::uniform_noise(vec({-0.1})), ConfigError);
}

TEST_CASE("rollouts") {
  SystemSpec vdp = builtin_system("vanderpol").with_disturbance(Box({{0, 0}}));
  auto streams = RolloutStreams::from_seed(3);
  const Controller zero = [](const VectorXd&) { return VectorXd::Zero(1); };
  const Trajectory t = rollout(vdp, zero, vec({0, 0}), PerturbationModel::none(), streams);
  CHECK(t.safe);
  CHECK(t.steps() == 100);
  for (const auto& s : t.states) CHECK(s.isZero(0));

  const SystemSpec cp = builtin_system("cartpole");
  auto cps = RolloutStreams::from_seed(3);
  const Trajectory fall = rollout(cp, zero, vec({0, 0, 0.2, 0}), PerturbationModel::none(), cps);
  CHECK_FALSE(fall.safe);
  REQUIRE(fall.first_violation_step.has_value());
  CHECK(std::abs(fall.states.back()[2]) > 0.209);

  const Controller huge = [](const VectorXd&) { return vec({1e6}); };
  auto hs = RolloutStreams::from_seed(3);
  const Trajectory clipped = rollout(vdp, huge, vec({0, 0}), PerturbationModel::none(), hs);
  CHECK(clipped.controls.front()[0] == 20.0);

  const Controller bad = [](const VectorXd&) { return vec({NAN}); };
  auto bs = RolloutStreams::from_seed(3);
  const Trajectory faulted = rollout(vdp, bad, vec({0, 0}), PerturbationModel::none(), bs);
  CHECK(faulted.controller_fault);
  CHECK_FALSE(faulted.safe);
}

TEST_CASE("initial state sampling") {
  const SystemSpec vdp = builtin_system("vanderpol");
  Rng a(8), b(8);
  const auto xs = sample_initial_states(vdp, 10000, a);
  CHECK(xs == sample_initial_states(vdp, 10000, b));
  VectorXd mean = VectorXd::Zero(2);
  for (const auto& x : xs) {
    CHECK(vdp.initial_set.contains(x));
    mean += x / 10000.0;
  }
  CHECK(mean.cwiseAbs().maxCoeff() < 0.05);
  Rng c(1);
  const auto p = sample_initial_states(vdp.with_initial_set(Box::point(vec({0, 0}))), 1, c);
  CHECK(p.front() == vec({0, 0}));
}

TEST_CASE("custom polynomial system from JSON") {
  const auto doc = nlohmann::json::parse(R"({
    "name": "damped", "state_dim": 1, "input_dim": 1, "tau": 0.1, "horizon": 5,
    "safe_region": [[-1, 1]], "initial_set": [[-0.5, 0.5]], "input_bound": [[-1, 1]],
    "dynamics": [[{"coef": 0.9, "powers": [1, 0, 0]}, {"coef": 1.0, "powers": [0, 1, 0]}]]
  })");
  const SystemSpec s = system_from_json(doc);
  CHECK(step(s, vec({0.5}), vec({0.1}), vec({0}))[0] == doctest::Approx(0.55));
  CHECK_THROWS_AS(system_from_json(nlohmann::json::parse(R"({"state_dim": 1})")), ParseError);
}

TEST_CASE("reward") {
  const SystemSpec vdp = builtin_system("vanderpol");
  RewardSpec rs;
  rs.energy_slope = 0.01;
  CHECK(reward(vec({3, 0}), vec({0}), vdp, rs) == rs.punishment);
  CHECK(reward(vec({0, 0}), vec({0}), vdp, rs) == 1.0);
  CHECK(reward(vec({0, 0}), vec({10}), vdp, rs) == doctest::Approx(0.9));
  RewardSpec bad;
  bad.punishment = 5.0;
  CHECK_THROWS_AS(bad.validate(vdp.input_bound), ConfigError);
}

TEST_CASE("trajectory energy") {
  Trajectory t;
  for (int i = 0; i < 10; ++i) t.controls.push_back(vec({-0.5, 0.25}));
  CHECK(t.energy() == doctest::Approx(7.5));
}

TEST_CASE("seed derivation is stable") {
  CHECK(derive_seed(1, "a") == derive_seed(1, "a"));
  CHECK(derive_seed(1, "a") != derive_seed(1, "b"));
  CHECK(derive_seed(1, "a") != derive_seed(2, "a"));
  Rng a(5), b(5);
  std::vector<int> x{1, 2, 3, 4, 5, 6}, y = x;
  a.shuffle(x.begin(), x.end());
  b.shuffle(y.begin(), y.end());
  CHECK(x == y);
}
