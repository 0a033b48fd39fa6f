#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "mixdistill/errors.hpp"
#include "mixdistill/mixing.hpp"

using namespace mixdistill;
using namespace testing;

namespace {

MixingPolicy small_policy(int state_dim, VectorXd bounds, std::uint64_t seed = 1) {
  Rng rng(seed);
  return MixingPolicy::create(state_dim, std::move(bounds), {8}, {8}, -0.5, rng);
}

void zero_actor(MixingPolicy& p) {
  for (std::size_t l = 0; l < p.actor.depth(); ++l) {
    p.actor.mutable_layer(l).weights.setZero();
    p.actor.mutable_layer(l).bias.setZero();
  }
}

// E[bound * tanh(z)], z ~ N(m, s^2), by a fine trapezoid rule.
double squashed_mean(double m, double s, double bound) {
  const int n = 20000;
  const double lo = m - 10 * s, h = 20 * s / n;
  double acc = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double z = lo + i * h;
    const double w = (i == 0 || i == n) ? 0.5 : 1.0;
    acc += w * std::tanh(z) * std::exp(-0.5 * square((z - m) / s));
  }
  return bound * acc * h / (s * std::sqrt(2.0 * M_PI));
}

}  // namespace

TEST_CASE("mix_control") {
  const Box u({{-20, 20}});
  CHECK(mix_control(vec({1}), {vec({5})}, u)[0] == 5.0);
  CHECK(mix_control(vec({2, 2}), {vec({15}), vec({15})}, u)[0] == 20.0);
  CHECK(mix_control(vec({0.5, -1}), {vec({4}), vec({3})}, u)[0] == -1.0);
  CHECK_THROWS_AS(mix_control(vec({1}), {vec({1}), vec({2})}, u), ShapeError);
}

TEST_CASE("policy actions stay in the weight box") {
  MixingPolicy p = small_policy(2, vec({3, 3}));
  Rng rng(2);
  zero_actor(p);
  const PolicyAction mean = policy_act(p, vec({0.5, -1}), ActMode::kMean, rng);
  CHECK(mean.weights.isZero(0));

  MixingPolicy q = small_policy(2, vec({3, 3}));
  q.actor.mutable_layer(q.actor.depth() - 1).bias.tail(2).setConstant(1.5);
  for (int i = 0; i < 5000; ++i) {
    const PolicyAction a = policy_act(q, vec({rng.uniform(-2, 2), rng.uniform(-2, 2)}), ActMode::kSample, rng);
    CHECK(a.weights.cwiseAbs().maxCoeff() <= 3.0);
    CHECK(q.contains(a.weights));
  }
  CHECK(q.contains(vec({1, 0})));
  CHECK(q.contains(vec({0, 1})));
}

TEST_CASE("sampled weights match the squashed mean") {
  MixingPolicy p = small_policy(2, vec({3, 2}));
  zero_actor(p);
  auto& last = p.actor.mutable_layer(p.actor.depth() - 1);
  last.bias << 0.4, -0.2, std::log(0.8), std::log(0.5);
  Rng rng(6);
  const int n = 100000;
  VectorXd sum = VectorXd::Zero(2), sq = VectorXd::Zero(2);
  for (int i = 0; i < n; ++i) {
    const VectorXd a = policy_act(p, vec({0.1, 0.1}), ActMode::kSample, rng).weights;
    sum += a;
    sq += a.cwiseProduct(a);
  }
  const VectorXd mean = sum / n;
  const VectorXd se = ((sq / n - mean.cwiseProduct(mean)) / n).cwiseSqrt();
  CHECK(std::abs(mean[0] - squashed_mean(0.4, 0.8, 3)) <= 3 * se[0]);
  CHECK(std::abs(mean[1] - squashed_mean(-0.2, 0.5, 2)) <= 3 * se[1]);
}

TEST_CASE("squashed log-density integrates to one") {
  // 1-D: integrate exp(log p(a)) over a in (-B, B) through z.
  const double m = 0.3, ls = std::log(0.7), b = 2.0;
  const int n = 40000;
  double acc = 0.0;
  const double lo = m - 9 * 0.7, h = 18 * 0.7 / n;
  for (int i = 0; i <= n; ++i) {
    const double z = lo + i * h;
    const double da_dz = b * (1.0 - square(std::tanh(z)));
    acc += (i == 0 || i == n ? 0.5 : 1.0) * std::exp(squashed_log_prob(vec({z}), vec({m}), vec({ls}), vec({b}))) * da_dz;
  }
  CHECK(acc * h == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("GAE") {
  RolloutBuffer one;
  const PolicyAction a{vec({0}), vec({0}), 0.0};
  one.push(vec({0}), a, vec({0}), 2.5, 0.75);
  one.end_episode(true, 0.0);
  compute_advantages(one, 0.99, 0.3);
  CHECK(one.advantages[0] == doctest::Approx(2.5 - 0.75));

  RolloutBuffer zeros;
  for (int i = 0; i < 4; ++i) zeros.push(vec({0}), a, vec({0}), 0.0, 0.0);
  zeros.end_episode(false, 0.0);
  compute_advantages(zeros, 0.99, 0.95);
  for (double x : zeros.advantages) CHECK(x == 0.0);

  RolloutBuffer three;
  for (int i = 0; i < 3; ++i) three.push(vec({0}), a, vec({0}), 1.0, 0.0);
  three.end_episode(true, 0.0);
  compute_advantages(three, 0.99, 0.95);
  const double gl = 0.99 * 0.95;
  CHECK(three.advantages[2] == doctest::Approx(1.0));
  CHECK(three.advantages[1] == doctest::Approx(1.0 + gl));
  CHECK(three.advantages[0] == doctest::Approx(1.0 + gl * (1.0 + gl)));

  // Time-limit cut bootstraps with the stored value.
  RolloutBuffer cut;
  cut.push(vec({0}), a, vec({0}), 1.0, 0.5);
  cut.end_episode(false, 2.0);
  compute_advantages(cut, 0.9, 0.95);
  CHECK(cut.advantages[0] == doctest::Approx(1.0 + 0.9 * 2.0 - 0.5));
  CHECK(cut.returns[0] == doctest::Approx(cut.advantages[0] + 0.5));

  RolloutBuffer empty;
  CHECK_THROWS_AS(compute_advantages(empty, 0.99, 0.95), StateError);
}

TEST_CASE("PPO fixed points") {
  MixingPolicy p = small_policy(2, vec({3, 3}));
  Rng rng(3);
  RolloutBuffer buf;
  for (int i = 0; i < 32; ++i) {
    const VectorXd s = vec({rng.uniform(-1, 1), rng.uniform(-1, 1)});
    buf.push(s, policy_act(p, s, ActMode::kSample, rng), vec({0}), 0.0, 0.0);
    if (i % 8 == 7) buf.end_episode(true, 0.0);
  }
  compute_advantages(buf, 0.99, 0.95);

  const RatioKl same = ratio_and_kl(p, p.actor, buf);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    CHECK(same.ratio[i] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(same.kl[i]) <= 1e-12);
  }

  const nn::Network before = p.actor;
  PpoTrainer trainer(p, PpoConfig{});
  trainer.update(p, buf, rng);
  CHECK(p.actor == before);
}

TEST_CASE("PPO raises the probability of an advantaged action") {
  MixingPolicy p = small_policy(1, vec({3}));
  Rng rng(4);
  RolloutBuffer buf;
  const VectorXd s = vec({0.2});
  for (int i = 0; i < 64; ++i) {
    const PolicyAction a = policy_act(p, s, ActMode::kSample, rng);
    buf.push(s, a, vec({0}), a.weights[0] > 0 ? 1.0 : -1.0, 0.0);
    buf.end_episode(true, 0.0);
  }
  compute_advantages(buf, 0.99, 0.95);
  const double mean_before = nn::forward(p.actor, s)[0];
  const PolicyAction probe{vec({1.0}), vec({std::atanh(1.0 / 3.0)}), 0.0};
  const VectorXd out_before = nn::forward(p.actor, s);
  const double lp_before = squashed_log_prob(probe.pre_squash, out_before.head(1), out_before.tail(1), p.weight_bounds);
  PpoTrainer trainer(p, PpoConfig{});
  trainer.update(p, buf, rng);
  const VectorXd out_after = nn::forward(p.actor, s);
  CHECK(out_after[0] > mean_before);
  CHECK(squashed_log_prob(probe.pre_squash, out_after.head(1), out_after.tail(1), p.weight_bounds) > lp_before);
}

TEST_CASE("adaptive KL weight") {
  MixingPolicy p = small_policy(1, vec({3}));
  Rng rng(8);
  RolloutBuffer buf;
  for (int i = 0; i < 64; ++i) {
    const VectorXd s = vec({rng.uniform(-1, 1)});
    const PolicyAction a = policy_act(p, s, ActMode::kSample, rng);
    buf.push(s, a, vec({0}), 100.0 * a.weights[0], 0.0);
    buf.end_episode(true, 0.0);
  }
  compute_advantages(buf, 0.99, 0.95);
  PpoConfig cfg;
  cfg.actor_learning_rate = 0.05;
  cfg.kl_target = 1e-6;
  PpoTrainer big(p, cfg);
  big.update(p, buf, rng);
  CHECK(big.beta() == 2.0);
}

TEST_CASE("train_mixing: no-op and determinism") {
  const SystemSpec vdp = builtin_system("vanderpol");
  MatrixXd k(1, 2);
  k << -1, -2;
  const std::vector<Expert> experts{Expert::linear(k, VectorXd::Zero(1), "a"),
                                    Expert::linear(0.5 * k, VectorXd::Zero(1), "b")};
  MixingConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 3;
  cfg.actor_hidden = {8};
  cfg.critic_hidden = {8};
  const MixingResult none = train_mixing(vdp, experts, PerturbationModel::none(), cfg);
  CHECK(none.log.empty());
  CHECK(none.policy.experts() == 2);
  CHECK(none.policy.weight_bounds == vec({3, 3}));

  cfg.epochs = 2;
  cfg.episodes_per_epoch = 2;
  const MixingResult a = train_mixing(vdp, experts, PerturbationModel::none(), cfg);
  const MixingResult b = train_mixing(vdp, experts, PerturbationModel::none(), cfg);
  CHECK(a.policy.actor == b.policy.actor);
  CHECK(a.log.size() == 2);
  CHECK_FALSE(a.policy.actor == none.policy.actor);
}

TEST_CASE("policy save and load") {
  const auto dir = std::filesystem::temp_directory_path() / "mixdistill_policy_test";
  std::filesystem::remove_all(dir);
  MixingPolicy p = small_policy(2, vec({3, 1.5}));
  p.expert_labels = {"k1", "k2"};
  save_policy(p, dir);
  const MixingPolicy q = load_policy(dir);
  CHECK(q.actor == p.actor);
  CHECK(q.critic == p.critic);
  CHECK(q.weight_bounds == p.weight_bounds);
  CHECK(q.expert_labels == p.expert_labels);
  CHECK_THROWS_AS(load_policy(dir / "missing"), DependencyError);
}
