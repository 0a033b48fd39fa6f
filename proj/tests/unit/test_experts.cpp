#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "helpers.hpp"
#include "mixdistill/errors.hpp"
#include "mixdistill/experts.hpp"

using namespace mixdistill;
using namespace testing;

#ifndef MIXDISTILL_TEST_DATA
#define MIXDISTILL_TEST_DATA "."
#endif

TEST_CASE("linear, neural and polynomial experts evaluate") {
  MatrixXd k(1, 2);
  k << -1, -1;
  CHECK(Expert::linear(k, VectorXd::Zero(1), "lin").evaluate(vec({1, 1}))[0] == -2.0);

  const Network zero({Layer{MatrixXd::Zero(4, 2), VectorXd::Zero(4), Activation::kTanh},
                      Layer{MatrixXd::Zero(1, 4), VectorXd::Zero(1), Activation::kIdentity}});
  const Expert nz = Expert::neural(zero, "zero");
  CHECK(nz.evaluate(vec({0.7, -1.3}))[0] == 0.0);

  Polynomial p{3, {{-1, {1, 0, 0}}, {-1, {0, 1, 0}}, {-1, {0, 0, 1}}}};
  const Expert pe = Expert::polynomial({p}, "poly");
  CHECK(pe.evaluate(vec({0.1, 0.2, 0.3}))[0] == doctest::Approx(-0.6));
  CHECK(pe.network() == nullptr);
}

TEST_CASE("experts are checked against the plant") {
  const SystemSpec vdp = builtin_system("vanderpol");
  const Expert wrong = Expert::linear(MatrixXd::Ones(2, 2), VectorXd::Zero(2), "two_outputs");
  CHECK_THROWS_AS(wrong.check_against(vdp), ValidationError);
  Expert::linear(MatrixXd::Ones(1, 2), VectorXd::Zero(1), "ok").check_against(vdp);
}

TEST_CASE("scalar LQR") {
  const MatrixXd one = MatrixXd::Ones(1, 1);
  const LqrResult r = lqr_synthesize(one, one, one, one);
  const double golden = (1.0 + std::sqrt(5.0)) / 2.0;
  CHECK(r.cost_to_go(0, 0) == doctest::Approx(golden).epsilon(1e-9));
  CHECK(r.gain(0, 0) == doctest::Approx(golden / (1.0 + golden)).epsilon(1e-9));
  CHECK(riccati_residual(one, one, one, one, r.cost_to_go) <= 1e-9);

  const LqrResult z = lqr_synthesize(MatrixXd::Zero(1, 1), one, one, one);
  CHECK(z.cost_to_go(0, 0) == doctest::Approx(1.0));
  CHECK(z.gain(0, 0) == doctest::Approx(0.0));

  // Uncontrollable unstable mode.
  CHECK_THROWS_AS(lqr_synthesize(MatrixXd::Constant(1, 1, 2.0), MatrixXd::Zero(1, 1), one, one),
                  SynthesisError);
}

TEST_CASE("cartpole LQR stabilizes the upright linearization") {
  const SystemSpec cp = builtin_system("cartpole");
  const auto [a, b] = linearize(cp, VectorXd::Zero(4), VectorXd::Zero(1));
  const LqrResult r = lqr_synthesize(a, b, MatrixXd::Identity(4, 4), MatrixXd::Identity(1, 1));
  CHECK(spectral_radius(a - b * r.gain) < 1.0);
  CHECK(r.closed_loop_spectral_radius < 1.0);
}

TEST_CASE("expert files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "mixdistill_expert_test";
  std::filesystem::create_directories(dir);
  Rng rng(21);
  const int widths[] = {2, 8, 1};
  const Activation acts[] = {Activation::kTanh, Activation::kIdentity};
  const Expert e = Expert::neural(Network::glorot(widths, acts, rng), "n");
  save_expert(e, dir / "n.json");
  const Expert back = load_expert(dir / "n.json");
  for (int i = 0; i < 100; ++i) {
    const VectorXd s = VectorXd::Random(2);
    CHECK(back.evaluate(s) == e.evaluate(s));
  }
  const Expert lin = Expert::linear(MatrixXd::Constant(1, 2, -0.5), vec({0.25}), "l");
  save_expert(lin, dir / "l.json");
  CHECK(load_expert(dir / "l.json").evaluate(vec({1, 2}))[0] == lin.evaluate(vec({1, 2}))[0]);

  const SystemSpec s3 = builtin_system("system3d");
  CHECK_THROWS_AS(load_expert(dir / "n.json", s3), ValidationError);
}

TEST_CASE("polynomial expert fixture for the 3D system") {
  const SystemSpec s3 = builtin_system("system3d");
  const Expert e = load_expert(std::filesystem::path(MIXDISTILL_TEST_DATA) / "system3d_poly_expert.json", s3);
  CHECK(e.kind() == Expert::Kind::kPolynomial);
  const VectorXd s = vec({0.1, 0.2, 0.3});
  const double expected = -0.9414 * 0.1 - 2.3441 * 0.2 - 2.3891 * 0.3 - 0.4707 * 0.09;
  CHECK(e.evaluate(s)[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("ddpg: no-op training and determinism") {
  const SystemSpec vdp = builtin_system("vanderpol");
  DdpgConfig cfg;
  cfg.episodes = 0;
  cfg.eval_samples = 4;
  cfg.seed = 5;
  const DdpgResult a = ddpg_train(vdp, cfg);
  const DdpgResult b = ddpg_train(vdp, cfg);
  CHECK(*a.expert.network() == *b.expert.network());
  CHECK(a.episode_returns.empty());

  cfg.episodes = 10;
  cfg.warmup_steps = 0;
  const DdpgResult c = ddpg_train(vdp, cfg);
  const DdpgResult d = ddpg_train(vdp, cfg);
  CHECK(*c.expert.network() == *d.expert.network());
  CHECK_FALSE(*c.expert.network() == *a.expert.network());
}
