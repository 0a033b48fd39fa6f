#include <doctest.h>

#include <filesystem>

#include "helpers.hpp"
#include "mixdistill/distill.hpp"
#include "mixdistill/errors.hpp"

using namespace mixdistill;
using namespace testing;

namespace {

Network scalar_linear(double w) {
  return single_layer(MatrixXd::Constant(1, 1, w), VectorXd::Zero(1), Activation::kIdentity);
}

DistillDataset toy_dataset(int n, std::uint64_t seed) {
  DistillDataset d;
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    const VectorXd s = vec({rng.uniform(-1, 1), rng.uniform(-1, 1)});
    d.add(s, vec({std::sin(2 * s[0]) - s[1]}), "toy");
  }
  return d;
}

}  // namespace

TEST_CASE("FGSM perturbation") {
  const Network k = scalar_linear(2.0);
  const VectorXd d = fgsm_perturb(k, vec({1.0}), vec({0.0}), vec({0.1}));
  CHECK(d[0] == 0.1);
  const auto loss = [&](double s) { return square(nn::forward(k, vec({s}))[0]); };
  CHECK(loss(1.1) > loss(1.0));

  CHECK(fgsm_perturb(k, vec({1.0}), vec({2.0}), vec({0.1}))[0] == 0.0);
  CHECK(fgsm_perturb(k, vec({1.0}), vec({0.0}), vec({0.0}))[0] == 0.0);

  MatrixXd xs(1, 2), ts(1, 2);
  xs << 1.0, -1.0;
  ts << 0.0, 0.0;
  const MatrixXd db = fgsm_perturb_batch(k, xs, ts, vec({0.1}));
  CHECK(db(0, 0) == 0.1);
  CHECK(db(0, 1) == -0.1);
}

TEST_CASE("degenerate robust steps reduce to plain regression") {
  const DistillDataset data = toy_dataset(64, 1);
  MatrixXd s(2, 64), u(1, 64);
  for (int i = 0; i < 64; ++i) {
    s.col(i) = data.states[i];
    u.col(i) = data.controls[i];
  }
  DistillConfig plain;
  plain.adversarial_prob = 0.0;
  plain.perturbation_bound = vec({0.3, 0.3});
  plain.seed = 4;
  DistillConfig no_delta = plain;
  no_delta.adversarial_prob = 1.0;
  no_delta.perturbation_bound = VectorXd::Zero(2);

  Network a = init_student(2, 1, plain), b = init_student(2, 1, no_delta);
  CHECK(a == b);
  nn::Adam oa(a, {}), ob(b, {});
  Rng ra(1), rb(1);
  for (int k = 0; k < 5; ++k) {
    const DistillStep sa = robust_distill_step(a, oa, s, u, plain, ra);
    const DistillStep sb = robust_distill_step(b, ob, s, u, no_delta, rb);
    CHECK_FALSE(sa.adversarial);
    CHECK(sb.adversarial);
    CHECK(sa.inputs == s);
    CHECK(sb.inputs == s);
    CHECK(sa.loss == sb.loss);
  }
  CHECK(a == b);
}

TEST_CASE("an overparameterized student interpolates ten pairs") {
  const DistillDataset data = toy_dataset(10, 2);
  DistillConfig cfg = DistillConfig{}.direct();
  cfg.hidden = {32, 32};
  cfg.epochs = 3000;
  cfg.batch_size = 10;
  cfg.learning_rate = 3e-3;
  cfg.seed = 2;
  const DistillResult r = distill(data, cfg);
  CHECK(r.report.final_mse <= 1e-4);
}

TEST_CASE("distill: no-op, determinism, errors") {
  const DistillDataset data = toy_dataset(200, 3);
  DistillConfig cfg;
  cfg.epochs = 0;
  cfg.seed = 9;
  CHECK(distill(data, cfg).student == init_student(2, 1, cfg));
  cfg.epochs = 3;
  const DistillResult a = distill(data, cfg), b = distill(data, cfg);
  CHECK(a.student == b.student);
  CHECK(a.report.epoch_loss == b.report.epoch_loss);
  CHECK_THROWS_AS(distill(DistillDataset{}, cfg), InputError);

  DistillConfig bad;
  bad.adversarial_prob = 1.5;
  CHECK_THROWS_AS(bad.validate(2), ValidationError);
  bad = DistillConfig{};
  bad.perturbation_bound = vec({0.1});
  CHECK_THROWS_AS(bad.validate(2), ValidationError);
}

TEST_CASE("robust regularization lowers the Lipschitz bound on a paired run") {
  const DistillDataset data = toy_dataset(2000, 4);
  DistillConfig robust;
  robust.perturbation_bound = vec({0.1, 0.1});
  robust.epochs = 30;
  robust.seed = 5;
  const DistillResult star = distill(data, robust);
  const DistillResult direct = distill(data, robust.direct());
  CHECK(star.report.lipschitz < direct.report.lipschitz);
}

TEST_CASE("teacher data collection") {
  const SystemSpec vdp = builtin_system("vanderpol");
  MatrixXd k(1, 2);
  k << -4, -30;
  const std::vector<Expert> experts{Expert::linear(k, VectorXd::Zero(1), "steep")};
  const Controller teacher = make_fixed_weight_controller(vec({1}), experts, vdp);
  Rng rng(1);
  CHECK(collect_teacher_data(teacher, vdp, 0, CollectMode::kRollout, rng).empty());

  const DistillDataset grid = collect_teacher_data(teacher, vdp, 300, CollectMode::kGrid, rng);
  REQUIRE(grid.size() == 300);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    CHECK(grid.controls[i] == vdp.input_bound.clamp(experts[0].evaluate(grid.states[i])));
  }

  const DistillDataset roll = collect_teacher_data(teacher, vdp, 10000, CollectMode::kRollout, rng);
  CHECK(roll.size() == 10000);
  bool saturated = false;
  for (const auto& u : roll.controls) {
    CHECK(vdp.input_bound.contains(u));
    saturated = saturated || std::abs(u[0]) == 20.0;
  }
  CHECK(saturated);
  CHECK_THROWS_AS(parse_collect_mode("random"), ConfigError);
}

TEST_CASE("dataset CSV round trip") {
  const DistillDataset d = toy_dataset(20, 6);
  const auto path = std::filesystem::temp_directory_path() / "mixdistill_dataset.csv";
  save_dataset(d, path);
  const DistillDataset back = load_dataset(path);
  CHECK(back.states == d.states);
  CHECK(back.controls == d.controls);
  CHECK(back.provenance == d.provenance);
}

TEST_CASE("default perturbation bound is a fraction of the half-range") {
  const SystemSpec vdp = builtin_system("vanderpol");
  CHECK(default_perturbation_bound(vdp) == vec({0.2, 0.2}));
  const SystemSpec cp = builtin_system("cartpole");
  const VectorXd b = default_perturbation_bound(cp);
  CHECK(b[0] == doctest::Approx(0.24));
  CHECK(b[1] == doctest::Approx(0.02));
}
