#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "mixdistill/errors.hpp"

using namespace mixdistill;
using namespace testing;

TEST_CASE("forward on hand-sized networks") {
  const Network id = single_layer(MatrixXd::Identity(2, 2), VectorXd::Zero(2), Activation::kIdentity);
  CHECK(nn::forward(id, vec({3, -1})) == vec({3, -1}));

  MatrixXd w(1, 2);
  w << 1, 0;
  CHECK(nn::forward(single_layer(w, vec({0}), Activation::kTanh), vec({0, 5}))[0] == 0.0);

  w << 1, 2;
  const double y = nn::forward(single_layer(w, vec({0.5}), Activation::kTanh), vec({1, 1}))[0];
  CHECK(y == doctest::Approx(0.998178).epsilon(1e-6));
  CHECK(y == std::tanh(3.5));
}

TEST_CASE("forward rejects bad inputs") {
  const Network id = single_layer(MatrixXd::Identity(2, 2), VectorXd::Zero(2), Activation::kIdentity);
  CHECK_THROWS_AS(nn::forward(id, vec({1, 2, 3})), ShapeError);
  CHECK_THROWS_AS(nn::forward(id, vec({1, NAN})), DomainError);
}

TEST_CASE("network construction validates chaining and finiteness") {
  Layer a{MatrixXd::Ones(3, 2), VectorXd::Zero(3), Activation::kRelu};
  Layer b{MatrixXd::Ones(1, 4), VectorXd::Zero(1), Activation::kIdentity};
  CHECK_THROWS_AS(Network({a, b}), ValidationError);
  Layer c{MatrixXd::Ones(1, 3), VectorXd::Constant(1, INFINITY), Activation::kIdentity};
  CHECK_THROWS_AS(Network({a, c}), ValidationError);
}

TEST_CASE("backward basics") {
  const Network id = single_layer(MatrixXd::Identity(2, 2), VectorXd::Zero(2), Activation::kIdentity);
  const auto g = nn::backward(id, nn::record(id, vec({0.3, -2})), vec({1, 0}));
  CHECK(g.input == vec({1, 0}));

  Rng rng(7);
  const Network net = random_mlp(rng, 3);
  const auto z = nn::backward(net, nn::record(net, vec({0.1, 0.2, 0.3})), VectorXd::Zero(net.output_dim()));
  CHECK(z.input.isZero(0));
  for (const auto& l : z.params) {
    CHECK(l.weights.isZero(0));
    CHECK(l.bias.isZero(0));
  }
}

TEST_CASE("backward needs a single-sample tape") {
  Rng rng(3);
  const Network net = random_mlp(rng, 2);
  CHECK_THROWS_AS(nn::backward(net, nn::Tape{}, VectorXd::Ones(net.output_dim())), StateError);
  MatrixXd batch = MatrixXd::Random(2, 4);
  CHECK_THROWS_AS(nn::backward(net, nn::record(net, batch), VectorXd::Ones(net.output_dim())), StateError);
}

TEST_CASE("input gradient of a two-layer tanh net matches finite differences") {
  Rng rng(11);
  const int widths[] = {3, 8, 2};
  const Activation acts[] = {Activation::kTanh, Activation::kTanh};
  const Network net = Network::glorot(widths, acts, rng);
  const VectorXd x = vec({0.3, -0.7, 0.2});
  const VectorXd up = vec({0.6, -1.1});
  const auto g = nn::backward(net, nn::record(net, x), up);
  const double h = 1e-5;
  for (int i = 0; i < 3; ++i) {
    VectorXd xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (up.dot(nn::forward(net, xp)) - up.dot(nn::forward(net, xm))) / (2 * h);
    CHECK(std::abs(fd - g.input[i]) <= 1e-4 * std::max(1.0, std::abs(fd)));
  }
}

TEST_CASE("batched backward sums parameter gradients over samples") {
  Rng rng(5);
  const Network net = random_mlp(rng, 2);
  MatrixXd xs(2, 3);
  xs << 0.1, -0.4, 0.9, 0.3, 0.2, -0.5;
  MatrixXd up = MatrixXd::Ones(net.output_dim(), 3);
  const auto batch = nn::backward_batch(net, nn::record(net, xs), up);
  auto sum = nn::zero_grads(net);
  for (int k = 0; k < 3; ++k) {
    const auto g = nn::backward(net, nn::record(net, VectorXd(xs.col(k))), VectorXd(up.col(k)));
    nn::accumulate(sum, g.params);
    CHECK(batch.inputs.col(k).isApprox(g.input, 1e-12));
  }
  for (std::size_t l = 0; l < sum.size(); ++l) CHECK(batch.params[l].weights.isApprox(sum[l].weights, 1e-12));
}

TEST_CASE("lipschitz bound examples") {
  const MatrixXd two = 2.0 * MatrixXd::Identity(2, 2);
  CHECK(nn::lipschitz_upper_bound(single_layer(two, VectorXd::Zero(2), Activation::kIdentity)) ==
        doctest::Approx(2.0));
  CHECK(nn::lipschitz_upper_bound(single_layer(two, VectorXd::Zero(2), Activation::kSigmoid)) ==
        doctest::Approx(0.5));
  const Network chain({Layer{MatrixXd::Constant(1, 1, 3), VectorXd::Zero(1), Activation::kTanh},
                       Layer{MatrixXd::Constant(1, 1, 2), VectorXd::Zero(1), Activation::kTanh}});
  CHECK(nn::lipschitz_upper_bound(chain) == doctest::Approx(6.0));
  Rng rng(2);
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.uniform(-3, 3), y = rng.uniform(-3, 3);
    if (x == y) continue;
    const double slope = std::abs(nn::forward(chain, vec({x}))[0] - nn::forward(chain, vec({y}))[0]) / std::abs(x - y);
    CHECK(slope <= 6.0);
  }
}

TEST_CASE("operator norms") {
  MatrixXd w(2, 2);
  w << 1, -2, 3, 4;
  CHECK(nn::operator_norm(w, nn::Norm::kOperatorInf) == doctest::Approx(7.0));
  Eigen::JacobiSVD<MatrixXd> svd(w);
  CHECK(nn::operator_norm(w, nn::Norm::kOperator2) == doctest::Approx(svd.singularValues()[0]));
}

TEST_CASE("adam") {
  Network net = single_layer(MatrixXd::Constant(1, 1, 1.0), VectorXd::Zero(1), Activation::kIdentity);
  nn::Adam opt(net, {.learning_rate = 0.1});

  auto zero = nn::zero_grads(net);
  opt.step(net, zero);
  CHECK(net.layer(0).weights(0, 0) == 1.0);

  auto g = nn::zero_grads(net);
  g[0].weights(0, 0) = 1.0;
  opt.step(net, g);
  CHECK(net.layer(0).weights(0, 0) < 1.0);
  CHECK(opt.steps() == 2);

  // (w - 3)^2 from w = 0
  net.mutable_layer(0).weights(0, 0) = 0.0;
  nn::Adam quad(net, {.learning_rate = 0.05});
  for (int i = 0; i < 2000; ++i) {
    auto gq = nn::zero_grads(net);
    gq[0].weights(0, 0) = 2.0 * (net.layer(0).weights(0, 0) - 3.0);
    quad.step(net, gq);
  }
  CHECK(std::abs(net.layer(0).weights(0, 0) - 3.0) < 1e-3);
}

TEST_CASE("serialization round trip is bit exact") {
  Rng rng(99);
  const auto dir = std::filesystem::temp_directory_path() / "mixdistill_nn_test";
  std::filesystem::create_directories(dir);
  for (int k = 0; k < 5; ++k) {
    const Network net = random_mlp(rng, 3);
    const auto path = dir / ("net" + std::to_string(k) + ".json");
    nn::save_network(net, path);
    const Network back = nn::load_network(path);
    CHECK(back == net);
    for (int i = 0; i < 100; ++i) {
      const VectorXd x = VectorXd::Random(3);
      CHECK(nn::forward(back, x) == nn::forward(net, x));
    }
  }
}

TEST_CASE("network file rejections") {
  CHECK_THROWS_AS(nn::parse_network(R"({"version": 2, "input_dim": 1, "layers": []})"), ValidationError);
  CHECK_THROWS_AS(nn::parse_network(R"({"version": 1, "input_dim": 2, "layers": [
      {"activation": "relu", "rows": 1, "cols": 2, "weights": [1, 2], "bias": [0]},
      {"activation": "relu", "rows": 1, "cols": 3, "weights": [1, 2, 3], "bias": [0]}]})"),
                  ValidationError);
  try {
    nn::parse_network("{\n\"version\": 1,\n\"input_dim\": ]");
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  CHECK_THROWS_AS(nn::parse_activation("swish"), ConfigError);
}

TEST_CASE("soft update interpolates") {
  Network a = single_layer(MatrixXd::Constant(1, 1, 0.0), VectorXd::Zero(1), Activation::kIdentity);
  const Network b = single_layer(MatrixXd::Constant(1, 1, 1.0), VectorXd::Ones(1), Activation::kIdentity);
  nn::soft_update(a, b, 0.25);
  CHECK(a.layer(0).weights(0, 0) == doctest::Approx(0.25));
  CHECK(a.layer(0).bias(0) == doctest::Approx(0.25));
}
