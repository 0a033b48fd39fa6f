#pragma once

#include <Eigen/Dense>

#include <vector>

#include "mixdistill/nn.hpp"
#include "mixdistill/rng.hpp"

namespace testing {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using mixdistill::nn::Activation;
using mixdistill::nn::Layer;
using mixdistill::nn::Network;

inline VectorXd vec(std::initializer_list<double> xs) {
  VectorXd v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

inline Network single_layer(MatrixXd w, VectorXd b, Activation a) {
  return Network({Layer{std::move(w), std::move(b), a}});
}

/// Random MLP with up to three layers of width up to 16 and mixed activations.
inline Network random_mlp(mixdistill::Rng& rng, int input_dim = -1) {
  const int depth = 1 + static_cast<int>(rng.index(3));
  std::vector<int> widths{input_dim > 0 ? input_dim : 1 + static_cast<int>(rng.index(4))};
  std::vector<Activation> acts;
  const Activation choices[] = {Activation::kRelu, Activation::kTanh, Activation::kSigmoid,
                                Activation::kIdentity};
  for (int l = 0; l < depth; ++l) {
    widths.push_back(1 + static_cast<int>(rng.index(16)));
    acts.push_back(choices[rng.index(4)]);
  }
  Network net = Network::glorot(widths, acts, rng);
  for (std::size_t l = 0; l < net.depth(); ++l) {
    auto& layer = net.mutable_layer(l);
    for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = rng.uniform(-0.5, 0.5);
    layer.weights *= 1.5;
  }
  return net;
}

}  // namespace testing
