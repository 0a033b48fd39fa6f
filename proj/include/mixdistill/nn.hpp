#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mixdistill {
class Rng;
}

namespace mixdistill::nn {

enum class Activation { kRelu, kTanh, kSigmoid, kIdentity };

std::string_view to_string(Activation a);
/// Throws ConfigError on unknown names.
Activation parse_activation(std::string_view name);

struct Layer {
  Eigen::MatrixXd weights;  // out x in
  Eigen::VectorXd bias;     // out
  Activation activation = Activation::kIdentity;

  int in_dim() const { return static_cast<int>(weights.cols()); }
  int out_dim() const { return static_cast<int>(weights.rows()); }
};

/// Sequential fully-connected network. Construction validates that layer
/// dimensions chain and that every parameter is finite.
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<Layer> layers);

  /// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
  /// `widths` includes the input width, so it has one more entry than
  /// `activations`.
  static Network glorot(std::span<const int> widths, std::span<const Activation> activations,
                        Rng& rng);

  /// Hidden layers share one activation, the output layer has its own.
  static Network mlp(int input_dim, std::span<const int> hidden, int output_dim,
                     Activation hidden_activation, Activation output_activation, Rng& rng);

  bool empty() const { return layers_.empty(); }
  int input_dim() const;
  int output_dim() const;
  std::size_t depth() const { return layers_.size(); }
  const std::vector<Layer>& layers() const { return layers_; }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  /// Mutable access for optimizers. Callers keep shapes intact.
  Layer& mutable_layer(std::size_t i) { return layers_.at(i); }

  std::size_t parameter_count() const;
  double squared_parameter_norm() const;
  bool all_finite() const;
  void validate() const;

  bool operator==(const Network& other) const;

 private:
  std::vector<Layer> layers_;
};

/// Per-layer parameter gradients, shaped like the network.
struct LayerGrad {
  Eigen::MatrixXd weights;
  Eigen::VectorXd bias;
};
using ParamGrads = std::vector<LayerGrad>;

ParamGrads zero_grads(const Network& net);
void accumulate(ParamGrads& into, const ParamGrads& g, double scale = 1.0);
bool all_finite(const ParamGrads& g);

struct GradientBundle {
  ParamGrads params;
  Eigen::VectorXd input;
};

/// Batched gradients: parameter gradients summed over the batch, input
/// gradients one column per sample.
struct BatchGradients {
  ParamGrads params;
  Eigen::MatrixXd inputs;
};

/// Activations recorded by a forward pass, one column per sample.
class Tape {
 public:
  bool recorded() const { return !post_.empty(); }
  Eigen::Index batch_size() const { return input_.cols(); }
  const Eigen::MatrixXd& input() const { return input_; }
  const Eigen::MatrixXd& output() const;

 private:
  friend Tape record(const Network&, const Eigen::MatrixXd&);
  friend BatchGradients backward_batch(const Network&, const Tape&, const Eigen::MatrixXd&);

  Eigen::MatrixXd input_;
  std::vector<Eigen::MatrixXd> post_;  // activation output per layer
};

Eigen::VectorXd forward(const Network& net, const Eigen::VectorXd& x);
Eigen::MatrixXd forward_batch(const Network& net, const Eigen::MatrixXd& inputs);

/// Forward pass that keeps what the backward pass needs.
Tape record(const Network& net, const Eigen::MatrixXd& inputs);
Tape record(const Network& net, const Eigen::VectorXd& x);

/// Gradient of upstream . net(x) with respect to parameters and input.
/// Throws StateError when the tape holds no pass or more than one sample.
GradientBundle backward(const Network& net, const Tape& tape, const Eigen::VectorXd& upstream);
BatchGradients backward_batch(const Network& net, const Tape& tape,
                              const Eigen::MatrixXd& upstream);

enum class Norm { kOperator2, kOperatorInf };

/// Product over layers of (activation slope bound) * ||W||. Sigmoid layers
/// contribute 1/4, all other activations 1.
double lipschitz_upper_bound(const Network& net, Norm norm = Norm::kOperator2);
/// Largest singular value, or max absolute row sum for kOperatorInf.
double operator_norm(const Eigen::MatrixXd& w, Norm norm);

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adaptive-moment optimizer state for one network.
class Adam {
 public:
  Adam() = default;
  Adam(const Network& net, AdamConfig config);

  /// One descent step along `grads`.
  void step(Network& net, const ParamGrads& grads);

  long steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  void set_learning_rate(double lr) { config_.learning_rate = lr; }

 private:
  AdamConfig config_;
  ParamGrads m_;
  ParamGrads v_;
  long steps_ = 0;
};

/// Polyak averaging: target <- (1 - tau) * target + tau * source.
void soft_update(Network& target, const Network& source, double tau);

nlohmann::json to_json(const Network& net);
/// Throws ParseError for schema problems and ValidationError for
/// inconsistent dimensions.
Network network_from_json(const nlohmann::json& doc);

void save_network(const Network& net, const std::filesystem::path& path);
Network load_network(const std::filesystem::path& path);
Network parse_network(std::string_view text);

}  // namespace mixdistill::nn
