#include "mixdistill/nn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mixdistill/errors.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill::nn {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::kRelu:
      return "relu";
    case Activation::kTanh:
      return "tanh";
    case Activation::kSigmoid:
      return "sigmoid";
    case Activation::kIdentity:
      return "identity";
  }
  return "identity";
}

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::kRelu;
  if (name == "tanh") return Activation::kTanh;
  if (name == "sigmoid") return Activation::kSigmoid;
  if (name == "identity" || name == "linear") return Activation::kIdentity;
  throw ConfigError("unsupported activation '" + std::string(name) + "'");
}

namespace {

void apply_activation(Activation a, MatrixXd& z) {
  switch (a) {
    case Activation::kRelu:
      z = z.cwiseMax(0.0);
      break;
    case Activation::kTanh:
      z = z.array().tanh();
      break;
    case Activation::kSigmoid:
      z = (1.0 + (-z.array()).exp()).inverse();
      break;
    case Activation::kIdentity:
      break;
  }
}

// d(activation)/d(pre) expressed through the activation output y.
void scale_by_derivative(Activation a, const MatrixXd& y, MatrixXd& g) {
  switch (a) {
    case Activation::kRelu:
      g = (y.array() > 0.0).select(g, 0.0);
      break;
    case Activation::kTanh:
      g.array() *= 1.0 - y.array().square();
      break;
    case Activation::kSigmoid:
      g.array() *= y.array() * (1.0 - y.array());
      break;
    case Activation::kIdentity:
      break;
  }
}

double activation_slope_bound(Activation a) {
  switch (a) {
    case Activation::kSigmoid:
      return 0.25;
    case Activation::kRelu:
    case Activation::kTanh:
    case Activation::kIdentity:
      return 1.0;
  }
  throw ConfigError("unsupported activation");
}

void check_input(const Network& net, const MatrixXd& inputs) {
  if (net.empty()) throw StateError("network has no layers");
  if (inputs.rows() != net.input_dim()) {
    throw ShapeError("network expects input dimension " + std::to_string(net.input_dim()) +
                     ", got " + std::to_string(inputs.rows()));
  }
  if (!inputs.allFinite()) throw DomainError("network input is not finite");
}

}  // namespace

Network::Network(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

void Network::validate() const {
  if (layers_.empty()) throw ValidationError("network needs at least one layer");
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Layer& l = layers_[k];
    if (l.weights.rows() == 0 || l.weights.cols() == 0) {
      throw ValidationError("layer " + std::to_string(k) + " has an empty weight matrix");
    }
    if (l.bias.size() != l.weights.rows()) {
      throw ValidationError("layer " + std::to_string(k) + " bias length does not match rows");
    }
    if (k + 1 < layers_.size() && layers_[k + 1].in_dim() != l.out_dim()) {
      throw ValidationError("layer " + std::to_string(k + 1) + " expects " +
                            std::to_string(layers_[k + 1].in_dim()) + " inputs but layer " +
                            std::to_string(k) + " produces " + std::to_string(l.out_dim()));
    }
    if (!l.weights.allFinite() || !l.bias.allFinite()) {
      throw ValidationError("layer " + std::to_string(k) + " has non-finite parameters");
    }
  }
}

Network Network::glorot(std::span<const int> widths, std::span<const Activation> activations,
                        Rng& rng) {
  if (widths.size() != activations.size() + 1) {
    throw ShapeError("glorot: need exactly one more width than activations");
  }
  std::vector<Layer> layers;
  for (std::size_t k = 0; k < activations.size(); ++k) {
    const int fan_in = widths[k], fan_out = widths[k + 1];
    if (fan_in <= 0 || fan_out <= 0) throw ShapeError("glorot: widths must be positive");
    const double limit = std::sqrt(6.0 / (fan_in + fan_out));
    Layer l;
    l.weights.resize(fan_out, fan_in);
    for (int i = 0; i < fan_out; ++i) {
      for (int j = 0; j < fan_in; ++j) l.weights(i, j) = rng.uniform(-limit, limit);
    }
    l.bias = VectorXd::Zero(fan_out);
    l.activation = activations[k];
    layers.push_back(std::move(l));
  }
  return Network(std::move(layers));
}

Network Network::mlp(int input_dim, std::span<const int> hidden, int output_dim,
                     Activation hidden_activation, Activation output_activation, Rng& rng) {
  std::vector<int> widths{input_dim};
  widths.insert(widths.end(), hidden.begin(), hidden.end());
  widths.push_back(output_dim);
  std::vector<Activation> acts(hidden.size(), hidden_activation);
  acts.push_back(output_activation);
  return glorot(widths, acts, rng);
}

int Network::input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
int Network::output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }

std::size_t Network::parameter_count() const {
  std::size_t n = 0;
  for (const Layer& l : layers_) n += l.weights.size() + l.bias.size();
  return n;
}

double Network::squared_parameter_norm() const {
  double s = 0.0;
  for (const Layer& l : layers_) s += l.weights.squaredNorm() + l.bias.squaredNorm();
  return s;
}

bool Network::all_finite() const {
  for (const Layer& l : layers_) {
    if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

bool Network::operator==(const Network& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    const Layer& a = layers_[k];
    const Layer& b = other.layers_[k];
    if (a.activation != b.activation || a.weights.rows() != b.weights.rows() ||
        a.weights.cols() != b.weights.cols() || a.weights != b.weights || a.bias != b.bias) {
      return false;
    }
  }
  return true;
}

ParamGrads zero_grads(const Network& net) {
  ParamGrads g;
  g.reserve(net.depth());
  for (const Layer& l : net.layers()) {
    g.push_back({MatrixXd::Zero(l.weights.rows(), l.weights.cols()), VectorXd::Zero(l.bias.size())});
  }
  return g;
}

void accumulate(ParamGrads& into, const ParamGrads& g, double scale) {
  if (into.size() != g.size()) throw ShapeError("accumulate: layer count mismatch");
  for (std::size_t k = 0; k < g.size(); ++k) {
    into[k].weights += scale * g[k].weights;
    into[k].bias += scale * g[k].bias;
  }
}

bool all_finite(const ParamGrads& g) {
  for (const LayerGrad& l : g) {
    if (!l.weights.allFinite() || !l.bias.allFinite()) return false;
  }
  return true;
}

const MatrixXd& Tape::output() const {
  if (post_.empty()) throw StateError("tape holds no forward pass");
  return post_.back();
}

MatrixXd forward_batch(const Network& net, const MatrixXd& inputs) {
  check_input(net, inputs);
  MatrixXd a = inputs;
  for (const Layer& l : net.layers()) {
    MatrixXd z = l.weights * a;
    z.colwise() += l.bias;
    apply_activation(l.activation, z);
    a = std::move(z);
  }
  return a;
}

VectorXd forward(const Network& net, const VectorXd& x) {
  check_input(net, x);
  VectorXd a = x;
  for (const Layer& l : net.layers()) {
    MatrixXd z = l.weights * a + l.bias;
    apply_activation(l.activation, z);
    a = z;
  }
  return a;
}

Tape record(const Network& net, const MatrixXd& inputs) {
  check_input(net, inputs);
  Tape tape;
  tape.input_ = inputs;
  tape.post_.reserve(net.depth());
  const MatrixXd* a = &tape.input_;
  for (const Layer& l : net.layers()) {
    MatrixXd z = l.weights * *a;
    z.colwise() += l.bias;
    apply_activation(l.activation, z);
    tape.post_.push_back(std::move(z));
    a = &tape.post_.back();
  }
  return tape;
}

Tape record(const Network& net, const VectorXd& x) { return record(net, MatrixXd(x)); }

BatchGradients backward_batch(const Network& net, const Tape& tape, const MatrixXd& upstream) {
  if (!tape.recorded()) throw StateError("backward called without a recorded forward pass");
  if (tape.post_.size() != net.depth() || tape.input_.rows() != net.input_dim()) {
    throw StateError("tape was recorded on a differently shaped network");
  }
  if (upstream.rows() != net.output_dim() || upstream.cols() != tape.batch_size()) {
    throw ShapeError("upstream gradient shape does not match network output batch");
  }
  BatchGradients out;
  out.params.resize(net.depth());
  MatrixXd g = upstream;
  for (std::size_t k = net.depth(); k-- > 0;) {
    const Layer& l = net.layer(k);
    scale_by_derivative(l.activation, tape.post_[k], g);
    const MatrixXd& a_in = k == 0 ? tape.input_ : tape.post_[k - 1];
    out.params[k].weights.noalias() = g * a_in.transpose();
    out.params[k].bias = g.rowwise().sum();
    g = l.weights.transpose() * g;
  }
  out.inputs = std::move(g);
  return out;
}

GradientBundle backward(const Network& net, const Tape& tape, const VectorXd& upstream) {
  if (!tape.recorded()) throw StateError("backward called without a recorded forward pass");
  if (tape.batch_size() != 1) throw StateError("backward expects a single-sample tape");
  BatchGradients b = backward_batch(net, tape, MatrixXd(upstream));
  return {std::move(b.params), b.inputs.col(0)};
}

double operator_norm(const MatrixXd& w, Norm norm) {
  if (w.size() == 0) return 0.0;
  if (norm == Norm::kOperatorInf) return w.cwiseAbs().rowwise().sum().maxCoeff();
  Eigen::JacobiSVD<MatrixXd> svd(w);
  return svd.singularValues()(0);
}

double lipschitz_upper_bound(const Network& net, Norm norm) {
  if (net.empty()) throw StateError("lipschitz_upper_bound: empty network");
  double bound = 1.0;
  for (const Layer& l : net.layers()) {
    bound *= activation_slope_bound(l.activation) * operator_norm(l.weights, norm);
  }
  return bound;
}

Adam::Adam(const Network& net, AdamConfig config)
    : config_(config), m_(zero_grads(net)), v_(zero_grads(net)) {}

void Adam::step(Network& net, const ParamGrads& grads) {
  if (grads.size() != net.depth() || m_.size() != net.depth()) {
    throw ShapeError("Adam::step: gradient layer count does not match network");
  }
  for (std::size_t k = 0; k < grads.size(); ++k) {
    const Layer& l = net.layer(k);
    if (grads[k].weights.rows() != l.weights.rows() || grads[k].weights.cols() != l.weights.cols() ||
        grads[k].bias.size() != l.bias.size()) {
      throw ShapeError("Adam::step: gradient shape mismatch at layer " + std::to_string(k));
    }
  }
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double lr = config_.learning_rate;
  const double eps = config_.epsilon;
  auto update = [&](auto& param, auto& m, auto& v, const auto& g) {
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g.cwiseProduct(g);
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  };
  for (std::size_t k = 0; k < grads.size(); ++k) {
    Layer& l = net.mutable_layer(k);
    update(l.weights, m_[k].weights, v_[k].weights, grads[k].weights);
    update(l.bias, m_[k].bias, v_[k].bias, grads[k].bias);
  }
}

void soft_update(Network& target, const Network& source, double tau) {
  if (target.depth() != source.depth()) throw ShapeError("soft_update: depth mismatch");
  for (std::size_t k = 0; k < source.depth(); ++k) {
    Layer& t = target.mutable_layer(k);
    const Layer& s = source.layer(k);
    if (t.weights.rows() != s.weights.rows() || t.weights.cols() != s.weights.cols()) {
      throw ShapeError("soft_update: shape mismatch");
    }
    t.weights = (1.0 - tau) * t.weights + tau * s.weights;
    t.bias = (1.0 - tau) * t.bias + tau * s.bias;
  }
}

// ---- serialization ----

namespace {

constexpr int kFormatVersion = 1;

std::size_t line_of(std::string_view text, std::size_t byte) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') ++line;
  }
  return line;
}

template <typename T>
T require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) {
    throw ParseError(where + ": missing field '" + key + "'", 0);
  }
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ParseError(where + ": field '" + key + "' has the wrong type", 0);
  }
}

}  // namespace

json to_json(const Network& net) {
  json layers = json::array();
  for (const Layer& l : net.layers()) {
    std::vector<double> w;
    w.reserve(l.weights.size());
    for (int i = 0; i < l.weights.rows(); ++i) {
      for (int j = 0; j < l.weights.cols(); ++j) w.push_back(l.weights(i, j));
    }
    layers.push_back({{"activation", to_string(l.activation)},
                      {"rows", l.weights.rows()},
                      {"cols", l.weights.cols()},
                      {"weights", w},
                      {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  return {{"version", kFormatVersion}, {"input_dim", net.input_dim()}, {"layers", layers}};
}

Network network_from_json(const json& doc) {
  const int version = require<int>(doc, "version", "network");
  if (version != kFormatVersion) {
    throw ValidationError("unsupported network format version " + std::to_string(version) +
                          " (supported: " + std::to_string(kFormatVersion) + ")");
  }
  const int input_dim = require<int>(doc, "input_dim", "network");
  const json layers_doc = require<json>(doc, "layers", "network");
  if (!layers_doc.is_array()) throw ParseError("network: 'layers' must be an array", 0);
  std::vector<Layer> layers;
  for (std::size_t k = 0; k < layers_doc.size(); ++k) {
    const std::string where = "layer " + std::to_string(k);
    const json& ld = layers_doc[k];
    const int rows = require<int>(ld, "rows", where);
    const int cols = require<int>(ld, "cols", where);
    const auto w = require<std::vector<double>>(ld, "weights", where);
    const auto b = require<std::vector<double>>(ld, "bias", where);
    if (rows <= 0 || cols <= 0) throw ValidationError(where + ": rows and cols must be positive");
    if (w.size() != static_cast<std::size_t>(rows) * cols) {
      throw ValidationError(where + ": expected " + std::to_string(rows * cols) + " weights, got " +
                            std::to_string(w.size()));
    }
    if (b.size() != static_cast<std::size_t>(rows)) {
      throw ValidationError(where + ": bias length must equal rows");
    }
    Layer l;
    l.activation = parse_activation(require<std::string>(ld, "activation", where));
    l.weights.resize(rows, cols);
    for (int i = 0; i < rows; ++i) {
      for (int j = 0; j < cols; ++j) l.weights(i, j) = w[static_cast<std::size_t>(i) * cols + j];
    }
    l.bias = Eigen::Map<const VectorXd>(b.data(), rows);
    layers.push_back(std::move(l));
  }
  if (!layers.empty() && layers.front().in_dim() != input_dim) {
    throw ValidationError("network: input_dim does not match first layer cols");
  }
  return Network(std::move(layers));
}

Network parse_network(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("network: malformed JSON: ") + e.what(), line_of(text, e.byte));
  }
  return network_from_json(doc);
}

void save_network(const Network& net, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << to_json(net).dump(1) << '\n';
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

Network load_network(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot open network file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_network(ss.str());
}

}  // namespace mixdistill::nn
