#include "mixdistill/experts.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <fstream>
#include <sstream>

#include "mixdistill/errors.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

Expert Expert::neural(nn::Network net, std::string label) {
  net.validate();
  Expert e;
  e.kind_ = Kind::kNeural;
  e.label_ = std::move(label);
  e.state_dim_ = net.input_dim();
  e.output_dim_ = net.output_dim();
  e.network_ = std::move(net);
  return e;
}

Expert Expert::linear(MatrixXd gain, VectorXd offset, std::string label) {
  if (offset.size() != gain.rows()) throw ShapeError("linear expert: offset length != gain rows");
  nn::Layer layer{std::move(gain), std::move(offset), nn::Activation::kIdentity};
  Expert e;
  e.kind_ = Kind::kLinear;
  e.label_ = std::move(label);
  e.state_dim_ = layer.in_dim();
  e.output_dim_ = layer.out_dim();
  e.network_ = nn::Network({std::move(layer)});
  return e;
}

Expert Expert::polynomial(std::vector<Polynomial> outputs, std::string label) {
  if (outputs.empty()) throw ShapeError("polynomial expert needs at least one output");
  for (const Polynomial& p : outputs) {
    if (p.num_vars != outputs.front().num_vars) {
      throw ShapeError("polynomial expert outputs disagree on the variable count");
    }
    p.validate();
  }
  Expert e;
  e.kind_ = Kind::kPolynomial;
  e.label_ = std::move(label);
  e.state_dim_ = outputs.front().num_vars;
  e.output_dim_ = static_cast<int>(outputs.size());
  e.polynomials_ = std::move(outputs);
  return e;
}

VectorXd Expert::evaluate(const VectorXd& s) const {
  if (s.size() != state_dim_) throw ShapeError("expert '" + label_ + "': state dimension mismatch");
  if (kind_ == Kind::kPolynomial) {
    VectorXd u(output_dim_);
    std::span<const double> vars(s.data(), static_cast<std::size_t>(s.size()));
    for (int i = 0; i < output_dim_; ++i) u[i] = polynomials_[i].evaluate<double>(vars);
    return u;
  }
  if (kind_ == Kind::kLinear) {
    const nn::Layer& l = network_->layer(0);
    return l.weights * s + l.bias;
  }
  return nn::forward(*network_, s);
}

void Expert::check_against(const SystemSpec& spec) const {
  if (state_dim_ != spec.state_dim) {
    throw ValidationError("expert '" + label_ + "' reads " + std::to_string(state_dim_) +
                          " state components, " + spec.name + " has " +
                          std::to_string(spec.state_dim));
  }
  if (output_dim_ != spec.input_dim) {
    throw ValidationError("expert '" + label_ + "' produces " + std::to_string(output_dim_) +
                          " controls, " + spec.name + " takes " + std::to_string(spec.input_dim));
  }
}

// ---- LQR ----

namespace {

MatrixXd riccati_map(const MatrixXd& a, const MatrixXd& b, const MatrixXd& q, const MatrixXd& r,
                     const MatrixXd& p) {
  const MatrixXd bp = b.transpose() * p;
  const MatrixXd s = r + bp * b;
  return q + a.transpose() * p * a - a.transpose() * bp.transpose() * s.ldlt().solve(bp * a);
}

}  // namespace

double riccati_residual(const MatrixXd& a, const MatrixXd& b, const MatrixXd& q, const MatrixXd& r,
                        const MatrixXd& p) {
  return (p - riccati_map(a, b, q, r, p)).cwiseAbs().maxCoeff();
}

double spectral_radius(const MatrixXd& m) {
  Eigen::EigenSolver<MatrixXd> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

LqrResult lqr_synthesize(const MatrixXd& a, const MatrixXd& b, const MatrixXd& q, const MatrixXd& r,
                         const std::string& label, double tolerance, int max_iterations) {
  const Eigen::Index n = a.rows(), m = b.cols();
  if (a.cols() != n || b.rows() != n || q.rows() != n || q.cols() != n || r.rows() != m ||
      r.cols() != m) {
    throw ShapeError("lqr_synthesize: inconsistent matrix shapes");
  }
  if (!q.isApprox(q.transpose(), 1e-12) || !r.isApprox(r.transpose(), 1e-12)) {
    throw SynthesisError("lqr_synthesize: Q and R must be symmetric");
  }
  Eigen::LDLT<MatrixXd> q_ldlt(q);
  if (q_ldlt.info() != Eigen::Success || (q_ldlt.vectorD().array() < -1e-12).any()) {
    throw SynthesisError("lqr_synthesize: Q must be positive semidefinite");
  }
  Eigen::LLT<MatrixXd> r_llt(r);
  if (r_llt.info() != Eigen::Success) throw SynthesisError("lqr_synthesize: R must be positive definite");

  MatrixXd p = q;
  int it = 0;
  for (; it < max_iterations; ++it) {
    MatrixXd next = riccati_map(a, b, q, r, p);
    next = 0.5 * (next + next.transpose());
    if (!next.allFinite()) throw SynthesisError("lqr_synthesize: Riccati iteration diverged");
    const double diff = (next - p).cwiseAbs().maxCoeff();
    p = std::move(next);
    if (diff <= tolerance) break;
  }
  if (it == max_iterations) {
    throw SynthesisError("lqr_synthesize: no convergence in " + std::to_string(max_iterations) +
                         " iterations (is (A, B) stabilizable?)");
  }
  const MatrixXd bp = b.transpose() * p;
  const MatrixXd k = (r + bp * b).ldlt().solve(bp * a);
  const double rho = spectral_radius(a - b * k);
  if (!(rho < 1.0)) {
    throw SynthesisError("lqr_synthesize: closed loop not stable (spectral radius " +
                         std::to_string(rho) + ")");
  }
  return {Expert::linear(-k, VectorXd::Zero(m), label), p, k, it + 1, rho};
}

// ---- DDPG ----

void DdpgConfig::validate() const {
  auto positive = [](const std::vector<int>& v) {
    for (int w : v) {
      if (w <= 0) return false;
    }
    return true;
  };
  if (!positive(actor_hidden) || !positive(critic_hidden)) {
    throw ConfigError("ddpg: layer widths must be positive");
  }
  if (!(actor_learning_rate > 0.0) || !(critic_learning_rate > 0.0)) {
    throw ConfigError("ddpg: learning rates must be positive");
  }
  if (replay_capacity <= 0 || batch_size <= 0 || episodes < 0 || warmup_steps < 0 ||
      eval_samples <= 0) {
    throw ConfigError("ddpg: capacity, batch size and sample counts must be positive");
  }
  if (!(target_smoothing > 0.0 && target_smoothing < 1.0)) {
    throw ConfigError("ddpg: target smoothing must lie in (0, 1)");
  }
  if (!(exploration_noise >= 0.0)) throw ConfigError("ddpg: exploration noise must be nonnegative");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("ddpg: gamma must lie in (0, 1]");
}

namespace {

struct Transition {
  VectorXd state;
  VectorXd action;  // normalized to [-1, 1]
  double reward;
  VectorXd next_state;
  bool terminal;
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) { data_.reserve(capacity); }
  void push(Transition t) {
    if (data_.size() < capacity_) {
      data_.push_back(std::move(t));
    } else {
      data_[next_] = std::move(t);
    }
    next_ = (next_ + 1) % capacity_;
  }
  std::size_t size() const { return data_.size(); }
  const Transition& operator[](std::size_t i) const { return data_[i]; }

 private:
  std::size_t capacity_;
  std::size_t next_ = 0;
  std::vector<Transition> data_;
};

// Appends u = center + half_range * a as an identity layer.
nn::Network with_output_scaling(const nn::Network& actor, const Box& u_box) {
  std::vector<nn::Layer> layers = actor.layers();
  nn::Layer scale;
  scale.weights = u_box.half_range().asDiagonal();
  scale.bias = u_box.center();
  scale.activation = nn::Activation::kIdentity;
  layers.push_back(std::move(scale));
  return nn::Network(std::move(layers));
}

}  // namespace

DdpgResult ddpg_train(const SystemSpec& spec, const DdpgConfig& cfg, const std::string& label) {
  spec.validate();
  cfg.validate();
  cfg.reward.validate(spec.input_bound);
  Rng rng(derive_seed(cfg.seed, "ddpg"));
  const int sd = spec.state_dim, ad = spec.input_dim;

  nn::Network actor = nn::Network::mlp(sd, cfg.actor_hidden, ad, nn::Activation::kRelu,
                                       nn::Activation::kTanh, rng);
  nn::Network critic = nn::Network::mlp(sd + ad, cfg.critic_hidden, 1, nn::Activation::kRelu,
                                        nn::Activation::kIdentity, rng);
  nn::Network actor_target = actor, critic_target = critic;
  nn::Adam actor_opt(actor, {cfg.actor_learning_rate});
  nn::Adam critic_opt(critic, {cfg.critic_learning_rate});
  ReplayBuffer replay(static_cast<std::size_t>(cfg.replay_capacity));

  const VectorXd center = spec.input_bound.center();
  const VectorXd half = spec.input_bound.half_range();
  auto to_control = [&](const VectorXd& a) -> VectorXd {
    return center + half.cwiseProduct(a);
  };

  DdpgResult result;
  long total_steps = 0;
  const int bs = cfg.batch_size;
  MatrixXd s_batch(sd, bs), a_batch(ad, bs), sn_batch(sd, bs), sa(sd + ad, bs), sna(sd + ad, bs);
  VectorXd r_batch(bs), notdone(bs);

  for (int ep = 0; ep < cfg.episodes; ++ep) {
    VectorXd s = spec.initial_set.sample(rng);
    double ep_return = 0.0;
    for (int t = 0; t < spec.horizon; ++t) {
      VectorXd a = nn::forward(actor, s);
      for (int i = 0; i < ad; ++i) {
        a[i] = std::clamp(a[i] + cfg.exploration_noise * rng.normal(), -1.0, 1.0);
      }
      const VectorXd u = spec.input_bound.clamp(to_control(a));
      VectorXd w(spec.disturbance_dim);
      for (int i = 0; i < spec.disturbance_dim; ++i) {
        w[i] = rng.uniform(spec.disturbance_bound.lo(i), spec.disturbance_bound.hi(i));
      }
      const VectorXd s_next = step(spec, s, u, w);
      const double r = reward(s_next, u, spec, cfg.reward);
      const bool unsafe = !spec.safe_region.contains(s_next);
      ep_return += r;
      replay.push({s, a, r, s_next, unsafe});
      ++total_steps;

      if (total_steps >= cfg.warmup_steps && replay.size() >= static_cast<std::size_t>(bs)) {
        for (int j = 0; j < bs; ++j) {
          const Transition& tr = replay[rng.index(replay.size())];
          s_batch.col(j) = tr.state;
          a_batch.col(j) = tr.action;
          sn_batch.col(j) = tr.next_state;
          r_batch[j] = tr.reward;
          notdone[j] = tr.terminal ? 0.0 : 1.0;
        }
        // Critic: regress Q(s, a) onto r + gamma * Q'(s', mu'(s')).
        sna.topRows(sd) = sn_batch;
        sna.bottomRows(ad) = nn::forward_batch(actor_target, sn_batch);
        const VectorXd q_next = nn::forward_batch(critic_target, sna).row(0).transpose();
        const VectorXd target = r_batch + cfg.gamma * notdone.cwiseProduct(q_next);
        sa.topRows(sd) = s_batch;
        sa.bottomRows(ad) = a_batch;
        const nn::Tape critic_tape = nn::record(critic, sa);
        const VectorXd q = critic_tape.output().row(0).transpose();
        const VectorXd err = q - target;
        const double critic_loss = err.squaredNorm() / bs;
        if (!std::isfinite(critic_loss)) {
          throw TrainingError("ddpg: critic loss became non-finite at episode " +
                              std::to_string(ep) + ", step " + std::to_string(t));
        }
        MatrixXd up = (2.0 / bs) * err.transpose();
        critic_opt.step(critic, nn::backward_batch(critic, critic_tape, up).params);

        // Actor: ascend Q(s, mu(s)).
        const nn::Tape actor_tape = nn::record(actor, s_batch);
        sa.bottomRows(ad) = actor_tape.output();
        const nn::Tape q_tape = nn::record(critic, sa);
        const MatrixXd dq = nn::backward_batch(critic, q_tape, MatrixXd::Constant(1, bs, -1.0 / bs))
                                .inputs.bottomRows(ad);
        const nn::BatchGradients ag = nn::backward_batch(actor, actor_tape, dq);
        if (!nn::all_finite(ag.params)) {
          throw TrainingError("ddpg: actor gradient became non-finite at episode " +
                              std::to_string(ep));
        }
        actor_opt.step(actor, ag.params);
        nn::soft_update(critic_target, critic, cfg.target_smoothing);
        nn::soft_update(actor_target, actor, cfg.target_smoothing);
      }
      s = s_next;
      if (unsafe) break;
    }
    result.episode_returns.push_back(ep_return);
  }

  nn::Network scaled = with_output_scaling(actor, spec.input_bound);
  result.expert = Expert::neural(scaled, label);

  Rng eval_rng(derive_seed(cfg.seed, "ddpg-eval"));
  const auto starts = sample_initial_states(spec, cfg.eval_samples, eval_rng);
  const Expert& ex = result.expert;
  const Controller ctrl = [&ex](const VectorXd& s) { return ex.evaluate(s); };
  int safe = 0;
  for (std::size_t i = 0; i < starts.size(); ++i) {
    RolloutStreams streams = RolloutStreams::from_seed(derive_seed(cfg.seed, i));
    if (rollout(spec, ctrl, starts[i], PerturbationModel::none(), streams).safe) ++safe;
  }
  result.safe_rate = static_cast<double>(safe) / static_cast<double>(starts.size());
  return result;
}

// ---- serialization ----

json to_json(const Expert& e) {
  switch (e.kind()) {
    case Expert::Kind::kNeural:
      return nn::to_json(*e.network());
    case Expert::Kind::kLinear: {
      const nn::Layer& l = e.network()->layer(0);
      json gain = json::array();
      for (int i = 0; i < l.weights.rows(); ++i) {
        std::vector<double> row(static_cast<std::size_t>(l.weights.cols()));
        for (int j = 0; j < l.weights.cols(); ++j) row[j] = l.weights(i, j);
        gain.push_back(row);
      }
      return {{"kind", "linear"},
              {"label", e.label()},
              {"gain", gain},
              {"offset", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}};
    }
    case Expert::Kind::kPolynomial: {
      json terms = json::array();
      for (const Polynomial& p : e.polynomials()) terms.push_back(to_json(p));
      return {{"kind", "polynomial"}, {"label", e.label()}, {"state_dim", e.state_dim()},
              {"terms", terms}};
    }
  }
  return {};
}

Expert expert_from_json(const json& doc, const std::string& label) {
  if (!doc.is_object()) throw ParseError("expert: expected a JSON object", 0);
  if (doc.contains("layers")) return Expert::neural(nn::network_from_json(doc), label);
  const std::string kind = doc.value("kind", std::string());
  const std::string name = label.empty() ? doc.value("label", kind) : label;
  try {
    if (kind == "linear") {
      const auto rows = doc.at("gain").get<std::vector<std::vector<double>>>();
      if (rows.empty() || rows.front().empty()) throw ValidationError("linear expert: empty gain");
      MatrixXd gain(rows.size(), rows.front().size());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.front().size()) throw ValidationError("linear expert: ragged gain");
        for (std::size_t j = 0; j < rows[i].size(); ++j) gain(i, j) = rows[i][j];
      }
      VectorXd offset = VectorXd::Zero(gain.rows());
      if (doc.contains("offset")) {
        const auto o = doc.at("offset").get<std::vector<double>>();
        if (o.size() != rows.size()) throw ValidationError("linear expert: offset length mismatch");
        offset = Eigen::Map<const VectorXd>(o.data(), static_cast<Eigen::Index>(o.size()));
      }
      return Expert::linear(gain, offset, name);
    }
    if (kind == "polynomial") {
      const int sd = doc.at("state_dim").get<int>();
      std::vector<Polynomial> outs;
      for (const json& t : doc.at("terms")) outs.push_back(polynomial_from_json(t, sd));
      return Expert::polynomial(std::move(outs), name);
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("expert: ") + e.what(), 0);
  }
  throw ParseError("expert: unknown kind '" + kind + "'", 0);
}

void save_expert(const Expert& e, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << to_json(e).dump(1) << '\n';
}

Expert load_expert(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot open expert file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    const std::string text = ss.str();
    for (std::size_t i = 0; i < e.byte && i < text.size(); ++i) line += text[i] == '\n';
    throw ParseError(std::string("expert: malformed JSON: ") + e.what(), line);
  }
  return expert_from_json(doc, path.stem().string());
}

Expert load_expert(const std::filesystem::path& path, const SystemSpec& spec) {
  Expert e = load_expert(path);
  e.check_against(spec);
  return e;
}

}  // namespace mixdistill
