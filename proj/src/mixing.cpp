#include "mixdistill/mixing.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "mixdistill/errors.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;

// log(1 - tanh(z)^2), stable for large |z|.
double log_one_minus_tanh_sq(double z) {
  const double a = std::abs(z);
  return 2.0 * (std::numbers::ln2 - a - std::log1p(std::exp(-2.0 * a)));
}

struct Heads {
  MatrixXd mean;     // n x B
  MatrixXd log_std;  // n x B, clamped
  MatrixXd raw_log_std;
};

Heads split_heads(const MatrixXd& out, int n) {
  Heads h;
  h.mean = out.topRows(n);
  h.raw_log_std = out.bottomRows(n);
  h.log_std = h.raw_log_std.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  return h;
}

double gaussian_log_prob(const VectorXd& z, const VectorXd& mean, const VectorXd& log_std) {
  double lp = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const double d = (z[i] - mean[i]) * std::exp(-log_std[i]);
    lp += -0.5 * d * d - log_std[i] - kHalfLog2Pi;
  }
  return lp;
}

MatrixXd stack(const std::vector<VectorXd>& cols, const std::vector<std::size_t>& idx) {
  MatrixXd m(cols.front().size(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t j = 0; j < idx.size(); ++j) m.col(static_cast<Eigen::Index>(j)) = cols[idx[j]];
  return m;
}

std::vector<VectorXd> expert_outputs(const std::vector<Expert>& experts, const VectorXd& s) {
  std::vector<VectorXd> out;
  out.reserve(experts.size());
  for (const auto& e : experts) out.push_back(e.evaluate(s));
  return out;
}

}  // namespace

bool MixingPolicy::contains(const VectorXd& weights) const {
  if (weights.size() != weight_bounds.size()) return false;
  return ((weights.array().abs() <= weight_bounds.array())).all();
}

MixingPolicy MixingPolicy::create(int state_dim, VectorXd weight_bounds,
                                  const std::vector<int>& actor_hidden,
                                  const std::vector<int>& critic_hidden, double initial_log_std,
                                  Rng& rng) {
  const int n = static_cast<int>(weight_bounds.size());
  if (n < 1) throw ValidationError("mixing policy needs at least one expert");
  if ((weight_bounds.array() <= 0.0).any() || !weight_bounds.allFinite()) {
    throw ValidationError("weight bounds must be positive and finite");
  }
  MixingPolicy p;
  p.weight_bounds = std::move(weight_bounds);
  Rng actor_rng = rng.split("actor");
  Rng critic_rng = rng.split("critic");
  p.actor = nn::Network::mlp(state_dim, actor_hidden, 2 * n, nn::Activation::kTanh,
                             nn::Activation::kIdentity, actor_rng);
  auto& last = p.actor.mutable_layer(p.actor.depth() - 1);
  last.weights *= 0.01;
  last.bias.tail(n).setConstant(initial_log_std);
  p.critic = nn::Network::mlp(state_dim, critic_hidden, 1, nn::Activation::kTanh,
                              nn::Activation::kIdentity, critic_rng);
  for (int i = 0; i < n; ++i) p.expert_labels.push_back("expert_" + std::to_string(i + 1));
  return p;
}

double squashed_log_prob(const VectorXd& z, const VectorXd& mean, const VectorXd& log_std,
                         const VectorXd& bounds) {
  double lp = gaussian_log_prob(z, mean, log_std);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    lp -= std::log(bounds[i]) + log_one_minus_tanh_sq(z[i]);
  }
  return lp;
}

PolicyAction policy_act(const MixingPolicy& policy, const VectorXd& s, ActMode mode, Rng& rng) {
  const int n = policy.experts();
  const VectorXd out = nn::forward(policy.actor, s);
  const VectorXd mean = out.head(n);
  const VectorXd log_std = out.tail(n).cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  PolicyAction a;
  a.pre_squash = mean;
  if (mode == ActMode::kSample) {
    for (int i = 0; i < n; ++i) a.pre_squash[i] += std::exp(log_std[i]) * rng.normal();
  }
  a.weights = policy.weight_bounds.array() * a.pre_squash.array().tanh();
  a.log_prob = squashed_log_prob(a.pre_squash, mean, log_std, policy.weight_bounds);
  return a;
}

VectorXd mix_control(const VectorXd& weights, const std::vector<VectorXd>& expert_outputs,
                     const Box& input_bound) {
  if (static_cast<std::size_t>(weights.size()) != expert_outputs.size()) {
    throw ShapeError("mix_control: one weight per expert required");
  }
  VectorXd u = VectorXd::Zero(input_bound.dim());
  for (std::size_t i = 0; i < expert_outputs.size(); ++i) {
    if (expert_outputs[i].size() != u.size()) throw ShapeError("mix_control: expert output size");
    u += weights[static_cast<Eigen::Index>(i)] * expert_outputs[i];
  }
  return input_bound.clamp(u);
}

Controller make_mixed_controller(const MixingPolicy& policy, const std::vector<Expert>& experts,
                                 const SystemSpec& spec) {
  if (static_cast<int>(experts.size()) != policy.experts()) {
    throw ValidationError("mixed controller: policy and expert count differ");
  }
  return [&policy, &experts, u_box = spec.input_bound](const VectorXd& s) {
    Rng unused(0);
    const PolicyAction a = policy_act(policy, s, ActMode::kMean, unused);
    return mix_control(a.weights, expert_outputs(experts, s), u_box);
  };
}

Controller make_fixed_weight_controller(VectorXd weights, const std::vector<Expert>& experts,
                                        const SystemSpec& spec) {
  return [weights = std::move(weights), &experts, u_box = spec.input_bound](const VectorXd& s) {
    return mix_control(weights, expert_outputs(experts, s), u_box);
  };
}

void RolloutBuffer::clear() { *this = RolloutBuffer{}; }

void RolloutBuffer::push(const VectorXd& s, const PolicyAction& a, const VectorXd& u, double reward,
                         double value) {
  states.push_back(s);
  pre_squash.push_back(a.pre_squash);
  controls.push_back(u);
  log_probs.push_back(a.log_prob);
  rewards.push_back(reward);
  values.push_back(value);
  terminal.push_back(false);
  episode_end.push_back(false);
  bootstrap_value.push_back(0.0);
}

void RolloutBuffer::end_episode(bool terminal_violation, double bootstrap) {
  if (empty()) throw StateError("end_episode on an empty buffer");
  episode_end.back() = true;
  terminal.back() = terminal_violation;
  bootstrap_value.back() = terminal_violation ? 0.0 : bootstrap;
}

void compute_advantages(RolloutBuffer& buffer, double gamma, double gae_lambda) {
  const std::size_t n = buffer.size();
  if (n == 0) throw StateError("compute_advantages: empty buffer");
  if (!buffer.episode_end.back()) throw StateError("compute_advantages: last episode not closed");
  buffer.advantages.assign(n, 0.0);
  buffer.returns.assign(n, 0.0);
  double gae = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    double next_value;
    if (buffer.episode_end[k]) {
      next_value = buffer.bootstrap_value[k];
      gae = 0.0;
    } else {
      next_value = buffer.values[k + 1];
    }
    const double delta = buffer.rewards[k] + gamma * next_value - buffer.values[k];
    gae = delta + gamma * gae_lambda * gae;
    buffer.advantages[k] = gae;
    buffer.returns[k] = gae + buffer.values[k];
  }
}

RatioKl ratio_and_kl(const MixingPolicy& policy, const nn::Network& old_actor,
                     const RolloutBuffer& buffer) {
  const int n = policy.experts();
  std::vector<std::size_t> all(buffer.size());
  std::iota(all.begin(), all.end(), 0);
  const MatrixXd x = stack(buffer.states, all);
  const Heads now = split_heads(nn::forward_batch(policy.actor, x), n);
  const Heads old = split_heads(nn::forward_batch(old_actor, x), n);
  RatioKl out;
  for (std::size_t j = 0; j < buffer.size(); ++j) {
    const auto c = static_cast<Eigen::Index>(j);
    const double lp =
        squashed_log_prob(buffer.pre_squash[j], now.mean.col(c), now.log_std.col(c), policy.weight_bounds);
    out.ratio.push_back(std::exp(lp - buffer.log_probs[j]));
    double kl = 0.0;
    for (int i = 0; i < n; ++i) {
      const double ls = now.log_std(i, c), lso = old.log_std(i, c);
      const double dm = old.mean(i, c) - now.mean(i, c);
      kl += ls - lso + (std::exp(2.0 * lso) + dm * dm) * 0.5 * std::exp(-2.0 * ls) - 0.5;
    }
    out.kl.push_back(kl);
  }
  return out;
}

PpoTrainer::PpoTrainer(const MixingPolicy& policy, PpoConfig config)
    : config_(config),
      beta_(config.initial_beta),
      actor_opt_(policy.actor, nn::AdamConfig{config.actor_learning_rate}),
      critic_opt_(policy.critic, nn::AdamConfig{config.critic_learning_rate}) {
  if (config.epochs < 1 || config.minibatch_size < 1) throw ValidationError("ppo: epochs and minibatch size must be positive");
  if (config.kl_target <= 0.0 || config.initial_beta < 0.0) throw ValidationError("ppo: kl target must be positive");
}

PpoDiagnostics PpoTrainer::update(MixingPolicy& policy, const RolloutBuffer& buffer, Rng& rng) {
  const std::size_t size = buffer.size();
  if (size == 0) throw StateError("ppo_update: empty buffer");
  if (buffer.advantages.size() != size) throw StateError("ppo_update: advantages not computed");
  const int n = policy.experts();
  const nn::Network old_actor = policy.actor;

  std::vector<double> adv = buffer.advantages;
  if (config_.normalize_advantages && size > 1) {
    const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(size);
    double var = 0.0;
    for (double a : adv) var += (a - mean) * (a - mean);
    const double sd = std::sqrt(var / static_cast<double>(size));
    if (sd > 1e-12) {
      for (double& a : adv) a = (a - mean) / sd;
    } else {
      std::fill(adv.begin(), adv.end(), 0.0);
    }
  }

  std::vector<std::size_t> order(size);
  std::iota(order.begin(), order.end(), 0);
  const auto mb = static_cast<std::size_t>(config_.minibatch_size);
  double value_loss = 0.0;
  for (int epoch = 0; epoch < config_.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < size; start += mb) {
      const std::size_t stop = std::min(size, start + mb);
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
      const auto b = static_cast<Eigen::Index>(idx.size());
      const MatrixXd x = stack(buffer.states, idx);

      const nn::Tape tape = nn::record(policy.actor, x);
      const Heads now = split_heads(tape.output(), n);
      const Heads old = split_heads(nn::forward_batch(old_actor, x), n);
      MatrixXd upstream = MatrixXd::Zero(2 * n, b);
      for (Eigen::Index c = 0; c < b; ++c) {
        const std::size_t j = idx[static_cast<std::size_t>(c)];
        const VectorXd& z = buffer.pre_squash[j];
        const double lp =
            squashed_log_prob(z, now.mean.col(c), now.log_std.col(c), policy.weight_bounds);
        const double ratio = std::exp(lp - buffer.log_probs[j]);
        double pg_scale = ratio * adv[j];
        if (config_.variant == PpoVariant::kClip) {
          const double eps = config_.clip_epsilon;
          const bool clipped = (adv[j] > 0.0 && ratio > 1.0 + eps) || (adv[j] < 0.0 && ratio < 1.0 - eps);
          if (clipped) pg_scale = 0.0;
        }
        const double kl_scale = config_.variant == PpoVariant::kKlPenalty ? beta_ : 0.0;
        for (int i = 0; i < n; ++i) {
          const double inv_var = std::exp(-2.0 * now.log_std(i, c));
          const double dz = z[i] - now.mean(i, c);
          const double dm = now.mean(i, c) - old.mean(i, c);
          const double d_lp_mean = dz * inv_var;
          const double d_lp_ls = dz * dz * inv_var - 1.0;
          const double d_kl_mean = dm * inv_var;
          const double d_kl_ls = 1.0 - std::exp(2.0 * (old.log_std(i, c) - now.log_std(i, c))) - dm * dm * inv_var;
          // Loss is the negated objective, averaged over the minibatch.
          upstream(i, c) = -(pg_scale * d_lp_mean - kl_scale * d_kl_mean) / static_cast<double>(b);
          const double raw = now.raw_log_std(i, c);
          if (raw > kLogStdMin && raw < kLogStdMax) {
            upstream(n + i, c) = -(pg_scale * d_lp_ls - kl_scale * d_kl_ls) / static_cast<double>(b);
          }
        }
      }
      const nn::BatchGradients ag = nn::backward_batch(policy.actor, tape, upstream);
      if (!nn::all_finite(ag.params)) throw TrainingError("ppo: non-finite actor gradient");
      actor_opt_.step(policy.actor, ag.params);

      const nn::Tape vt = nn::record(policy.critic, x);
      MatrixXd vup(1, b);
      double loss = 0.0;
      for (Eigen::Index c = 0; c < b; ++c) {
        const double err = vt.output()(0, c) - buffer.returns[idx[static_cast<std::size_t>(c)]];
        loss += err * err;
        vup(0, c) = 2.0 * err / static_cast<double>(b);
      }
      const nn::BatchGradients cg = nn::backward_batch(policy.critic, vt, vup);
      if (!nn::all_finite(cg.params) || !std::isfinite(loss)) throw TrainingError("ppo: non-finite critic loss");
      critic_opt_.step(policy.critic, cg.params);
      value_loss = loss / static_cast<double>(b);
    }
  }

  const RatioKl rk = ratio_and_kl(policy, old_actor, buffer);
  PpoDiagnostics d;
  d.mean_kl = std::accumulate(rk.kl.begin(), rk.kl.end(), 0.0) / static_cast<double>(size);
  d.ratio_mean = std::accumulate(rk.ratio.begin(), rk.ratio.end(), 0.0) / static_cast<double>(size);
  d.ratio_min = *std::min_element(rk.ratio.begin(), rk.ratio.end());
  d.ratio_max = *std::max_element(rk.ratio.begin(), rk.ratio.end());
  d.value_loss = value_loss;
  if (!std::isfinite(d.mean_kl)) throw TrainingError("ppo: non-finite KL");
  if (config_.variant == PpoVariant::kKlPenalty) {
    if (d.mean_kl > 2.0 * config_.kl_target) beta_ *= 2.0;
    else if (d.mean_kl < 0.5 * config_.kl_target) beta_ *= 0.5;
  }
  d.beta = beta_;
  return d;
}

MixingResult train_mixing(const SystemSpec& spec, const std::vector<Expert>& experts,
                          const PerturbationModel& pm, const MixingConfig& cfg) {
  if (experts.empty()) throw ValidationError("train_mixing: no experts");
  for (const auto& e : experts) e.check_against(spec);
  if (cfg.epochs < 0 || cfg.episodes_per_epoch < 1) throw ValidationError("train_mixing: bad epoch or episode count");
  cfg.reward.validate(spec.input_bound);

  const auto n = static_cast<Eigen::Index>(experts.size());
  VectorXd bounds = cfg.weight_bounds.size() == 0 ? VectorXd::Constant(n, 3.0) : cfg.weight_bounds;
  if (bounds.size() != n) throw ValidationError("train_mixing: one weight bound per expert required");

  Rng init_rng(derive_seed(cfg.seed, "mixing/init"));
  MixingResult result{MixingPolicy::create(spec.state_dim, bounds, cfg.actor_hidden, cfg.critic_hidden,
                                           cfg.initial_log_std, init_rng),
                      {}};
  MixingPolicy& policy = result.policy;
  for (Eigen::Index i = 0; i < n; ++i) policy.expert_labels[static_cast<std::size_t>(i)] = experts[static_cast<std::size_t>(i)].label();

  PpoTrainer trainer(policy, cfg.ppo);
  Rng init_states(derive_seed(cfg.seed, "mixing/x0"));
  Rng action_rng(derive_seed(cfg.seed, "mixing/actions"));
  Rng update_rng(derive_seed(cfg.seed, "mixing/update"));
  const RewardFn reward_fn = make_reward_fn(spec, cfg.reward);

  RolloutBuffer buffer;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    buffer.clear();
    double total_return = 0.0, total_energy = 0.0;
    int safe_episodes = 0;
    for (int ep = 0; ep < cfg.episodes_per_epoch; ++ep) {
      const std::size_t first = buffer.size();
      const Controller ctl = [&](const VectorXd& obs) {
        const PolicyAction a = policy_act(policy, obs, ActMode::kSample, action_rng);
        const double v = nn::forward(policy.critic, obs)[0];
        VectorXd u = mix_control(a.weights, expert_outputs(experts, obs), spec.input_bound);
        buffer.push(obs, a, u, 0.0, v);
        return u;
      };
      RolloutStreams streams = RolloutStreams::from_seed(
          derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch) * 100003u + static_cast<std::uint64_t>(ep)));
      const VectorXd s0 = spec.initial_set.sample(init_states);
      const Trajectory tr = rollout(spec, ctl, s0, pm, streams, reward_fn);
      if (tr.controller_fault) {
        throw TrainingError("train_mixing: non-finite expert output at epoch " + std::to_string(epoch) +
                            ", step " + std::to_string(tr.steps()));
      }
      if (buffer.size() == first) continue;  // started unsafe; nothing to learn from
      for (std::size_t k = 0; k < tr.rewards.size(); ++k) buffer.rewards[first + k] = tr.rewards[k];
      const double boot = tr.safe ? nn::forward(policy.critic, tr.states.back())[0] : 0.0;
      buffer.end_episode(!tr.safe, boot);
      total_return += std::accumulate(tr.rewards.begin(), tr.rewards.end(), 0.0);
      total_energy += tr.energy();
      if (tr.safe) ++safe_episodes;
    }
    if (buffer.empty()) continue;
    compute_advantages(buffer, cfg.reward.gamma, cfg.gae_lambda);
    const PpoDiagnostics d = trainer.update(policy, buffer, update_rng);
    const double eps = static_cast<double>(cfg.episodes_per_epoch);
    result.log.push_back({epoch, total_return / eps, d.mean_kl, safe_episodes / eps, total_energy / eps});
    if (cfg.on_epoch) cfg.on_epoch(epoch, policy, buffer);
  }
  return result;
}

void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write " + path.string());
  out << "epoch,mean_return,mean_KL,safe_episode_fraction,mean_energy\n";
  out.precision(10);
  for (const auto& e : log) {
    out << e.epoch << ',' << e.mean_return << ',' << e.mean_kl << ',' << e.safe_fraction << ','
        << e.mean_energy << '\n';
  }
}

void save_policy(const MixingPolicy& policy, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nn::save_network(policy.actor, dir / "actor.json");
  nn::save_network(policy.critic, dir / "critic.json");
  nlohmann::json doc;
  doc["version"] = 1;
  doc["experts"] = policy.experts();
  doc["weight_bounds"] = std::vector<double>(policy.weight_bounds.data(),
                                             policy.weight_bounds.data() + policy.weight_bounds.size());
  doc["expert_labels"] = policy.expert_labels;
  doc["log_std_range"] = {kLogStdMin, kLogStdMax};
  doc["actor"] = "actor.json";
  doc["critic"] = "critic.json";
  std::ofstream out(dir / "policy.json");
  if (!out) throw ResourceError("cannot write " + (dir / "policy.json").string());
  out << doc.dump(1) << '\n';
}

MixingPolicy load_policy(const std::filesystem::path& dir) {
  const auto manifest = dir / "policy.json";
  std::ifstream in(manifest);
  if (!in) throw DependencyError("missing policy manifest " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("policy manifest: ") + e.what(), 0);
  }
  MixingPolicy p;
  try {
    const auto bounds = doc.at("weight_bounds").get<std::vector<double>>();
    p.weight_bounds = Eigen::Map<const VectorXd>(bounds.data(), static_cast<Eigen::Index>(bounds.size()));
    p.expert_labels = doc.at("expert_labels").get<std::vector<std::string>>();
    p.actor = nn::load_network(dir / doc.at("actor").get<std::string>());
    p.critic = nn::load_network(dir / doc.at("critic").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("policy manifest: ") + e.what(), 0);
  }
  const int n = static_cast<int>(p.weight_bounds.size());
  if (doc.value("experts", n) != n || static_cast<int>(p.expert_labels.size()) != n ||
      p.actor.output_dim() != 2 * n || p.critic.output_dim() != 1 ||
      p.actor.input_dim() != p.critic.input_dim()) {
    throw ValidationError("policy manifest inconsistent with its networks");
  }
  return p;
}

}  // namespace mixdistill
