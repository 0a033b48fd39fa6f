#include "mixdistill/distill.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mixdistill/errors.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill {

using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

double sign0(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

MatrixXd columns(const std::vector<VectorXd>& v, const std::vector<std::size_t>& idx, std::size_t begin,
                 std::size_t end) {
  MatrixXd m(v.front().size(), static_cast<Eigen::Index>(end - begin));
  for (std::size_t j = begin; j < end; ++j) m.col(static_cast<Eigen::Index>(j - begin)) = v[idx[j]];
  return m;
}

double dataset_mse(const nn::Network& net, const DistillDataset& data) {
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  const MatrixXd x = columns(data.states, all, 0, all.size());
  const MatrixXd u = columns(data.controls, all, 0, all.size());
  const MatrixXd out = nn::forward_batch(net, x);
  return (out - u).squaredNorm() / static_cast<double>(u.size());
}

}  // namespace

void DistillDataset::add(VectorXd s, VectorXd u, std::string tag) {
  states.push_back(std::move(s));
  controls.push_back(std::move(u));
  provenance.push_back(std::move(tag));
}

CollectMode parse_collect_mode(const std::string& name) {
  if (name == "rollout") return CollectMode::kRollout;
  if (name == "grid") return CollectMode::kGrid;
  throw ConfigError("unknown collection mode '" + name + "' (expected rollout or grid)");
}

DistillDataset collect_teacher_data(const Controller& teacher, const SystemSpec& spec, int n_states,
                                    CollectMode mode, Rng& rng) {
  DistillDataset data;
  if (n_states <= 0) return data;
  const auto target = static_cast<std::size_t>(n_states);
  if (mode == CollectMode::kGrid) {
    const Box region = spec.state_box();
    const int k = std::max(1, static_cast<int>(std::floor(
                                  std::pow(static_cast<double>(n_states), 1.0 / spec.state_dim) + 1e-9)));
    for (const Box& cell : region.subdivide(k)) {
      const VectorXd s = cell.center();
      data.add(s, spec.input_bound.clamp(teacher(s)), "grid");
    }
    while (data.size() < target) {
      const VectorXd s = region.sample(rng);
      data.add(s, spec.input_bound.clamp(teacher(s)), "sample");
    }
    return data;
  }
  for (int episode = 0; data.size() < target; ++episode) {
    RolloutStreams streams = RolloutStreams::from_seed(rng.next_u64());
    const VectorXd s0 = spec.initial_set.sample(rng);
    const Trajectory tr = rollout(spec, teacher, s0, PerturbationModel::none(), streams);
    if (tr.controller_fault) throw TrainingError("teacher produced a non-finite control");
    const std::string tag = "rollout:" + std::to_string(episode);
    for (std::size_t t = 0; t < tr.steps() && data.size() < target; ++t) {
      data.add(tr.observed[t], tr.controls[t], tag);
    }
  }
  return data;
}

DistillDataset collect_teacher_data(const MixingPolicy& policy, const std::vector<Expert>& experts,
                                    const SystemSpec& spec, int n_states, CollectMode mode, Rng& rng) {
  return collect_teacher_data(make_mixed_controller(policy, experts, spec), spec, n_states, mode, rng);
}

void save_dataset(const DistillDataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write " + path.string());
  const Eigen::Index sd = data.empty() ? 0 : data.states.front().size();
  const Eigen::Index ud = data.empty() ? 0 : data.controls.front().size();
  for (Eigen::Index i = 0; i < sd; ++i) out << 's' << i + 1 << ',';
  for (Eigen::Index i = 0; i < ud; ++i) out << 'u' << i + 1 << ',';
  out << "provenance\n";
  out.precision(17);
  for (std::size_t k = 0; k < data.size(); ++k) {
    for (Eigen::Index i = 0; i < sd; ++i) out << data.states[k][i] << ',';
    for (Eigen::Index i = 0; i < ud; ++i) out << data.controls[k][i] << ',';
    out << data.provenance[k] << '\n';
  }
}

DistillDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing dataset " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError("dataset: missing header", 1);
  int sd = 0, ud = 0;
  {
    std::stringstream hs(line);
    std::string col;
    while (std::getline(hs, col, ',')) {
      if (!col.empty() && col[0] == 's') ++sd;
      else if (!col.empty() && col[0] == 'u') ++ud;
    }
  }
  DistillDataset data;
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::stringstream ls(line);
    std::string cell;
    VectorXd s(sd), u(ud);
    try {
      for (int i = 0; i < sd + ud; ++i) {
        if (!std::getline(ls, cell, ',')) throw ParseError("dataset: too few columns", lineno);
        (i < sd ? s[i] : u[i - sd]) = std::stod(cell);
      }
    } catch (const std::logic_error&) {
      throw ParseError("dataset: bad number '" + cell + "'", lineno);
    }
    std::string tag;
    std::getline(ls, tag);
    data.add(std::move(s), std::move(u), tag);
  }
  return data;
}

void DistillConfig::validate(int state_dim) const {
  if (!(adversarial_prob >= 0.0 && adversarial_prob <= 1.0)) throw ValidationError("distill: p must lie in [0, 1]");
  if (!(l2_weight >= 0.0)) throw ValidationError("distill: lambda must be non-negative");
  if (perturbation_bound.size() != 0 &&
      (perturbation_bound.size() != state_dim || (perturbation_bound.array() < 0.0).any() ||
       !perturbation_bound.allFinite())) {
    throw ValidationError("distill: Delta must be finite, non-negative, one entry per state");
  }
  if (epochs < 0 || batch_size < 1 || !(learning_rate > 0.0)) throw ValidationError("distill: bad optimizer settings");
  if (hidden.empty()) throw ValidationError("distill: student needs a hidden layer");
}

DistillConfig DistillConfig::direct() const {
  DistillConfig c = *this;
  c.adversarial_prob = 0.0;
  c.l2_weight = 0.0;
  return c;
}

VectorXd default_perturbation_bound(const SystemSpec& spec, double fraction) {
  return fraction * spec.state_box().half_range();
}

VectorXd fgsm_perturb(const nn::Network& student, const VectorXd& s, const VectorXd& u_target,
                      const VectorXd& bound) {
  MatrixXd x = s;
  MatrixXd u = u_target;
  return fgsm_perturb_batch(student, x, u, bound).col(0);
}

MatrixXd fgsm_perturb_batch(const nn::Network& student, const MatrixXd& states, const MatrixXd& targets,
                            const VectorXd& bound) {
  if (bound.size() != states.rows()) throw ShapeError("fgsm: bound dimension mismatch");
  const nn::Tape tape = nn::record(student, states);
  const MatrixXd upstream = 2.0 * (tape.output() - targets) / static_cast<double>(targets.rows());
  const nn::BatchGradients g = nn::backward_batch(student, tape, upstream);
  MatrixXd delta(states.rows(), states.cols());
  for (Eigen::Index c = 0; c < states.cols(); ++c) {
    for (Eigen::Index i = 0; i < states.rows(); ++i) delta(i, c) = bound[i] * sign0(g.inputs(i, c));
  }
  return delta;
}

DistillStep robust_distill_step(nn::Network& student, nn::Adam& opt, const MatrixXd& states,
                                const MatrixXd& controls, const DistillConfig& cfg, Rng& rng) {
  if (states.cols() == 0) throw InputError("robust_distill_step: empty batch");
  DistillStep step;
  const double z = rng.uniform();
  step.adversarial = cfg.adversarial_prob > 0.0 && z <= cfg.adversarial_prob;
  step.inputs = states;
  if (step.adversarial && cfg.perturbation_bound.size() != 0) {
    step.inputs += fgsm_perturb_batch(student, states, controls, cfg.perturbation_bound);
  }
  const nn::Tape tape = nn::record(student, step.inputs);
  const MatrixXd err = tape.output() - controls;
  const double count = static_cast<double>(err.size());
  nn::BatchGradients g = nn::backward_batch(student, tape, 2.0 * err / count);
  step.loss = err.squaredNorm() / count;
  if (cfg.l2_weight > 0.0) {
    step.loss += cfg.l2_weight * student.squared_parameter_norm();
    for (std::size_t l = 0; l < student.depth(); ++l) {
      g.params[l].weights += 2.0 * cfg.l2_weight * student.layer(l).weights;
      g.params[l].bias += 2.0 * cfg.l2_weight * student.layer(l).bias;
    }
  }
  if (!std::isfinite(step.loss) || !nn::all_finite(g.params)) throw TrainingError("distill: non-finite loss");
  opt.step(student, g.params);
  return step;
}

nn::Network init_student(int state_dim, int input_dim, const DistillConfig& cfg) {
  Rng rng(derive_seed(cfg.seed, "distill/init"));
  return nn::Network::mlp(state_dim, cfg.hidden, input_dim, cfg.hidden_activation,
                          nn::Activation::kIdentity, rng);
}

DistillResult distill(const DistillDataset& data, const DistillConfig& cfg) {
  if (data.empty()) throw InputError("distill: empty dataset");
  const int sd = static_cast<int>(data.states.front().size());
  const int ud = static_cast<int>(data.controls.front().size());
  cfg.validate(sd);
  DistillResult result{init_student(sd, ud, cfg), {}};
  nn::Adam opt(result.student, nn::AdamConfig{cfg.learning_rate});
  Rng rng(derive_seed(cfg.seed, "distill/train"));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t stop = std::min(order.size(), start + bs);
      const DistillStep st = robust_distill_step(result.student, opt, columns(data.states, order, start, stop),
                                                 columns(data.controls, order, start, stop), cfg, rng);
      total += st.loss;
      ++batches;
    }
    result.report.epoch_loss.push_back(total / batches);
  }
  result.report.final_mse = dataset_mse(result.student, data);
  result.report.lipschitz = nn::lipschitz_upper_bound(result.student);
  result.report.squared_parameter_norm = result.student.squared_parameter_norm();
  return result;
}

InterleavedResult train_mixing_interleaved(const SystemSpec& spec, const std::vector<Expert>& experts,
                                           const PerturbationModel& pm, const MixingConfig& mixing,
                                           const DistillConfig& distill_cfg) {
  distill_cfg.validate(spec.state_dim);
  DistillConfig dcfg = distill_cfg;
  if (dcfg.perturbation_bound.size() == 0) dcfg.perturbation_bound = default_perturbation_bound(spec);
  const int start = dcfg.start_epoch >= 0 ? dcfg.start_epoch : mixing.epochs / 2;

  nn::Network student = init_student(spec.state_dim, spec.input_dim, dcfg);
  nn::Adam opt(student, nn::AdamConfig{dcfg.learning_rate});
  Rng rng(derive_seed(dcfg.seed, "distill/train"));
  DistillDataset seen;
  std::vector<double> epoch_loss;

  MixingConfig mcfg = mixing;
  mcfg.on_epoch = [&](int epoch, const MixingPolicy& policy, const RolloutBuffer& buffer) {
    if (mixing.on_epoch) mixing.on_epoch(epoch, policy, buffer);
    if (epoch < start || buffer.empty()) return;
    std::vector<std::size_t> order(buffer.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t k : order) seen.add(buffer.states[k], buffer.controls[k], "epoch:" + std::to_string(epoch));
    const auto bs = static_cast<std::size_t>(dcfg.batch_size);
    for (int pass = 0; pass < std::max(1, dcfg.epochs); ++pass) {
      rng.shuffle(order.begin(), order.end());
      double total = 0.0;
      int batches = 0;
      for (std::size_t b = 0; b < order.size(); b += bs) {
        const std::size_t e = std::min(order.size(), b + bs);
        total += robust_distill_step(student, opt, columns(buffer.states, order, b, e),
                                     columns(buffer.controls, order, b, e), dcfg, rng)
                     .loss;
        ++batches;
      }
      epoch_loss.push_back(total / batches);
    }
  };
  InterleavedResult out{train_mixing(spec, experts, pm, mcfg), {}, {}};
  if (seen.empty()) throw InputError("interleaved distillation saw no data (N_E beyond the last epoch?)");
  out.student.student = std::move(student);
  out.student.report.epoch_loss = std::move(epoch_loss);
  out.student.report.final_mse = dataset_mse(out.student.student, seen);
  out.student.report.lipschitz = nn::lipschitz_upper_bound(out.student.student);
  out.student.report.squared_parameter_norm = out.student.student.squared_parameter_norm();
  out.dataset = std::move(seen);
  return out;
}

Controller make_network_controller(const nn::Network& net, const SystemSpec& spec) {
  return [&net, u_box = spec.input_bound](const VectorXd& s) { return u_box.clamp(nn::forward(net, s)); };
}

}  // namespace mixdistill
