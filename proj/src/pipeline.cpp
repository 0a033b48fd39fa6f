#include "mixdistill/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <sstream>

#include "mixdistill/errors.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill {

namespace fs = std::filesystem;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

MatrixXd matrix_from_json(const json& doc, const std::string& what) {
  if (!doc.is_array() || doc.empty() || !doc[0].is_array()) throw ConfigError(what + ": expected a list of rows");
  MatrixXd m(doc.size(), doc[0].size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    if (doc[i].size() != doc[0].size()) throw ConfigError(what + ": ragged rows");
    for (std::size_t j = 0; j < doc[i].size(); ++j) {
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = doc[i][j].get<double>();
    }
  }
  return m;
}

VectorXd vector_from_json(const json& doc, const std::string& what) {
  if (!doc.is_array()) throw ConfigError(what + ": expected a list of numbers");
  const auto v = doc.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

ExpertSpec parse_expert(const json& e, std::size_t index, const fs::path& base) {
  ExpertSpec x;
  x.label = e.value("label", "kappa_" + std::to_string(index + 1));
  const std::string type = e.value("type", std::string("lqr"));
  if (type == "lqr") {
    x.kind = ExpertSpec::Kind::kLqr;
    if (e.contains("A")) x.a = matrix_from_json(e["A"], "expert A");
    if (e.contains("B")) x.b = matrix_from_json(e["B"], "expert B");
    if (e.contains("Q")) x.q = matrix_from_json(e["Q"], "expert Q");
    if (e.contains("R")) x.r = matrix_from_json(e["R"], "expert R");
    x.gain_scale = e.value("gain_scale", 1.0);
  } else if (type == "linear") {
    x.kind = ExpertSpec::Kind::kLinear;
    x.gain = matrix_from_json(e.at("gain"), "expert gain");
    if (e.contains("offset")) x.offset = vector_from_json(e["offset"], "expert offset");
  } else if (type == "ddpg") {
    x.kind = ExpertSpec::Kind::kDdpg;
    DdpgConfig& d = x.ddpg;
    if (e.contains("actor_hidden")) d.actor_hidden = e["actor_hidden"].get<std::vector<int>>();
    if (e.contains("critic_hidden")) d.critic_hidden = e["critic_hidden"].get<std::vector<int>>();
    d.actor_learning_rate = e.value("actor_learning_rate", d.actor_learning_rate);
    d.critic_learning_rate = e.value("critic_learning_rate", d.critic_learning_rate);
    d.replay_capacity = e.value("replay_capacity", d.replay_capacity);
    d.batch_size = e.value("batch_size", d.batch_size);
    d.target_smoothing = e.value("target_smoothing", d.target_smoothing);
    d.exploration_noise = e.value("exploration_noise", d.exploration_noise);
    d.episodes = e.value("episodes", d.episodes);
    d.warmup_steps = e.value("warmup_steps", d.warmup_steps);
    d.gamma = e.value("gamma", d.gamma);
    d.eval_samples = e.value("eval_samples", d.eval_samples);
    d.validate();
  } else if (type == "file") {
    x.kind = ExpertSpec::Kind::kFile;
    x.path = resolve(base, e.at("path").get<std::string>());
    if (!fs::exists(x.path)) throw ConfigError("expert file not found: " + x.path.string());
  } else {
    throw ConfigError("unknown expert type '" + type + "'");
  }
  return x;
}

RewardSpec parse_reward(const json& r) {
  RewardSpec s;
  s.punishment = r.value("punishment", s.punishment);
  s.energy_offset = r.value("energy_offset", s.energy_offset);
  s.energy_slope = r.value("energy_slope", s.energy_slope);
  s.gamma = r.value("gamma", s.gamma);
  return s;
}

void parse_mixing(const json& m, ExperimentConfig& cfg) {
  MixingConfig& c = cfg.mixing;
  c.epochs = m.value("epochs", c.epochs);
  c.episodes_per_epoch = m.value("episodes_per_epoch", c.episodes_per_epoch);
  if (m.contains("weight_bounds")) c.weight_bounds = vector_from_json(m["weight_bounds"], "mixing.weight_bounds");
  if (m.contains("actor_hidden")) c.actor_hidden = m["actor_hidden"].get<std::vector<int>>();
  if (m.contains("critic_hidden")) c.critic_hidden = m["critic_hidden"].get<std::vector<int>>();
  c.initial_log_std = m.value("initial_log_std", c.initial_log_std);
  c.gae_lambda = m.value("gae_lambda", c.gae_lambda);
  if (m.contains("reward")) c.reward = parse_reward(m["reward"]);
  cfg.training_noise = m.value("training_noise", 0.0);
  if (m.contains("ppo")) {
    const json& p = m["ppo"];
    PpoConfig& o = c.ppo;
    const std::string variant = p.value("variant", std::string("kl_penalty"));
    if (variant == "kl_penalty") o.variant = PpoVariant::kKlPenalty;
    else if (variant == "clip") o.variant = PpoVariant::kClip;
    else throw ConfigError("unknown ppo variant '" + variant + "'");
    o.epochs = p.value("epochs", o.epochs);
    o.minibatch_size = p.value("minibatch_size", o.minibatch_size);
    o.actor_learning_rate = p.value("actor_learning_rate", o.actor_learning_rate);
    o.critic_learning_rate = p.value("critic_learning_rate", o.critic_learning_rate);
    o.initial_beta = p.value("beta", o.initial_beta);
    o.kl_target = p.value("kl_target", o.kl_target);
    o.clip_epsilon = p.value("clip_epsilon", o.clip_epsilon);
    o.normalize_advantages = p.value("normalize_advantages", o.normalize_advantages);
  }
  if (c.epochs < 1 || c.episodes_per_epoch < 1) throw ConfigError("mixing: epochs and episodes_per_epoch must be positive");
  if (c.weight_bounds.size() != 0) {
    if (c.weight_bounds.size() != static_cast<Eigen::Index>(cfg.experts.size())) {
      throw ConfigError("mixing.weight_bounds needs one entry per expert");
    }
    if ((c.weight_bounds.array() < 1.0).any()) {
      throw ConfigError("mixing.weight_bounds must be at least 1 so that switching stays representable");
    }
  }
  if (!(cfg.training_noise >= 0.0)) throw ConfigError("mixing.training_noise must be non-negative");
}

void parse_distill(const json& d, ExperimentConfig& cfg) {
  DistillConfig& c = cfg.distill;
  c.adversarial_prob = d.value("p", c.adversarial_prob);
  c.l2_weight = d.value("lambda", c.l2_weight);
  cfg.delta_fraction = d.value("delta_fraction", cfg.delta_fraction);
  if (d.contains("delta")) c.perturbation_bound = vector_from_json(d["delta"], "distill.delta");
  if (d.contains("hidden")) c.hidden = d["hidden"].get<std::vector<int>>();
  if (d.contains("activation")) c.hidden_activation = nn::parse_activation(d["activation"].get<std::string>());
  c.epochs = d.value("epochs", c.epochs);
  c.batch_size = d.value("batch_size", c.batch_size);
  c.learning_rate = d.value("learning_rate", c.learning_rate);
  c.start_epoch = d.value("start_epoch", c.start_epoch);
  cfg.dataset_size = d.value("dataset_size", cfg.dataset_size);
  cfg.collect_mode = parse_collect_mode(d.value("collect", std::string("rollout")));
  const std::string mode = d.value("mode", std::string("post_hoc"));
  if (mode == "post_hoc") cfg.distill_mode = DistillMode::kPostHoc;
  else if (mode == "interleaved") cfg.distill_mode = DistillMode::kInterleaved;
  else throw ConfigError("unknown distill mode '" + mode + "'");
  if (cfg.dataset_size < 1) throw ConfigError("distill.dataset_size must be positive");
  if (!(cfg.delta_fraction >= 0.0)) throw ConfigError("distill.delta_fraction must be non-negative");
}

void parse_evaluate(const json& e, ExperimentConfig& cfg, const fs::path& base) {
  EvalConfig& c = cfg.evaluate;
  c.n = e.value("n", c.n);
  c.attack_bound = e.value("attack_bound", c.attack_bound);
  c.noise_bound = e.value("noise_bound", c.noise_bound);
  const std::string loss = e.value("attack_loss", std::string("output_deviation"));
  if (loss == "output_deviation") c.attack_loss = AttackLoss::kOutputDeviation;
  else if (loss == "reference_distance") c.attack_loss = AttackLoss::kReferenceDistance;
  else throw ConfigError("unknown attack loss '" + loss + "'");
  cfg.trace_count = e.value("traces", cfg.trace_count);
  if (e.contains("controllers")) {
    for (const json& item : e["controllers"]) {
      ControllerSpec s;
      s.label = item.at("label").get<std::string>();
      const std::string kind = item.value("kind", std::string("network"));
      if (kind == "network") s.kind = ControllerSpec::Kind::kNetwork;
      else if (kind == "expert") s.kind = ControllerSpec::Kind::kExpert;
      else throw ConfigError("evaluate.controllers: unknown kind '" + kind + "'");
      s.path = resolve(base, item.at("path").get<std::string>());
      if (!fs::exists(s.path)) throw ConfigError("controller file not found: " + s.path.string());
      cfg.eval_controllers.push_back(std::move(s));
    }
  }
  try {
    c.validate();
  } catch (const ValidationError& err) {
    throw ConfigError(err.what());
  }
}

void parse_verify(const json& v, ExperimentConfig& cfg) {
  VerifySettings& s = cfg.verify;
  s.partition.degree = v.value("degree", s.partition.degree);
  s.partition.max_partitions = v.value("max_partitions", s.partition.max_partitions);
  s.partition.grid_density = v.value("grid_density", s.partition.grid_density);
  s.partition.max_coefficients = v.value("max_coefficients", s.partition.max_coefficients);
  const double u_range = (cfg.system.input_bound.hi() - cfg.system.input_bound.lo()).maxCoeff();
  s.partition.target_epsilon = v.value("target_epsilon", 0.05 * u_range);
  if (v.contains("reach_initial_box")) s.reach_initial_box = box_from_json(v["reach_initial_box"]);
  s.reach_steps = v.value("reach_steps", s.reach_steps);
  if (v.contains("candidate_boxes")) {
    for (const json& b : v["candidate_boxes"]) s.candidate_boxes.push_back(box_from_json(b));
  }
  s.invariant_cells = v.value("invariant_cells", s.invariant_cells);
  s.subgrid_cells = v.value("subgrid_cells", s.subgrid_cells);
  if (v.contains("subgrid_region")) s.subgrid_region = box_from_json(v["subgrid_region"]);
  s.audit_trajectories = v.value("audit_trajectories", s.audit_trajectories);
  s.audit_steps = v.value("audit_steps", s.audit_steps);
  if (!(s.partition.target_epsilon > 0.0) || s.partition.degree < 1 || s.partition.grid_density < 2 ||
      s.reach_steps < 0 || s.invariant_cells < 1 || s.subgrid_cells < 0) {
    throw ConfigError("verify: degree >= 1, grid_density >= 2, target_epsilon > 0 and non-negative steps required");
  }
  const int d = cfg.system.state_dim;
  auto check = [d](const Box& b, const std::string& what) {
    if (b.dim() != d || !b.is_finite()) throw ConfigError("verify." + what + ": finite box of state dimension required");
  };
  if (s.reach_initial_box) check(*s.reach_initial_box, "reach_initial_box");
  for (const Box& b : s.candidate_boxes) check(b, "candidate_boxes");
  if (s.subgrid_region) check(*s.subgrid_region, "subgrid_region");
}

// ---- run-directory helpers ----

void write_json(const fs::path& path, const json& doc) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write " + path.string());
  out << doc.dump(1) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing artifact " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
}

void require(const fs::path& path) {
  if (!fs::exists(path)) throw DependencyError("missing artifact " + path.string());
}

struct LoadedExperts {
  std::vector<Expert> experts;
  std::vector<std::string> files;  // relative paths
};

LoadedExperts load_run_experts(const ExperimentConfig& cfg) {
  const fs::path index = cfg.output_dir / "experts" / "experts.json";
  const json doc = read_json(index);
  LoadedExperts out;
  for (const json& e : doc.at("experts")) {
    const std::string rel = e.at("file").get<std::string>();
    require(cfg.output_dir / rel);
    Expert x = load_expert(cfg.output_dir / rel, cfg.system);
    x.set_label(e.at("label").get<std::string>());
    out.experts.push_back(std::move(x));
    out.files.push_back(rel);
  }
  if (out.experts.empty()) throw DependencyError("no experts listed in " + index.string());
  return out;
}

MixingPolicy load_run_policy(const ExperimentConfig& cfg, std::size_t experts) {
  const fs::path dir = cfg.output_dir / "mixing";
  require(dir / "policy.json");
  MixingPolicy p = load_policy(dir);
  if (static_cast<std::size_t>(p.experts()) != experts) throw ValidationError("policy expert count differs from experts/");
  if (p.actor.input_dim() != cfg.system.state_dim) throw ValidationError("policy state dimension differs from the system");
  return p;
}

nn::Network load_run_network(const ExperimentConfig& cfg, const std::string& rel) {
  require(cfg.output_dir / rel);
  nn::Network net = nn::load_network(cfg.output_dir / rel);
  if (net.input_dim() != cfg.system.state_dim || net.output_dim() != cfg.system.input_dim) {
    throw ValidationError(rel + " does not match the system dimensions");
  }
  return net;
}

DistillConfig distill_settings(const ExperimentConfig& cfg) {
  DistillConfig d = cfg.distill;
  d.seed = stage_seed(cfg.seed, "distill");
  if (d.perturbation_bound.size() == 0) d.perturbation_bound = default_perturbation_bound(cfg.system, cfg.delta_fraction);
  return d;
}

json report_json(const DistillReport& r) {
  return {{"final_mse", r.final_mse},
          {"lipschitz", r.lipschitz},
          {"squared_parameter_norm", r.squared_parameter_norm},
          {"epoch_loss", r.epoch_loss}};
}

// ---- stages ----

void stage_train_expert(const ExperimentConfig& cfg, StageOutcome& out) {
  const SystemSpec& spec = cfg.system;
  const std::uint64_t seed = stage_seed(cfg.seed, "train-expert");
  json index;
  index["experts"] = json::array();
  for (std::size_t i = 0; i < cfg.experts.size(); ++i) {
    const ExpertSpec& x = cfg.experts[i];
    std::optional<Expert> e;
    json meta{{"label", x.label}};
    switch (x.kind) {
      case ExpertSpec::Kind::kLqr: {
        const VectorXd s0 = VectorXd::Zero(spec.state_dim), u0 = VectorXd::Zero(spec.input_dim);
        auto [a_lin, b_lin] = linearize(spec, s0, u0);
        const MatrixXd a = x.a.size() ? x.a : a_lin;
        const MatrixXd b = x.b.size() ? x.b : b_lin;
        const MatrixXd q = x.q.size() ? x.q : MatrixXd::Identity(spec.state_dim, spec.state_dim);
        const MatrixXd r = x.r.size() ? x.r : MatrixXd::Identity(spec.input_dim, spec.input_dim);
        const LqrResult lqr = lqr_synthesize(a, b, q, r, x.label);
        e = Expert::linear(-x.gain_scale * lqr.gain, VectorXd::Zero(spec.input_dim), x.label);
        meta["kind"] = "lqr";
        meta["gain_scale"] = x.gain_scale;
        meta["riccati_iterations"] = lqr.iterations;
        break;
      }
      case ExpertSpec::Kind::kLinear:
        e = Expert::linear(x.gain, x.offset.size() ? x.offset : VectorXd::Zero(x.gain.rows()), x.label);
        meta["kind"] = "linear";
        break;
      case ExpertSpec::Kind::kDdpg: {
        DdpgConfig d = x.ddpg;
        d.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
        DdpgResult r = ddpg_train(spec, d, x.label);
        e = std::move(r.expert);
        meta["kind"] = "ddpg";
        meta["training_safe_rate"] = r.safe_rate;
        break;
      }
      case ExpertSpec::Kind::kFile:
        e = load_expert(x.path, spec);
        e->set_label(x.label);
        meta["kind"] = "file";
        meta["source"] = x.path.string();
        break;
    }
    e->check_against(spec);
    const std::string rel = "experts/" + x.label + ".json";
    fs::create_directories(cfg.output_dir / "experts");
    save_expert(*e, cfg.output_dir / rel);
    meta["file"] = rel;
    index["experts"].push_back(meta);
    out.artifacts.push_back(rel);
  }
  write_json(cfg.output_dir / "experts" / "experts.json", index);
  out.artifacts.push_back("experts/experts.json");
}

void stage_train_mixing(const ExperimentConfig& cfg, StageOutcome& out) {
  const SystemSpec& spec = cfg.system;
  const LoadedExperts ex = load_run_experts(cfg);
  MixingConfig m = cfg.mixing;
  m.seed = stage_seed(cfg.seed, "train-mixing");
  const PerturbationModel pm = cfg.training_noise > 0.0
                                   ? PerturbationModel::uniform_noise(cfg.training_noise * spec.state_box().half_range())
                                   : PerturbationModel::none();
  const fs::path dir = cfg.output_dir / "mixing";
  MixingResult result;
  if (cfg.distill_mode == DistillMode::kInterleaved) {
    InterleavedResult r = train_mixing_interleaved(spec, ex.experts, pm, m, distill_settings(cfg));
    fs::create_directories(cfg.output_dir / "distill");
    nn::save_network(r.student.student, cfg.output_dir / "distill" / "student_robust.json");
    save_dataset(r.dataset, cfg.output_dir / "distill" / "dataset.csv");
    write_json(cfg.output_dir / "distill" / "interleaved_report.json", report_json(r.student.report));
    out.artifacts.insert(out.artifacts.end(), {"distill/student_robust.json", "distill/dataset.csv",
                                               "distill/interleaved_report.json"});
    result = std::move(r.mixing);
  } else {
    result = train_mixing(spec, ex.experts, pm, m);
  }
  save_policy(result.policy, dir);
  write_training_log(result.log, dir / "training_log.csv");
  out.artifacts.insert(out.artifacts.end(), {"mixing/policy.json", "mixing/actor.json", "mixing/critic.json",
                                             "mixing/training_log.csv"});
}

void stage_distill(const ExperimentConfig& cfg, StageOutcome& out) {
  const SystemSpec& spec = cfg.system;
  const DistillConfig d = distill_settings(cfg);
  const fs::path dir = cfg.output_dir / "distill";
  fs::create_directories(dir);
  DistillDataset data;
  json report;
  if (cfg.distill_mode == DistillMode::kInterleaved) {
    require(dir / "student_robust.json");
    require(dir / "dataset.csv");
    data = load_dataset(dir / "dataset.csv");
    const nn::Network robust = load_run_network(cfg, "distill/student_robust.json");
    report["kappa_star"] = {{"lipschitz", nn::lipschitz_upper_bound(robust)},
                            {"squared_parameter_norm", robust.squared_parameter_norm()}};
  } else {
    const LoadedExperts ex = load_run_experts(cfg);
    const MixingPolicy policy = load_run_policy(cfg, ex.experts.size());
    Rng rng(derive_seed(stage_seed(cfg.seed, "distill"), "collect"));
    data = collect_teacher_data(policy, ex.experts, spec, cfg.dataset_size, cfg.collect_mode, rng);
    save_dataset(data, dir / "dataset.csv");
    const DistillResult robust = distill(data, d);
    nn::save_network(robust.student, dir / "student_robust.json");
    report["kappa_star"] = report_json(robust.report);
  }
  const DistillResult direct = distill(data, d.direct());
  nn::save_network(direct.student, dir / "student_direct.json");
  report["kappa_D"] = report_json(direct.report);
  report["p"] = d.adversarial_prob;
  report["lambda"] = d.l2_weight;
  report["delta"] = std::vector<double>(d.perturbation_bound.data(), d.perturbation_bound.data() + d.perturbation_bound.size());
  report["dataset_size"] = data.size();
  write_json(dir / "report.json", report);
  out.artifacts.insert(out.artifacts.end(), {"distill/dataset.csv", "distill/student_robust.json",
                                             "distill/student_direct.json", "distill/report.json"});
}

void stage_evaluate(const ExperimentConfig& cfg, StageOutcome& out) {
  const SystemSpec& spec = cfg.system;
  EvalConfig ec = cfg.evaluate;
  ec.seed = stage_seed(cfg.seed, "evaluate");

  // Owned controllers; entries keep pointers into these.
  std::vector<Expert> experts;
  std::vector<nn::Network> networks;
  std::optional<MixingPolicy> policy;
  std::vector<EvalEntry> entries;
  std::vector<std::string> labels;

  if (!cfg.eval_controllers.empty()) {
    experts.reserve(cfg.eval_controllers.size());
    networks.reserve(cfg.eval_controllers.size());
    for (const auto& c : cfg.eval_controllers) {
      if (c.kind == ControllerSpec::Kind::kExpert) {
        experts.push_back(load_expert(c.path, spec));
        const Expert& e = experts.back();
        entries.push_back({c.path.string(), c.label, [&e](const VectorXd& s) { return e.evaluate(s); }, e.network(), nullptr});
      } else {
        networks.push_back(nn::load_network(c.path));
        const nn::Network& n = networks.back();
        if (n.input_dim() != spec.state_dim || n.output_dim() != spec.input_dim) {
          throw ValidationError(c.path.string() + " does not match the system dimensions");
        }
        entries.push_back({c.path.string(), c.label, make_network_controller(n, spec), &n, nullptr});
      }
    }
  } else {
    LoadedExperts ex = load_run_experts(cfg);
    experts = std::move(ex.experts);
    policy = load_run_policy(cfg, experts.size());
    networks.reserve(2);
    networks.push_back(load_run_network(cfg, "distill/student_direct.json"));
    networks.push_back(load_run_network(cfg, "distill/student_robust.json"));
    const Controller teacher = make_mixed_controller(*policy, experts, spec);
    for (std::size_t i = 0; i < experts.size(); ++i) {
      const Expert& e = experts[i];
      entries.push_back({ex.files[i], e.label(), [&e](const VectorXd& s) { return e.evaluate(s); }, e.network(), nullptr});
    }
    entries.push_back({"mixing/policy.json", "A_W", teacher, nullptr, nullptr});
    entries.push_back({"distill/student_direct.json", "kappa_D", make_network_controller(networks[0], spec), &networks[0], teacher});
    entries.push_back({"distill/student_robust.json", "kappa_star", make_network_controller(networks[1], spec), &networks[1], teacher});
  }

  const std::vector<EvalReport> rows = compare(entries, spec, ec);
  const fs::path dir = cfg.output_dir / "eval";
  fs::create_directories(dir / "traces");
  write_comparison_csv(rows, dir / "comparison.csv");
  json doc = json::array();
  for (const auto& r : rows) doc.push_back(to_json(r));
  write_json(dir / "comparison.json", doc);
  out.artifacts.insert(out.artifacts.end(), {"eval/comparison.csv", "eval/comparison.json"});

  Rng trace_rng(derive_seed(ec.seed, "traces"));
  const std::vector<VectorXd> starts =
      cfg.trace_count > 0 ? sample_initial_states(spec, cfg.trace_count, trace_rng) : std::vector<VectorXd>{};
  for (std::size_t k = 0; k < starts.size(); ++k) {
    for (const auto& e : entries) {
      RolloutStreams streams = RolloutStreams::from_seed(derive_seed(ec.seed, static_cast<std::uint64_t>(k)));
      const Trajectory tr = rollout(spec, e.controller, starts[k], PerturbationModel::none(), streams);
      const std::string rel = "eval/traces/" + e.label + "_" + std::to_string(k) + ".csv";
      write_control_trace(tr, cfg.output_dir / rel);
      out.artifacts.push_back(rel);
    }
  }
}

void write_cells_csv(const std::vector<Box>& cells, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write " + path.string());
  const int d = cells.empty() ? 0 : cells.front().dim();
  out << "cell";
  for (int i = 0; i < d; ++i) out << ",lo_" << i + 1;
  for (int i = 0; i < d; ++i) out << ",hi_" << i + 1;
  out << '\n';
  out.precision(17);
  for (std::size_t k = 0; k < cells.size(); ++k) {
    out << k;
    for (int i = 0; i < d; ++i) out << ',' << cells[k].lo(i);
    for (int i = 0; i < d; ++i) out << ',' << cells[k].hi(i);
    out << '\n';
  }
}

void write_trajectories_csv(const std::vector<Trajectory>& trs, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write " + path.string());
  const Eigen::Index d = trs.empty() ? 0 : trs.front().states.front().size();
  out << "trajectory,step";
  for (Eigen::Index i = 0; i < d; ++i) out << ",s" << i + 1;
  out << '\n';
  out.precision(10);
  for (std::size_t k = 0; k < trs.size(); ++k) {
    for (std::size_t t = 0; t < trs[k].states.size(); ++t) {
      out << k << ',' << t;
      for (Eigen::Index i = 0; i < d; ++i) out << ',' << trs[k].states[t][i];
      out << '\n';
    }
  }
}

void stage_verify(const ExperimentConfig& cfg, StageOutcome& out) {
  const SystemSpec& spec = cfg.system;
  const VerifySettings& vs = cfg.verify;
  const fs::path dir = cfg.output_dir / "verify";
  fs::create_directories(dir);
  const std::uint64_t seed = stage_seed(cfg.seed, "verify");
  const Box domain = spec.state_box();
  const Box x0 = vs.reach_initial_box.value_or(spec.initial_set);
  const int audit_steps = vs.audit_steps >= 0 ? vs.audit_steps : spec.horizon;

  json doc;
  doc["target_epsilon"] = vs.partition.target_epsilon;
  doc["degree"] = vs.partition.degree;
  doc["reach_steps"] = vs.reach_steps;
  std::ostringstream summary;
  summary << "label,partitions,epsilon,target_met,reach_safe,reach_inconclusive,failure_step,"
             "reach_audit_violations,candidates_proved,subgrid_cells_kept,invariant_audit_violations\n";
  summary.precision(10);

  const std::vector<std::pair<std::string, std::string>> targets{{"kappa_star", "distill/student_robust.json"},
                                                                 {"kappa_D", "distill/student_direct.json"}};
  for (const auto& [label, rel] : targets) {
    const nn::Network net = load_run_network(cfg, rel);
    const auto start = std::chrono::steady_clock::now();
    const BernsteinApprox approx = partition_and_fit(net, domain, vs.partition);
    const double fit_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    const ReachResult reach = verify_reach(spec, approx, x0, vs.reach_steps);
    if (reach.inconclusive) out.inconclusive = true;
    Rng audit_rng(derive_seed(seed, label + "/reach"));
    const AuditResult reach_audit = audit_reach(spec, net, reach, vs.audit_trajectories, audit_rng);

    json entry;
    entry["network"] = rel;
    entry["approximation"] = to_json(approx);
    entry["fit_time_ms"] = fit_ms;
    entry["reach"] = to_json(reach);
    entry["reach_audit"] = {{"trajectories", reach_audit.trajectories}, {"violations", reach_audit.violations}};
    entry["verification_time_ms"] = fit_ms + reach.milliseconds;
    write_boxes_csv(reach.boxes, dir / ("reach_" + label + ".csv"));
    out.artifacts.push_back("verify/reach_" + label + ".csv");

    int proved = 0;
    json candidates = json::array();
    for (const Box& c : vs.candidate_boxes) {
      const InvariantResult inv = verify_invariant(spec, approx, c, vs.invariant_cells);
      json item = to_json(inv);
      item["box"] = to_json(c);
      if (inv.invariant) {
        ++proved;
        Rng r(derive_seed(seed, label + "/candidate"));
        const AuditResult a = audit_invariant(spec, net, c, vs.audit_trajectories, audit_steps, r);
        item["audit"] = {{"trajectories", a.trajectories}, {"violations", a.violations}};
      }
      candidates.push_back(item);
    }
    entry["candidates"] = candidates;

    std::size_t kept = 0;
    int inv_violations = 0;
    if (vs.subgrid_cells > 0) {
      const InvariantSubgrid grid =
          invariant_subgrid(spec, approx, vs.subgrid_region.value_or(domain), vs.subgrid_cells);
      kept = grid.kept_count();
      json g = to_json(grid);
      g.erase("cells");
      if (!grid.empty()) {
        Rng r(derive_seed(seed, label + "/subgrid"));
        const AuditResult a = audit_invariant(spec, net, grid, vs.audit_trajectories, audit_steps, r, 20);
        inv_violations = a.violations;
        g["audit"] = {{"trajectories", a.trajectories}, {"violations", a.violations}};
        write_trajectories_csv(a.samples, dir / ("invariant_samples_" + label + ".csv"));
        out.artifacts.push_back("verify/invariant_samples_" + label + ".csv");
      }
      write_cells_csv(grid.kept_cells(), dir / ("invariant_cells_" + label + ".csv"));
      out.artifacts.push_back("verify/invariant_cells_" + label + ".csv");
      entry["invariant_subgrid"] = g;
    }
    doc[label] = entry;
    summary << label << ',' << approx.partitions.size() << ',' << approx.epsilon << ',' << approx.target_met << ','
            << reach.safe << ',' << reach.inconclusive << ',' << (reach.failure_step ? std::to_string(*reach.failure_step) : "")
            << ',' << reach_audit.violations << ',' << proved << ',' << kept << ',' << inv_violations << '\n';
  }
  write_json(dir / "verification.json", doc);
  std::ofstream(dir / "summary.csv") << summary.str();
  out.artifacts.insert(out.artifacts.end(), {"verify/verification.json", "verify/summary.csv"});
}

void copy_into(const fs::path& from, const fs::path& to) {
  fs::create_directories(to.parent_path());
  fs::copy_file(from, to, fs::copy_options::overwrite_existing);
}

void stage_report(const ExperimentConfig& cfg, StageOutcome& out) {
  const fs::path eval_dir = cfg.output_dir / "eval";
  require(eval_dir / "comparison.csv");
  require(eval_dir / "comparison.json");
  const json rows = read_json(eval_dir / "comparison.json");
  const fs::path dir = cfg.output_dir / "report";
  fs::create_directories(dir);
  auto cell = [](const json& v) {
    if (v.is_null()) return std::string();
    std::ostringstream os;
    os.precision(10);
    os << v.get<double>();
    return os.str();
  };
  {
    std::ofstream t1(dir / "table1.csv");
    t1 << "label,S_r,energy,lipschitz\n";
    for (const json& r : rows) {
      t1 << r.at("label").get<std::string>() << ',' << cell(r.at("S_r_clean")) << ',' << cell(r.at("energy")) << ','
         << cell(r.at("lipschitz")) << '\n';
    }
    std::ofstream t2(dir / "table2.csv");
    t2 << "label,S_r_clean,S_r_attack,S_r_noise,energy,energy_attack,energy_noise\n";
    for (const json& r : rows) {
      if (r.at("S_r_attack").is_null()) continue;
      t2 << r.at("label").get<std::string>() << ',' << cell(r.at("S_r_clean")) << ',' << cell(r.at("S_r_attack")) << ','
         << cell(r.at("S_r_noise")) << ',' << cell(r.at("energy")) << ',' << cell(r.at("energy_attack")) << ','
         << cell(r.at("energy_noise")) << '\n';
    }
  }
  out.artifacts.insert(out.artifacts.end(), {"report/table1.csv", "report/table2.csv"});
  // Plot data: control traces, reachable boxes, invariant cells and samples.
  for (const char* sub : {"eval/traces", "verify"}) {
    const fs::path src = cfg.output_dir / sub;
    if (!fs::exists(src)) continue;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(src)) {
      if (entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string rel = "report/plots/" + f.filename().string();
      copy_into(f, cfg.output_dir / rel);
      out.artifacts.push_back(rel);
    }
  }
}

}  // namespace

ExperimentConfig config_from_json(const json& doc, const fs::path& base_dir) {
  if (!doc.is_object()) throw ConfigError("config: expected a JSON object");
  ExperimentConfig cfg;
  try {
    if (!doc.contains("system")) throw ConfigError("config: 'system' is required");
    const json& sys = doc["system"];
    if (sys.is_object() && sys.contains("path")) {
      const fs::path p = resolve(base_dir, sys["path"].get<std::string>());
      if (!fs::exists(p)) throw ConfigError("system file not found: " + p.string());
      cfg.system = load_system(p);
    } else {
      cfg.system = system_from_json(sys);
    }
    if (!doc.contains("seed")) throw ConfigError("config: 'seed' is required");
    cfg.seed = doc["seed"].get<std::uint64_t>();
    cfg.output_dir = resolve(base_dir, doc.value("output_dir", std::string("run")));
    if (doc.contains("experts")) {
      const json& ex = doc["experts"];
      if (!ex.is_array()) throw ConfigError("config: 'experts' must be a list");
      for (std::size_t i = 0; i < ex.size(); ++i) cfg.experts.push_back(parse_expert(ex[i], i, base_dir));
    }
    parse_mixing(doc.value("mixing", json::object()), cfg);
    parse_distill(doc.value("distill", json::object()), cfg);
    parse_evaluate(doc.value("evaluate", json::object()), cfg, base_dir);
    parse_verify(doc.value("verify", json::object()), cfg);
    cfg.distill.validate(cfg.system.state_dim);
    cfg.mixing.reward.validate(cfg.system.input_bound);
    for (const auto& x : cfg.experts) {
      if (x.kind == ExpertSpec::Kind::kLinear &&
          (x.gain.rows() != cfg.system.input_dim || x.gain.cols() != cfg.system.state_dim)) {
        throw ConfigError("expert " + x.label + ": gain must be input_dim x state_dim");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i < std::min<std::size_t>(e.byte, text.size()); ++i) line += text[i] == '\n';
    throw ParseError(path.string() + ": " + e.what(), static_cast<int>(line));
  }
  return config_from_json(doc, path.parent_path());
}

std::uint64_t stage_seed(std::uint64_t global, const std::string& stage) { return derive_seed(global, stage); }

std::vector<std::string> stage_outputs(const ExperimentConfig& cfg, const std::string& stage) {
  if (stage == "train-expert") return {"experts/experts.json"};
  if (stage == "train-mixing") return {"mixing/policy.json", "mixing/training_log.csv"};
  if (stage == "distill") return {"distill/student_robust.json", "distill/student_direct.json", "distill/report.json"};
  if (stage == "evaluate") return {"eval/comparison.csv", "eval/comparison.json"};
  if (stage == "verify") return {"verify/verification.json", "verify/summary.csv"};
  if (stage == "report") return {"report/table1.csv", "report/table2.csv"};
  (void)cfg;
  throw ConfigError("unknown stage '" + stage + "'");
}

StageOutcome run_stage(const ExperimentConfig& cfg, const std::string& stage) {
  StageOutcome out;
  out.stage = stage;
  const auto start = std::chrono::steady_clock::now();
  fs::create_directories(cfg.output_dir);
  if (stage == "train-expert") stage_train_expert(cfg, out);
  else if (stage == "train-mixing") stage_train_mixing(cfg, out);
  else if (stage == "distill") stage_distill(cfg, out);
  else if (stage == "evaluate") stage_evaluate(cfg, out);
  else if (stage == "verify") stage_verify(cfg, out);
  else if (stage == "report") stage_report(cfg, out);
  else throw ConfigError("unknown stage '" + stage + "'");
  out.milliseconds = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

  const fs::path manifest_path = cfg.output_dir / "manifest.json";
  json manifest = fs::exists(manifest_path) ? read_json(manifest_path) : json::object();
  manifest["version"] = kVersion;
  manifest["system"] = cfg.system.name;
  manifest["seed"] = cfg.seed;
  manifest["seed_scheme"] = "stage seed = splitmix64(seed ^ fnv1a64(stage name))";
  for (const auto& s : stage_names()) manifest["stage_seeds"][s] = stage_seed(cfg.seed, s);
  manifest["stages"][stage] = {{"artifacts", out.artifacts}, {"time_ms", out.milliseconds},
                               {"inconclusive", out.inconclusive}};
  write_json(manifest_path, manifest);
  return out;
}

std::vector<StageOutcome> run_pipeline(const ExperimentConfig& cfg, bool resume) {
  std::vector<StageOutcome> outcomes;
  for (const auto& stage : stage_names()) {
    if (resume) {
      const auto outputs = stage_outputs(cfg, stage);
      const bool done = std::all_of(outputs.begin(), outputs.end(),
                                    [&](const std::string& rel) { return fs::exists(cfg.output_dir / rel); });
      if (done) continue;
    }
    outcomes.push_back(run_stage(cfg, stage));
  }
  return outcomes;
}

}  // namespace mixdistill
