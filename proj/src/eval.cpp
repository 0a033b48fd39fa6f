#include "mixdistill/eval.hpp"

#include <fstream>
#include <sstream>

#include "mixdistill/errors.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill {

using Eigen::VectorXd;

namespace {

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> parse_opt(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  return std::stod(cell);
}

}  // namespace

EvalSlice evaluate_closed_loop(const Controller& controller, const SystemSpec& spec, int n,
                               const PerturbationModel& pm, Rng& rng) {
  const std::uint64_t stream_base = rng.next_u64();
  const std::vector<VectorXd> starts = sample_initial_states(spec, n, rng);
  EvalSlice out;
  out.n = n;
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    RolloutStreams streams = RolloutStreams::from_seed(derive_seed(stream_base, static_cast<std::uint64_t>(i)));
    const Trajectory tr = rollout(spec, controller, starts[static_cast<std::size_t>(i)], pm, streams);
    if (tr.safe) {
      ++out.safe;
      total += tr.energy();
    }
  }
  out.rate = static_cast<double>(out.safe) / n;
  if (out.safe > 0) out.energy = total / out.safe;
  return out;
}

double safe_control_rate(const Controller& controller, const SystemSpec& spec, int n,
                         const PerturbationModel& pm, Rng& rng) {
  return evaluate_closed_loop(controller, spec, n, pm, rng).rate;
}

std::optional<double> energy(const Controller& controller, const SystemSpec& spec, int n, Rng& rng) {
  return evaluate_closed_loop(controller, spec, n, PerturbationModel::none(), rng).energy;
}

EvalSlice attack_eval(const nn::Network& student, const SystemSpec& spec, int n, double attack_bound,
                      Rng& rng, AttackLoss loss, const Controller& reference) {
  if (!(attack_bound >= 0.0)) throw DomainError("attack bound must be non-negative");
  const Controller ctl = [&student, u_box = spec.input_bound](const VectorXd& s) {
    return u_box.clamp(nn::forward(student, s));
  };
  if (attack_bound == 0.0) return evaluate_closed_loop(ctl, spec, n, PerturbationModel::none(), rng);
  PerturbationModel pm =
      PerturbationModel::fgsm(attack_bound * spec.state_box().half_range(), student, loss);
  if (loss == AttackLoss::kReferenceDistance) {
    if (!reference) throw ValidationError("reference-distance attack needs a reference controller");
    pm.reference = reference;
  }
  return evaluate_closed_loop(ctl, spec, n, pm, rng);
}

EvalSlice noise_eval(const Controller& controller, const SystemSpec& spec, int n, double noise_bound,
                     Rng& rng) {
  if (!(noise_bound >= 0.0)) throw DomainError("noise bound must be non-negative");
  const PerturbationModel pm = noise_bound == 0.0
                                   ? PerturbationModel::none()
                                   : PerturbationModel::uniform_noise(noise_bound * spec.state_box().half_range());
  return evaluate_closed_loop(controller, spec, n, pm, rng);
}

void EvalConfig::validate() const {
  if (n < 1) throw ValidationError("evaluate: n must be at least 1");
  if (!(attack_bound >= 0.0) || !(noise_bound >= 0.0)) throw ValidationError("evaluate: bounds must be non-negative");
}

std::vector<EvalReport> compare(const std::vector<EvalEntry>& entries, const SystemSpec& spec,
                                const EvalConfig& cfg) {
  cfg.validate();
  if (entries.empty()) throw InputError("compare: no controllers");
  std::vector<EvalReport> rows;
  for (const auto& e : entries) {
    EvalReport r;
    r.controller = e.name;
    r.label = e.label;
    r.n = cfg.n;
    r.seed = cfg.seed;
    r.attack_bound = cfg.attack_bound;
    r.noise_bound = cfg.noise_bound;
    Rng clean_rng(derive_seed(cfg.seed, "eval/samples"));
    const EvalSlice clean = evaluate_closed_loop(e.controller, spec, cfg.n, PerturbationModel::none(), clean_rng);
    r.S_r_clean = clean.rate;
    r.energy = clean.energy;
    Rng noise_rng(derive_seed(cfg.seed, "eval/samples"));
    const EvalSlice noisy = noise_eval(e.controller, spec, cfg.n, cfg.noise_bound, noise_rng);
    r.S_r_noise = noisy.rate;
    r.energy_noise = noisy.energy;
    if (e.network) {
      Rng attack_rng(derive_seed(cfg.seed, "eval/samples"));
      const EvalSlice att = attack_eval(*e.network, spec, cfg.n, cfg.attack_bound, attack_rng, cfg.attack_loss, e.reference);
      r.S_r_attack = att.rate;
      r.energy_attack = att.energy;
      r.lipschitz = nn::lipschitz_upper_bound(*e.network);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string comparison_csv(const std::vector<EvalReport>& rows) {
  std::ostringstream out;
  out << "controller,label,S_r_clean,S_r_attack,S_r_noise,energy,lipschitz,n,seed,attack_bound,noise_bound\n";
  for (const auto& r : rows) {
    out << r.controller << ',' << r.label << ',' << fmt(r.S_r_clean) << ',' << fmt(r.S_r_attack) << ','
        << fmt(r.S_r_noise) << ',' << fmt(r.energy) << ',' << fmt(r.lipschitz) << ',' << r.n << ','
        << r.seed << ',' << fmt(r.attack_bound) << ',' << fmt(r.noise_bound) << '\n';
  }
  return out.str();
}

void write_comparison_csv(const std::vector<EvalReport>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write " + path.string());
  out << comparison_csv(rows);
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"controller", r.controller},
          {"label", r.label},
          {"S_r_clean", r.S_r_clean},
          {"S_r_attack", opt_json(r.S_r_attack)},
          {"S_r_noise", opt_json(r.S_r_noise)},
          {"energy", opt_json(r.energy)},
          {"energy_attack", opt_json(r.energy_attack)},
          {"energy_noise", opt_json(r.energy_noise)},
          {"lipschitz", opt_json(r.lipschitz)},
          {"n", r.n},
          {"seed", r.seed},
          {"attack_bound", r.attack_bound},
          {"noise_bound", r.noise_bound}};
}

std::vector<EvalReport> read_comparison_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing comparison table " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<EvalReport> rows;
  for (int lineno = 2; std::getline(in, line); ++lineno) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (cells.size() != 11) throw ParseError("comparison table: expected 11 columns", lineno);
    try {
      EvalReport r;
      r.controller = cells[0];
      r.label = cells[1];
      r.S_r_clean = std::stod(cells[2]);
      r.S_r_attack = parse_opt(cells[3]);
      r.S_r_noise = parse_opt(cells[4]);
      r.energy = parse_opt(cells[5]);
      r.lipschitz = parse_opt(cells[6]);
      r.n = std::stoi(cells[7]);
      r.seed = std::stoull(cells[8]);
      r.attack_bound = std::stod(cells[9]);
      r.noise_bound = std::stod(cells[10]);
      rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw ParseError("comparison table: bad number", lineno);
    }
  }
  return rows;
}

void write_control_trace(const Trajectory& tr, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write " + path.string());
  const Eigen::Index ud = tr.controls.empty() ? 0 : tr.controls.front().size();
  const Eigen::Index sd = tr.states.front().size();
  out << "step";
  for (Eigen::Index i = 0; i < ud; ++i) out << ",u" << i + 1;
  for (Eigen::Index i = 0; i < sd; ++i) out << ",s" << i + 1;
  out << '\n';
  out.precision(10);
  for (std::size_t t = 0; t < tr.steps(); ++t) {
    out << t;
    for (Eigen::Index i = 0; i < ud; ++i) out << ',' << tr.controls[t][i];
    for (Eigen::Index i = 0; i < sd; ++i) out << ',' << tr.states[t][i];
    out << '\n';
  }
}

}  // namespace mixdistill
