#include "mixdistill/dynamics.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <span>
#include <sstream>

#include "mixdistill/errors.hpp"
#include "mixdistill/nn.hpp"
#include "mixdistill/polynomial.hpp"

namespace mixdistill {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

namespace {

using std::cos;
using std::sin;

// The update equations are written once and instantiated for double and
// Interval; see interval.hpp for why that matters.

template <typename T>
std::vector<T> vanderpol_update(std::span<const T> s, std::span<const T> u, std::span<const T> w,
                                double tau) {
  const T& s1 = s[0];
  const T& s2 = s[1];
  return {s1 + tau * s2, s2 + tau * ((1.0 - square(s1)) * s2 - s1 + u[0]) + w[0]};
}

// x' = y + 0.5 z^2, y' = z, z' = u, forward Euler. The disturbance enters the
// z channel; the builtin spec fixes it at zero.
template <typename T>
std::vector<T> system3d_update(std::span<const T> s, std::span<const T> u, std::span<const T> w,
                               double tau) {
  const T& x = s[0];
  const T& y = s[1];
  const T& z = s[2];
  return {x + tau * (y + 0.5 * square(z)), y + tau * z, z + tau * u[0] + w[0]};
}

struct CartpoleConstants {
  double cart_mass = 1.0;
  double pole_mass = 0.1;
  double total_mass = 1.1;
  double gravity = 9.8;
  double length = 1.0;
};

// Equations as published, including the 1.333 constant. The disturbance
// enters the angular-velocity channel; the builtin spec fixes it at zero.
template <typename T>
std::vector<T> cartpole_update(std::span<const T> s, std::span<const T> u, std::span<const T> w,
                               double tau) {
  constexpr CartpoleConstants c;
  const double mpl = c.pole_mass * c.length;
  const T& s1 = s[0];
  const T& s2 = s[1];
  const T& s3 = s[2];
  const T& s4 = s[3];
  const T sin3 = sin(s3);
  const T cos3 = cos(s3);
  const T psi = (u[0] + mpl * square(s4) * sin3) / c.total_mass;
  const T theta_acc = ((c.gravity * sin3 - cos3 * psi) * c.total_mass) /
                      (c.length * (1.333 - c.pole_mass * square(cos3)));
  const T s_acc = (psi - mpl * cos3 * theta_acc) / c.total_mass;
  return {s1 + tau * s2, s2 + tau * s_acc, s3 + tau * s4, s4 + tau * theta_acc + w[0]};
}

struct VanderpolEquations {
  template <typename T>
  static std::vector<T> update(std::span<const T> s, std::span<const T> u, std::span<const T> w,
                               double tau) {
    return vanderpol_update<T>(s, u, w, tau);
  }
};

struct System3dEquations {
  template <typename T>
  static std::vector<T> update(std::span<const T> s, std::span<const T> u, std::span<const T> w,
                               double tau) {
    return system3d_update<T>(s, u, w, tau);
  }
};

struct CartpoleEquations {
  template <typename T>
  static std::vector<T> update(std::span<const T> s, std::span<const T> u, std::span<const T> w,
                               double tau) {
    return cartpole_update<T>(s, u, w, tau);
  }
};

template <typename Equations>
class ClosedFormPlant final : public Plant {
 public:
  VectorXd step(const VectorXd& s, const VectorXd& u, const VectorXd& w,
                double tau) const override {
    std::vector<double> out = Equations::template update<double>(
        std::span<const double>(s.data(), s.size()), std::span<const double>(u.data(), u.size()),
        std::span<const double>(w.data(), w.size()), tau);
    return Eigen::Map<VectorXd>(out.data(), static_cast<Eigen::Index>(out.size()));
  }
  IntervalVector step(const IntervalVector& s, const IntervalVector& u, const IntervalVector& w,
                      double tau) const override {
    return Equations::template update<Interval>(s, u, w, tau);
  }
};

// Custom plants: s'_i = p_i(s, u, w) with variables ordered (s, u, w).
class PolynomialPlant final : public Plant {
 public:
  explicit PolynomialPlant(std::vector<Polynomial> updates) : updates_(std::move(updates)) {}

  VectorXd step(const VectorXd& s, const VectorXd& u, const VectorXd& w,
                double /*tau*/) const override {
    std::vector<double> vars(s.data(), s.data() + s.size());
    vars.insert(vars.end(), u.data(), u.data() + u.size());
    vars.insert(vars.end(), w.data(), w.data() + w.size());
    VectorXd out(updates_.size());
    for (std::size_t i = 0; i < updates_.size(); ++i) {
      out[static_cast<Eigen::Index>(i)] = updates_[i].evaluate<double>(vars);
    }
    return out;
  }

  IntervalVector step(const IntervalVector& s, const IntervalVector& u, const IntervalVector& w,
                      double /*tau*/) const override {
    IntervalVector vars = s;
    vars.insert(vars.end(), u.begin(), u.end());
    vars.insert(vars.end(), w.begin(), w.end());
    IntervalVector out;
    out.reserve(updates_.size());
    for (const Polynomial& p : updates_) out.push_back(p.evaluate<Interval>(vars));
    return out;
  }

 private:
  std::vector<Polynomial> updates_;
};

void check_finite(const VectorXd& v, const char* what) {
  if (!v.allFinite()) throw DomainError(std::string("step: non-finite ") + what);
}

}  // namespace

void SystemSpec::validate() const {
  if (!plant) throw ValidationError(name + ": no plant");
  if (state_dim < 1 || input_dim < 1 || disturbance_dim < 1) {
    throw ValidationError(name + ": dimensions must be positive");
  }
  if (safe_region.dim() != state_dim || initial_set.dim() != state_dim) {
    throw ValidationError(name + ": safe region / initial set dimension mismatch");
  }
  if (input_bound.dim() != input_dim || disturbance_bound.dim() != disturbance_dim) {
    throw ValidationError(name + ": input or disturbance bound dimension mismatch");
  }
  if (!initial_set.is_finite() || !input_bound.is_finite() || !disturbance_bound.is_finite()) {
    throw ValidationError(name + ": initial set, input bound and disturbance bound must be finite");
  }
  if (!safe_region.contains(initial_set)) {
    throw ValidationError(name + ": initial set is not inside the safe region");
  }
  if (!(tau > 0.0)) throw ValidationError(name + ": sampling period must be positive");
  if (horizon < 1) throw ValidationError(name + ": horizon must be at least 1");
}

SystemSpec SystemSpec::with_initial_set(Box x0) const {
  SystemSpec s = *this;
  s.initial_set = std::move(x0);
  s.validate();
  return s;
}

SystemSpec SystemSpec::with_disturbance(Box omega) const {
  SystemSpec s = *this;
  s.disturbance_bound = std::move(omega);
  s.validate();
  return s;
}

SystemSpec SystemSpec::with_horizon(int t) const {
  SystemSpec s = *this;
  s.horizon = t;
  s.validate();
  return s;
}

VectorXd SystemSpec::state_range() const { return state_box().width(); }

Box SystemSpec::state_box() const {
  VectorXd lo(state_dim), hi(state_dim);
  for (int i = 0; i < state_dim; ++i) {
    const bool finite = std::isfinite(safe_region.lo(i)) && std::isfinite(safe_region.hi(i));
    lo[i] = finite ? safe_region.lo(i) : initial_set.lo(i);
    hi[i] = finite ? safe_region.hi(i) : initial_set.hi(i);
  }
  return Box(lo, hi);
}

SystemSpec builtin_system(const std::string& name) {
  const double inf = std::numeric_limits<double>::infinity();
  SystemSpec s;
  s.name = name;
  s.input_dim = 1;
  s.disturbance_dim = 1;
  if (name == "vanderpol") {
    s.state_dim = 2;
    s.plant = std::make_shared<ClosedFormPlant<VanderpolEquations>>();
    s.safe_region = Box::cube(2, -2.0, 2.0);
    s.initial_set = Box::cube(2, -2.0, 2.0);
    s.input_bound = Box{{-20.0, 20.0}};
    s.disturbance_bound = Box{{-0.05, 0.05}};
    s.tau = 0.05;
    s.horizon = 100;
  } else if (name == "system3d") {
    s.state_dim = 3;
    s.plant = std::make_shared<ClosedFormPlant<System3dEquations>>();
    s.safe_region = Box::cube(3, -0.5, 0.5);
    s.initial_set = Box::cube(3, -0.5, 0.5);
    s.input_bound = Box{{-10.0, 10.0}};
    s.disturbance_bound = Box{{0.0, 0.0}};
    s.tau = 0.05;
    s.horizon = 100;
  } else if (name == "cartpole") {
    s.state_dim = 4;
    s.plant = std::make_shared<ClosedFormPlant<CartpoleEquations>>();
    s.safe_region = Box{{-2.4, 2.4}, {-inf, inf}, {-0.209, 0.209}, {-inf, inf}};
    s.initial_set = Box::cube(4, -0.2, 0.2);
    s.input_bound = Box{{-10.0, 10.0}};
    s.disturbance_bound = Box{{0.0, 0.0}};
    s.tau = 0.02;
    s.horizon = 200;
  } else {
    throw ConfigError("unknown builtin system '" + name + "'");
  }
  s.validate();
  return s;
}

json to_json(const Box& box) {
  json arr = json::array();
  for (int i = 0; i < box.dim(); ++i) {
    auto bound = [](double v) -> json { return std::isfinite(v) ? json(v) : json(nullptr); };
    arr.push_back({bound(box.lo(i)), bound(box.hi(i))});
  }
  return arr;
}

Box box_from_json(const json& doc) {
  if (!doc.is_array()) throw ParseError("box: expected an array of [lo, hi] pairs", 0);
  const double inf = std::numeric_limits<double>::infinity();
  VectorXd lo(doc.size()), hi(doc.size());
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& p = doc[i];
    if (!p.is_array() || p.size() != 2) throw ParseError("box: each entry must be [lo, hi]", 0);
    lo[static_cast<Eigen::Index>(i)] = p[0].is_null() ? -inf : p[0].get<double>();
    hi[static_cast<Eigen::Index>(i)] = p[1].is_null() ? inf : p[1].get<double>();
  }
  return Box(std::move(lo), std::move(hi));
}

SystemSpec system_from_json(const json& doc) {
  if (doc.is_string()) return builtin_system(doc.get<std::string>());
  if (!doc.is_object()) throw ParseError("system: expected an object", 0);
  if (doc.contains("builtin")) return builtin_system(doc.at("builtin").get<std::string>());
  try {
    SystemSpec s;
    s.name = doc.value("name", std::string("custom"));
    s.state_dim = doc.at("state_dim").get<int>();
    s.input_dim = doc.at("input_dim").get<int>();
    s.disturbance_dim = doc.value("disturbance_dim", 1);
    s.tau = doc.at("tau").get<double>();
    s.horizon = doc.at("horizon").get<int>();
    s.safe_region = box_from_json(doc.at("safe_region"));
    s.initial_set = box_from_json(doc.at("initial_set"));
    s.input_bound = box_from_json(doc.at("input_bound"));
    s.disturbance_bound = doc.contains("disturbance_bound")
                              ? box_from_json(doc.at("disturbance_bound"))
                              : Box::cube(s.disturbance_dim, 0.0, 0.0);
    const json& dyn = doc.at("dynamics");
    if (!dyn.is_array() || static_cast<int>(dyn.size()) != s.state_dim) {
      throw ValidationError("system: 'dynamics' needs one polynomial per state component");
    }
    const int nvars = s.state_dim + s.input_dim + s.disturbance_dim;
    std::vector<Polynomial> updates;
    for (const json& p : dyn) updates.push_back(polynomial_from_json(p, nvars));
    s.plant = std::make_shared<PolynomialPlant>(std::move(updates));
    s.validate();
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("system: ") + e.what(), 0);
  }
}

SystemSpec load_system(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("cannot open system file '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("system: malformed JSON: ") + e.what(), 0);
  }
  return system_from_json(doc);
}

VectorXd step(const SystemSpec& spec, const VectorXd& s, const VectorXd& u, const VectorXd& w) {
  if (s.size() != spec.state_dim || u.size() != spec.input_dim || w.size() != spec.disturbance_dim) {
    throw ShapeError("step: argument dimensions do not match " + spec.name);
  }
  check_finite(s, "state");
  check_finite(u, "control");
  check_finite(w, "disturbance");
  return spec.plant->step(s, u, w, spec.tau);
}

IntervalVector interval_step(const SystemSpec& spec, const IntervalVector& s,
                             const IntervalVector& u, const IntervalVector& w) {
  if (static_cast<int>(s.size()) != spec.state_dim || static_cast<int>(u.size()) != spec.input_dim ||
      static_cast<int>(w.size()) != spec.disturbance_dim) {
    throw ShapeError("interval_step: argument dimensions do not match " + spec.name);
  }
  return spec.plant->step(s, u, w, spec.tau);
}

PerturbationModel PerturbationModel::uniform_noise(VectorXd bound) {
  if ((bound.array() < 0.0).any()) throw ConfigError("noise bound must be nonnegative");
  PerturbationModel pm;
  pm.kind = Kind::kUniformNoise;
  pm.bound = std::move(bound);
  return pm;
}

PerturbationModel PerturbationModel::fgsm(VectorXd bound, const nn::Network& target,
                                          AttackLoss loss) {
  if ((bound.array() < 0.0).any()) throw ConfigError("attack bound must be nonnegative");
  PerturbationModel pm;
  pm.kind = Kind::kFgsmAttack;
  pm.bound = std::move(bound);
  pm.target = &target;
  pm.loss = loss;
  return pm;
}

VectorXd observe(const VectorXd& s, const PerturbationModel& pm, Rng& rng) {
  using Kind = PerturbationModel::Kind;
  if (pm.kind == Kind::kNone) return s;
  if (pm.bound.size() != s.size()) throw ShapeError("perturbation bound dimension mismatch");
  VectorXd obs = s;
  if (pm.kind == Kind::kUniformNoise) {
    for (int i = 0; i < s.size(); ++i) obs[i] += rng.uniform(-pm.bound[i], pm.bound[i]);
    return obs;
  }
  if (pm.target == nullptr) throw ConfigError("FGSM attack needs a target network");
  const nn::Network& net = *pm.target;
  VectorXd at = s;
  VectorXd anchor;
  if (pm.loss == AttackLoss::kOutputDeviation) {
    anchor = nn::forward(net, s);
    for (int i = 0; i < s.size(); ++i) at[i] += rng.uniform(-0.5 * pm.bound[i], 0.5 * pm.bound[i]);
  } else {
    if (!pm.reference) throw ConfigError("reference-distance attack needs a reference controller");
    anchor = pm.reference(s);
  }
  const nn::Tape tape = nn::record(net, at);
  const VectorXd upstream = 2.0 * (tape.output().col(0) - anchor);
  const VectorXd g = nn::backward(net, tape, upstream).input;
  for (int i = 0; i < s.size(); ++i) {
    const double sign = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    obs[i] = s[i] + pm.bound[i] * sign;
  }
  return obs;
}

RolloutStreams RolloutStreams::from_seed(std::uint64_t seed) {
  return {Rng(derive_seed(seed, "disturbance")), Rng(derive_seed(seed, "perturbation"))};
}

double Trajectory::energy() const {
  double e = 0.0;
  for (const VectorXd& u : controls) e += u.lpNorm<1>();
  return e;
}

Trajectory rollout(const SystemSpec& spec, const Controller& controller, const VectorXd& s0,
                   const PerturbationModel& pm, RolloutStreams& streams, const RewardFn& reward) {
  if (s0.size() != spec.state_dim) throw ShapeError("rollout: initial state dimension mismatch");
  Trajectory tr;
  tr.states.push_back(s0);
  if (!spec.safe_region.contains(s0)) {
    tr.safe = false;
    tr.first_violation_step = 0;
    return tr;
  }
  VectorXd s = s0;
  VectorXd w(spec.disturbance_dim);
  for (int t = 0; t < spec.horizon; ++t) {
    const VectorXd obs = observe(s, pm, streams.perturbation);
    VectorXd raw = controller(obs);
    // Draw the disturbance before any early exit so streams stay aligned.
    for (int i = 0; i < spec.disturbance_dim; ++i) {
      w[i] = streams.disturbance.uniform(spec.disturbance_bound.lo(i), spec.disturbance_bound.hi(i));
    }
    if (raw.size() != spec.input_dim) throw ShapeError("rollout: controller output dimension mismatch");
    tr.observed.push_back(obs);
    if (!raw.allFinite()) {
      tr.controller_fault = true;
      tr.safe = false;
      tr.first_violation_step = t;
      return tr;
    }
    const VectorXd u = spec.input_bound.clamp(raw);
    s = step(spec, s, u, w);
    tr.controls.push_back(u);
    tr.disturbances.push_back(w);
    tr.states.push_back(s);
    if (reward) tr.rewards.push_back(reward(s, u));
    else tr.rewards.push_back(0.0);
    if (!spec.safe_region.contains(s)) {
      tr.safe = false;
      tr.first_violation_step = t + 1;
      return tr;
    }
  }
  return tr;
}

std::vector<VectorXd> sample_initial_states(const SystemSpec& spec, int n, Rng& rng) {
  if (n < 1) throw DomainError("sample_initial_states: n must be at least 1");
  std::vector<VectorXd> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) out.push_back(spec.initial_set.sample(rng));
  return out;
}

std::pair<MatrixXd, MatrixXd> linearize(const SystemSpec& spec, const VectorXd& s, const VectorXd& u,
                                        double h) {
  const VectorXd w = VectorXd::Zero(spec.disturbance_dim);
  MatrixXd a(spec.state_dim, spec.state_dim), b(spec.state_dim, spec.input_dim);
  for (int j = 0; j < spec.state_dim; ++j) {
    VectorXd sp = s, sm = s;
    sp[j] += h;
    sm[j] -= h;
    a.col(j) = (step(spec, sp, u, w) - step(spec, sm, u, w)) / (2.0 * h);
  }
  for (int j = 0; j < spec.input_dim; ++j) {
    VectorXd up = u, um = u;
    up[j] += h;
    um[j] -= h;
    b.col(j) = (step(spec, s, up, w) - step(spec, s, um, w)) / (2.0 * h);
  }
  return {a, b};
}

}  // namespace mixdistill
