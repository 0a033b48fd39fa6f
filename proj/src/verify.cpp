#include "mixdistill/verify.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <limits>

#include "mixdistill/errors.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill {

using Eigen::VectorXd;

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

double de_casteljau(std::vector<double> b, double t) {
  for (std::size_t r = 1; r < b.size(); ++r) {
    for (std::size_t i = 0; i + r < b.size(); ++i) b[i] += t * (b[i + 1] - b[i]);
  }
  return b.front();
}

// Splits Bernstein coefficients on [0,1] at t; keeps the left or right piece.
std::vector<double> split(std::vector<double> b, double t, bool keep_left) {
  const std::size_t n = b.size() - 1;
  std::vector<double> out(b.size());
  out[keep_left ? 0 : n] = keep_left ? b[0] : b[n];
  for (std::size_t r = 1; r <= n; ++r) {
    for (std::size_t i = 0; i + r <= n; ++i) b[i] += t * (b[i + 1] - b[i]);
    if (keep_left) out[r] = b[0];
    else out[n - r] = b[n - r];
  }
  return out;
}

std::vector<double> restrict_unit(std::vector<double> b, double a, double c) {
  if (c < 1.0) b = split(std::move(b), c, true);
  if (a > 0.0 && c > 0.0) b = split(std::move(b), a / c, false);
  return b;
}

struct Shape {
  std::vector<std::size_t> size;
  std::vector<std::size_t> stride;
  std::size_t total = 1;

  explicit Shape(const std::vector<int>& degree) : size(degree.size()), stride(degree.size()) {
    for (std::size_t i = degree.size(); i-- > 0;) {
      size[i] = static_cast<std::size_t>(degree[i]) + 1;
      stride[i] = total;
      total *= size[i];
    }
  }
};

template <class Fn>
void for_each_fiber(VectorXd& tensor, const Shape& shape, std::size_t axis, Fn&& fn) {
  const std::size_t n = shape.size[axis], st = shape.stride[axis];
  std::vector<double> fiber(n);
  for (std::size_t base = 0; base < shape.total; ++base) {
    if ((base / st) % n != 0) continue;  // visit each fiber once, from its first element
    for (std::size_t k = 0; k < n; ++k) fiber[k] = tensor[static_cast<Eigen::Index>(base + k * st)];
    fn(fiber);
    for (std::size_t k = 0; k < n; ++k) tensor[static_cast<Eigen::Index>(base + k * st)] = fiber[k];
  }
}

// Multi-index of a flat grid position, dim 0 slowest.
void unflatten(std::size_t flat, const std::vector<std::size_t>& sizes, std::vector<std::size_t>& idx) {
  for (std::size_t i = sizes.size(); i-- > 0;) {
    idx[i] = flat % sizes[i];
    flat /= sizes[i];
  }
}

}  // namespace

BernsteinPoly::BernsteinPoly(Box domain, std::vector<int> degree, std::vector<VectorXd> coefficients)
    : domain_(std::move(domain)), degree_(std::move(degree)), coeffs_(std::move(coefficients)) {
  if (static_cast<int>(degree_.size()) != domain_.dim()) throw ShapeError("bernstein: one degree per dimension");
  if (std::any_of(degree_.begin(), degree_.end(), [](int d) { return d < 1; })) {
    throw DomainError("bernstein: degree must be at least 1");
  }
  if (!domain_.is_finite() || (domain_.width().array() <= 0.0).any()) {
    throw DomainError("bernstein: domain must be finite and non-degenerate");
  }
  const Shape shape(degree_);
  for (const auto& c : coeffs_) {
    if (static_cast<std::size_t>(c.size()) != shape.total) throw ShapeError("bernstein: coefficient count");
  }
}

VectorXd BernsteinPoly::evaluate(const VectorXd& x) const {
  const int d = domain_.dim();
  if (x.size() != d) throw ShapeError("bernstein: point dimension");
  const Shape shape(degree_);
  VectorXd out(outputs());
  for (int o = 0; o < outputs(); ++o) {
    std::vector<double> cur(coeffs_[static_cast<std::size_t>(o)].data(),
                            coeffs_[static_cast<std::size_t>(o)].data() + shape.total);
    // Contract the last (contiguous) axis first.
    for (int axis = d - 1; axis >= 0; --axis) {
      const double t = (x[axis] - domain_.lo(axis)) / (domain_.hi(axis) - domain_.lo(axis));
      const std::size_t n = shape.size[static_cast<std::size_t>(axis)];
      std::vector<double> next(cur.size() / n);
      for (std::size_t blk = 0; blk < next.size(); ++blk) {
        next[blk] = de_casteljau(std::vector<double>(cur.begin() + static_cast<std::ptrdiff_t>(blk * n),
                                                     cur.begin() + static_cast<std::ptrdiff_t>((blk + 1) * n)),
                                 t);
      }
      cur = std::move(next);
    }
    out[o] = cur.front();
  }
  return out;
}

IntervalVector BernsteinPoly::range(const Box& sub) const {
  if (!domain_.contains(sub)) {
    throw CoverageError("bernstein: range requested outside the domain");
  }
  IntervalVector out;
  if (sub.is_point()) {
    const VectorXd v = evaluate(sub.lo());
    for (int o = 0; o < outputs(); ++o) out.push_back(Interval(v[o]));
    return out;
  }
  const Shape shape(degree_);
  int total_degree = 0;
  for (int dg : degree_) total_degree += dg;
  for (int o = 0; o < outputs(); ++o) {
    VectorXd c = coeffs_[static_cast<std::size_t>(o)];
    for (int axis = 0; axis < domain_.dim(); ++axis) {
      const double w = domain_.hi(axis) - domain_.lo(axis);
      const double a = std::clamp((sub.lo(axis) - domain_.lo(axis)) / w, 0.0, 1.0);
      const double b = std::clamp((sub.hi(axis) - domain_.lo(axis)) / w, 0.0, 1.0);
      if (a == 0.0 && b == 1.0) continue;
      for_each_fiber(c, shape, static_cast<std::size_t>(axis),
                     [&](std::vector<double>& fiber) { fiber = restrict_unit(std::move(fiber), a, b); });
    }
    const double lo = c.minCoeff(), hi = c.maxCoeff();
    const double margin = 4.0 * (total_degree + 4) * std::numeric_limits<double>::epsilon() * c.cwiseAbs().maxCoeff();
    out.push_back({lo - margin, hi + margin});
  }
  return out;
}

double BernsteinPoly::gradient_bound(int output) const {
  const Shape shape(degree_);
  const VectorXd& c = coeffs_.at(static_cast<std::size_t>(output));
  double sum = 0.0;
  for (std::size_t axis = 0; axis < degree_.size(); ++axis) {
    double m = 0.0;
    const std::size_t st = shape.stride[axis], n = shape.size[axis];
    for (std::size_t k = 0; k < shape.total; ++k) {
      if ((k / st) % n + 1 < n) {
        m = std::max(m, std::abs(c[static_cast<Eigen::Index>(k + st)] - c[static_cast<Eigen::Index>(k)]));
      }
    }
    const double g = m * degree_[axis] / (domain_.hi(static_cast<int>(axis)) - domain_.lo(static_cast<int>(axis)));
    sum += g * g;
  }
  return std::sqrt(sum);
}

BernsteinPoly bernstein_fit(const VectorFn& f, int outputs, const Box& domain, const std::vector<int>& degree,
                            std::size_t max_coefficients) {
  if (static_cast<int>(degree.size()) != domain.dim()) throw ShapeError("bernstein_fit: one degree per dimension");
  double count = 1.0;
  for (int dg : degree) {
    if (dg < 1) throw DomainError("bernstein_fit: degree must be at least 1");
    count *= dg + 1.0;
  }
  if (count * outputs > static_cast<double>(max_coefficients)) {
    throw ResourceError("bernstein_fit: " + std::to_string(static_cast<long long>(count)) +
                        " coefficients per output exceed the cap");
  }
  const Shape shape(degree);
  std::vector<VectorXd> coeffs(static_cast<std::size_t>(outputs), VectorXd(static_cast<Eigen::Index>(shape.total)));
  std::vector<std::size_t> idx(degree.size());
  VectorXd x(domain.dim());
  for (std::size_t k = 0; k < shape.total; ++k) {
    unflatten(k, shape.size, idx);
    for (int i = 0; i < domain.dim(); ++i) {
      const auto ii = static_cast<std::size_t>(i);
      x[i] = idx[ii] == shape.size[ii] - 1
                 ? domain.hi(i)
                 : domain.lo(i) + (domain.hi(i) - domain.lo(i)) * static_cast<double>(idx[ii]) / degree[ii];
    }
    const VectorXd v = f(x);
    if (v.size() != outputs) throw ShapeError("bernstein_fit: function output size");
    for (int o = 0; o < outputs; ++o) coeffs[static_cast<std::size_t>(o)][static_cast<Eigen::Index>(k)] = v[o];
  }
  return BernsteinPoly(domain, degree, std::move(coeffs));
}

BernsteinPoly bernstein_fit(const nn::Network& net, const Box& domain, int degree, std::size_t max_coefficients) {
  if (net.input_dim() != domain.dim()) throw ShapeError("bernstein_fit: network input dimension");
  return bernstein_fit([&net](const VectorXd& x) { return nn::forward(net, x); }, net.output_dim(), domain,
                       std::vector<int>(static_cast<std::size_t>(domain.dim()), degree), max_coefficients);
}

double approx_error_bound(const VectorFn& f, double lipschitz_f, const BernsteinPoly& poly, int grid_density) {
  if (grid_density < 2) throw DomainError("approx_error_bound: need at least 2 grid points per dimension");
  const Box& dom = poly.domain();
  const int d = dom.dim();
  const std::vector<std::size_t> sizes(static_cast<std::size_t>(d), static_cast<std::size_t>(grid_density));
  std::size_t total = 1;
  for (std::size_t s : sizes) total *= s;
  const VectorXd spacing = dom.width() / (grid_density - 1);
  const double rho = 0.5 * spacing.norm();
  double worst = 0.0;
  std::vector<std::size_t> idx(sizes.size());
  VectorXd x(d);
  for (std::size_t k = 0; k < total; ++k) {
    unflatten(k, sizes, idx);
    for (int i = 0; i < d; ++i) {
      const auto ii = static_cast<std::size_t>(i);
      x[i] = idx[ii] + 1 == sizes[ii] ? dom.hi(i) : dom.lo(i) + spacing[i] * static_cast<double>(idx[ii]);
    }
    worst = std::max(worst, (f(x) - poly.evaluate(x)).cwiseAbs().maxCoeff());
  }
  double lpoly = 0.0;
  for (int o = 0; o < poly.outputs(); ++o) lpoly = std::max(lpoly, poly.gradient_bound(o));
  return worst + (lipschitz_f + lpoly) * rho;
}

double approx_error_bound(const nn::Network& net, const BernsteinPoly& poly, int grid_density) {
  return approx_error_bound([&net](const VectorXd& x) { return nn::forward(net, x); },
                            nn::lipschitz_upper_bound(net), poly, grid_density);
}

BernsteinApprox partition_and_fit(const nn::Network& net, const Box& domain, const PartitionConfig& cfg) {
  if (!(cfg.target_epsilon > 0.0)) throw DomainError("partition_and_fit: target epsilon must be positive");
  if (cfg.max_partitions < 1) throw DomainError("partition_and_fit: max_partitions must be positive");
  const double lip = nn::lipschitz_upper_bound(net);
  const VectorFn f = [&net](const VectorXd& x) { return nn::forward(net, x); };
  const std::vector<int> degree(static_cast<std::size_t>(domain.dim()), cfg.degree);

  BernsteinApprox out;
  out.domain = domain;
  out.outputs = net.output_dim();
  out.target_met = true;
  std::deque<Box> pending{domain};
  while (!pending.empty()) {
    Box box = std::move(pending.front());
    pending.pop_front();
    BernsteinPoly poly = bernstein_fit(f, net.output_dim(), box, degree, cfg.max_coefficients);
    const double err = approx_error_bound(f, lip, poly, cfg.grid_density);
    const std::size_t count = out.partitions.size() + pending.size() + 1;
    if (err > cfg.target_epsilon && count < static_cast<std::size_t>(cfg.max_partitions)) {
      auto [left, right] = box.bisect_widest();
      pending.push_back(std::move(left));
      pending.push_back(std::move(right));
      continue;
    }
    if (err > cfg.target_epsilon) out.target_met = false;
    out.epsilon = std::max(out.epsilon, err);
    out.partitions.push_back({std::move(box), std::move(poly), err});
  }
  return out;
}

Box interval_reach_step(const SystemSpec& spec, const Box& x, const BernsteinApprox& approx, const Box& omega) {
  if (!approx.domain.contains(x)) throw CoverageError("reachable box left the approximation domain");
  std::optional<Box> next;
  const IntervalVector w = to_intervals(omega);
  for (const auto& part : approx.partitions) {
    const std::optional<Box> piece = x.intersect(part.box);
    if (!piece) continue;
    IntervalVector u = part.poly.range(*piece);
    for (int i = 0; i < spec.input_dim; ++i) {
      Interval& ui = u[static_cast<std::size_t>(i)];
      ui = clamp(Interval{ui.lo - part.error, ui.hi + part.error}, spec.input_bound.lo(i), spec.input_bound.hi(i));
    }
    const Box image = to_box(interval_step(spec, to_intervals(*piece), u, w));
    next = next ? next->hull(image) : image;
  }
  if (!next) throw CoverageError("no partition covers the reachable box");
  return *next;
}

ReachResult verify_reach(const SystemSpec& spec, const BernsteinApprox& approx, const Box& x0, int steps) {
  const auto start = Clock::now();
  if (steps < 0) throw DomainError("verify_reach: negative horizon");
  ReachResult r;
  r.boxes.push_back(x0);
  try {
    for (int t = 0;; ++t) {
      if (!spec.safe_region.contains(r.boxes.back())) {
        r.failure_step = t;
        r.diagnostic = "reachable box at step " + std::to_string(t) + " leaves the safe region";
        break;
      }
      if (t == steps) {
        r.safe = true;
        break;
      }
      r.boxes.push_back(interval_reach_step(spec, r.boxes.back(), approx, spec.disturbance_bound));
    }
  } catch (const CoverageError& e) {
    r.safe = false;
    r.inconclusive = true;
    r.diagnostic = e.what();
  }
  r.milliseconds = elapsed_ms(start);
  return r;
}

InvariantResult verify_invariant(const SystemSpec& spec, const BernsteinApprox& approx, const Box& candidate,
                                 int cells_per_dim) {
  const auto start = Clock::now();
  InvariantResult r;
  if (!spec.safe_region.contains(candidate)) {
    r.diagnostic = "candidate is not inside the safe region";
    r.milliseconds = elapsed_ms(start);
    return r;
  }
  const std::vector<Box> cells = candidate.subdivide(cells_per_dim);
  r.cells = static_cast<int>(cells.size());
  r.invariant = true;
  try {
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (!candidate.contains(interval_reach_step(spec, cells[k], approx, spec.disturbance_bound))) {
        r.invariant = false;
        r.diagnostic = "image of cell " + std::to_string(k) + " leaves the candidate";
        break;
      }
    }
  } catch (const CoverageError& e) {
    r.invariant = false;
    r.diagnostic = e.what();
  }
  r.milliseconds = elapsed_ms(start);
  return r;
}

namespace {

std::vector<std::vector<double>> grid_edges(const Box& region, int k) {
  std::vector<std::vector<double>> edges(static_cast<std::size_t>(region.dim()));
  for (int i = 0; i < region.dim(); ++i) {
    auto& e = edges[static_cast<std::size_t>(i)];
    const double w = region.hi(i) - region.lo(i);
    for (int j = 0; j < k; ++j) e.push_back(region.lo(i) + w * j / k);
    e.push_back(region.hi(i));
  }
  return edges;
}

// Indices j of the closed cells [e_j, e_{j+1}] meeting [a, b].
std::pair<int, int> cell_span(const std::vector<double>& e, double a, double b) {
  const int k = static_cast<int>(e.size()) - 1;
  int lo = static_cast<int>(std::lower_bound(e.begin() + 1, e.end(), a) - (e.begin() + 1));
  int hi = static_cast<int>(std::upper_bound(e.begin(), e.end() - 1, b) - e.begin()) - 1;
  return {std::clamp(lo, 0, k - 1), std::clamp(hi, 0, k - 1)};
}

}  // namespace

std::size_t InvariantSubgrid::kept_count() const {
  return static_cast<std::size_t>(std::count(kept.begin(), kept.end(), 1));
}

Box InvariantSubgrid::cell(std::size_t index) const {
  const auto edges = grid_edges(region, cells_per_dim);
  VectorXd lo(region.dim()), hi(region.dim());
  for (int i = region.dim() - 1; i >= 0; --i) {
    const auto j = index % static_cast<std::size_t>(cells_per_dim);
    index /= static_cast<std::size_t>(cells_per_dim);
    lo[i] = edges[static_cast<std::size_t>(i)][j];
    hi[i] = edges[static_cast<std::size_t>(i)][j + 1];
  }
  return Box(lo, hi);
}

std::vector<Box> InvariantSubgrid::kept_cells() const {
  std::vector<Box> out;
  for (std::size_t k = 0; k < kept.size(); ++k) {
    if (kept[k]) out.push_back(cell(k));
  }
  return out;
}

bool InvariantSubgrid::contains(const VectorXd& x) const {
  if (!region.contains(x)) return false;
  const auto edges = grid_edges(region, cells_per_dim);
  const int d = region.dim();
  std::vector<std::pair<int, int>> span(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) span[static_cast<std::size_t>(i)] = cell_span(edges[static_cast<std::size_t>(i)], x[i], x[i]);
  std::vector<int> idx(static_cast<std::size_t>(d));
  for (int i = 0; i < d; ++i) idx[static_cast<std::size_t>(i)] = span[static_cast<std::size_t>(i)].first;
  while (true) {
    std::size_t flat = 0;
    for (int i = 0; i < d; ++i) flat = flat * static_cast<std::size_t>(cells_per_dim) + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]);
    if (kept[flat]) return true;
    int i = d - 1;
    while (i >= 0 && idx[static_cast<std::size_t>(i)] == span[static_cast<std::size_t>(i)].second) {
      idx[static_cast<std::size_t>(i)] = span[static_cast<std::size_t>(i)].first;
      --i;
    }
    if (i < 0) return false;
    ++idx[static_cast<std::size_t>(i)];
  }
}

VectorXd InvariantSubgrid::sample(Rng& rng) const {
  const std::size_t n = kept_count();
  if (n == 0) throw StateError("invariant subgrid is empty");
  std::size_t pick = rng.index(n);
  for (std::size_t k = 0; k < kept.size(); ++k) {
    if (kept[k] && pick-- == 0) return cell(k).sample(rng);
  }
  throw StateError("invariant subgrid sampling failed");
}

InvariantSubgrid invariant_subgrid(const SystemSpec& spec, const BernsteinApprox& approx, const Box& region,
                                   int cells_per_dim, int max_iterations) {
  const auto start = Clock::now();
  if (!region.is_finite()) throw DomainError("invariant_subgrid: region must be finite");
  InvariantSubgrid g;
  g.region = region;
  g.cells_per_dim = cells_per_dim;
  const std::vector<Box> cells = region.subdivide(cells_per_dim);
  const auto edges = grid_edges(region, cells_per_dim);
  const int d = region.dim();
  g.kept.assign(cells.size(), 0);
  // Per cell: span of covering cell indices per dimension.
  std::vector<std::vector<std::pair<int, int>>> cover(cells.size());
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (!spec.safe_region.contains(cells[k])) continue;
    try {
      const Box image = interval_reach_step(spec, cells[k], approx, spec.disturbance_bound);
      if (!region.contains(image)) continue;
      for (int i = 0; i < d; ++i) cover[k].push_back(cell_span(edges[static_cast<std::size_t>(i)], image.lo(i), image.hi(i)));
      g.kept[k] = 1;
    } catch (const CoverageError&) {
    }
  }
  bool changed = true;
  std::vector<int> idx(static_cast<std::size_t>(d));
  while (changed && g.iterations < max_iterations) {
    changed = false;
    ++g.iterations;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (!g.kept[k]) continue;
      const auto& span = cover[k];
      for (int i = 0; i < d; ++i) idx[static_cast<std::size_t>(i)] = span[static_cast<std::size_t>(i)].first;
      bool covered = true;
      while (covered) {
        std::size_t flat = 0;
        for (int i = 0; i < d; ++i) flat = flat * static_cast<std::size_t>(cells_per_dim) + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]);
        if (!g.kept[flat]) covered = false;
        int i = d - 1;
        while (i >= 0 && idx[static_cast<std::size_t>(i)] == span[static_cast<std::size_t>(i)].second) {
          idx[static_cast<std::size_t>(i)] = span[static_cast<std::size_t>(i)].first;
          --i;
        }
        if (i < 0) break;
        ++idx[static_cast<std::size_t>(i)];
      }
      if (!covered) {
        g.kept[k] = 0;
        changed = true;
      }
    }
  }
  if (changed) std::fill(g.kept.begin(), g.kept.end(), 0);  // no fixed point reached; claim nothing
  g.milliseconds = elapsed_ms(start);
  return g;
}

namespace {

template <class Sampler, class Member>
AuditResult run_audit(const SystemSpec& spec, const nn::Network& net, int n, int steps, Rng& rng, int keep,
                      bool require_full, Sampler&& sample, Member&& member) {
  const SystemSpec sim = spec.with_horizon(std::max(steps, 1));
  const Controller ctl = [&net, &spec](const VectorXd& s) { return spec.input_bound.clamp(nn::forward(net, s)); };
  AuditResult out;
  for (int k = 0; k < n; ++k) {
    const VectorXd s0 = sample(rng);
    RolloutStreams streams = RolloutStreams::from_seed(rng.next_u64());
    Trajectory tr = steps == 0 ? Trajectory{{s0}, {}, {}, {}, {}, true, std::nullopt, false}
                               : rollout(sim, ctl, s0, PerturbationModel::none(), streams);
    bool ok = !tr.controller_fault;
    for (std::size_t t = 0; ok && t < tr.states.size(); ++t) ok = member(t, tr.states[t]);
    // Invariant sets lie in X, so leaving X early is a violation there.
    if (require_full && ok && static_cast<int>(tr.steps()) < steps) ok = false;
    ++out.trajectories;
    if (!ok) ++out.violations;
    if (k < keep) out.samples.push_back(std::move(tr));
  }
  return out;
}

}  // namespace

AuditResult audit_reach(const SystemSpec& spec, const nn::Network& net, const ReachResult& reach, int n, Rng& rng,
                        int keep) {
  if (reach.boxes.empty()) throw StateError("audit_reach: no boxes");
  const int steps = static_cast<int>(reach.boxes.size()) - 1;
  return run_audit(
      spec, net, n, steps, rng, keep, false, [&](Rng& r) { return reach.boxes.front().sample(r); },
      [&](std::size_t t, const VectorXd& s) { return t >= reach.boxes.size() || reach.boxes[t].contains(s); });
}

AuditResult audit_invariant(const SystemSpec& spec, const nn::Network& net, const Box& set, int n, int steps,
                            Rng& rng, int keep) {
  return run_audit(
      spec, net, n, steps, rng, keep, true, [&](Rng& r) { return set.sample(r); },
      [&](std::size_t, const VectorXd& s) { return set.contains(s); });
}

AuditResult audit_invariant(const SystemSpec& spec, const nn::Network& net, const InvariantSubgrid& set, int n,
                            int steps, Rng& rng, int keep) {
  return run_audit(
      spec, net, n, steps, rng, keep, true, [&](Rng& r) { return set.sample(r); },
      [&](std::size_t, const VectorXd& s) { return set.contains(s); });
}

namespace {

nlohmann::json box_json(const Box& b) {
  return {{"lo", std::vector<double>(b.lo().data(), b.lo().data() + b.dim())},
          {"hi", std::vector<double>(b.hi().data(), b.hi().data() + b.dim())}};
}

}  // namespace

nlohmann::json to_json(const BernsteinApprox& approx) {
  nlohmann::json parts = nlohmann::json::array();
  for (const auto& p : approx.partitions) parts.push_back({{"box", box_json(p.box)}, {"error", p.error}});
  return {{"domain", box_json(approx.domain)},
          {"partitions", parts},
          {"partition_count", approx.partitions.size()},
          {"epsilon", approx.epsilon},
          {"target_met", approx.target_met}};
}

nlohmann::json to_json(const ReachResult& r) {
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : r.boxes) boxes.push_back(box_json(b));
  return {{"safe", r.safe},
          {"inconclusive", r.inconclusive},
          {"failure_step", r.failure_step ? nlohmann::json(*r.failure_step) : nlohmann::json()},
          {"diagnostic", r.diagnostic},
          {"time_ms", r.milliseconds},
          {"boxes", boxes}};
}

nlohmann::json to_json(const InvariantResult& r) {
  return {{"invariant", r.invariant}, {"cells", r.cells}, {"diagnostic", r.diagnostic}, {"time_ms", r.milliseconds}};
}

nlohmann::json to_json(const InvariantSubgrid& g) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& b : g.kept_cells()) cells.push_back(box_json(b));
  return {{"region", box_json(g.region)},
          {"cells_per_dim", g.cells_per_dim},
          {"kept", g.kept_count()},
          {"iterations", g.iterations},
          {"time_ms", g.milliseconds},
          {"cells", cells}};
}

void write_boxes_csv(const std::vector<Box>& boxes, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ResourceError("cannot write " + path.string());
  const int d = boxes.empty() ? 0 : boxes.front().dim();
  out << "step";
  for (int i = 0; i < d; ++i) out << ",lo_" << i + 1;
  for (int i = 0; i < d; ++i) out << ",hi_" << i + 1;
  out << '\n';
  out.precision(17);
  for (std::size_t t = 0; t < boxes.size(); ++t) {
    out << t;
    for (int i = 0; i < d; ++i) out << ',' << boxes[t].lo(i);
    for (int i = 0; i < d; ++i) out << ',' << boxes[t].hi(i);
    out << '\n';
  }
}

}  // namespace mixdistill
