#include "mixdistill/box.hpp"

#include <cmath>
#include <limits>

#include "mixdistill/errors.hpp"
#include "mixdistill/rng.hpp"

namespace mixdistill {

Box::Box(Eigen::VectorXd lo, Eigen::VectorXd hi) : lo_(std::move(lo)), hi_(std::move(hi)) {
  if (lo_.size() != hi_.size()) {
    throw ShapeError("Box: lo and hi have different dimensions");
  }
  for (int i = 0; i < lo_.size(); ++i) {
    if (std::isnan(lo_[i]) || std::isnan(hi_[i]) || lo_[i] > hi_[i]) {
      throw DomainError("Box: need lo <= hi in every dimension");
    }
  }
}

Box::Box(std::initializer_list<std::pair<double, double>> bounds) {
  Eigen::VectorXd lo(bounds.size()), hi(bounds.size());
  int i = 0;
  for (const auto& [l, h] : bounds) {
    lo[i] = l;
    hi[i] = h;
    ++i;
  }
  *this = Box(std::move(lo), std::move(hi));
}

Box Box::cube(int dim, double lo, double hi) {
  return Box(Eigen::VectorXd::Constant(dim, lo), Eigen::VectorXd::Constant(dim, hi));
}

Box Box::unbounded(int dim) {
  const double inf = std::numeric_limits<double>::infinity();
  return cube(dim, -inf, inf);
}

int Box::widest_dim() const {
  int best = 0;
  for (int i = 1; i < dim(); ++i) {
    if (hi_[i] - lo_[i] > hi_[best] - lo_[best]) best = i;
  }
  return best;
}

bool Box::contains(const Eigen::VectorXd& x) const {
  if (x.size() != lo_.size()) throw ShapeError("Box::contains: dimension mismatch");
  for (int i = 0; i < x.size(); ++i) {
    if (!(x[i] >= lo_[i] && x[i] <= hi_[i])) return false;
  }
  return true;
}

bool Box::contains(const Box& other) const {
  if (other.dim() != dim()) throw ShapeError("Box::contains: dimension mismatch");
  return (other.lo_.array() >= lo_.array()).all() && (other.hi_.array() <= hi_.array()).all();
}

bool Box::overlaps(const Box& other) const {
  if (other.dim() != dim()) throw ShapeError("Box::overlaps: dimension mismatch");
  return (other.lo_.array() <= hi_.array()).all() && (lo_.array() <= other.hi_.array()).all();
}

std::optional<Box> Box::intersect(const Box& other) const {
  if (!overlaps(other)) return std::nullopt;
  return Box(lo_.cwiseMax(other.lo_), hi_.cwiseMin(other.hi_));
}

Box Box::hull(const Box& other) const {
  if (other.dim() != dim()) throw ShapeError("Box::hull: dimension mismatch");
  return Box(lo_.cwiseMin(other.lo_), hi_.cwiseMax(other.hi_));
}

Box Box::inflate(const Eigen::VectorXd& r) const {
  if (r.size() != dim()) throw ShapeError("Box::inflate: dimension mismatch");
  if ((r.array() < 0.0).any()) throw DomainError("Box::inflate: negative radius");
  return Box(lo_ - r, hi_ + r);
}

Eigen::VectorXd Box::clamp(const Eigen::VectorXd& x) const {
  if (x.size() != dim()) throw ShapeError("Box::clamp: dimension mismatch");
  return x.cwiseMax(lo_).cwiseMin(hi_);
}

std::pair<Box, Box> Box::bisect(int d) const {
  const double mid = 0.5 * (lo_[d] + hi_[d]);
  Eigen::VectorXd left_hi = hi_, right_lo = lo_;
  left_hi[d] = mid;
  right_lo[d] = mid;
  return {Box(lo_, left_hi), Box(right_lo, hi_)};
}

std::vector<Box> Box::subdivide(int cells_per_dim) const {
  if (cells_per_dim < 1) throw DomainError("Box::subdivide: need at least one cell");
  const int d = dim();
  std::size_t total = 1;
  for (int i = 0; i < d; ++i) total *= static_cast<std::size_t>(cells_per_dim);
  std::vector<Box> cells;
  cells.reserve(total);
  std::vector<int> idx(d, 0);
  const Eigen::VectorXd w = width();
  for (std::size_t c = 0; c < total; ++c) {
    std::size_t rem = c;
    for (int i = d - 1; i >= 0; --i) {
      idx[i] = static_cast<int>(rem % cells_per_dim);
      rem /= cells_per_dim;
    }
    Eigen::VectorXd lo(d), hi(d);
    for (int i = 0; i < d; ++i) {
      lo[i] = lo_[i] + w[i] * idx[i] / cells_per_dim;
      hi[i] = idx[i] + 1 == cells_per_dim ? hi_[i] : lo_[i] + w[i] * (idx[i] + 1) / cells_per_dim;
    }
    cells.emplace_back(std::move(lo), std::move(hi));
  }
  return cells;
}

Eigen::VectorXd Box::sample(Rng& rng) const {
  if (!is_finite()) throw DomainError("Box::sample: cannot sample an unbounded box");
  Eigen::VectorXd x(dim());
  for (int i = 0; i < dim(); ++i) x[i] = rng.uniform(lo_[i], hi_[i]);
  return x;
}

}  // namespace mixdistill
