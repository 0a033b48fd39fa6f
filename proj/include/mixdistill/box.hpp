#pragma once

#include <Eigen/Dense>

#include <optional>
#include <utility>
#include <vector>

namespace mixdistill {

class Rng;

/// Axis-aligned box {x : lo <= x <= hi}. Bounds may be infinite, which is how
/// safe regions that leave some coordinates unconstrained are expressed;
/// reachable sets and domains are always finite.
class Box {
 public:
  Box() = default;
  Box(Eigen::VectorXd lo, Eigen::VectorXd hi);
  Box(std::initializer_list<std::pair<double, double>> bounds);

  static Box point(const Eigen::VectorXd& x) { return Box(x, x); }
  static Box cube(int dim, double lo, double hi);
  static Box unbounded(int dim);

  int dim() const { return static_cast<int>(lo_.size()); }
  const Eigen::VectorXd& lo() const { return lo_; }
  const Eigen::VectorXd& hi() const { return hi_; }
  double lo(int i) const { return lo_[i]; }
  double hi(int i) const { return hi_[i]; }

  Eigen::VectorXd width() const { return hi_ - lo_; }
  Eigen::VectorXd center() const { return 0.5 * (lo_ + hi_); }
  Eigen::VectorXd half_range() const { return 0.5 * (hi_ - lo_); }
  bool is_finite() const { return lo_.allFinite() && hi_.allFinite(); }
  bool is_point() const { return lo_ == hi_; }
  int widest_dim() const;

  bool contains(const Eigen::VectorXd& x) const;
  bool contains(const Box& other) const;
  bool overlaps(const Box& other) const;
  std::optional<Box> intersect(const Box& other) const;
  Box hull(const Box& other) const;

  /// Minkowski sum with the symmetric box [-r, r].
  Box inflate(const Eigen::VectorXd& r) const;
  /// Componentwise clamp of x into the box.
  Eigen::VectorXd clamp(const Eigen::VectorXd& x) const;

  std::pair<Box, Box> bisect(int dim) const;
  std::pair<Box, Box> bisect_widest() const { return bisect(widest_dim()); }
  /// Uniform grid of cells_per_dim^d sub-boxes, row-major with dim 0 slowest.
  std::vector<Box> subdivide(int cells_per_dim) const;

  Eigen::VectorXd sample(Rng& rng) const;

  bool operator==(const Box& other) const {
    return lo_ == other.lo_ && hi_ == other.hi_;
  }

 private:
  Eigen::VectorXd lo_;
  Eigen::VectorXd hi_;
};

}  // namespace mixdistill
