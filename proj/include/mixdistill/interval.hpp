#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "mixdistill/box.hpp"
#include "mixdistill/errors.hpp"

namespace mixdistill {

/// Closed real interval with natural interval arithmetic.
///
/// Endpoints are computed with the same floating-point operations a point
/// evaluation would use. Round-to-nearest is monotone, so for the rational
/// operations below the result encloses every value the point evaluator can
/// produce for arguments inside the operands, and a point operand yields
/// exactly the point result. Library sin/cos are not guaranteed monotone, so
/// non-degenerate transcendental results are widened by two ulps.
struct Interval {
  double lo = 0.0;
  double hi = 0.0;

  constexpr Interval() = default;
  constexpr Interval(double x) : lo(x), hi(x) {}  // NOLINT: implicit point
  Interval(double l, double h) : lo(l), hi(h) {
    if (!(l <= h)) throw DomainError("Interval: need lo <= hi");
  }

  bool is_point() const { return lo == hi; }
  double width() const { return hi - lo; }
  bool contains(double x) const { return x >= lo && x <= hi; }
  bool contains(const Interval& o) const { return o.lo >= lo && o.hi <= hi; }
};

inline Interval hull(const Interval& a, const Interval& b) {
  return {std::min(a.lo, b.lo), std::max(a.hi, b.hi)};
}

inline Interval operator+(const Interval& a, const Interval& b) { return {a.lo + b.lo, a.hi + b.hi}; }
inline Interval operator-(const Interval& a, const Interval& b) { return {a.lo - b.hi, a.hi - b.lo}; }
inline Interval operator-(const Interval& a) { return {-a.hi, -a.lo}; }

inline Interval operator*(const Interval& a, const Interval& b) {
  if (a.is_point() && b.is_point()) return Interval(a.lo * b.lo);
  const double p1 = a.lo * b.lo, p2 = a.lo * b.hi, p3 = a.hi * b.lo, p4 = a.hi * b.hi;
  return {std::min({p1, p2, p3, p4}), std::max({p1, p2, p3, p4})};
}

inline Interval operator/(const Interval& a, const Interval& b) {
  if (b.lo <= 0.0 && b.hi >= 0.0) throw DomainError("Interval division by an interval containing 0");
  if (a.is_point() && b.is_point()) return Interval(a.lo / b.lo);
  const double q1 = a.lo / b.lo, q2 = a.lo / b.hi, q3 = a.hi / b.lo, q4 = a.hi / b.hi;
  return {std::min({q1, q2, q3, q4}), std::max({q1, q2, q3, q4})};
}

inline Interval& operator+=(Interval& a, const Interval& b) { return a = a + b; }

inline double square(double x) { return x * x; }

inline Interval square(const Interval& x) {
  const double a = x.lo * x.lo, b = x.hi * x.hi;
  if (x.lo >= 0.0) return {a, b};
  if (x.hi <= 0.0) return {b, a};
  return {0.0, std::max(a, b)};
}

/// x^p by repeated multiplication; both overloads share the loop so point
/// intervals reproduce the scalar result bit for bit.
inline double pow_int(double x, int p) {
  double r = 1.0;
  for (int i = 0; i < p; ++i) r = r * x;
  return r;
}

inline Interval pow_int(const Interval& x, int p) {
  if (p == 0) return Interval(1.0);
  if (x.is_point()) return Interval(pow_int(x.lo, p));
  const double a = pow_int(x.lo, p), b = pow_int(x.hi, p);
  if (p % 2 == 0 && x.lo < 0.0 && x.hi > 0.0) return {0.0, std::max(a, b)};
  return {std::min(a, b), std::max(a, b)};
}

namespace detail {

inline Interval widen_ulps(Interval r) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 2; ++i) {
    r.lo = std::nextafter(r.lo, -inf);
    r.hi = std::nextafter(r.hi, inf);
  }
  return r;
}

// True if some point c + k*period, k integer, lies in [lo, hi].
inline bool hits(double lo, double hi, double c, double period) {
  const double k = std::ceil((lo - c) / period);
  return c + k * period <= hi;
}

}  // namespace detail

inline Interval sin(const Interval& x) {
  if (x.is_point()) return Interval(std::sin(x.lo));
  constexpr double kPi = 3.14159265358979323846;
  if (x.width() >= 2.0 * kPi) return {-1.0, 1.0};
  const double a = std::sin(x.lo), b = std::sin(x.hi);
  Interval r{std::min(a, b), std::max(a, b)};
  if (detail::hits(x.lo, x.hi, 0.5 * kPi, 2.0 * kPi)) r.hi = 1.0;
  if (detail::hits(x.lo, x.hi, -0.5 * kPi, 2.0 * kPi)) r.lo = -1.0;
  return detail::widen_ulps(r);
}

inline Interval cos(const Interval& x) {
  if (x.is_point()) return Interval(std::cos(x.lo));
  constexpr double kPi = 3.14159265358979323846;
  if (x.width() >= 2.0 * kPi) return {-1.0, 1.0};
  const double a = std::cos(x.lo), b = std::cos(x.hi);
  Interval r{std::min(a, b), std::max(a, b)};
  if (detail::hits(x.lo, x.hi, 0.0, 2.0 * kPi)) r.hi = 1.0;
  if (detail::hits(x.lo, x.hi, kPi, 2.0 * kPi)) r.lo = -1.0;
  return detail::widen_ulps(r);
}

inline Interval clamp(const Interval& x, double lo, double hi) {
  return {std::clamp(x.lo, lo, hi), std::clamp(x.hi, lo, hi)};
}

using IntervalVector = std::vector<Interval>;

inline IntervalVector to_intervals(const Box& b) {
  IntervalVector v(b.dim());
  for (int i = 0; i < b.dim(); ++i) v[i] = Interval(b.lo(i), b.hi(i));
  return v;
}

inline Box to_box(const IntervalVector& v) {
  Eigen::VectorXd lo(v.size()), hi(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    lo[i] = v[i].lo;
    hi[i] = v[i].hi;
  }
  return Box(std::move(lo), std::move(hi));
}

}  // namespace mixdistill
