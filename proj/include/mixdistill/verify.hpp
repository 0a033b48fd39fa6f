#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mixdistill/box.hpp"
#include "mixdistill/dynamics.hpp"
#include "mixdistill/interval.hpp"
#include "mixdistill/nn.hpp"

namespace mixdistill {

using VectorFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

/// Tensor-product Bernstein polynomial on a box, one coefficient tensor per
/// output. Tensors are flattened row-major with dimension 0 slowest.
class BernsteinPoly {
 public:
  BernsteinPoly() = default;
  BernsteinPoly(Box domain, std::vector<int> degree, std::vector<Eigen::VectorXd> coefficients);

  const Box& domain() const { return domain_; }
  const std::vector<int>& degree() const { return degree_; }
  int outputs() const { return static_cast<int>(coeffs_.size()); }
  const Eigen::VectorXd& coefficients(int output) const { return coeffs_.at(static_cast<std::size_t>(output)); }

  Eigen::VectorXd evaluate(const Eigen::VectorXd& x) const;
  /// Enclosure of each output over `sub`, which must lie in the domain.
  IntervalVector range(const Box& sub) const;
  /// Upper bound on the 2-norm of the gradient of `output` over the domain.
  double gradient_bound(int output) const;

 private:
  Box domain_;
  std::vector<int> degree_;
  std::vector<Eigen::VectorXd> coeffs_;
};

/// Coefficients are f at the grid points k/d mapped affinely onto the domain.
/// Throws ResourceError when the coefficient count would exceed the cap.
BernsteinPoly bernstein_fit(const VectorFn& f, int outputs, const Box& domain, const std::vector<int>& degree,
                            std::size_t max_coefficients = 1000000);
BernsteinPoly bernstein_fit(const nn::Network& net, const Box& domain, int degree,
                            std::size_t max_coefficients = 1000000);

/// max over grid points of |f - B| plus (L_f + L_B) * rho, where rho is the
/// half-diagonal of a grid cell (grid_density points per dimension). Covers
/// every point of the polynomial's domain; maximized over outputs.
double approx_error_bound(const VectorFn& f, double lipschitz_f, const BernsteinPoly& poly, int grid_density);
double approx_error_bound(const nn::Network& net, const BernsteinPoly& poly, int grid_density = 20);

struct ApproxPartition {
  Box box;
  BernsteinPoly poly;
  double error = 0.0;
};

struct BernsteinApprox {
  Box domain;
  std::vector<ApproxPartition> partitions;
  double epsilon = 0.0;  // max partition error
  bool target_met = false;
  int outputs = 0;
};

struct PartitionConfig {
  double target_epsilon = 0.0;  // required positive
  int degree = 3;
  int max_partitions = 256;
  int grid_density = 20;
  std::size_t max_coefficients = 1000000;
};

/// Bisects any partition whose error exceeds the target along its widest
/// dimension, until every partition meets the target or max_partitions is
/// reached (then target_met is false).
BernsteinApprox partition_and_fit(const nn::Network& net, const Box& domain, const PartitionConfig& cfg);

/// One step of the closed loop over a box. Throws CoverageError when x is not
/// inside the approximation domain.
Box interval_reach_step(const SystemSpec& spec, const Box& x, const BernsteinApprox& approx,
                        const Box& omega);

struct ReachResult {
  std::vector<Box> boxes;  // X_R(0..T), fewer when stopped early
  bool safe = false;
  bool inconclusive = false;
  std::optional<int> failure_step;
  std::string diagnostic;
  double milliseconds = 0.0;
};

/// Safe iff every X_R(t) for t = 0..T lies in the safe region. Stops at the
/// first box that leaves it; coverage problems are reported as inconclusive.
ReachResult verify_reach(const SystemSpec& spec, const BernsteinApprox& approx, const Box& x0, int steps);

struct InvariantResult {
  bool invariant = false;
  int cells = 0;
  std::string diagnostic;
  double milliseconds = 0.0;
};

/// Invariant iff the one-step image of each of cells_per_dim^d sub-cells of
/// the candidate lies inside the candidate. Sound, not complete.
InvariantResult verify_invariant(const SystemSpec& spec, const BernsteinApprox& approx, const Box& candidate,
                                 int cells_per_dim = 8);

/// Union of grid cells over `region` closed under the interval one-step map:
/// cells whose image is not covered by kept cells are removed until nothing
/// changes. Any state in the union stays in it forever.
struct InvariantSubgrid {
  Box region;
  int cells_per_dim = 0;
  std::vector<char> kept;  // per cell, row-major, dim 0 slowest
  int iterations = 0;
  double milliseconds = 0.0;

  std::size_t kept_count() const;
  bool empty() const { return kept_count() == 0; }
  Box cell(std::size_t index) const;
  std::vector<Box> kept_cells() const;
  bool contains(const Eigen::VectorXd& x) const;
  /// Uniform sample from the union (all cells have equal volume).
  Eigen::VectorXd sample(Rng& rng) const;
};

InvariantSubgrid invariant_subgrid(const SystemSpec& spec, const BernsteinApprox& approx, const Box& region,
                                   int cells_per_dim, int max_iterations = 10000);

/// Simulation audits with the exact network in the loop (controls clipped to
/// U, random disturbances). A violation is a trajectory that leaves the
/// claimed set at some step.
struct AuditResult {
  int trajectories = 0;
  int violations = 0;
  std::vector<Trajectory> samples;  // the first `keep` trajectories
};
AuditResult audit_reach(const SystemSpec& spec, const nn::Network& net, const ReachResult& reach, int n, Rng& rng,
                        int keep = 0);
AuditResult audit_invariant(const SystemSpec& spec, const nn::Network& net, const Box& set, int n, int steps,
                            Rng& rng, int keep = 0);
AuditResult audit_invariant(const SystemSpec& spec, const nn::Network& net, const InvariantSubgrid& set, int n,
                            int steps, Rng& rng, int keep = 0);

nlohmann::json to_json(const BernsteinApprox& approx);
nlohmann::json to_json(const ReachResult& r);
nlohmann::json to_json(const InvariantResult& r);
nlohmann::json to_json(const InvariantSubgrid& g);
/// Columns: step, lo_1..lo_n, hi_1..hi_n.
void write_boxes_csv(const std::vector<Box>& boxes, const std::filesystem::path& path);

}  // namespace mixdistill
