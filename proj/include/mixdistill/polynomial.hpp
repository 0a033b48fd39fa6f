#pragma once

#include <json.hpp>

#include <span>
#include <vector>

#include "mixdistill/interval.hpp"

namespace mixdistill {

struct Monomial {
  double coefficient = 0.0;
  std::vector<int> powers;  // one exponent per variable
};

/// Sparse multivariate polynomial in a fixed number of variables.
struct Polynomial {
  int num_vars = 0;
  std::vector<Monomial> terms;

  /// Shared by the scalar and interval paths so that point intervals give
  /// the scalar result exactly.
  template <typename T>
  T evaluate(std::span<const T> vars) const {
    T sum(0.0);
    for (const Monomial& m : terms) {
      T term(m.coefficient);
      for (int i = 0; i < num_vars; ++i) {
        if (m.powers[i] > 0) term = term * pow_int(vars[i], m.powers[i]);
      }
      sum = sum + term;
    }
    return sum;
  }

  void validate() const;
};

/// JSON: array of {"coef": number, "powers": [int, ...]}.
Polynomial polynomial_from_json(const nlohmann::json& doc, int num_vars);
nlohmann::json to_json(const Polynomial& p);

}  // namespace mixdistill
