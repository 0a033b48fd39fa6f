#include "mixdistill/polynomial.hpp"

#include <string>

namespace mixdistill {

void Polynomial::validate() const {
  for (const Monomial& m : terms) {
    if (static_cast<int>(m.powers.size()) != num_vars) {
      throw ValidationError("monomial has " + std::to_string(m.powers.size()) +
                            " exponents, polynomial has " + std::to_string(num_vars) + " variables");
    }
    for (int p : m.powers) {
      if (p < 0) throw ValidationError("negative exponent in polynomial");
    }
    if (!std::isfinite(m.coefficient)) throw ValidationError("non-finite polynomial coefficient");
  }
}

Polynomial polynomial_from_json(const nlohmann::json& doc, int num_vars) {
  if (!doc.is_array()) throw ParseError("polynomial: expected an array of terms", 0);
  Polynomial p;
  p.num_vars = num_vars;
  for (const auto& t : doc) {
    if (!t.is_object() || !t.contains("coef") || !t.contains("powers")) {
      throw ParseError("polynomial: each term needs 'coef' and 'powers'", 0);
    }
    try {
      p.terms.push_back({t.at("coef").get<double>(), t.at("powers").get<std::vector<int>>()});
    } catch (const nlohmann::json::exception&) {
      throw ParseError("polynomial: term has the wrong field types", 0);
    }
  }
  p.validate();
  return p;
}

nlohmann::json to_json(const Polynomial& p) {
  nlohmann::json terms = nlohmann::json::array();
  for (const Monomial& m : p.terms) terms.push_back({{"coef", m.coefficient}, {"powers", m.powers}});
  return terms;
}

}  // namespace mixdistill
