// SPDX-License-Identifier: Apache-2.0
//
// Self-contained numerical checks with pinned tolerances. Each returns the
// inputs it used, what it measured, the bound it compared against and a
// verdict; the report is plain JSON.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace mi::checks {

struct CheckResult {
  std::string name;
  nlohmann::json inputs = nlohmann::json::object();
  nlohmann::json measured = nlohmann::json::object();
  nlohmann::json bound = nlohmann::json::object();
  bool pass = false;
  std::vector<std::string> table;  // optional human-readable rows
};

/// closedform, thm1, prop1, prop2, neumann, hvp, balance.
const std::vector<std::string>& check_names();
bool is_check(const std::string& name);

/// Throws ConfigError for an unknown name. Results depend only on the seed.
CheckResult run_check(const std::string& name, std::uint64_t seed, unsigned threads = 1);

/// Pair forward of the simple set function against W(h + α(h′ − h)) + b.
CheckResult closed_form(std::uint64_t seed, std::size_t draws = 200);
/// Remainder slopes of the first- and second-order expansions of the mixed loss.
CheckResult expansion_remainder(std::uint64_t seed, std::size_t problems = 5);
/// Logistic special case on mirrored tasks: quadratic form and sign of c.
CheckResult logistic_regularizer(std::uint64_t seed);
/// Rademacher bound over n ∈ {4, 8, 12} × rank ∈ {1, 2, 4} × R ∈ {1, 4}.
CheckResult rademacher_grid(std::uint64_t seed, unsigned threads = 1, std::size_t trials = 200);
/// Neumann hypergradient on a scalar quadratic and on random 3-parameter quadratics.
CheckResult neumann(std::uint64_t seed);
/// Tape gradients and Hessian-vector products of the singleton, mixed and
/// inner losses against central differences.
CheckResult gradients(std::uint64_t seed);
/// α-balance residual of the mirrored construction and of random tasks.
CheckResult balance(std::uint64_t seed);

nlohmann::json to_json(const CheckResult& r);
nlohmann::json report(const std::vector<CheckResult>& results);

}  // namespace mi::checks
