// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "metainterp/checks.hpp"
#include "metainterp/errors.hpp"

using namespace mi;
using namespace mi::checks;

TEST_CASE("check names and dispatch") {
  CHECK(check_names().size() == 7);
  CHECK(is_check("neumann"));
  CHECK_FALSE(is_check("thm2"));
  CHECK_THROWS_AS(run_check("nope", 0), ConfigError);
}

TEST_CASE("closed form pair forward") {
  const auto r = closed_form(1, 40);
  CHECK(r.pass);
  CHECK(r.measured["pair_max_abs_error"].get<double>() <= 1e-9);
}

TEST_CASE("expansion remainder slopes") {
  const auto r = expansion_remainder(2, 2);
  CHECK(r.pass);
  CHECK(r.measured["fits"].size() == 2);
}

TEST_CASE("logistic regularizer") {
  const auto r = logistic_regularizer(3);
  CHECK(r.pass);
  CHECK(r.measured["accepted_draws"].get<int>() == 20);
  CHECK(r.measured["min_c_better_than_chance"].get<double>() > 0.0);
}

TEST_CASE("rademacher grid, reduced trials, threaded matches serial") {
  const auto a = rademacher_grid(4, 1, 20);
  const auto b = rademacher_grid(4, 3, 20);
  CHECK(a.pass);
  CHECK(a.measured.dump() == b.measured.dump());
  CHECK(a.table.size() == 18);
}

TEST_CASE("neumann hypergradient") {
  const auto r = neumann(5);
  CHECK(r.pass);
  CHECK(r.measured["scalar_value"].get<double>() == doctest::Approx(0.99951171875).epsilon(1e-12));
  CHECK(r.measured["monotone"].get<bool>());
}

TEST_CASE("gradient and hvp integrity") {
  const auto r = gradients(6);
  CHECK(r.pass);
  for (const char* k : {"singleton", "mixed", "inner"}) {
    CAPTURE(k);
    CHECK(r.measured[k]["gradient_rel_error"].get<double>() <= 1e-5);
    CHECK(r.measured[k]["hvp_rel_error"].get<double>() <= 1e-4);
  }
}

TEST_CASE("balance residuals") {
  const auto r = balance(7);
  CHECK(r.pass);
  CHECK(r.measured["single_pairing_residual"].get<double>() > 1e-6);
}

TEST_CASE("results are seed-deterministic and serialize") {
  const auto a = run_check("balance", 11);
  const auto b = run_check("balance", 11);
  CHECK(to_json(a).dump() == to_json(b).dump());
  const auto rep = report({a, b});
  CHECK(rep["checks"].size() == 2);
  CHECK(rep["pass"].get<bool>() == a.pass);
}
