// SPDX-License-Identifier: Apache-2.0
#include "metainterp/checks.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <thread>

#include "metainterp/bilevel.hpp"
#include "metainterp/errors.hpp"
#include "metainterp/theory.hpp"

namespace mi::checks {

namespace {

using nlohmann::json;

Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = scale * standard_normal(rng);
  return t;
}

setfunc::SimpleSetParams random_simple(std::size_t d, Rng& rng, double scale) {
  setfunc::SetFunction f = setfunc::init_simple(d, rng);
  setfunc::for_each_tensor(f, [&](const std::string&, Tensor& t) {
    t = gaussian(rng, t.rows(), t.cols(), scale);
  });
  return std::get<setfunc::SimpleSetParams>(f);
}

episodes::Task random_task(Rng& rng, int way, int shots, int queries, std::size_t dims) {
  episodes::Task t;
  t.way = way;
  for (int k = 0; k < way; ++k) {
    for (int i = 0; i < shots + queries; ++i) {
      episodes::Example ex;
      ex.label = k;
      for (std::size_t c = 0; c < dims; ++c) ex.features.push_back(standard_normal(rng) + 0.5 * k);
      (i < shots ? t.support : t.query).push_back(std::move(ex));
    }
  }
  return t;
}

theory::TheoryProblem random_problem(Rng& rng) {
  theory::TheoryProblem p;
  p.t = random_task(rng, 3, 2, 4, 4);
  p.t_prime = random_task(rng, 3, 3, 2, 4);
  const std::size_t widths[] = {4, 6, 3};
  p.encoder = protonet::init_encoder(widths, 1, rng);
  p.setfn = random_simple(6, rng, 0.7);
  p.sigma = {1, 2, 0};
  return p;
}

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

// ---------------------------------------------------------------------------
// Neumann oracle on L_tr = ½θAθᵀ + θBλᵀ + ½λλᵀ, L_V = ½‖θ − t‖² + θEλᵀ + eλᵀ.

struct Quadratic {
  Eigen::MatrixXd a, b, e;
  Eigen::VectorXd target, e_vec;
};

Tensor row_of(const Eigen::VectorXd& v) {
  Tensor t(1, static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) t[static_cast<std::size_t>(i)] = v(i);
  return t;
}

Tensor mat_of(const Eigen::MatrixXd& m) {
  Tensor t(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      t(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = m(i, j);
  return t;
}

Eigen::MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * standard_normal(rng);
  return m;
}

Quadratic random_quadratic(Rng& rng, Eigen::Index n) {
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(random_matrix(rng, n, n));
  const Eigen::MatrixXd q = qr.householderQ();
  Eigen::VectorXd spec(n);
  std::uniform_real_distribution<double> uni(1.0, 2.0);
  for (Eigen::Index i = 0; i < n; ++i) spec(i) = uni(rng);
  Quadratic out;
  out.a = q * spec.asDiagonal() * q.transpose();
  out.b = random_matrix(rng, n, n);
  out.e = random_matrix(rng, n, n, 0.5);
  out.target = random_matrix(rng, n, 1);
  out.e_vec = random_matrix(rng, n, 1);
  return out;
}

ad::Var quad_form(const ad::Var& x, const Eigen::MatrixXd& m, const ad::Var& y) {
  return ad::sum(ad::mul(ad::matmul(x, x.tape()->constant(mat_of(m))), y));
}

Eigen::VectorXd neumann_hypergrad(const Quadratic& q, const Eigen::VectorXd& theta,
                                  const Eigen::VectorXd& lambda, double alpha, std::size_t steps) {
  ad::Tape tape;
  ad::Var th = tape.variable(row_of(theta));
  ad::Var la = tape.variable(row_of(lambda));
  ad::Var ltr = ad::scale(quad_form(th, q.a, th), 0.5) + quad_form(th, q.b, la) +
                ad::scale(ad::sum(ad::mul(la, la)), 0.5);
  ad::Var d = ad::add_const(th, -1.0 * row_of(q.target));
  ad::Var lv = ad::scale(ad::sum(ad::mul(d, d)), 0.5) + quad_form(th, q.e, la) +
               ad::sum(ad::mul_const(la, row_of(q.e_vec)));
  const std::vector<ad::Var> ths{th}, las{la};
  const auto g = ad::grad(ltr, ths, true);
  const Tensor h = bilevel::hypergrad(g, ths, las, lv, alpha, steps)[0];
  Eigen::VectorXd out(theta.size());
  for (Eigen::Index i = 0; i < out.size(); ++i) out(i) = h[static_cast<std::size_t>(i)];
  return out;
}

// ∂L_V/∂λ − Bᵀ A⁻¹ ∂L_V/∂θ.
Eigen::VectorXd exact_hypergrad(const Quadratic& q, const Eigen::VectorXd& theta,
                                const Eigen::VectorXd& lambda) {
  const Eigen::VectorXd dv_dth = theta - q.target + q.e * lambda;
  const Eigen::VectorXd dv_dla = q.e.transpose() * theta + q.e_vec;
  return dv_dla - q.b.transpose() * q.a.ldlt().solve(dv_dth);
}

// ---------------------------------------------------------------------------
// Finite-difference integrity of model losses over the flattened parameters.

using ModelLoss = std::function<ad::Var(const protonet::ModelVars&)>;

struct Flat {
  std::vector<Tensor*> tensors;
  std::vector<std::size_t> offsets;  // prefix sums of sizes
  std::size_t size = 0;
  double& at(std::size_t i) {
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), i) - 1;
    const auto t = static_cast<std::size_t>(it - offsets.begin());
    return (*tensors[t])[i - *it];
  }
};

Flat flatten(protonet::Model& m) {
  Flat f;
  protonet::for_each_tensor(m, [&](const std::string&, Tensor& t) {
    f.tensors.push_back(&t);
    f.offsets.push_back(f.size);
    f.size += t.size();
  });
  return f;
}

double value_of(const protonet::Model& m, const ModelLoss& loss) {
  ad::Tape tape(false);
  return loss(protonet::bind(m, tape, false, false).vars).item();
}

std::vector<double> gradient_of(const protonet::Model& m, const ModelLoss& loss) {
  ad::Tape tape;
  protonet::BoundModel b = protonet::bind(m, tape, true, true);
  std::vector<ad::Var> leaves = b.theta;
  leaves.insert(leaves.end(), b.lambda.begin(), b.lambda.end());
  std::vector<double> out;
  for (const auto& g : ad::grad(loss(b.vars), leaves)) {
    out.insert(out.end(), g.value().data().begin(), g.value().data().end());
  }
  return out;
}

std::vector<double> hvp_of(const protonet::Model& m, const ModelLoss& loss,
                           const std::vector<double>& v) {
  ad::Tape tape;
  protonet::BoundModel b = protonet::bind(m, tape, true, true);
  std::vector<ad::Var> leaves = b.theta;
  leaves.insert(leaves.end(), b.lambda.begin(), b.lambda.end());
  const auto g = ad::grad(loss(b.vars), leaves, true);
  ad::Var dir;
  std::size_t off = 0;
  for (const auto& gi : g) {
    Tensor vi(gi.shape());
    for (std::size_t j = 0; j < vi.size(); ++j) vi[j] = v[off + j];
    off += vi.size();
    ad::Var term = ad::sum(ad::mul_const(gi, std::move(vi)));
    dir = dir.valid() ? ad::add(dir, term) : term;
  }
  std::vector<double> out;
  for (const auto& h : ad::grad(dir, leaves)) {
    out.insert(out.end(), h.value().data().begin(), h.value().data().end());
  }
  return out;
}

// Central differences are taken at several steps and the best agreement is
// kept: a step that straddles a leaky ReLU kink shows an O(jump / h) error.
constexpr double kGradientSteps[] = {1e-5, 1e-6, 1e-7};
constexpr double kHvpSteps[] = {1e-3, 1e-4, 1e-5, 1e-6};

struct Integrity {
  double grad_error = 0.0;  // worst entry relative error over the sampled coordinates
  double hvp_error = 0.0;   // max-norm error of Hv over max(‖Hv‖∞, 1e-3)
};

Integrity integrity(const protonet::Model& base, const ModelLoss& loss, Rng& rng,
                    std::size_t coords) {
  protonet::Model m = base;
  Flat flat = flatten(m);
  Integrity out;
  const auto g = gradient_of(m, loss);
  // Difference quotients carry roundoff of order |L|·ε/h.
  const double floor = 1e-3 * std::max(1.0, std::abs(value_of(m, loss)));
  for (std::size_t c = 0; c < coords; ++c) {
    const std::size_t i = uniform_index(rng, flat.size);
    double& x = flat.at(i);
    const double x0 = x;
    double best = std::numeric_limits<double>::infinity();
    for (double h : kGradientSteps) {
      x = x0 + h;
      const double up = value_of(m, loss);
      x = x0 - h;
      const double down = value_of(m, loss);
      x = x0;
      const double fd = (up - down) / (2.0 * h);
      best = std::min(best, std::abs(fd - g[i]) / std::max({std::abs(fd), std::abs(g[i]), floor}));
    }
    out.grad_error = std::max(out.grad_error, best);
  }

  std::vector<double> v(flat.size);
  for (auto& vi : v) vi = standard_normal(rng);
  const auto hv = hvp_of(m, loss, v);
  double den = 0.0;
  for (double x : hv) den = std::max(den, std::abs(x));
  out.hvp_error = std::numeric_limits<double>::infinity();
  for (double step : kHvpSteps) {
    for (std::size_t i = 0; i < flat.size; ++i) flat.at(i) += step * v[i];
    const auto gp = gradient_of(m, loss);
    for (std::size_t i = 0; i < flat.size; ++i) flat.at(i) -= 2.0 * step * v[i];
    const auto gm = gradient_of(m, loss);
    for (std::size_t i = 0; i < flat.size; ++i) flat.at(i) += step * v[i];
    double num = 0.0;
    for (std::size_t i = 0; i < flat.size; ++i)
      num = std::max(num, std::abs((gp[i] - gm[i]) / (2.0 * step) - hv[i]));
    out.hvp_error = std::min(out.hvp_error, num / std::max(den, 1e-3));
  }
  return out;
}

}  // namespace

const std::vector<std::string>& check_names() {
  static const std::vector<std::string> names{"closedform", "thm1",  "prop1", "prop2",
                                              "neumann",    "hvp", "balance"};
  return names;
}

bool is_check(const std::string& name) {
  const auto& n = check_names();
  return std::find(n.begin(), n.end(), name) != n.end();
}

CheckResult run_check(const std::string& name, std::uint64_t seed, unsigned threads) {
  if (name == "closedform") return closed_form(seed);
  if (name == "thm1") return expansion_remainder(seed);
  if (name == "prop1") return logistic_regularizer(seed);
  if (name == "prop2") return rademacher_grid(seed, threads);
  if (name == "neumann") return neumann(seed);
  if (name == "hvp") return gradients(seed);
  if (name == "balance") return balance(seed);
  throw ConfigError("unknown check '" + name + "'");
}

CheckResult closed_form(std::uint64_t seed, std::size_t draws) {
  Rng rng = make_stream(seed, {0x636c6f});
  double pair_err = 0.0, single_err = 0.0;
  for (std::size_t n = 0; n < draws; ++n) {
    const std::size_t d = 2 + n % 5;
    const auto p = random_simple(d, rng, 0.7);
    const Tensor h = gaussian(rng, 1, d);
    const Tensor hp = gaussian(rng, 1, d);
    Tensor pair(2, d);
    for (std::size_t c = 0; c < d; ++c) {
      pair(0, c) = h[c];
      pair(1, c) = hp[c];
    }
    const Tensor w = setfunc::simple_effective_weight(p);
    const Tensor b = setfunc::simple_effective_bias(p);
    const double alpha = setfunc::alpha_pair(p, h.data(), hp.data()).alpha;
    const Tensor mixed = transpose(matmul(w, transpose(h + alpha * (hp - h))) + b);
    pair_err = std::max(pair_err, max_abs_diff(setfunc::simple_forward(p, pair), mixed));
    const Tensor single = transpose(matmul(w, transpose(h)) + b);
    single_err = std::max(single_err, max_abs_diff(setfunc::simple_forward(p, h), single));
  }
  CheckResult r;
  r.name = "closedform";
  r.inputs = {{"draws", draws}, {"dims", "2..6"}, {"seed", seed}};
  r.measured = {{"pair_max_abs_error", pair_err}, {"singleton_max_abs_error", single_err}};
  r.bound = {{"pair", 1e-9}, {"singleton", 1e-12}};
  r.pass = pair_err <= 1e-9 && single_err <= 1e-12;
  return r;
}

CheckResult expansion_remainder(std::uint64_t seed, std::size_t problems) {
  Rng rng = make_stream(seed, {0x746d31});
  const std::vector<double> grid{1e-1, 3e-2, 1e-2, 3e-3, 1e-3};
  double min1 = std::numeric_limits<double>::infinity(), min2 = min1;
  json fits = json::array();
  for (std::size_t i = 0; i < problems; ++i) {
    const theory::TheoryProblem p = random_problem(rng);
    const auto f1 = theory::remainder_slope(p, 1, grid);
    const auto f2 = theory::remainder_slope(p, 2, grid);
    min1 = std::min(min1, f1.slope);
    min2 = std::min(min2, f2.slope);
    fits.push_back({{"slope_j1", f1.slope}, {"slope_j2", f2.slope},
                    {"remainder_j1", f1.remainder}, {"remainder_j2", f2.remainder}});
  }
  CheckResult r;
  r.name = "thm1";
  r.inputs = {{"problems", problems}, {"eps", grid}, {"alpha", "frozen at eps = 1"},
              {"seed", seed}};
  r.measured = {{"min_slope_j1", min1}, {"min_slope_j2", min2}, {"fits", fits}};
  r.bound = {{"slope_j1", 1.8}, {"slope_j2", 2.8}};
  r.pass = min1 >= 1.8 && min2 >= 2.8;
  return r;
}

CheckResult logistic_regularizer(std::uint64_t seed) {
  Rng rng = make_stream(seed, {0x707231});
  double worst_gap = 0.0, worst_balance = 0.0, min_quad = std::numeric_limits<double>::infinity();
  const int cases = 10;
  for (int i = 0; i < cases; ++i) {
    theory::MirroredCase mc = theory::mirrored_case(4, 3, 8, 0.5, rng);
    for (auto& v : mc.lc.theta) v = standard_normal(rng);
    const auto pairings = theory::all_pairings(mc.lc);
    const auto rep = theory::logistic_check(mc.lc, pairings);
    worst_gap = std::max(worst_gap, std::abs(rep.gap));
    worst_balance = std::max(worst_balance, rep.balance);
    min_quad = std::min(min_quad, std::abs(rep.rhs - rep.singleton));
  }

  // θ beating the random guess on every query of t.
  theory::MirroredCase mc = theory::mirrored_case(5, 2, 10, 0.2, rng);
  double min_c = std::numeric_limits<double>::infinity();
  int accepted = 0, proposals = 0;
  while (accepted < 20 && proposals < 10000) {
    ++proposals;
    for (std::size_t i = 0; i < mc.lc.theta.size(); ++i)
      mc.lc.theta[i] = mc.direction[i] + 0.3 * standard_normal(rng);
    const auto z = theory::query_margins(mc.lc);
    if (!std::all_of(z.begin(), z.end(), [](double v) { return v > 0.0; })) continue;
    ++accepted;
    min_c = std::min(min_c, theory::curvature_coefficient(mc.lc));
  }

  // θ = 0: ψ = ½, so c = 0 and the expansion is flat.
  std::fill(mc.lc.theta.begin(), mc.lc.theta.end(), 0.0);
  const auto pairings = theory::all_pairings(mc.lc);
  const auto zero = theory::logistic_check(mc.lc, pairings);

  CheckResult r;
  r.name = "prop1";
  r.inputs = {{"cases", cases}, {"better_than_chance_draws", 20}, {"seed", seed}};
  r.measured = {{"max_abs_gap", worst_gap},
                {"max_balance_residual", worst_balance},
                {"min_abs_quadratic_term", min_quad},
                {"min_c_better_than_chance", min_c},
                {"accepted_draws", accepted},
                {"zero_theta_c", zero.c},
                {"zero_theta_gap", zero.gap}};
  r.bound = {{"gap", 1e-9}, {"balance", 1e-12}, {"c", "> 0"}};
  r.pass = worst_gap <= 1e-9 && worst_balance <= 1e-12 && accepted == 20 && min_c > 0.0 &&
           zero.c == 0.0 && std::abs(zero.gap) <= 1e-12;
  return r;
}

CheckResult rademacher_grid(std::uint64_t seed, unsigned threads, std::size_t trials) {
  std::vector<theory::RademacherConfig> grid;
  for (std::size_t n : {4, 8, 12})
    for (std::size_t rank : {1, 2, 4})
      for (double radius : {1.0, 4.0}) {
        theory::RademacherConfig cfg;
        cfg.n = n;
        cfg.dims = 6;
        cfg.rank = rank;
        cfg.radius = radius;
        cfg.seed = seed;
        grid.push_back(cfg);
      }
  std::vector<theory::RademacherReport> reports(grid.size());
  std::vector<std::exception_ptr> errors(grid.size());
  const unsigned workers = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(grid.size())));
  auto work = [&](unsigned w) {
    for (std::size_t i = w; i < grid.size(); i += workers) {
      try {
        reports[i] = theory::rademacher_check(grid[i], trials);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  CheckResult r;
  r.name = "prop2";
  r.inputs = {{"n", {4, 8, 12}}, {"rank", {1, 2, 4}}, {"radius", {1, 4}}, {"dims", 6},
              {"trials", trials}, {"seed", seed}};
  json rows = json::array();
  r.pass = true;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const auto& g = grid[i];
    const auto& rep = reports[i];
    rows.push_back({{"n", g.n}, {"rank", rep.rank}, {"radius", g.radius},
                    {"empirical", rep.empirical}, {"std_error", rep.std_error},
                    {"bound", rep.bound}, {"exhaustive", rep.exhaustive}, {"pass", rep.pass}});
    r.table.push_back(fmt("n=%-3.0f rank=%.0f R=%.0f", static_cast<double>(g.n),
                          static_cast<double>(rep.rank), g.radius) +
                      fmt("  empirical=%.5f  bound=%.5f  se=%.2e", rep.empirical, rep.bound,
                          rep.std_error));
    r.pass = r.pass && rep.pass && rep.rank == g.rank;
  }
  r.measured = {{"grid", rows}};
  r.bound = {{"rule", "empirical <= sqrt(R) sqrt(rank) / sqrt(n) + 3 se"}};
  return r;
}

CheckResult neumann(std::uint64_t seed) {
  CheckResult r;
  r.name = "neumann";

  // Scalar: L_tr = ½(θ − λ)², L_V = ½θ², α = ½, q = 10 gives Σ_{j≤10} 2⁻ʲ · ½ · 2.
  double scalar = 0.0;
  {
    ad::Tape tape;
    ad::Var th = tape.variable(Tensor::scalar(1.0));
    ad::Var la = tape.variable(Tensor::scalar(1.0));
    ad::Var d = th - la;
    const std::vector<ad::Var> ths{th}, las{la};
    const auto g = ad::grad(ad::scale(d * d, 0.5), ths, true);
    scalar = bilevel::hypergrad(g, ths, las, ad::scale(th * th, 0.5), 0.5, 10)[0].item();
  }
  const double scalar_expect = 1.0 - std::pow(0.5, 11);
  const double scalar_err = std::abs(scalar - scalar_expect);

  Rng rng = make_stream(seed, {0x6e6575});
  const std::size_t max_q = 50;
  const int trials = 10;
  const double alpha = 0.45;  // spectrum of A in [1, 2], so α·λ_max < 1
  std::vector<double> worst_by_q(max_q + 1, 0.0);
  bool monotone = true;
  double final_worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    const Quadratic q = random_quadratic(rng, 3);
    const Eigen::VectorXd theta = random_matrix(rng, 3, 1);
    const Eigen::VectorXd lambda = random_matrix(rng, 3, 1);
    const Eigen::VectorXd exact = exact_hypergrad(q, theta, lambda);
    // Increases below a few ulps of the hypergradient are roundoff, not divergence.
    const double slack = 64.0 * std::numeric_limits<double>::epsilon() *
                         std::max(1.0, exact.lpNorm<Eigen::Infinity>());
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t s = 0; s <= max_q; ++s) {
      const double err = (neumann_hypergrad(q, theta, lambda, alpha, s) - exact).lpNorm<Eigen::Infinity>();
      if (err > prev + slack) monotone = false;
      prev = err;
      worst_by_q[s] = std::max(worst_by_q[s], err);
    }
    final_worst = std::max(final_worst, prev);
  }
  r.table.push_back("q   max_abs_error");
  for (std::size_t s = 0; s <= max_q; ++s) {
    if (s <= 10 || s % 10 == 0) r.table.push_back(fmt("%-3.0f %.3e", static_cast<double>(s), worst_by_q[s]));
  }
  r.inputs = {{"scalar", {{"alpha", 0.5}, {"q", 10}}},
              {"quadratics", {{"count", trials}, {"dims", 3}, {"alpha", alpha}, {"q_max", max_q}}},
              {"seed", seed}};
  r.measured = {{"scalar_value", scalar},
                {"scalar_abs_error", scalar_err},
                {"quadratic_error_by_q", worst_by_q},
                {"monotone", monotone},
                {"final_max_abs_error", final_worst}};
  r.bound = {{"scalar_expected", scalar_expect}, {"scalar", 1e-12}, {"final", 1e-6},
             {"monotone_slack", "64 eps max(1, |exact|)"}};
  r.pass = scalar_err <= 1e-12 && monotone && final_worst <= 1e-6;
  return r;
}

CheckResult gradients(std::uint64_t seed) {
  Rng rng = make_stream(seed, {0x687670});
  episodes::GenConfig g;
  g.way = 3;
  g.shots = 1;
  g.queries = 3;
  g.dims = 5;
  g.informative = 3;
  g.train_tasks = 3;
  g.val_tasks = 1;
  g.test_tasks = 1;
  g.seed = seed;
  const auto data = episodes::gen_gaussian_tasks(g);

  bilevel::ModelSpec spec;
  spec.hidden = {6};
  spec.out_width = 4;
  spec.split = 1;
  spec.head_width = 2;
  spec.heads = 2;
  spec.dropout = 0.0;
  const protonet::Model model = bilevel::build_model(spec, g.dims, bilevel::Method::kMetaInterp, rng);

  bilevel::TrainConfig cfg;
  cfg.batch = 2;
  auto batch = bilevel::sample_batch(data.meta_train, cfg, protonet::interp_width(model.encoder), rng);
  const auto& pair = batch.front();

  const std::vector<std::pair<std::string, ModelLoss>> losses{
      {"singleton", [&](const protonet::ModelVars& m) { return protonet::loss_singleton(m, pair.first, nullptr); }},
      {"mixed", [&](const protonet::ModelVars& m) {
         return interpolate::loss_mix(m, pair.first, pair.second, pair.draws, nullptr);
       }},
      {"inner", [&](const protonet::ModelVars& m) {
         return bilevel::inner_loss(m, batch, bilevel::loss_weights(bilevel::Method::kMetaInterp), nullptr);
       }}};

  CheckResult r;
  r.name = "hvp";
  r.pass = true;
  for (const auto& [name, loss] : losses) {
    const Integrity e = integrity(model, loss, rng, 20);
    r.measured[name] = {{"gradient_rel_error", e.grad_error}, {"hvp_rel_error", e.hvp_error}};
    r.pass = r.pass && e.grad_error <= 1e-5 && e.hvp_error <= 1e-4;
  }
  r.inputs = {{"coordinates", 20}, {"set_function", "full"}, {"gradient_steps", kGradientSteps},
              {"hvp_steps", kHvpSteps}, {"seed", seed}};
  r.bound = {{"gradient", 1e-5}, {"hvp", 1e-4}};
  return r;
}

CheckResult balance(std::uint64_t seed) {
  Rng rng = make_stream(seed, {0x62616c});
  theory::MirroredCase mc = theory::mirrored_case(4, 3, 4, 0.5, rng);
  for (auto& v : mc.lc.theta) v = standard_normal(rng);
  std::vector<theory::TheoryProblem> mirrored;
  for (const auto& p : theory::all_pairings(mc.lc)) mirrored.push_back(theory::problem_of(mc.lc, p));
  const double mirrored_residual = theory::balance_residual(mirrored);
  const double single_residual = theory::balance_residual(std::span(mirrored).first(1));

  // Random partners of a random task: generally unbalanced, reported only.
  std::vector<theory::TheoryProblem> random;
  const episodes::Task t = random_task(rng, 2, 3, 2, 4);
  const auto setfn = random_simple(4, rng, 0.7);
  for (int i = 0; i < 4; ++i) {
    theory::TheoryProblem p;
    p.t = t;
    p.t_prime = random_task(rng, 2, 3, 2, 4);
    const std::size_t widths[] = {4, 1};
    p.encoder = protonet::init_encoder(widths, 0, rng);
    p.setfn = setfn;
    p.sigma = (i % 2 == 0) ? std::vector<int>{0, 1} : std::vector<int>{1, 0};
    random.push_back(std::move(p));
  }
  CheckResult r;
  r.name = "balance";
  r.inputs = {{"mirrored_pairings", mirrored.size()}, {"random_pairings", random.size()},
              {"seed", seed}};
  r.measured = {{"mirrored_residual", mirrored_residual},
                {"single_pairing_residual", single_residual},
                {"random_residual", theory::balance_residual(random)}};
  r.bound = {{"mirrored", 1e-12}};
  r.pass = mirrored_residual <= 1e-12;
  return r;
}

json to_json(const CheckResult& r) {
  json j = {{"check", r.name}, {"inputs", r.inputs}, {"measured", r.measured},
            {"bound", r.bound}, {"pass", r.pass}};
  if (!r.table.empty()) j["table"] = r.table;
  return j;
}

json report(const std::vector<CheckResult>& results) {
  json checks = json::array();
  bool all = true;
  for (const auto& r : results) {
    checks.push_back(to_json(r));
    all = all && r.pass;
  }
  return {{"checks", checks}, {"pass", all}};
}

}  // namespace mi::checks
