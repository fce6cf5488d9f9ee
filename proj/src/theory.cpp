// SPDX-License-Identifier: Apache-2.0
#include "metainterp/theory.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <bit>
#include <cmath>
#include <numeric>
#include <string>

#include "metainterp/errors.hpp"

namespace mi::theory {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat to_eigen(const Tensor& t) {
  return Eigen::Map<const Mat>(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                               static_cast<Eigen::Index>(t.cols()));
}

Tensor from_eigen(const Mat& m) {
  Tensor out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  Eigen::Map<Mat>(out.data().data(), m.rows(), m.cols()) = m;
  return out;
}

double eval_loss(const PrototypeLoss& loss, const Tensor& protos) {
  ad::Tape tape(false);
  return loss(tape.constant(protos)).item();
}

void check_width(const episodes::Task& task, std::size_t width, const char* which) {
  for (const auto* set : {&task.support, &task.query}) {
    for (const auto& ex : *set) {
      if (ex.features.size() != width) {
        throw ConfigError(std::string(which) + " has " + std::to_string(ex.features.size()) +
                          " features, encoder expects " + std::to_string(width));
      }
    }
  }
}

// Mean over the class pairs of α_ij · eps · (h′_j − h_i), as a 1×d row.
Tensor mean_weighted_difference(const Tensor& h, const Tensor& hp, const Tensor& alpha,
                                double eps) {
  Tensor acc(1, h.cols());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    for (std::size_t j = 0; j < hp.rows(); ++j) {
      const double a = alpha(i, j) * eps;
      for (std::size_t c = 0; c < h.cols(); ++c) acc[c] += a * (hp(j, c) - h(i, c));
    }
  }
  const double n = static_cast<double>(h.rows() * hp.rows());
  return (1.0 / n) * acc;
}

// Rows mapped by the set function's value path: h ↦ (W h + b)ᵀ.
Tensor value_map(const setfunc::SimpleSetParams& p, const Tensor& rows) {
  Tensor out = matmul(rows, transpose(setfunc::simple_effective_weight(p)));
  const Tensor b = setfunc::simple_effective_bias(p);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b[c];
  return out;
}

}  // namespace

void validate(const TheoryProblem& p) {
  protonet::validate(p.encoder);
  if (p.encoder.layers.size() != p.encoder.split + 1) {
    throw ConfigError("the stack above the interpolation layer must be a single affine layer");
  }
  if (p.t.way < 1 || p.t.way != p.t_prime.way) throw ConfigError("tasks must share a positive way");
  const auto way = static_cast<std::size_t>(p.t.way);
  if (p.sigma.size() != way) throw ConfigError("sigma needs one entry per class");
  std::vector<bool> seen(way, false);
  for (int s : p.sigma) {
    if (s < 0 || static_cast<std::size_t>(s) >= way || seen[static_cast<std::size_t>(s)]) {
      throw ConfigError("sigma is not a permutation");
    }
    seen[static_cast<std::size_t>(s)] = true;
  }
  const std::size_t d = protonet::interp_width(p.encoder);
  if (p.setfn.wv1.rows() != d || p.setfn.wv2.cols() != d) {
    throw ConfigError("set function width differs from the interpolation width");
  }
  check_width(p.t, protonet::input_width(p.encoder), "task t");
  check_width(p.t_prime, protonet::input_width(p.encoder), "task t'");
  if (p.t.query.empty()) throw ConfigError("task t has no queries");
}

std::vector<int> identity_sigma(int way) {
  std::vector<int> s(static_cast<std::size_t>(std::max(way, 0)));
  std::iota(s.begin(), s.end(), 0);
  return s;
}

protonet::Model model_of(const TheoryProblem& p) {
  protonet::Model m;
  m.encoder = p.encoder;
  m.setfn = p.setfn;
  m.distance = p.distance;
  return m;
}

std::vector<Tensor> class_representations(const protonet::Encoder& e, const episodes::Task& task) {
  std::vector<std::vector<const episodes::Example*>> groups(static_cast<std::size_t>(task.way));
  for (const auto& ex : task.support) {
    if (ex.label < 0 || ex.label >= task.way) throw DomainError("support label out of range");
    groups[static_cast<std::size_t>(ex.label)].push_back(&ex);
  }
  std::vector<Tensor> out;
  out.reserve(groups.size());
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].empty()) throw MissingClassError(static_cast<int>(k), "support set");
    out.push_back(protonet::encode_lower(e, episodes::features_matrix(groups[k])));
  }
  return out;
}

std::vector<Tensor> pair_alphas(const TheoryProblem& p) {
  validate(p);
  const auto h = class_representations(p.encoder, p.t);
  const auto hp = class_representations(p.encoder, p.t_prime);
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < h.size(); ++k) {
    const Tensor& a = h[k];
    const Tensor& b = hp[static_cast<std::size_t>(p.sigma[k])];
    Tensor alpha(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < b.rows(); ++j)
        alpha(i, j) = setfunc::alpha_pair(p.setfn, a.row_span(i), b.row_span(j)).alpha;
    out.push_back(std::move(alpha));
  }
  return out;
}

Tensor delta(const TheoryProblem& p, const std::vector<Tensor>& alphas, double eps) {
  validate(p);
  const auto h = class_representations(p.encoder, p.t);
  const auto hp = class_representations(p.encoder, p.t_prime);
  if (alphas.size() != h.size()) throw DimensionError("one alpha matrix per class");
  const Tensor wt = transpose(setfunc::simple_effective_weight(p.setfn));
  const Tensor& wg = p.encoder.layers.back().w;
  Tensor out(h.size(), wg.cols());
  for (std::size_t k = 0; k < h.size(); ++k) {
    const Tensor& b = hp[static_cast<std::size_t>(p.sigma[k])];
    if (alphas[k].rows() != h[k].rows() || alphas[k].cols() != b.rows()) {
      throw DimensionError("alpha matrix of class " + std::to_string(k) + " has shape " +
                           alphas[k].shape().str());
    }
    const Tensor row = matmul(matmul(mean_weighted_difference(h[k], b, alphas[k], eps), wt), wg);
    for (std::size_t c = 0; c < row.cols(); ++c) out(k, c) = row[c];
  }
  return out;
}

Tensor delta(const TheoryProblem& p) { return delta(p, pair_alphas(p)); }

Tensor singleton_prototypes(const TheoryProblem& p) {
  validate(p);
  const Tensor emb = protonet::embed(model_of(p), episodes::features_matrix(p.t.support));
  return protonet::prototypes(emb, protonet::labels_of(p.t.support), p.t.way);
}

PrototypeLoss episode_loss(const TheoryProblem& p) {
  validate(p);
  Tensor queries = protonet::embed(model_of(p), episodes::features_matrix(p.t.query));
  std::vector<int> targets = protonet::labels_of(p.t.query);
  const protonet::Distance d = p.distance;
  return [queries = std::move(queries), targets = std::move(targets), d](const ad::Var& protos) {
    ad::Tape& tape = *protos.tape();
    return protonet::proto_loss(tape.constant(queries), protos, targets, d);
  };
}

double taylor_expand(const PrototypeLoss& loss, const Tensor& c, const Tensor& delta, int order) {
  if (order < 0 || order > 2) {
    throw ConfigError("expansion order " + std::to_string(order) + " is not supported (0..2)");
  }
  if (c.shape() != delta.shape()) {
    throw DimensionError("prototypes " + c.shape().str() + " vs offsets " + delta.shape().str());
  }
  ad::Tape tape;
  ad::Var cv = tape.variable(c);
  ad::Var value = loss(cv);
  double total = value.item();
  if (order == 0) return total;
  const std::vector<ad::Var> in{cv};
  ad::Var g = ad::grad(value, in, order >= 2)[0];
  ad::Var first = ad::sum(ad::mul_const(g, delta));
  total += first.item();
  if (order == 2 && first.requires_grad()) {
    ad::Var g2 = ad::grad(first, in)[0];
    total += 0.5 * dot(g2.value(), delta);
  }
  return total;
}

double loss_singleton(const TheoryProblem& p) {
  return eval_loss(episode_loss(p), singleton_prototypes(p));
}

double taylor_mix(const TheoryProblem& p, int order) {
  return taylor_expand(episode_loss(p), singleton_prototypes(p), delta(p), order);
}

double mixed_loss(const TheoryProblem& p, const std::vector<Tensor>& alphas, double eps) {
  validate(p);
  const auto h = class_representations(p.encoder, p.t);
  const auto hp = class_representations(p.encoder, p.t_prime);
  if (alphas.size() != h.size()) throw DimensionError("one alpha matrix per class");
  const std::size_t d = protonet::interp_width(p.encoder);
  Tensor protos;
  for (std::size_t k = 0; k < h.size(); ++k) {
    const Tensor& a = h[k];
    const Tensor& b = hp[static_cast<std::size_t>(p.sigma[k])];
    Tensor fused(a.rows() * b.rows(), d);
    for (std::size_t i = 0; i < a.rows(); ++i) {
      for (std::size_t j = 0; j < b.rows(); ++j) {
        const double w = eps * alphas[k](i, j);
        for (std::size_t c = 0; c < d; ++c)
          fused(i * b.rows() + j, c) = a(i, c) + w * (b(j, c) - a(i, c));
      }
    }
    const Tensor emb = protonet::encode_upper(p.encoder, value_map(p.setfn, fused));
    if (k == 0) protos = Tensor(h.size(), emb.cols());
    for (std::size_t r = 0; r < emb.rows(); ++r)
      for (std::size_t c = 0; c < emb.cols(); ++c)
        protos(k, c) += emb(r, c) / static_cast<double>(emb.rows());
  }
  return eval_loss(episode_loss(p), protos);
}

double mixed_loss(const TheoryProblem& p) { return mixed_loss(p, pair_alphas(p)); }

SlopeFit remainder_slope(const TheoryProblem& p, int order, std::span<const double> eps) {
  if (eps.size() < 2) throw ConfigError("slope fit needs at least two step sizes");
  const auto alphas = pair_alphas(p);
  const PrototypeLoss loss = episode_loss(p);
  const Tensor c = singleton_prototypes(p);
  SlopeFit fit;
  for (double e : eps) {
    if (!(e > 0.0)) throw ConfigError("step sizes must be positive");
    const double approx = taylor_expand(loss, c, delta(p, alphas, e), order);
    fit.eps.push_back(e);
    fit.remainder.push_back(std::abs(mixed_loss(p, alphas, e) - approx));
  }
  const double n = static_cast<double>(eps.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < fit.eps.size(); ++i) {
    const double x = std::log(fit.eps[i]);
    const double y = std::log(fit.remainder[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  fit.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return fit;
}

Tensor balance_vector(std::span<const TheoryProblem> problems) {
  if (problems.empty()) throw ConfigError("balance needs at least one pairing");
  Tensor total;
  for (const auto& p : problems) {
    if (!(p.t == problems.front().t)) throw ConfigError("balance pairings must share task t");
    const auto alphas = pair_alphas(p);
    const auto h = class_representations(p.encoder, p.t);
    const auto hp = class_representations(p.encoder, p.t_prime);
    for (std::size_t k = 0; k < h.size(); ++k) {
      Tensor term = mean_weighted_difference(h[k], hp[static_cast<std::size_t>(p.sigma[k])],
                                             alphas[k], 1.0);
      total = total.empty() ? term : total + term;
    }
  }
  return (1.0 / static_cast<double>(problems.size())) * total;
}

double balance_residual(std::span<const TheoryProblem> problems) {
  return norm2(balance_vector(problems));
}

// ---------------------------------------------------------------------------

std::vector<Pairing> all_pairings(const LogisticCase& lc) {
  std::vector<Pairing> out;
  for (std::size_t i = 0; i < lc.partners.size(); ++i) {
    out.push_back({i, {0, 1}});
    out.push_back({i, {1, 0}});
  }
  return out;
}

void validate(const LogisticCase& lc) {
  if (lc.t.way != 2) throw ConfigError("the logistic case has two classes");
  if (lc.partners.empty()) throw ConfigError("the logistic case needs a partner task");
  for (const auto& t : lc.partners) {
    if (t.way != 2) throw ConfigError("partner tasks must have two classes");
  }
  const std::size_t d = lc.theta.size();
  if (d == 0) throw ConfigError("theta is empty");
  const Tensor w = setfunc::simple_effective_weight(lc.setfn);
  if (w.rows() != d || max_abs_diff(w, Tensor::identity(d)) > 1e-12 ||
      max_abs(setfunc::simple_effective_bias(lc.setfn)) > 1e-12) {
    throw ConfigError("the logistic case needs an identity value path (W = I, b = 0)");
  }
}

TheoryProblem problem_of(const LogisticCase& lc, const Pairing& pairing) {
  validate(lc);
  if (pairing.partner >= lc.partners.size()) throw ConfigError("pairing partner out of range");
  TheoryProblem p;
  p.t = lc.t;
  p.t_prime = lc.partners[pairing.partner];
  p.setfn = lc.setfn;
  p.sigma = pairing.sigma;
  const std::size_t d = lc.theta.size();
  Tensor w(d, 1);
  for (std::size_t i = 0; i < d; ++i) w(i, 0) = lc.theta[i];
  p.encoder.layers.push_back({std::move(w), Tensor(1, 1)});
  p.encoder.split = 0;
  validate(p);
  return p;
}

PrototypeLoss logistic_loss(const LogisticCase& lc) {
  validate(lc);
  const Tensor xq = episodes::features_matrix(lc.t.query);
  if (xq.cols() != lc.theta.size()) throw ConfigError("query width differs from theta");
  Tensor theta(lc.theta.size(), 1);
  for (std::size_t i = 0; i < lc.theta.size(); ++i) theta(i, 0) = lc.theta[i];
  Tensor scores = matmul(xq, theta);
  return [scores = std::move(scores)](const ad::Var& protos) {
    if (protos.rows() != 2 || protos.cols() != 1) throw DimensionError("expects 2×1 prototypes");
    ad::Var mid = ad::scale(ad::sum(protos), 0.5);
    ad::Var z = ad::add_const(ad::neg(ad::expand(mid, scores.shape())), scores);
    return ad::mean(ad::pow(ad::add_scalar(ad::exp(z), 1.0), -1.0));
  };
}

std::vector<double> query_margins(const LogisticCase& lc) {
  validate(lc);
  const std::size_t d = lc.theta.size();
  std::vector<double> mid(d, 0.0);
  for (int k = 0; k < 2; ++k) {
    std::size_t count = 0;
    std::vector<double> sum(d, 0.0);
    for (const auto& ex : lc.t.support) {
      if (ex.label != k) continue;
      ++count;
      for (std::size_t c = 0; c < d; ++c) sum[c] += ex.features.at(c);
    }
    if (count == 0) throw MissingClassError(k, "support set");
    for (std::size_t c = 0; c < d; ++c) mid[c] += 0.5 * sum[c] / static_cast<double>(count);
  }
  std::vector<double> z;
  for (const auto& ex : lc.t.query) {
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += (ex.features.at(c) - mid[c]) * lc.theta[c];
    z.push_back(s);
  }
  return z;
}

double curvature_coefficient(const LogisticCase& lc) {
  const auto z = query_margins(lc);
  if (z.empty()) throw ConfigError("task t has no queries");
  double s = 0.0;
  for (double zi : z) {
    const double psi = 1.0 / (1.0 + std::exp(-zi));
    s += 0.25 * psi * (psi - 0.5) / (1.0 + std::exp(zi));
  }
  return s / static_cast<double>(z.size());
}

Tensor pairing_delta(const LogisticCase& lc, const Pairing& pairing) {
  const TheoryProblem p = problem_of(lc, pairing);
  return balance_vector(std::span<const TheoryProblem>(&p, 1));
}

LogisticReport logistic_check(const LogisticCase& lc, std::span<const Pairing> pairings) {
  if (pairings.empty()) throw ConfigError("logistic check needs at least one pairing");
  const PrototypeLoss loss = logistic_loss(lc);
  Tensor theta = Tensor::row(lc.theta);
  std::vector<TheoryProblem> problems;
  LogisticReport r;
  double quad = 0.0;
  for (const auto& pr : pairings) {
    problems.push_back(problem_of(lc, pr));
    const TheoryProblem& p = problems.back();
    const Tensor c = singleton_prototypes(p);
    r.lhs += taylor_expand(loss, c, delta(p), 2);
    const double proj = dot(theta, pairing_delta(lc, pr));
    quad += proj * proj;
  }
  const double n = static_cast<double>(pairings.size());
  r.lhs /= n;
  r.singleton = eval_loss(loss, singleton_prototypes(problems.front()));
  r.c = curvature_coefficient(lc);
  r.rhs = r.singleton + r.c * quad / n;
  r.gap = r.lhs - r.rhs;
  r.balance = balance_residual(problems);
  return r;
}

MirroredCase mirrored_case(std::size_t dims, int shots, int queries, double spread, Rng& rng) {
  if (dims == 0 || shots < 1 || queries < 1) throw ConfigError("mirrored case needs sizes ≥ 1");
  auto gaussian_row = [&](double scale) {
    std::vector<double> v(dims);
    for (auto& x : v) x = scale * standard_normal(rng);
    return v;
  };
  auto negated = [](std::vector<double> v) {
    for (auto& x : v) x = -x;
    return v;
  };

  MirroredCase out;
  out.direction = gaussian_row(1.0);
  const double un = std::sqrt(std::inner_product(out.direction.begin(), out.direction.end(),
                                                 out.direction.begin(), 0.0));
  for (auto& x : out.direction) x /= un;

  episodes::Task& t = out.lc.t;
  t.way = 2;
  for (int i = 0; i < shots; ++i) {
    auto x = gaussian_row(1.0);
    t.support.push_back({x, 0});
    t.support.push_back({negated(x), 1});
  }
  for (int i = 0; i < queries; ++i) {
    const double s = 1.0 + std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    auto x = gaussian_row(spread);
    for (std::size_t c = 0; c < dims; ++c) x[c] += s * out.direction[c];
    t.query.push_back({x, i % 2});
  }

  episodes::Task a;
  a.way = 2;
  for (int k = 0; k < 2; ++k) {
    for (int i = 0; i < shots + 1; ++i) a.support.push_back({gaussian_row(1.0), k});
    a.query.push_back({gaussian_row(1.0), k});
  }
  episodes::Task b = a;
  for (auto* set : {&b.support, &b.query})
    for (auto& ex : *set) ex.features = negated(ex.features);
  out.lc.partners = {std::move(a), std::move(b)};

  setfunc::SimpleSetParams p = setfunc::init_simple(dims, rng);
  p.wv1 = Tensor::identity(dims);
  p.wv2 = Tensor::identity(dims);
  for (Tensor* z : {&p.bq1, &p.bk1, &p.bv1, &p.wq2, &p.bq2, &p.bv2}) *z = Tensor(z->shape());
  out.lc.setfn = std::move(p);
  out.lc.theta.assign(dims, 0.0);
  return out;
}

// ---------------------------------------------------------------------------

double rademacher_bound(std::size_t n, std::size_t rank, double radius) {
  if (n == 0) throw ConfigError("sample count must be positive");
  if (!(radius > 0.0)) throw ConfigError("radius must be positive");
  return std::sqrt(radius) * std::sqrt(static_cast<double>(rank)) /
         std::sqrt(static_cast<double>(n));
}

namespace {

struct Spectrum {
  Mat vectors;  // kept eigenvectors as columns
  Eigen::VectorXd values;
};

Spectrum kept_spectrum(const Tensor& sigma, double cutoff) {
  if (sigma.rows() != sigma.cols() || sigma.empty()) throw DimensionError("Σ must be square");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(sigma));
  if (es.info() != Eigen::Success) throw Error("eigendecomposition failed");
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    if (es.eigenvalues()(i) > cutoff) keep.push_back(i);
  }
  Spectrum s;
  s.vectors.resize(es.eigenvectors().rows(), static_cast<Eigen::Index>(keep.size()));
  s.values.resize(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t j = 0; j < keep.size(); ++j) {
    s.vectors.col(static_cast<Eigen::Index>(j)) = es.eigenvectors().col(keep[j]);
    s.values(static_cast<Eigen::Index>(j)) = es.eigenvalues()(keep[j]);
  }
  return s;
}

}  // namespace

Tensor pinv_sqrt(const Tensor& sigma, double cutoff) {
  const Spectrum s = kept_spectrum(sigma, cutoff);
  const Eigen::VectorXd inv = s.values.array().rsqrt();
  return from_eigen(s.vectors * inv.asDiagonal() * s.vectors.transpose());
}

std::size_t numerical_rank(const Tensor& sigma, double cutoff) {
  return static_cast<std::size_t>(kept_spectrum(sigma, cutoff).values.size());
}

double empirical_rademacher(const Tensor& xs, const Tensor& sigma, double radius, Rng& rng,
                            std::size_t mc_signs) {
  const std::size_t n = xs.rows();
  if (n == 0) throw ConfigError("no samples");
  if (xs.cols() != sigma.rows()) throw DimensionError("sample width differs from Σ");
  if (!(radius > 0.0)) throw ConfigError("radius must be positive");
  const Spectrum s = kept_spectrum(sigma, 1e-10);
  const Mat x = to_eigen(xs);
  const Mat proj = x * s.vectors * s.vectors.transpose();
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double off = (x.row(i) - proj.row(i)).norm();
    if (off > 1e-8 * std::max(1.0, x.row(i).norm())) {
      throw ConfigError("sample " + std::to_string(i) + " lies outside the row space of Σ");
    }
  }
  // Coordinates of Σ^{†/2} x_i in the kept eigenbasis; the norm is unchanged.
  const Eigen::VectorXd inv = s.values.array().rsqrt();
  const Mat y = (x * s.vectors) * inv.asDiagonal();

  double total = 0.0;
  std::size_t draws = 0;
  if (n <= 12) {
    std::vector<int> sign(n, 1);
    Eigen::RowVectorXd acc = y.colwise().sum();
    total += acc.norm();
    const std::uint64_t count = std::uint64_t{1} << n;
    for (std::uint64_t g = 1; g < count; ++g) {
      const auto bit = static_cast<std::size_t>(std::countr_zero(g));
      acc -= 2.0 * sign[bit] * y.row(static_cast<Eigen::Index>(bit));
      sign[bit] = -sign[bit];
      total += acc.norm();
    }
    draws = count;
  } else {
    if (mc_signs == 0) throw ConfigError("Monte Carlo needs at least one sign draw");
    std::bernoulli_distribution coin(0.5);
    for (std::size_t m = 0; m < mc_signs; ++m) {
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(y.cols());
      for (std::size_t i = 0; i < n; ++i) {
        acc += (coin(rng) ? 1.0 : -1.0) * y.row(static_cast<Eigen::Index>(i));
      }
      total += acc.norm();
    }
    draws = mc_signs;
  }
  return std::sqrt(radius) / static_cast<double>(n) * total / static_cast<double>(draws);
}

void validate(const RademacherConfig& cfg) {
  if (cfg.n == 0) throw ConfigError("n must be positive");
  if (cfg.rank == 0 || cfg.rank > cfg.dims) throw ConfigError("rank must lie in [1, dims]");
  if (!(cfg.radius > 0.0)) throw ConfigError("radius must be positive");
  if (cfg.n > 12 && cfg.mc_signs == 0) throw ConfigError("Monte Carlo needs sign draws");
}

RademacherReport rademacher_check(const RademacherConfig& cfg, std::size_t trials) {
  validate(cfg);
  if (trials < 2) throw ConfigError("need at least two data redraws");
  Rng rng = make_stream(cfg.seed, {0x726164, cfg.n, cfg.dims, cfg.rank});
  Mat a(static_cast<Eigen::Index>(cfg.dims), static_cast<Eigen::Index>(cfg.rank));
  for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = standard_normal(rng);
  const Tensor sigma = from_eigen(2.0 * a * a.transpose());

  RademacherReport r;
  r.rank = numerical_rank(sigma);
  r.bound = rademacher_bound(cfg.n, r.rank, cfg.radius);
  r.exhaustive = cfg.n <= 12;
  std::vector<double> values;
  for (std::size_t t = 0; t < trials; ++t) {
    Mat z(static_cast<Eigen::Index>(cfg.n), static_cast<Eigen::Index>(cfg.rank));
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = standard_normal(rng);
    values.push_back(
        empirical_rademacher(from_eigen(z * a.transpose()), sigma, cfg.radius, rng, cfg.mc_signs));
  }
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(trials);
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  r.empirical = m;
  r.std_error = std::sqrt(ss / static_cast<double>(trials - 1) / static_cast<double>(trials));
  r.pass = r.empirical <= r.bound + 3.0 * r.std_error;
  return r;
}

}  // namespace mi::theory
