// SPDX-License-Identifier: Apache-2.0
//
// Numerical probes of the regularization analysis of task interpolation: the
// Taylor form of the mixed loss around the singleton prototypes, the logistic
// two-class special case, the α-balance residual, and the Rademacher bound of
// the Σ-norm constrained linear class.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "metainterp/autodiff.hpp"
#include "metainterp/episodes.hpp"
#include "metainterp/protonet.hpp"
#include "metainterp/random.hpp"
#include "metainterp/setfunc.hpp"
#include "metainterp/tensor.hpp"

namespace mi::theory {

/// Task t interpolated with task t′ through the simple set function. The
/// encoder's upper stack must be a single affine layer, so g has no curvature.
struct TheoryProblem {
  episodes::Task t, t_prime;
  setfunc::SimpleSetParams setfn;
  protonet::Encoder encoder;
  protonet::Distance distance = protonet::Distance::kSquaredEuclidean;
  std::vector<int> sigma;  // class k of t pairs with class sigma[k] of t′
};

/// Throws ConfigError on a non-affine upper stack, a sigma that is not a
/// permutation, or mismatched widths; MissingClassError on an empty class.
void validate(const TheoryProblem& p);

/// Identity pairing of `way` classes.
std::vector<int> identity_sigma(int way);

/// The problem as a trainable-model value: encoder, simple set function, distance.
protonet::Model model_of(const TheoryProblem& p);

/// Lower-stack representations of a task's supports, one matrix per class.
std::vector<Tensor> class_representations(const protonet::Encoder& e, const episodes::Task& task);

/// α_ij of every paired class: matrix k is |I_{t,k}|×|I_{t′,σ(k)}|.
std::vector<Tensor> pair_alphas(const TheoryProblem& p);

/// K×D matrix with rows Δ_k = E_{i,j}[α_ij (W(h′_j − h_i))ᵀ ∂g], where every
/// difference h′_j − h_i is multiplied by eps and α is taken from `alphas`.
Tensor delta(const TheoryProblem& p, const std::vector<Tensor>& alphas, double eps = 1.0);
Tensor delta(const TheoryProblem& p);

/// Prototypes of task t through the singleton set function (K×D).
Tensor singleton_prototypes(const TheoryProblem& p);

/// Loss of an episode as a function of its prototype matrix. The returned
/// Var lives on the tape of `protos`.
using PrototypeLoss = std::function<ad::Var(const ad::Var& protos)>;

/// Task-t queries through the singleton path, scored against the prototypes.
PrototypeLoss episode_loss(const TheoryProblem& p);

/// loss(c) + Σ_{j=1..J} (1/j!) ∂^j loss(c)[Δ, ..., Δ] for J ∈ {0, 1, 2}.
/// Directional derivatives come from nested reverse passes. Throws ConfigError
/// for other orders.
double taylor_expand(const PrototypeLoss& loss, const Tensor& c, const Tensor& delta, int order);

double loss_singleton(const TheoryProblem& p);
/// taylor_expand of episode_loss at the singleton prototypes along delta(p).
double taylor_mix(const TheoryProblem& p, int order);

/// Loss of the interpolated episode with frozen coefficients: the fused
/// element of (i, j) is h_i + eps·α_ij(h′_j − h_i), mapped by W, b and g and
/// averaged per class into prototypes.
double mixed_loss(const TheoryProblem& p, const std::vector<Tensor>& alphas, double eps = 1.0);
/// Same with α computed by the set function (eps = 1).
double mixed_loss(const TheoryProblem& p);

struct SlopeFit {
  std::vector<double> eps;
  std::vector<double> remainder;  // |mixed_loss(eps) − taylor(order, eps·Δ)|
  double slope = 0.0;             // least-squares slope of log remainder on log eps
};

/// Remainder of the order-J expansion along the eps grid, α frozen at eps = 1.
SlopeFit remainder_slope(const TheoryProblem& p, int order, std::span<const double> eps);

/// E over the problems of Σ_k E_{i,j}[α_ij (h′_j − h_i)] on lower-stack
/// representations, as a 1×d row. All problems must share task t.
Tensor balance_vector(std::span<const TheoryProblem> problems);
double balance_residual(std::span<const TheoryProblem> problems);

// ---------------------------------------------------------------------------
// Two-class logistic special case: φ = identity, W = I, b = 0, g(x) = ⟨x, θ⟩,
// L_t(c) = (1/n) Σ_i 1 / (1 + exp(⟨x_i, θ⟩ − c_1/2 − c_2/2)).

struct LogisticCase {
  episodes::Task t;                       // way 2
  std::vector<episodes::Task> partners;   // the tasks t′
  setfunc::SimpleSetParams setfn;         // value path must be the identity
  std::vector<double> theta;
};

struct Pairing {
  std::size_t partner = 0;
  std::vector<int> sigma;
};

/// Every partner with both class pairings {id, swap}.
std::vector<Pairing> all_pairings(const LogisticCase& lc);

/// Throws ConfigError when way ≠ 2, the value path is not the identity, or
/// widths disagree.
void validate(const LogisticCase& lc);

TheoryProblem problem_of(const LogisticCase& lc, const Pairing& pairing);
PrototypeLoss logistic_loss(const LogisticCase& lc);

/// z_i = ⟨x_i − (c′_1 + c′_2)/2, θ⟩ for every query of t.
std::vector<double> query_margins(const LogisticCase& lc);
/// c = (1/n) Σ_i ¼ ψ(z_i)(ψ(z_i) − ½) / (1 + exp(z_i)), ψ the logistic function.
double curvature_coefficient(const LogisticCase& lc);
/// δ for one pairing: Σ_k E_{i,j}[α_ij (x′_j − x_i)] (1×d).
Tensor pairing_delta(const LogisticCase& lc, const Pairing& pairing);

struct LogisticReport {
  double lhs = 0.0;      // mean second-order expansion over the pairings
  double rhs = 0.0;      // L_singleton + c θᵀ E[δδᵀ] θ
  double gap = 0.0;      // lhs − rhs
  double singleton = 0.0;
  double c = 0.0;
  double balance = 0.0;  // ‖E[δ]‖₂ over the pairings
};

LogisticReport logistic_check(const LogisticCase& lc, std::span<const Pairing> pairings);

/// Two-class task t whose class-1 supports are the negated class-0 supports,
/// and partners {a, −a}. Value path W = I, b = 0, pooling
/// query zero (p₂ = ½), random first-layer query/key maps. Queries are
/// `spread`-noisy points around s·u for a unit direction u and s ∈ [1, 2].
/// Partner a has independent classes, so single pairings are unbalanced
/// while the average over {a, −a} × {id, swap} cancels. theta is zero.
struct MirroredCase {
  LogisticCase lc;
  std::vector<double> direction;
};
MirroredCase mirrored_case(std::size_t dims, int shots, int queries, double spread, Rng& rng);

// ---------------------------------------------------------------------------
// Rademacher complexity of {x ↦ θᵀx : θᵀΣθ ≤ R}, Σ = E[(x − x′)(x − x′)ᵀ].

/// √R·√rank/√n.
double rademacher_bound(std::size_t n, std::size_t rank, double radius);

/// Σ^{†/2} by symmetric eigendecomposition; eigenvalues ≤ cutoff are dropped.
Tensor pinv_sqrt(const Tensor& sigma, double cutoff = 1e-10);
std::size_t numerical_rank(const Tensor& sigma, double cutoff = 1e-10);

/// E_ξ (√R/n)‖Σ^{†/2} Σ_i ξ_i x_i‖₂ for the rows x_i of `xs`. Exhaustive over
/// the 2ⁿ sign vectors when n ≤ 12, otherwise `mc_signs` Monte Carlo draws.
/// Throws ConfigError when a row leaves the row space of Σ.
double empirical_rademacher(const Tensor& xs, const Tensor& sigma, double radius, Rng& rng,
                            std::size_t mc_signs = 4096);

struct RademacherConfig {
  std::size_t n = 8;
  std::size_t dims = 6;
  std::size_t rank = 2;
  double radius = 1.0;
  std::size_t mc_signs = 4096;
  std::uint64_t seed = 0;
};

void validate(const RademacherConfig& cfg);

struct RademacherReport {
  double empirical = 0.0;  // mean over data redraws
  double std_error = 0.0;
  double bound = 0.0;
  std::size_t rank = 0;    // numerical rank of Σ
  bool exhaustive = false;
  bool pass = false;       // empirical ≤ bound + 3·std_error
};

/// Data x = A z with A a random dims×rank matrix and z standard normal, so
/// E[x] = 0 and Σ = 2AAᵀ. Each trial redraws the n points.
RademacherReport rademacher_check(const RademacherConfig& cfg, std::size_t trials);

}  // namespace mi::theory
