// SPDX-License-Identifier: Apache-2.0
//
// Permutation-invariant set functions mapping a set of d-dimensional
// elements to one d-dimensional vector.
//
// Parameter structs are templated on their storage: Tensor for owned values,
// ad::Var once bound to a tape. map_params converts between the two.
//
// Batched forwards take B sets of equal cardinality n stacked as a
// (B·n)×d matrix and return B×d. Attention never crosses set boundaries.
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "metainterp/autodiff.hpp"
#include "metainterp/random.hpp"
#include "metainterp/tensor.hpp"

namespace mi::setfunc {

template <class T>
struct AffineT {
  T w;  // in×out
  T b;  // 1×out
};

/// Single-head, two-layer attention (no norms, no skips).
template <class T>
struct SimpleSetParamsT {
  T wq1, wk1, wv1, wq2, wk2, wv2;
  T bq1, bk1, bv1, bq2, bk2, bv2;
  T seed;  // 1×d
};

template <class T>
struct HeadT {
  AffineT<T> q, k, v;
  T ln_gain, ln_bias;  // 1×d_k
};

template <class T>
struct AttentionBlockT {
  std::vector<HeadT<T>> heads;
  AffineT<T> ff;       // d_h×d_h
  T ln_gain, ln_bias;  // 1×d_h
};

/// Two self-attention encoders, attention pooling over a learned seed, and an
/// output affine back to d.
template <class T>
struct FullSetParamsT {
  AttentionBlockT<T> enc1, enc2, pool;
  T seed;  // 1×d_h
  AffineT<T> out;
  double dropout = 0.1;
};

/// Elementwise stack, mean pool, post stack. ReLU between layers of a stack.
template <class T>
struct DeepSetsParamsT {
  std::vector<AffineT<T>> pre, post;
};

/// Accepts singletons only and passes the element through.
struct IdentitySet {};
/// Returns the first element of each set.
struct FirstElementSet {};

template <class T>
using SetFunctionT = std::variant<IdentitySet, FirstElementSet, SimpleSetParamsT<T>,
                                  FullSetParamsT<T>, DeepSetsParamsT<T>>;

using SimpleSetParams = SimpleSetParamsT<Tensor>;
using FullSetParams = FullSetParamsT<Tensor>;
using DeepSetsParams = DeepSetsParamsT<Tensor>;
using SetFunction = SetFunctionT<Tensor>;
using SetFunctionVars = SetFunctionT<ad::Var>;

enum class Kind { kIdentity, kFirst, kSimple, kFull, kDeepSets };

Kind kind_of(const SetFunction& f);
const char* kind_name(Kind k);
/// Parses "identity", "first", "simple", "full"/"settransformer", "deepsets".
Kind parse_kind(const std::string& name);

/// Visits every tensor with a dotted name, in a fixed order.
void for_each_tensor(SetFunction& f, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_tensor(const SetFunction& f,
                     const std::function<void(const std::string&, const Tensor&)>& fn);

/// Builds a Var-valued copy; `bind` turns each named tensor into a tape node.
SetFunctionVars map_params(const SetFunction& f,
                           const std::function<ad::Var(const std::string&, const Tensor&)>& bind);

/// Binds every tensor as a differentiable leaf and appends it to `leaves`.
SetFunctionVars bind_variables(const SetFunction& f, ad::Tape& tape, std::vector<ad::Var>* leaves);
/// Binds every tensor as a constant.
SetFunctionVars bind_constants(const SetFunction& f, ad::Tape& tape);

/// Precomputed dropout masks for the two dropout sites of the full form.
struct DropoutMasks {
  Tensor encoder;  // (B·n)×d_h
  Tensor pooled;   // B×d_h
};

/// Binary keep-masks with P(keep) = 1 − rate. Returns nullopt unless the set
/// function is the full form with a positive rate.
std::optional<DropoutMasks> draw_masks(const SetFunction& f, std::size_t batch,
                                       std::size_t set_size, Rng& rng);
std::optional<DropoutMasks> draw_masks(const SetFunctionVars& f, std::size_t batch,
                                       std::size_t set_size, Rng& rng);

/// B sets of size n stacked in `elems`; returns B×d.
/// Throws CardinalityError for n = 0 or a row count not divisible by n,
/// and for the identity set function with n ≠ 1.
ad::Var forward_batch(const SetFunctionVars& f, const ad::Var& elems, std::size_t set_size,
                      const DropoutMasks* masks = nullptr);

/// Single-set convenience forwards evaluated without recording (n×d -> 1×d).
Tensor evaluate(const SetFunction& f, const Tensor& elems, const DropoutMasks* masks = nullptr);
Tensor simple_forward(const SimpleSetParams& p, const Tensor& elems);
Tensor full_forward(const FullSetParams& p, const Tensor& elems,
                    const DropoutMasks* masks = nullptr);
Tensor deepsets_forward(const DeepSetsParams& p, const Tensor& elems);

struct AlphaPair {
  double alpha;
  double p1;        // first-layer attention of h on itself
  double p1_tilde;  // first-layer attention of h′ on h
  double p2;        // pooling attention on the first element
};

/// Interpolation weight of the simple form on the ordered pair (h, h′),
/// computed in plain arithmetic, independent of the tape.
AlphaPair alpha_pair(const SimpleSetParams& p, std::span<const double> h,
                     std::span<const double> h_prime);

/// W = (W1V W2V)ᵀ and b = (b1V W2V + b2V)ᵀ as d×d and d×1.
Tensor simple_effective_weight(const SimpleSetParams& p);
Tensor simple_effective_bias(const SimpleSetParams& p);

// Initializers. Weights are Gaussian with std scale/√fan_in, biases zero
// unless noted; layer norm gains are ones.
SimpleSetParams init_simple(std::size_t d, Rng& rng, double scale = 1.0);
FullSetParams init_full(std::size_t d, std::size_t head_width, std::size_t heads, double dropout,
                        Rng& rng);
DeepSetsParams init_deepsets(std::size_t d, std::span<const std::size_t> pre_widths,
                             std::span<const std::size_t> post_widths, Rng& rng);
/// One identity layer before and after pooling: the forward is the set mean.
DeepSetsParams deepsets_identity(std::size_t d);

}  // namespace mi::setfunc
