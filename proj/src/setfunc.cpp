// SPDX-License-Identifier: Apache-2.0
#include "metainterp/setfunc.hpp"

#include <cmath>
#include <string>

#include "metainterp/errors.hpp"

namespace mi::setfunc {
namespace {

template <class... Fs>
struct Overloaded : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

// Field visitors. `P` deduces constness so one definition serves both
// const and mutable traversal.
template <class P, class F>
void visit_affine(P& a, const std::string& prefix, F& f) {
  f(prefix + ".w", a.w);
  f(prefix + ".b", a.b);
}

template <class P, class F>
void visit_simple(P& p, F& f) {
  f("wq1", p.wq1);
  f("bq1", p.bq1);
  f("wk1", p.wk1);
  f("bk1", p.bk1);
  f("wv1", p.wv1);
  f("bv1", p.bv1);
  f("wq2", p.wq2);
  f("bq2", p.bq2);
  f("wk2", p.wk2);
  f("bk2", p.bk2);
  f("wv2", p.wv2);
  f("bv2", p.bv2);
  f("seed", p.seed);
}

template <class P, class F>
void visit_block(P& blk, const std::string& prefix, F& f) {
  for (std::size_t h = 0; h < blk.heads.size(); ++h) {
    const std::string hp = prefix + ".head" + std::to_string(h);
    visit_affine(blk.heads[h].q, hp + ".q", f);
    visit_affine(blk.heads[h].k, hp + ".k", f);
    visit_affine(blk.heads[h].v, hp + ".v", f);
    f(hp + ".ln_gain", blk.heads[h].ln_gain);
    f(hp + ".ln_bias", blk.heads[h].ln_bias);
  }
  visit_affine(blk.ff, prefix + ".ff", f);
  f(prefix + ".ln_gain", blk.ln_gain);
  f(prefix + ".ln_bias", blk.ln_bias);
}

template <class P, class F>
void visit_full(P& p, F& f) {
  visit_block(p.enc1, "enc1", f);
  visit_block(p.enc2, "enc2", f);
  visit_block(p.pool, "pool", f);
  f("seed", p.seed);
  visit_affine(p.out, "out", f);
}

template <class P, class F>
void visit_deepsets(P& p, F& f) {
  for (std::size_t i = 0; i < p.pre.size(); ++i) visit_affine(p.pre[i], "pre" + std::to_string(i), f);
  for (std::size_t i = 0; i < p.post.size(); ++i) {
    visit_affine(p.post[i], "post" + std::to_string(i), f);
  }
}

template <class V, class F>
void visit_any(V& variant, F& f) {
  std::visit(
      [&f](auto& x) {
        using X = std::remove_const_t<std::remove_reference_t<decltype(x)>>;
        if constexpr (std::is_same_v<X, SimpleSetParams>) {
          visit_simple(x, f);
        } else if constexpr (std::is_same_v<X, FullSetParams>) {
          visit_full(x, f);
        } else if constexpr (std::is_same_v<X, DeepSetsParams>) {
          visit_deepsets(x, f);
        }
      },
      variant);
}

using Bind = std::function<ad::Var(const std::string&, const Tensor&)>;

AffineT<ad::Var> map_affine(const AffineT<Tensor>& a, const std::string& prefix, const Bind& bind) {
  return {bind(prefix + ".w", a.w), bind(prefix + ".b", a.b)};
}

AttentionBlockT<ad::Var> map_block(const AttentionBlockT<Tensor>& blk, const std::string& prefix,
                                   const Bind& bind) {
  AttentionBlockT<ad::Var> out;
  for (std::size_t h = 0; h < blk.heads.size(); ++h) {
    const std::string hp = prefix + ".head" + std::to_string(h);
    HeadT<ad::Var> head;
    head.q = map_affine(blk.heads[h].q, hp + ".q", bind);
    head.k = map_affine(blk.heads[h].k, hp + ".k", bind);
    head.v = map_affine(blk.heads[h].v, hp + ".v", bind);
    head.ln_gain = bind(hp + ".ln_gain", blk.heads[h].ln_gain);
    head.ln_bias = bind(hp + ".ln_bias", blk.heads[h].ln_bias);
    out.heads.push_back(head);
  }
  out.ff = map_affine(blk.ff, prefix + ".ff", bind);
  out.ln_gain = bind(prefix + ".ln_gain", blk.ln_gain);
  out.ln_bias = bind(prefix + ".ln_bias", blk.ln_bias);
  return out;
}

// ---- forward pieces -------------------------------------------------------

constexpr double kMasked = -1e30;

ad::Var affine(const AffineT<ad::Var>& a, const ad::Var& x) {
  return ad::add_row(ad::matmul(x, a.w), a.b);
}

// Layout of a batch: `batch` sets of `n` consecutive rows.
struct Batch {
  std::size_t batch;
  std::size_t n;
  // Lazily built additive masks that confine attention to one set.
  std::shared_ptr<Tensor> self_mask;
  std::shared_ptr<Tensor> pool_mask;

  const Tensor* self() {
    if (batch == 1 || n == 1) return nullptr;
    if (!self_mask) {
      self_mask = std::make_shared<Tensor>(batch * n, batch * n, kMasked);
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) (*self_mask)(s * n + i, s * n + j) = 0.0;
    }
    return self_mask.get();
  }
  const Tensor* pool() {
    if (batch == 1 || n == 1) return nullptr;
    if (!pool_mask) {
      pool_mask = std::make_shared<Tensor>(batch, batch * n, kMasked);
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t j = 0; j < n; ++j) (*pool_mask)(s, s * n + j) = 0.0;
    }
    return pool_mask.get();
  }
};

// softmax(Q Kᵀ · scale + mask) V. With singleton sets each query sees one
// key, the softmax is exactly 1, and the result is V itself.
ad::Var attend(const ad::Var& q, const ad::Var& k, const ad::Var& v, const Tensor* mask,
               double scale, std::size_t n) {
  if (n == 1) return v;
  ad::Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), scale);
  if (mask != nullptr) scores = ad::add_const(scores, *mask);
  return ad::matmul(ad::softmax_rows(scores), v);
}

// Builds a constant B×(B·n) matrix whose rows average (weight 1/n) or select
// (first element only) each set.
Tensor pooling_matrix(std::size_t batch, std::size_t n, bool first_only) {
  Tensor m(batch, batch * n);
  for (std::size_t s = 0; s < batch; ++s) {
    if (first_only) {
      m(s, s * n) = 1.0;
    } else {
      for (std::size_t j = 0; j < n; ++j) m(s, s * n + j) = 1.0 / static_cast<double>(n);
    }
  }
  return m;
}

ad::Var simple_batch(const SimpleSetParamsT<ad::Var>& p, const ad::Var& x, Batch& layout) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  ad::Var q1 = ad::add_row(ad::matmul(x, p.wq1), p.bq1);
  ad::Var k1 = ad::add_row(ad::matmul(x, p.wk1), p.bk1);
  ad::Var v1 = ad::add_row(ad::matmul(x, p.wv1), p.bv1);
  ad::Var h2 = attend(q1, k1, v1, layout.self(), scale, layout.n);
  ad::Var q2 = ad::repeat_rows(ad::add_row(ad::matmul(p.seed, p.wq2), p.bq2), layout.batch);
  ad::Var k2 = ad::add_row(ad::matmul(h2, p.wk2), p.bk2);
  ad::Var v2 = ad::add_row(ad::matmul(h2, p.wv2), p.bv2);
  return attend(q2, k2, v2, layout.pool(), scale, layout.n);
}

// Concatenated per-head outputs LN(Q + softmax(Q Kᵀ/√d_k) V).
ad::Var multihead(const AttentionBlockT<ad::Var>& blk, const ad::Var& xq, const ad::Var& xkv,
                  const Tensor* mask, std::size_t n) {
  std::vector<ad::Var> parts;
  parts.reserve(blk.heads.size());
  for (const auto& head : blk.heads) {
    ad::Var q = affine(head.q, xq);
    ad::Var k = affine(head.k, xkv);
    ad::Var v = affine(head.v, xkv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    parts.push_back(ad::layer_norm(ad::add(q, attend(q, k, v, mask, scale, n)), head.ln_gain,
                                   head.ln_bias));
  }
  return ad::concat_cols(parts);
}

ad::Var full_batch(const FullSetParamsT<ad::Var>& p, const ad::Var& x, Batch& layout,
                   const DropoutMasks* masks) {
  ad::Var o1 = multihead(p.enc1, x, x, layout.self(), layout.n);
  ad::Var g1 = ad::add(ad::layer_norm(o1, p.enc1.ln_gain, p.enc1.ln_bias),
                       ad::relu(affine(p.enc1.ff, o1)));
  ad::Var o2 = multihead(p.enc2, g1, g1, layout.self(), layout.n);
  ad::Var h2 = ad::layer_norm(ad::add(o2, ad::relu(affine(p.enc2.ff, o2))), p.enc2.ln_gain,
                              p.enc2.ln_bias);
  if (masks != nullptr) h2 = ad::dropout(h2, masks->encoder, p.dropout);
  ad::Var seeds = ad::repeat_rows(p.seed, layout.batch);
  ad::Var o3 = multihead(p.pool, seeds, h2, layout.pool(), layout.n);
  ad::Var h3 = ad::layer_norm(ad::add(o3, ad::relu(affine(p.pool.ff, o3))), p.pool.ln_gain,
                              p.pool.ln_bias);
  if (masks != nullptr) h3 = ad::dropout(h3, masks->pooled, p.dropout);
  return affine(p.out, h3);
}

ad::Var stack(const std::vector<AffineT<ad::Var>>& layers, ad::Var x) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = affine(layers[i], x);
    if (i + 1 < layers.size()) x = ad::relu(x);
  }
  return x;
}

ad::Var deepsets_batch(const DeepSetsParamsT<ad::Var>& p, const ad::Var& x, const Batch& layout) {
  ad::Var e = stack(p.pre, x);
  if (layout.n > 1) {
    ad::Tape& tape = *x.tape();
    e = ad::matmul(tape.constant(pooling_matrix(layout.batch, layout.n, false)), e);
  }
  return stack(p.post, e);
}

Tensor gaussian(std::size_t rows, std::size_t cols, double std, Rng& rng) {
  Tensor t(rows, cols);
  for (auto& v : t.data()) v = std * standard_normal(rng);
  return t;
}

AffineT<Tensor> init_affine(std::size_t in, std::size_t out, Rng& rng, double scale = 1.0) {
  return {gaussian(in, out, scale / std::sqrt(static_cast<double>(in)), rng), Tensor(1, out)};
}

AttentionBlockT<Tensor> init_block(std::size_t in, std::size_t head_width, std::size_t heads,
                                   Rng& rng) {
  AttentionBlockT<Tensor> blk;
  for (std::size_t h = 0; h < heads; ++h) {
    HeadT<Tensor> head;
    head.q = init_affine(in, head_width, rng);
    head.k = init_affine(in, head_width, rng);
    head.v = init_affine(in, head_width, rng);
    head.ln_gain = Tensor(1, head_width, 1.0);
    head.ln_bias = Tensor(1, head_width);
    blk.heads.push_back(std::move(head));
  }
  const std::size_t dh = head_width * heads;
  blk.ff = init_affine(dh, dh, rng);
  blk.ln_gain = Tensor(1, dh, 1.0);
  blk.ln_bias = Tensor(1, dh);
  return blk;
}

double softmax2_first(double a, double b) {
  // 1 / (1 + e^{b-a}), stable for either sign.
  const double t = b - a;
  if (t > 0) {
    const double e = std::exp(-t);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(t));
}

// x W + b for a row x.
std::vector<double> row_affine(std::span<const double> x, const Tensor& w, const Tensor& b) {
  if (x.size() != w.rows()) throw DimensionError("alpha_pair: element width mismatch");
  std::vector<double> out(b.data().begin(), b.data().end());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += x[i] * w(i, j);
  return out;
}

double dot_span(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

Kind kind_of(const SetFunction& f) { return static_cast<Kind>(f.index()); }

const char* kind_name(Kind k) {
  switch (k) {
    case Kind::kIdentity:
      return "identity";
    case Kind::kFirst:
      return "first";
    case Kind::kSimple:
      return "simple";
    case Kind::kFull:
      return "settransformer";
    case Kind::kDeepSets:
      return "deepsets";
  }
  return "unknown";
}

Kind parse_kind(const std::string& name) {
  if (name == "identity") return Kind::kIdentity;
  if (name == "first") return Kind::kFirst;
  if (name == "simple") return Kind::kSimple;
  if (name == "full" || name == "settransformer") return Kind::kFull;
  if (name == "deepsets") return Kind::kDeepSets;
  throw ConfigError("unknown set function '" + name + "'");
}

void for_each_tensor(SetFunction& f, const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_any(f, fn);
}

void for_each_tensor(const SetFunction& f,
                     const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit_any(f, fn);
}

SetFunctionVars map_params(const SetFunction& f, const Bind& bind) {
  return std::visit(
      Overloaded{
          [](const IdentitySet&) -> SetFunctionVars { return IdentitySet{}; },
          [](const FirstElementSet&) -> SetFunctionVars { return FirstElementSet{}; },
          [&bind](const SimpleSetParams& p) -> SetFunctionVars {
            // Leaves are bound in for_each_tensor order.
            SimpleSetParamsT<ad::Var> out;
            out.wq1 = bind("wq1", p.wq1);
            out.bq1 = bind("bq1", p.bq1);
            out.wk1 = bind("wk1", p.wk1);
            out.bk1 = bind("bk1", p.bk1);
            out.wv1 = bind("wv1", p.wv1);
            out.bv1 = bind("bv1", p.bv1);
            out.wq2 = bind("wq2", p.wq2);
            out.bq2 = bind("bq2", p.bq2);
            out.wk2 = bind("wk2", p.wk2);
            out.bk2 = bind("bk2", p.bk2);
            out.wv2 = bind("wv2", p.wv2);
            out.bv2 = bind("bv2", p.bv2);
            out.seed = bind("seed", p.seed);
            return out;
          },
          [&bind](const FullSetParams& p) -> SetFunctionVars {
            FullSetParamsT<ad::Var> out;
            out.enc1 = map_block(p.enc1, "enc1", bind);
            out.enc2 = map_block(p.enc2, "enc2", bind);
            out.pool = map_block(p.pool, "pool", bind);
            out.seed = bind("seed", p.seed);
            out.out = map_affine(p.out, "out", bind);
            out.dropout = p.dropout;
            return out;
          },
          [&bind](const DeepSetsParams& p) -> SetFunctionVars {
            DeepSetsParamsT<ad::Var> out;
            for (std::size_t i = 0; i < p.pre.size(); ++i) {
              out.pre.push_back(map_affine(p.pre[i], "pre" + std::to_string(i), bind));
            }
            for (std::size_t i = 0; i < p.post.size(); ++i) {
              out.post.push_back(map_affine(p.post[i], "post" + std::to_string(i), bind));
            }
            return out;
          }},
      f);
}

SetFunctionVars bind_variables(const SetFunction& f, ad::Tape& tape, std::vector<ad::Var>* leaves) {
  return map_params(f, [&](const std::string&, const Tensor& t) {
    ad::Var v = tape.variable(t);
    if (leaves != nullptr) leaves->push_back(v);
    return v;
  });
}

SetFunctionVars bind_constants(const SetFunction& f, ad::Tape& tape) {
  return map_params(f, [&](const std::string&, const Tensor& t) { return tape.constant(t); });
}

namespace {

std::optional<DropoutMasks> bernoulli_masks(double rate, std::size_t dh, std::size_t batch,
                                            std::size_t set_size, Rng& rng) {
  if (rate <= 0.0) return std::nullopt;
  std::bernoulli_distribution keep(1.0 - rate);
  DropoutMasks m{Tensor(batch * set_size, dh), Tensor(batch, dh)};
  for (auto& v : m.encoder.data()) v = keep(rng) ? 1.0 : 0.0;
  for (auto& v : m.pooled.data()) v = keep(rng) ? 1.0 : 0.0;
  return m;
}

}  // namespace

std::optional<DropoutMasks> draw_masks(const SetFunction& f, std::size_t batch,
                                       std::size_t set_size, Rng& rng) {
  const auto* full = std::get_if<FullSetParams>(&f);
  if (full == nullptr) return std::nullopt;
  return bernoulli_masks(full->dropout, full->seed.cols(), batch, set_size, rng);
}

std::optional<DropoutMasks> draw_masks(const SetFunctionVars& f, std::size_t batch,
                                       std::size_t set_size, Rng& rng) {
  const auto* full = std::get_if<FullSetParamsT<ad::Var>>(&f);
  if (full == nullptr) return std::nullopt;
  return bernoulli_masks(full->dropout, full->seed.cols(), batch, set_size, rng);
}

ad::Var forward_batch(const SetFunctionVars& f, const ad::Var& elems, std::size_t set_size,
                      const DropoutMasks* masks) {
  if (set_size == 0 || elems.rows() == 0) throw CardinalityError("set function on an empty set");
  if (elems.rows() % set_size != 0) {
    throw CardinalityError("row count " + std::to_string(elems.rows()) +
                           " is not a multiple of set size " + std::to_string(set_size));
  }
  Batch layout{elems.rows() / set_size, set_size, nullptr, nullptr};
  return std::visit(
      Overloaded{
          [&](const IdentitySet&) {
            if (set_size != 1) {
              throw CardinalityError("identity set function accepts singletons only, got n=" +
                                     std::to_string(set_size));
            }
            return elems;
          },
          [&](const FirstElementSet&) {
            if (set_size == 1) return elems;
            ad::Tape& tape = *elems.tape();
            return ad::matmul(tape.constant(pooling_matrix(layout.batch, set_size, true)), elems);
          },
          [&](const SimpleSetParamsT<ad::Var>& p) { return simple_batch(p, elems, layout); },
          [&](const FullSetParamsT<ad::Var>& p) { return full_batch(p, elems, layout, masks); },
          [&](const DeepSetsParamsT<ad::Var>& p) { return deepsets_batch(p, elems, layout); }},
      f);
}

Tensor evaluate(const SetFunction& f, const Tensor& elems, const DropoutMasks* masks) {
  if (elems.rows() == 0) throw CardinalityError("set function on an empty set");
  ad::Tape tape(false);
  SetFunctionVars vars = bind_constants(f, tape);
  return forward_batch(vars, tape.constant(elems), elems.rows(), masks).value();
}

Tensor simple_forward(const SimpleSetParams& p, const Tensor& elems) {
  return evaluate(SetFunction(std::in_place_type<std::decay_t<decltype(p)>>, p), elems);
}

Tensor full_forward(const FullSetParams& p, const Tensor& elems, const DropoutMasks* masks) {
  return evaluate(SetFunction(std::in_place_type<std::decay_t<decltype(p)>>, p), elems, masks);
}

Tensor deepsets_forward(const DeepSetsParams& p, const Tensor& elems) {
  return evaluate(SetFunction(std::in_place_type<std::decay_t<decltype(p)>>, p), elems);
}

AlphaPair alpha_pair(const SimpleSetParams& p, std::span<const double> h,
                     std::span<const double> h_prime) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(h.size()));
  if (h_prime.size() != h.size()) throw DimensionError("alpha_pair: h and h' differ in width");
  const auto q0 = row_affine(h, p.wq1, p.bq1);
  const auto q1 = row_affine(h_prime, p.wq1, p.bq1);
  const auto k0 = row_affine(h, p.wk1, p.bk1);
  const auto k1 = row_affine(h_prime, p.wk1, p.bk1);
  AlphaPair out{};
  out.p1 = softmax2_first(scale * dot_span(q0, k0), scale * dot_span(q0, k1));
  out.p1_tilde = softmax2_first(scale * dot_span(q1, k0), scale * dot_span(q1, k1));

  const auto v0 = row_affine(h, p.wv1, p.bv1);
  const auto v1 = row_affine(h_prime, p.wv1, p.bv1);
  std::vector<double> h2a(v0.size()), h2b(v0.size());
  for (std::size_t j = 0; j < v0.size(); ++j) {
    h2a[j] = out.p1 * v0[j] + (1.0 - out.p1) * v1[j];
    h2b[j] = out.p1_tilde * v0[j] + (1.0 - out.p1_tilde) * v1[j];
  }
  const auto q2 = row_affine(p.seed.data(), p.wq2, p.bq2);
  const auto k2a = row_affine(h2a, p.wk2, p.bk2);
  const auto k2b = row_affine(h2b, p.wk2, p.bk2);
  out.p2 = softmax2_first(scale * dot_span(q2, k2a), scale * dot_span(q2, k2b));
  out.alpha = out.p2 * (1.0 - out.p1) + (1.0 - out.p2) * (1.0 - out.p1_tilde);
  return out;
}

Tensor simple_effective_weight(const SimpleSetParams& p) {
  return transpose(matmul(p.wv1, p.wv2));
}

Tensor simple_effective_bias(const SimpleSetParams& p) {
  return transpose(matmul(p.bv1, p.wv2) + p.bv2);
}

SimpleSetParams init_simple(std::size_t d, Rng& rng, double scale) {
  const double s = scale / std::sqrt(static_cast<double>(d));
  SimpleSetParams p;
  for (Tensor* w : {&p.wq1, &p.wk1, &p.wv1, &p.wq2, &p.wk2, &p.wv2}) *w = gaussian(d, d, s, rng);
  for (Tensor* b : {&p.bq1, &p.bk1, &p.bv1, &p.bq2, &p.bk2, &p.bv2}) *b = Tensor(1, d);
  p.seed = gaussian(1, d, 1.0, rng);
  return p;
}

FullSetParams init_full(std::size_t d, std::size_t head_width, std::size_t heads, double dropout,
                        Rng& rng) {
  if (d == 0 || head_width == 0 || heads == 0) throw ConfigError("set transformer widths must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout rate must lie in [0, 1)");
  const std::size_t dh = head_width * heads;
  FullSetParams p;
  p.enc1 = init_block(d, head_width, heads, rng);
  p.enc2 = init_block(dh, head_width, heads, rng);
  p.pool = init_block(dh, head_width, heads, rng);
  p.seed = gaussian(1, dh, 1.0, rng);
  p.out = init_affine(dh, d, rng);
  p.dropout = dropout;
  return p;
}

DeepSetsParams init_deepsets(std::size_t d, std::span<const std::size_t> pre_widths,
                             std::span<const std::size_t> post_widths, Rng& rng) {
  DeepSetsParams p;
  std::size_t in = d;
  for (std::size_t w : pre_widths) {
    p.pre.push_back(init_affine(in, w, rng));
    in = w;
  }
  for (std::size_t w : post_widths) {
    p.post.push_back(init_affine(in, w, rng));
    in = w;
  }
  // The output must return to width d.
  if (in != d) p.post.push_back(init_affine(in, d, rng));
  return p;
}

DeepSetsParams deepsets_identity(std::size_t d) {
  DeepSetsParams p;
  p.pre.push_back({Tensor::identity(d), Tensor(1, d)});
  p.post.push_back({Tensor::identity(d), Tensor(1, d)});
  return p;
}

}  // namespace mi::setfunc
