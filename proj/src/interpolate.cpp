// SPDX-License-Identifier: Apache-2.0
#include "metainterp/interpolate.hpp"

#include <numeric>

#include "metainterp/errors.hpp"

namespace mi::interpolate {
namespace {

using episodes::Example;
using episodes::Task;

std::vector<std::vector<std::size_t>> class_rows(const std::vector<Example>& xs, int way) {
  std::vector<std::vector<std::size_t>> rows(static_cast<std::size_t>(way));
  for (std::size_t i = 0; i < xs.size(); ++i) {
    rows.at(static_cast<std::size_t>(xs[i].label)).push_back(i);
  }
  return rows;
}

std::vector<int> inverse(const std::vector<int>& sigma) {
  std::vector<int> inv(sigma.size());
  for (std::size_t k = 0; k < sigma.size(); ++k) inv.at(static_cast<std::size_t>(sigma[k])) = static_cast<int>(k);
  return inv;
}

const std::vector<std::size_t>& require_class(const std::vector<std::vector<std::size_t>>& rows,
                                              int label, const char* where) {
  const auto& r = rows.at(static_cast<std::size_t>(label));
  if (r.empty()) throw MissingClassError(label, where);
  return r;
}

// Extra members beyond the anchors, uniform with replacement.
void fill(ElementSet& set, Source src, const std::vector<std::size_t>& pool, std::size_t count,
          Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) set.push_back({src, pool[uniform_index(rng, pool.size())]});
}

bool from_task1(Source s) { return s == Source::kSupport1 || s == Source::kQuery1; }

// Lower representations of every source row stacked as
// [support1; support2; query1; query2; noise].
struct Sources {
  ad::Var rows;
  std::size_t offset[5];

  std::size_t row(const ElementRef& r) const { return offset[static_cast<int>(r.source)] + r.index; }
};

Sources lower_sources(const protonet::ModelVars& m, const Task& t1, const Task& t2,
                      const Tensor& noise) {
  ad::Tape& tape = *m.encoder.layers.at(0).w.tape();
  std::vector<const Example*> all;
  Sources s{};
  std::size_t at = 0;
  int slot = 0;
  for (const auto* set : {&t1.support, &t2.support, &t1.query, &t2.query}) {
    s.offset[slot++] = at;
    for (const auto& ex : *set) all.push_back(&ex);
    at += set->size();
  }
  s.offset[4] = at;
  ad::Var h = protonet::encode_lower(m.encoder, tape.constant(episodes::features_matrix(all)));
  if (noise.rows() > 0) {
    if (noise.cols() != h.cols()) throw DimensionError("noise width differs from split width");
    const ad::Var parts[] = {h, tape.constant(noise)};
    h = ad::concat_rows(parts);
  }
  s.rows = h;
  return s;
}

// One row per set element, in set order.
Tensor gather_matrix(const Sources& src, const std::vector<const ElementSet*>& sets) {
  std::size_t total = 0;
  for (const auto* s : sets) total += s->size();
  Tensor g(total, src.rows.rows());
  std::size_t r = 0;
  for (const auto* s : sets)
    for (const auto& e : *s) g(r++, src.row(e)) = 1.0;
  return g;
}

// Fused representation of every set: φ over the gathered elements.
ad::Var fuse(const protonet::ModelVars& m, const Sources& src,
             const std::vector<const ElementSet*>& sets, Rng* dropout_rng) {
  const std::size_t n = sets.at(0)->size();
  for (const auto* s : sets) {
    if (s->size() != n) throw CardinalityError("fused sets must share one cardinality");
  }
  ad::Tape& tape = *src.rows.tape();
  ad::Var elems = ad::matmul(tape.constant(gather_matrix(src, sets)), src.rows);
  std::optional<setfunc::DropoutMasks> masks;
  if (dropout_rng != nullptr) masks = setfunc::draw_masks(m.setfn, sets.size(), n, *dropout_rng);
  return setfunc::forward_batch(m.setfn, elems, n, masks ? &*masks : nullptr);
}

// Convex mixing of task-1 and task-2 members of every set.
ad::Var mix_sets(const Sources& src, const std::vector<const ElementSet*>& sets, double mix) {
  Tensor g(sets.size(), src.rows.rows());
  for (std::size_t r = 0; r < sets.size(); ++r) {
    std::size_t c1 = 0, c2 = 0;
    for (const auto& e : *sets[r]) (from_task1(e.source) ? c1 : c2)++;
    if (c1 == 0 || c2 == 0) throw CardinalityError("mixup sets need members from both tasks");
    for (const auto& e : *sets[r]) {
      g(r, src.row(e)) += from_task1(e.source) ? mix / static_cast<double>(c1)
                                                : (1.0 - mix) / static_cast<double>(c2);
    }
  }
  return ad::matmul(src.rows.tape()->constant(std::move(g)), src.rows);
}

// Singleton path for rows [begin, begin+count) of the sources.
ad::Var singleton(const protonet::ModelVars& m, const Sources& src, std::size_t begin,
                  std::size_t count, Rng* dropout_rng) {
  ad::Var h = ad::slice_rows(src.rows, begin, count);
  std::optional<setfunc::DropoutMasks> masks;
  if (dropout_rng != nullptr) masks = setfunc::draw_masks(m.setfn, count, 1, *dropout_rng);
  return setfunc::forward_batch(m.setfn, h, 1, masks ? &*masks : nullptr);
}

std::vector<const ElementSet*> flatten(const std::vector<std::vector<ElementSet>>& per_class,
                                       std::vector<int>* labels) {
  std::vector<const ElementSet*> out;
  for (std::size_t k = 0; k < per_class.size(); ++k) {
    for (const auto& s : per_class[k]) {
      out.push_back(&s);
      labels->push_back(static_cast<int>(k));
    }
  }
  return out;
}

void check_compatible(const Task& t1, const Task& t2, const InterpDraws& d) {
  if (t1.way != t2.way) throw DimensionError("interpolated tasks differ in way");
  if (d.pairing.sigma1.size() != static_cast<std::size_t>(t1.way) ||
      d.pairing.sigma2.size() != static_cast<std::size_t>(t1.way)) {
    throw DimensionError("pairing size differs from task way");
  }
}

// Varies only in how a fused set becomes one vector.
using Fuser = std::function<ad::Var(const Sources&, const std::vector<const ElementSet*>&)>;

ad::Var prototypes_from(const protonet::ModelVars& m, const Task& t1, const InterpDraws& d,
                        const Sources& src, const Fuser& fuser, Rng* dropout_rng) {
  ad::Var emb;
  std::vector<int> labels;
  if (!d.support_sets.empty()) {
    auto sets = flatten(d.support_sets, &labels);
    emb = protonet::encode_upper(m.encoder, fuser(src, sets));
  } else {
    const auto inv = inverse(d.pairing.sigma1);
    for (const auto& ex : t1.support) labels.push_back(inv.at(static_cast<std::size_t>(ex.label)));
    emb = protonet::encode_upper(
        m.encoder, singleton(m, src, src.offset[0], t1.support.size(), dropout_rng));
  }
  return protonet::prototypes(emb, labels, t1.way);
}

ad::Var mixed_loss(const protonet::ModelVars& m, const Task& t1, const Task& t2,
                   const InterpDraws& d, const Fuser& fuser, Rng* dropout_rng) {
  check_compatible(t1, t2, d);
  Sources src = lower_sources(m, t1, t2, d.noise);
  ad::Var protos = prototypes_from(m, t1, d, src, fuser, dropout_rng);
  ad::Var q;
  if (!d.query_sets.empty()) {
    std::vector<const ElementSet*> sets;
    for (const auto& s : d.query_sets) sets.push_back(&s);
    q = protonet::encode_upper(m.encoder, fuser(src, sets));
  } else {
    q = protonet::encode_upper(m.encoder,
                               singleton(m, src, src.offset[2], t1.query.size(), dropout_rng));
  }
  const auto inv = inverse(d.pairing.sigma1);
  std::vector<int> targets;
  for (const auto& ex : t1.query) targets.push_back(inv.at(static_cast<std::size_t>(ex.label)));
  return protonet::proto_loss(q, protos, targets, m.distance);
}

template <class F>
auto with_constants(const protonet::Model& m, F&& f) {
  ad::Tape tape(false);
  protonet::BoundModel b = protonet::bind(m, tape, false, false);
  return f(b.vars);
}

}  // namespace

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kSupport:
      return "support";
    case Strategy::kQuery:
      return "query";
    case Strategy::kSupportAndQuery:
      return "support_and_query";
    case Strategy::kSupportNoise:
      return "support_noise";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& name) {
  for (Strategy s : {Strategy::kSupport, Strategy::kQuery, Strategy::kSupportAndQuery,
                     Strategy::kSupportNoise}) {
    if (name == strategy_name(s)) return s;
  }
  throw ConfigError("unknown interpolation strategy '" + name + "'");
}

void validate(const InterpConfig& cfg) {
  if (cfg.cardinality < 2 || cfg.cardinality > 5) {
    throw ConfigError("set cardinality must lie in 2..5");
  }
}

ClassPairing pair_classes(int way, Rng& rng) {
  if (way < 1) throw DomainError("pair_classes: way must be positive");
  ClassPairing p;
  p.sigma1.resize(static_cast<std::size_t>(way));
  std::iota(p.sigma1.begin(), p.sigma1.end(), 0);
  p.sigma2 = p.sigma1;
  shuffle(std::span<int>(p.sigma1), rng);
  shuffle(std::span<int>(p.sigma2), rng);
  return p;
}

std::vector<std::pair<std::size_t, std::size_t>> build_pairs(const Task& t1, const Task& t2,
                                                            const ClassPairing& pairing, int k) {
  const auto r1 = class_rows(t1.support, t1.way);
  const auto r2 = class_rows(t2.support, t2.way);
  const auto& a = require_class(r1, pairing.sigma1.at(static_cast<std::size_t>(k)), "task 1 support");
  const auto& b = require_class(r2, pairing.sigma2.at(static_cast<std::size_t>(k)), "task 2 support");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(a.size() * b.size());
  for (std::size_t i : a)
    for (std::size_t j : b) out.emplace_back(i, j);
  return out;
}

InterpDraws draw_interp(const Task& t1, const Task& t2, const InterpConfig& cfg,
                        std::size_t interp_width, Rng& rng) {
  validate(cfg);
  if (t1.way != t2.way) throw DimensionError("interpolated tasks differ in way");
  const std::size_t n = cfg.cardinality;
  const std::size_t from1 = (n + 1) / 2;
  const std::size_t from2 = n / 2;
  InterpDraws d;
  d.pairing = pair_classes(t1.way, rng);
  const auto s1 = class_rows(t1.support, t1.way);
  const auto s2 = class_rows(t2.support, t2.way);
  const auto q1 = class_rows(t1.query, t1.way);
  const auto q2 = class_rows(t2.query, t2.way);
  const bool mix_support = cfg.strategy == Strategy::kSupport ||
                           cfg.strategy == Strategy::kSupportAndQuery;
  const bool mix_query = cfg.strategy == Strategy::kQuery ||
                         cfg.strategy == Strategy::kSupportAndQuery;
  std::size_t noise_rows = 0;

  if (mix_support || cfg.strategy == Strategy::kSupportNoise) {
    d.support_sets.resize(static_cast<std::size_t>(t1.way));
    for (int k = 0; k < t1.way; ++k) {
      const int c1 = d.pairing.sigma1[static_cast<std::size_t>(k)];
      const int c2 = d.pairing.sigma2[static_cast<std::size_t>(k)];
      const auto& a = require_class(s1, c1, "task 1 support");
      auto& sets = d.support_sets[static_cast<std::size_t>(k)];
      if (mix_support) {
        for (const auto& [i, j] : build_pairs(t1, t2, d.pairing, k)) {
          ElementSet set{{Source::kSupport1, i}, {Source::kSupport2, j}};
          fill(set, Source::kSupport1, a, from1 - 1, rng);
          fill(set, Source::kSupport2, require_class(s2, c2, "task 2 support"), from2 - 1, rng);
          sets.push_back(std::move(set));
        }
      } else {
        for (std::size_t i : a) {
          ElementSet set{{Source::kSupport1, i}};
          for (std::size_t r = 1; r < n; ++r) set.push_back({Source::kNoise, noise_rows++});
          sets.push_back(std::move(set));
        }
      }
    }
  }

  if (mix_query) {
    const auto inv = inverse(d.pairing.sigma1);
    for (std::size_t qi = 0; qi < t1.query.size(); ++qi) {
      const int k = inv.at(static_cast<std::size_t>(t1.query[qi].label));
      const int c2 = d.pairing.sigma2[static_cast<std::size_t>(k)];
      ElementSet set{{Source::kQuery1, qi}};
      fill(set, Source::kQuery1, q1[static_cast<std::size_t>(t1.query[qi].label)], from1 - 1, rng);
      fill(set, Source::kQuery2, require_class(q2, c2, "task 2 query"), from2, rng);
      d.query_sets.push_back(std::move(set));
    }
  }

  d.noise = Tensor(noise_rows, interp_width);
  for (auto& v : d.noise.data()) v = standard_normal(rng);
  return d;
}

ad::Var interpolated_prototypes(const protonet::ModelVars& m, const Task& t1, const Task& t2,
                                const InterpDraws& draws, Rng* dropout_rng) {
  check_compatible(t1, t2, draws);
  Sources src = lower_sources(m, t1, t2, draws.noise);
  Fuser fuser = [&](const Sources& s, const std::vector<const ElementSet*>& sets) {
    return fuse(m, s, sets, dropout_rng);
  };
  return prototypes_from(m, t1, draws, src, fuser, dropout_rng);
}

Tensor interpolated_prototypes(const protonet::Model& m, const Task& t1, const Task& t2,
                               const InterpDraws& draws) {
  return with_constants(m, [&](const protonet::ModelVars& v) {
    return interpolated_prototypes(v, t1, t2, draws, nullptr).value();
  });
}

ad::Var loss_mix(const protonet::ModelVars& m, const Task& t1, const Task& t2,
                 const InterpDraws& draws, Rng* dropout_rng) {
  Fuser fuser = [&](const Sources& s, const std::vector<const ElementSet*>& sets) {
    return fuse(m, s, sets, dropout_rng);
  };
  return mixed_loss(m, t1, t2, draws, fuser, dropout_rng);
}

double loss_mix(const protonet::Model& m, const Task& t1, const Task& t2,
                const InterpDraws& draws) {
  return with_constants(m, [&](const protonet::ModelVars& v) {
    return loss_mix(v, t1, t2, draws, nullptr).item();
  });
}

ad::Var mlti_loss(const protonet::ModelVars& m, const Task& t1, const Task& t2,
                  const InterpDraws& draws, double mix) {
  if (!(mix >= 0.0 && mix <= 1.0)) throw DomainError("mixup coefficient must lie in [0, 1]");
  Fuser fuser = [mix](const Sources& s, const std::vector<const ElementSet*>& sets) {
    return mix_sets(s, sets, mix);
  };
  return mixed_loss(m, t1, t2, draws, fuser, nullptr);
}

double mlti_loss(const protonet::Model& m, const Task& t1, const Task& t2,
                 const InterpDraws& draws, double mix) {
  return with_constants(m, [&](const protonet::ModelVars& v) {
    return mlti_loss(v, t1, t2, draws, mix).item();
  });
}

double draw_mix(Rng& rng, double a, double b) {
  if (!(a > 0.0 && b > 0.0)) throw DomainError("Beta parameters must be positive");
  return beta_sample(rng, a, b);
}

}  // namespace mi::interpolate
