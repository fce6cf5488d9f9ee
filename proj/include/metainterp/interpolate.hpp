// SPDX-License-Identifier: Apache-2.0
//
// Task interpolation: pair the classes of two tasks, fuse paired hidden
// representations with the set function, and score task-1 queries against the
// resulting prototypes.
//
// All randomness of one interpolated episode is drawn up front into an
// InterpDraws value, so different losses can be evaluated on the same draw.
#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "metainterp/autodiff.hpp"
#include "metainterp/episodes.hpp"
#include "metainterp/protonet.hpp"
#include "metainterp/random.hpp"

namespace mi::interpolate {

enum class Strategy { kSupport, kQuery, kSupportAndQuery, kSupportNoise };

const char* strategy_name(Strategy s);
/// Accepts "support", "query", "support_and_query", "support_noise".
Strategy parse_strategy(const std::string& name);

struct InterpConfig {
  Strategy strategy = Strategy::kSupport;
  /// Elements per fused set, 2..5.
  std::size_t cardinality = 2;
};

void validate(const InterpConfig& cfg);

/// Class k of the interpolated task merges class sigma1[k] of task 1 with
/// class sigma2[k] of task 2.
struct ClassPairing {
  std::vector<int> sigma1;
  std::vector<int> sigma2;
  friend bool operator==(const ClassPairing&, const ClassPairing&) = default;
};

ClassPairing pair_classes(int way, Rng& rng);

/// Cross product of the support indices of class sigma1[k] in task 1 and
/// class sigma2[k] in task 2, task-1 index major.
std::vector<std::pair<std::size_t, std::size_t>> build_pairs(const episodes::Task& t1,
                                                            const episodes::Task& t2,
                                                            const ClassPairing& pairing, int k);

/// Where a set element comes from.
enum class Source : std::uint8_t { kSupport1, kSupport2, kQuery1, kQuery2, kNoise };

struct ElementRef {
  Source source;
  std::size_t index;  // row within the source
  friend bool operator==(const ElementRef&, const ElementRef&) = default;
};

using ElementSet = std::vector<ElementRef>;

struct InterpDraws {
  ClassPairing pairing;
  /// Fused support sets per interpolated class; empty when supports are unmixed.
  std::vector<std::vector<ElementSet>> support_sets;
  /// One fused set per task-1 query (in query order); empty when queries are unmixed.
  std::vector<ElementSet> query_sets;
  /// Standard-normal partners, one row per Source::kNoise index.
  Tensor noise;
};

/// Draws the pairing and every set composition for one interpolated episode.
/// A set of size n holds ceil(n/2) task-1 and floor(n/2) task-2 elements: the
/// anchor pair plus members drawn uniformly with replacement from the same
/// classes. For the noise strategy every task-1 support element is joined by
/// n-1 noise rows of width `interp_width`.
InterpDraws draw_interp(const episodes::Task& t1, const episodes::Task& t2,
                        const InterpConfig& cfg, std::size_t interp_width, Rng& rng);

/// Interpolated prototypes (K×D) of the support sets in `draws`.
ad::Var interpolated_prototypes(const protonet::ModelVars& m, const episodes::Task& t1,
                                const episodes::Task& t2, const InterpDraws& draws,
                                Rng* dropout_rng);
Tensor interpolated_prototypes(const protonet::Model& m, const episodes::Task& t1,
                               const episodes::Task& t2, const InterpDraws& draws);

/// Mixed-task loss. Queries are task 1's, target k for label sigma1[k].
ad::Var loss_mix(const protonet::ModelVars& m, const episodes::Task& t1, const episodes::Task& t2,
                 const InterpDraws& draws, Rng* dropout_rng);
double loss_mix(const protonet::Model& m, const episodes::Task& t1, const episodes::Task& t2,
                const InterpDraws& draws);

/// Manifold-mixup baseline: the fused value of every set is the convex
/// combination mix·(mean of task-1 members) + (1−mix)·(mean of task-2 members)
/// at the split layer; no set function. Uses the sets of a support_and_query
/// draw.
ad::Var mlti_loss(const protonet::ModelVars& m, const episodes::Task& t1, const episodes::Task& t2,
                  const InterpDraws& draws, double mix);
double mlti_loss(const protonet::Model& m, const episodes::Task& t1, const episodes::Task& t2,
                 const InterpDraws& draws, double mix);

/// Beta(a, b) mixing coefficient.
double draw_mix(Rng& rng, double a = 2.0, double b = 2.0);

}  // namespace mi::interpolate
