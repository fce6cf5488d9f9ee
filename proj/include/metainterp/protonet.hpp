// SPDX-License-Identifier: Apache-2.0
//
// Prototypical-network model: an affine/leaky-ReLU encoder split at an
// interpolation layer, with a set function applied to singletons at the
// split, prototypes, distances and the episode cross-entropy.
#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "metainterp/autodiff.hpp"
#include "metainterp/episodes.hpp"
#include "metainterp/random.hpp"
#include "metainterp/setfunc.hpp"
#include "metainterp/tensor.hpp"

namespace mi::protonet {

inline constexpr double kLeakySlope = 0.01;

/// Layers f1..fL; layers[0..split) form the lower stack, layers[split..L)
/// the upper stack. Every layer but the last is followed by a leaky ReLU.
template <class T>
struct EncoderT {
  std::vector<setfunc::AffineT<T>> layers;
  std::size_t split = 0;
};

using Encoder = EncoderT<Tensor>;
using EncoderVars = EncoderT<ad::Var>;

/// widths = {D_in, w1, ..., D}; requires at least one layer and split < L.
Encoder init_encoder(std::span<const std::size_t> widths, std::size_t split, Rng& rng);
/// Width of the representation at the split (D_in when split = 0).
std::size_t interp_width(const Encoder& e);
std::size_t input_width(const Encoder& e);
std::size_t output_width(const Encoder& e);
/// Throws ConfigError unless widths chain and split < L.
void validate(const Encoder& e);

enum class Distance { kSquaredEuclidean, kEuclidean };

struct Model {
  Encoder encoder;
  setfunc::SetFunction setfn = setfunc::IdentitySet{};
  Distance distance = Distance::kSquaredEuclidean;
};

struct ModelVars {
  EncoderVars encoder;
  setfunc::SetFunctionVars setfn;
  Distance distance = Distance::kSquaredEuclidean;
};

/// Named traversal: encoder tensors are "theta.layer<i>.{w,b}", set function
/// tensors "lambda.<name>".
void for_each_tensor(Model& m, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_tensor(const Model& m,
                     const std::function<void(const std::string&, const Tensor&)>& fn);
void for_each_theta(Encoder& e, const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_theta(const Encoder& e,
                    const std::function<void(const std::string&, const Tensor&)>& fn);

/// Model bound to a tape. theta / lambda hold the differentiable leaves in
/// traversal order (empty when bound as constants).
struct BoundModel {
  ModelVars vars;
  std::vector<ad::Var> theta;
  std::vector<ad::Var> lambda;
};

BoundModel bind(const Model& m, ad::Tape& tape, bool theta_variable, bool lambda_variable);

ad::Var encode_lower(const EncoderVars& e, const ad::Var& x);
ad::Var encode_upper(const EncoderVars& e, const ad::Var& h);
Tensor encode_lower(const Encoder& e, const Tensor& x);
Tensor encode_upper(const Encoder& e, const Tensor& h);

/// upper(φ({lower(x)})) for every row of x. With a dropout generator the set
/// function runs in training mode.
ad::Var embed(const ModelVars& m, const ad::Var& x, Rng* dropout_rng);
Tensor embed(const Model& m, const Tensor& x);

/// K×N matrix averaging the rows of each class. Throws MissingClassError.
Tensor class_average_matrix(std::span<const int> labels, int way);
ad::Var prototypes(const ad::Var& embeddings, std::span<const int> labels, int way);
Tensor prototypes(const Tensor& embeddings, std::span<const int> labels, int way);

double sq_dist(std::span<const double> a, std::span<const double> b);
/// m×K matrix of distances between every query row and every prototype row.
ad::Var pairwise_distance(const ad::Var& queries, const ad::Var& protos, Distance d);

/// Mean cross-entropy of softmax(−distance) at the target columns.
ad::Var proto_loss(const ad::Var& query_emb, const ad::Var& protos, std::span<const int> targets,
                   Distance d);

std::vector<int> labels_of(const std::vector<episodes::Example>& xs);

/// Episode loss with every support and query through the singleton set function.
ad::Var loss_singleton(const ModelVars& m, const episodes::Task& task, Rng* dropout_rng);
double loss_singleton(const Model& m, const episodes::Task& task);

/// Nearest prototype; ties go to the lowest index.
int classify_embedding(std::span<const double> emb, const Tensor& protos, Distance d);
int classify(const Model& m, std::span<const double> x, const Tensor& protos);

struct EpisodeScore {
  double accuracy = 0.0;  // fraction of queries classified correctly
  double loss = 0.0;      // singleton episode loss
};

/// Eval-mode score of one episode from a single embedding pass.
EpisodeScore score_episode(const Model& m, const episodes::Task& episode);
double episode_accuracy(const Model& m, const episodes::Task& episode);

struct AccuracyResult {
  double mean = 0.0;
  double ci95 = 0.0;
};

struct SplitScore {
  AccuracyResult accuracy;
  double loss = 0.0;  // mean episode loss
};

/// Smallest per-class support count of a task.
int shots_of(const episodes::Task& task);

/// Samples `episodes` episodes (uniform task, fresh support/query split with
/// `shots` per class) and classifies their queries. CI is 1.96·std/√episodes.
/// Episode e uses a generator derived from (seed, e), so the result does not
/// depend on `threads`.
AccuracyResult accuracy(const Model& m, const std::vector<episodes::Task>& tasks,
                        std::size_t episodes, int shots, std::uint64_t seed, unsigned threads = 1);
SplitScore score_split(const Model& m, const std::vector<episodes::Task>& tasks,
                       std::size_t episodes, int shots, std::uint64_t seed, unsigned threads = 1);

/// Mean and 1.96·std/√runs across per-seed accuracies.
AccuracyResult aggregate_runs(std::span<const double> per_seed);

}  // namespace mi::protonet
