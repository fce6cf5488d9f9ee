// SPDX-License-Identifier: Apache-2.0
//
// Alternating training of encoder weights θ (every iteration) and set
// function weights λ (every S iterations, through a Neumann-series implicit
// hypergradient), plus the baselines and ablations that share the loop.
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "metainterp/autodiff.hpp"
#include "metainterp/checkpoint.hpp"
#include "metainterp/episodes.hpp"
#include "metainterp/interpolate.hpp"
#include "metainterp/protonet.hpp"
#include "metainterp/random.hpp"

namespace mi::bilevel {

enum class OptimizerKind { kSgd, kAdam };
enum class Schedule { kConstant, kLinear };

/// meta-interp: both losses, hypergradient on λ.
/// protonet: singleton loss, identity set function.
/// protonet-st: singleton loss only, hypergradient on λ.
/// mlti: singleton loss plus a manifold-mixup task loss, identity set function.
/// no-bilevel: both losses, λ follows ∂L_tr/∂λ every iteration.
/// no-singleton: mixed loss only, hypergradient on λ.
enum class Method { kMetaInterp, kProtoNet, kProtoNetST, kMlti, kNoBilevel, kNoSingleton };

const char* optimizer_name(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& name);  // "sgd" | "adam"
const char* schedule_name(Schedule s);
Schedule parse_schedule(const std::string& name);  // "constant" | "linear"
const char* method_name(Method m);
Method parse_method(const std::string& name);

/// Whether the method owns trainable set function weights.
bool has_set_function(Method m);
bool uses_hypergrad(Method m);

struct LossWeights {
  double singleton = 0.5;
  double mix = 0.5;
  bool mlti = false;  // the mix term is the manifold-mixup loss
};
LossWeights loss_weights(Method m);

struct TrainConfig {
  double alpha = 1e-3;  // θ learning rate
  double eta = 1e-4;    // λ learning rate
  std::size_t update_period = 100;
  std::size_t batch = 4;
  std::size_t val_batch = 4;
  std::size_t neumann = 5;
  std::size_t max_iters = 1000;
  OptimizerKind theta_opt = OptimizerKind::kAdam;
  OptimizerKind lambda_opt = OptimizerKind::kAdam;
  Schedule hyper_schedule = Schedule::kLinear;
  std::size_t patience = 20;      // evaluations without improvement
  std::size_t eval_every = 0;     // 0: every update_period iterations
  std::size_t eval_episodes = 200;
  std::uint64_t seed = 0;
  interpolate::InterpConfig interp;
  Method method = Method::kMetaInterp;
  double mix_a = 2.0;
  double mix_b = 2.0;
  bool lambda_updates = true;  // false freezes λ regardless of method
  bool record_wall_time = false;
  unsigned threads = 1;
};

/// Throws ConfigError on a violated invariant.
void validate(const TrainConfig& cfg);
std::size_t eval_period(const TrainConfig& cfg);
/// λ learning rate at iteration i.
double hyper_lr(const TrainConfig& cfg, std::size_t iter);

struct Optimizer {
  OptimizerKind kind = OptimizerKind::kAdam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::vector<Tensor> m, v;  // first and second moments, one per parameter
  std::uint64_t steps = 0;

  /// In-place update params[i] −= lr·direction(grads[i]).
  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, double lr);
  friend bool operator==(const Optimizer&, const Optimizer&) = default;
};

/// One element of a training batch: fresh support/query splits of two
/// training tasks. draws is empty when the mix term is off.
struct TaskPair {
  std::size_t t1 = 0;
  std::size_t t2 = 0;
  episodes::Task first, second;
  interpolate::InterpDraws draws;
  double mix = 1.0;  // manifold-mixup coefficient
};

std::vector<TaskPair> sample_batch(const std::vector<episodes::Task>& tasks, const TrainConfig& cfg,
                                   std::size_t interp_width, Rng& rng);

/// (1/B) Σ_b [w_s·L_singleton(first) + w_m·L_mix(first, second)]. Terms with
/// zero weight are not built.
ad::Var inner_loss(const protonet::ModelVars& m, const std::vector<TaskPair>& batch,
                   const LossWeights& w, Rng* dropout_rng);

/// Mean singleton loss over `count` tasks drawn uniformly and re-split (eval mode).
ad::Var validation_loss(const protonet::ModelVars& m, const std::vector<episodes::Task>& tasks,
                        std::size_t count, Rng& rng);

/// Neumann-series implicit hypergradient:
///   v ← ∂L_V/∂θ, p ← v; q times: v ← v − α·H v, p ← p + v;
///   result = ∂L_V/∂λ − (∂²L_tr/∂λ∂θ)·(α p).
/// dltr_dtheta must have been built with create_graph and lie on the tape of
/// theta, lambda and val_loss. Throws ConfigError when it is not differentiable.
std::vector<Tensor> hypergrad(const std::vector<ad::Var>& dltr_dtheta,
                              const std::vector<ad::Var>& theta,
                              const std::vector<ad::Var>& lambda, const ad::Var& val_loss,
                              double alpha, std::size_t q);

struct MetricRow {
  std::size_t iter = 0;
  double train_loss = 0.0;  // mean since the previous row; NaN when no step ran
  double val_loss = 0.0;
  double val_acc = 0.0;
  double wall_ms = 0.0;
  /// Field-wise equality where two NaNs compare equal.
  friend bool operator==(const MetricRow& a, const MetricRow& b) {
    auto same = [](double x, double y) { return x == y || (std::isnan(x) && std::isnan(y)); };
    return a.iter == b.iter && same(a.train_loss, b.train_loss) && same(a.val_loss, b.val_loss) &&
           same(a.val_acc, b.val_acc) && same(a.wall_ms, b.wall_ms);
  }
};

struct TrainState {
  protonet::Model model;
  protonet::Model best;
  Optimizer theta_opt;
  Optimizer lambda_opt;
  std::size_t iter = 0;
  double best_acc = -1.0;
  std::size_t best_iter = 0;
  std::size_t bad_evals = 0;
  double loss_sum = 0.0;
  std::size_t loss_count = 0;
  std::vector<MetricRow> history;
  bool stopped = false;  // early stop triggered
  double wall_ms = 0.0;
};

TrainState init_state(const protonet::Model& model, const TrainConfig& cfg);

/// Calls observed by the loop; all optional.
struct Hooks {
  std::function<void()> on_inner_loss;
  std::function<void()> on_hypergrad;
  std::function<void(const MetricRow&)> on_eval;
};

/// Advances the state until max_iters, early stop, or iteration `stop_at`.
/// Iteration i draws from a generator derived from (seed, i), so a run split
/// across several calls (or a checkpoint round trip) matches one single call.
void run(TrainState& state, const episodes::TaskDataset& data, const TrainConfig& cfg,
         std::size_t stop_at = std::numeric_limits<std::size_t>::max(), const Hooks* hooks = nullptr);

bool finished(const TrainState& state, const TrainConfig& cfg);

struct TrainResult {
  protonet::Model best;
  protonet::Model final_model;
  std::vector<MetricRow> history;
  std::size_t iters = 0;
  bool early_stopped = false;
};

TrainResult meta_train(const episodes::TaskDataset& data, const protonet::Model& init,
                       const TrainConfig& cfg, const Hooks* hooks = nullptr);

/// Ablations of the full method: no interpolation, joint training, no
/// singleton loss. The first entry is the unmodified configuration.
std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& cfg);

// Architecture of a fresh model.
struct ModelSpec {
  std::vector<std::size_t> hidden = {64, 64};  // encoder widths after the input
  std::size_t out_width = 32;
  std::size_t split = 1;
  setfunc::Kind setfn = setfunc::Kind::kFull;
  std::size_t head_width = 8;
  std::size_t heads = 4;
  double dropout = 0.1;
  std::vector<std::size_t> deepsets_pre = {32};
  std::vector<std::size_t> deepsets_post = {32};
  double simple_scale = 1.0;
  protonet::Distance distance = protonet::Distance::kSquaredEuclidean;
};

/// Methods without set function weights get the identity set function.
protonet::Model build_model(const ModelSpec& spec, std::size_t input_dims, Method method, Rng& rng);

// Checkpoints. Model tensors use the for_each_tensor names under `prefix`,
// with structural fields stored as "<prefix>meta.*" scalars.
void put_model(Checkpoint& ck, const protonet::Model& m, const std::string& prefix = "");
protonet::Model get_model(const Checkpoint& ck, const std::string& prefix = "");
Checkpoint save_state(const TrainState& s);
TrainState load_state(const Checkpoint& ck);

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace mi::bilevel
