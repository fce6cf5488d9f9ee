// SPDX-License-Identifier: Apache-2.0
#include "metainterp/bilevel.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

#include "metainterp/errors.hpp"

namespace mi::bilevel {
namespace {

// Stream keys for the per-iteration generators.
constexpr std::uint64_t kBatchKey = 0x6261746368ULL;
constexpr std::uint64_t kDropoutKey = 0x64726f70ULL;
constexpr std::uint64_t kValKey = 0x76616cULL;
constexpr std::uint64_t kEvalSeedMix = 0x9e3779b97f4a7c15ULL;

std::vector<Tensor*> theta_ptrs(protonet::Model& m) {
  std::vector<Tensor*> out;
  protonet::for_each_theta(m.encoder, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<Tensor*> lambda_ptrs(protonet::Model& m) {
  std::vector<Tensor*> out;
  setfunc::for_each_tensor(m.setfn, [&](const std::string&, Tensor& t) { out.push_back(&t); });
  return out;
}

std::vector<Tensor> values_of(const std::vector<ad::Var>& vs) {
  std::vector<Tensor> out;
  out.reserve(vs.size());
  for (const auto& v : vs) out.push_back(v.value());
  return out;
}

std::vector<ad::Var> constants(ad::Tape& tape, const std::vector<Tensor>& ts) {
  std::vector<ad::Var> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(tape.constant(t));
  return out;
}

void put_optimizer(Checkpoint& ck, const Optimizer& o, const std::string& prefix) {
  ck.put_scalar(prefix + "steps", static_cast<double>(o.steps));
  for (std::size_t i = 0; i < o.m.size(); ++i) {
    ck.put(prefix + "m" + std::to_string(i), o.m[i]);
    ck.put(prefix + "v" + std::to_string(i), o.v[i]);
  }
}

Optimizer get_optimizer(const Checkpoint& ck, const std::string& prefix) {
  Optimizer o;
  o.steps = static_cast<std::uint64_t>(ck.get_scalar(prefix + "steps"));
  for (std::size_t i = 0; ck.has(prefix + "m" + std::to_string(i)); ++i) {
    o.m.push_back(ck.get(prefix + "m" + std::to_string(i)));
    o.v.push_back(ck.get(prefix + "v" + std::to_string(i)));
  }
  return o;
}

std::size_t count_prefixed(const Checkpoint& ck, const std::string& head, const std::string& tail) {
  std::size_t n = 0;
  while (ck.has(head + std::to_string(n) + tail)) ++n;
  return n;
}

}  // namespace

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::kSgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

const char* schedule_name(Schedule s) { return s == Schedule::kConstant ? "constant" : "linear"; }

Schedule parse_schedule(const std::string& name) {
  if (name == "constant") return Schedule::kConstant;
  if (name == "linear") return Schedule::kLinear;
  throw ConfigError("unknown schedule '" + name + "' (expected constant or linear)");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::kMetaInterp: return "meta-interp";
    case Method::kProtoNet: return "protonet";
    case Method::kProtoNetST: return "protonet-st";
    case Method::kMlti: return "mlti";
    case Method::kNoBilevel: return "no-bilevel";
    case Method::kNoSingleton: return "no-singleton";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::kMetaInterp, Method::kProtoNet, Method::kProtoNetST, Method::kMlti,
                   Method::kNoBilevel, Method::kNoSingleton}) {
    if (name == method_name(m)) return m;
  }
  throw ConfigError("unknown method '" + name + "'");
}

bool has_set_function(Method m) { return m != Method::kProtoNet && m != Method::kMlti; }

bool uses_hypergrad(Method m) {
  return m == Method::kMetaInterp || m == Method::kProtoNetST || m == Method::kNoSingleton;
}

LossWeights loss_weights(Method m) {
  switch (m) {
    case Method::kProtoNet:
    case Method::kProtoNetST: return {1.0, 0.0, false};
    case Method::kMlti: return {0.5, 0.5, true};
    case Method::kNoSingleton: return {0.0, 1.0, false};
    case Method::kMetaInterp:
    case Method::kNoBilevel: return {0.5, 0.5, false};
  }
  return {};
}

void validate(const TrainConfig& c) {
  if (!(c.alpha > 0.0)) throw ConfigError("alpha must be positive");
  if (!(c.eta >= 0.0)) throw ConfigError("eta must be nonnegative");
  if (c.update_period == 0) throw ConfigError("update_period must be at least 1");
  if (c.batch == 0) throw ConfigError("batch must be at least 1");
  if (c.val_batch == 0) throw ConfigError("val_batch must be at least 1");
  if (c.eval_episodes == 0) throw ConfigError("eval_episodes must be at least 1");
  if (c.patience == 0) throw ConfigError("patience must be at least 1");
  if (!(c.mix_a > 0.0 && c.mix_b > 0.0)) throw ConfigError("mixup Beta parameters must be positive");
  interpolate::validate(c.interp);
}

std::size_t eval_period(const TrainConfig& cfg) {
  return cfg.eval_every == 0 ? cfg.update_period : cfg.eval_every;
}

double hyper_lr(const TrainConfig& cfg, std::size_t iter) {
  if (cfg.hyper_schedule == Schedule::kConstant || cfg.max_iters == 0) return cfg.eta;
  const double frac = static_cast<double>(iter) / static_cast<double>(cfg.max_iters);
  return cfg.eta * std::max(0.0, 1.0 - frac);
}

void Optimizer::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                     double lr) {
  if (params.size() != grads.size()) throw DimensionError("optimizer: one gradient per parameter");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw DimensionError("optimizer: gradient shape " + grads[i].shape().str() + " vs parameter " +
                           params[i]->shape().str());
    }
  }
  ++steps;
  if (kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i]->data();
      auto g = grads[i].data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
    return;
  }
  if (m.empty()) {
    for (const Tensor* p : params) {
      m.emplace_back(p->shape());
      v.emplace_back(p->shape());
    }
  }
  if (m.size() != params.size()) throw DimensionError("optimizer: parameter count changed");
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i].data();
    auto mi = m[i].data();
    auto vi = v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      mi[j] = beta1 * mi[j] + (1.0 - beta1) * g[j];
      vi[j] = beta2 * vi[j] + (1.0 - beta2) * g[j] * g[j];
      p[j] -= lr * (mi[j] / c1) / (std::sqrt(vi[j] / c2) + eps);
    }
  }
}

std::vector<TaskPair> sample_batch(const std::vector<episodes::Task>& tasks, const TrainConfig& cfg,
                                   std::size_t interp_width, Rng& rng) {
  if (tasks.empty()) throw Error("training split has no tasks");
  const LossWeights w = loss_weights(cfg.method);
  std::vector<TaskPair> batch(cfg.batch);
  for (auto& pair : batch) {
    std::tie(pair.t1, pair.t2) = episodes::sample_pair_indices(tasks.size(), rng);
    pair.first = episodes::resample_episode(tasks[pair.t1], protonet::shots_of(tasks[pair.t1]), rng);
    if (w.mix == 0.0) continue;
    pair.second = episodes::resample_episode(tasks[pair.t2], protonet::shots_of(tasks[pair.t2]), rng);
    if (w.mlti) {
      const interpolate::InterpConfig mixup{interpolate::Strategy::kSupportAndQuery, 2};
      pair.draws = interpolate::draw_interp(pair.first, pair.second, mixup, interp_width, rng);
      pair.mix = interpolate::draw_mix(rng, cfg.mix_a, cfg.mix_b);
    } else {
      pair.draws = interpolate::draw_interp(pair.first, pair.second, cfg.interp, interp_width, rng);
    }
  }
  return batch;
}

ad::Var inner_loss(const protonet::ModelVars& m, const std::vector<TaskPair>& batch,
                   const LossWeights& w, Rng* dropout_rng) {
  if (batch.empty()) throw ConfigError("inner loss needs a nonempty batch");
  ad::Var total;
  auto accumulate = [&](const ad::Var& term, double weight) {
    ad::Var t = ad::scale(term, weight);
    total = total.valid() ? ad::add(total, t) : t;
  };
  for (const auto& pair : batch) {
    const auto& t1 = pair.first;
    const auto& t2 = pair.second;
    if (w.singleton != 0.0) accumulate(protonet::loss_singleton(m, t1, dropout_rng), w.singleton);
    if (w.mix != 0.0) {
      accumulate(w.mlti ? interpolate::mlti_loss(m, t1, t2, pair.draws, pair.mix)
                        : interpolate::loss_mix(m, t1, t2, pair.draws, dropout_rng),
                 w.mix);
    }
  }
  if (!total.valid()) throw ConfigError("inner loss has no active term");
  return ad::scale(total, 1.0 / static_cast<double>(batch.size()));
}

ad::Var validation_loss(const protonet::ModelVars& m, const std::vector<episodes::Task>& tasks,
                        std::size_t count, Rng& rng) {
  if (tasks.empty()) throw Error("validation split has no tasks");
  if (count == 0) throw ConfigError("validation loss needs at least one task");
  ad::Var total;
  for (std::size_t b = 0; b < count; ++b) {
    const auto& task = tasks[uniform_index(rng, tasks.size())];
    ad::Var l = protonet::loss_singleton(
        m, episodes::resample_episode(task, protonet::shots_of(task), rng), nullptr);
    total = total.valid() ? ad::add(total, l) : l;
  }
  return ad::scale(total, 1.0 / static_cast<double>(count));
}

std::vector<Tensor> hypergrad(const std::vector<ad::Var>& dltr_dtheta,
                              const std::vector<ad::Var>& theta,
                              const std::vector<ad::Var>& lambda, const ad::Var& val_loss,
                              double alpha, std::size_t q) {
  if (dltr_dtheta.size() != theta.size()) throw DimensionError("one training gradient per θ leaf");
  bool reentrant = false;
  for (const auto& g : dltr_dtheta) reentrant = reentrant || g.requires_grad();
  if (!reentrant) {
    throw ConfigError("hypergradient needs ∂L_tr/∂θ built with create_graph enabled");
  }
  ad::Tape& tape = *val_loss.tape();

  std::vector<ad::Var> both = theta;
  both.insert(both.end(), lambda.begin(), lambda.end());
  const std::vector<ad::Var> dv = ad::grad(val_loss, both, false);

  std::vector<Tensor> v(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) v[i] = dv[i].value();
  std::vector<Tensor> p = v;
  for (std::size_t j = 0; j < q; ++j) {
    const auto hv = ad::grad(dltr_dtheta, theta, constants(tape, v), false);
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] = v[i] - alpha * hv[i].value();
      p[i] = p[i] + v[i];
    }
  }
  for (auto& t : p) t = alpha * t;
  const auto cross = ad::grad(dltr_dtheta, lambda, constants(tape, p), false);

  std::vector<Tensor> out(lambda.size());
  for (std::size_t i = 0; i < lambda.size(); ++i) {
    out[i] = dv[theta.size() + i].value() - cross[i].value();
  }
  return out;
}

TrainState init_state(const protonet::Model& model, const TrainConfig& cfg) {
  TrainState s;
  s.model = model;
  s.best = model;
  s.theta_opt.kind = cfg.theta_opt;
  s.lambda_opt.kind = cfg.lambda_opt;
  return s;
}

bool finished(const TrainState& state, const TrainConfig& cfg) {
  if (state.stopped) return true;
  return state.iter >= cfg.max_iters && !state.history.empty() &&
         state.history.back().iter == state.iter;
}

namespace {

void evaluate(TrainState& st, const episodes::TaskDataset& data, const TrainConfig& cfg,
              const Hooks* hooks) {
  const int shots = protonet::shots_of(data.meta_val.at(0));
  const auto score = protonet::score_split(st.model, data.meta_val, cfg.eval_episodes, shots,
                                           cfg.seed ^ kEvalSeedMix, cfg.threads);
  MetricRow row;
  row.iter = st.iter;
  row.train_loss = st.loss_count == 0 ? std::nan("")
                                      : st.loss_sum / static_cast<double>(st.loss_count);
  row.val_loss = score.loss;
  row.val_acc = score.accuracy.mean;
  row.wall_ms = cfg.record_wall_time ? st.wall_ms : 0.0;
  st.loss_sum = 0.0;
  st.loss_count = 0;
  st.history.push_back(row);
  if (row.val_acc > st.best_acc) {
    st.best_acc = row.val_acc;
    st.best_iter = st.iter;
    st.best = st.model;
    st.bad_evals = 0;
  } else if (++st.bad_evals >= cfg.patience) {
    st.stopped = true;
  }
  if (hooks != nullptr && hooks->on_eval) hooks->on_eval(row);
}

void step(TrainState& st, const episodes::TaskDataset& data, const TrainConfig& cfg,
          const Hooks* hooks) {
  const std::size_t i = st.iter;
  const bool trainable_lambda = has_set_function(cfg.method) && cfg.lambda_updates &&
                                !lambda_ptrs(st.model).empty();
  const bool hyper_due = trainable_lambda && uses_hypergrad(cfg.method) && i % cfg.update_period == 0;
  const bool joint = trainable_lambda && cfg.method == Method::kNoBilevel;

  Rng batch_rng = make_stream(cfg.seed, {kBatchKey, i});
  Rng dropout_rng = make_stream(cfg.seed, {kDropoutKey, i});
  const auto batch = sample_batch(data.meta_train, cfg,
                                  protonet::interp_width(st.model.encoder), batch_rng);

  ad::Tape tape;
  const auto bound = protonet::bind(st.model, tape, true, hyper_due || joint);
  if (hooks != nullptr && hooks->on_inner_loss) hooks->on_inner_loss();
  const ad::Var loss = inner_loss(bound.vars, batch, loss_weights(cfg.method), &dropout_rng);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    throw TrainingError("non-finite training loss (" + std::to_string(value) + ") at iteration " +
                        std::to_string(i) + "; lower alpha or check the inputs");
  }

  std::vector<ad::Var> inputs = bound.theta;
  if (joint) inputs.insert(inputs.end(), bound.lambda.begin(), bound.lambda.end());
  const auto grads = ad::grad(loss, inputs, hyper_due);
  const std::vector<ad::Var> g_theta(grads.begin(), grads.begin() + bound.theta.size());

  std::vector<Tensor> lambda_grad;
  if (hyper_due) {
    if (hooks != nullptr && hooks->on_hypergrad) hooks->on_hypergrad();
    Rng val_rng = make_stream(cfg.seed, {kValKey, i});
    const ad::Var val = validation_loss(bound.vars, data.meta_val, cfg.val_batch, val_rng);
    lambda_grad = hypergrad(g_theta, bound.theta, bound.lambda, val, cfg.alpha, cfg.neumann);
  } else if (joint) {
    for (std::size_t k = bound.theta.size(); k < grads.size(); ++k) {
      lambda_grad.push_back(grads[k].value());
    }
  }

  st.theta_opt.step(theta_ptrs(st.model), values_of(g_theta), cfg.alpha);
  if (hyper_due) st.lambda_opt.step(lambda_ptrs(st.model), lambda_grad, hyper_lr(cfg, i));
  if (joint) st.lambda_opt.step(lambda_ptrs(st.model), lambda_grad, cfg.alpha);

  st.loss_sum += value;
  ++st.loss_count;
}

}  // namespace

void run(TrainState& st, const episodes::TaskDataset& data, const TrainConfig& cfg,
         std::size_t stop_at, const Hooks* hooks) {
  validate(cfg);
  episodes::validate(data);
  if (data.meta_train.empty() || data.meta_val.empty()) {
    throw ConfigError("training needs nonempty meta-train and meta-val splits");
  }
  using Clock = std::chrono::steady_clock;
  const std::size_t period = eval_period(cfg);
  auto evaluated_here = [&] { return !st.history.empty() && st.history.back().iter == st.iter; };
  while (!st.stopped && st.iter < cfg.max_iters && st.iter < stop_at) {
    if (st.iter % period == 0 && !evaluated_here()) {
      evaluate(st, data, cfg, hooks);
      if (st.stopped) return;
    }
    const auto t0 = Clock::now();
    step(st, data, cfg, hooks);
    if (cfg.record_wall_time) {
      st.wall_ms += std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
    }
    ++st.iter;
  }
  if (!st.stopped && st.iter >= cfg.max_iters && !evaluated_here()) evaluate(st, data, cfg, hooks);
}

TrainResult meta_train(const episodes::TaskDataset& data, const protonet::Model& init,
                       const TrainConfig& cfg, const Hooks* hooks) {
  TrainState st = init_state(init, cfg);
  run(st, data, cfg, std::numeric_limits<std::size_t>::max(), hooks);
  return {st.best, st.model, st.history, st.iter, st.stopped};
}

std::vector<std::pair<std::string, TrainConfig>> ablation_variants(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, TrainConfig>> out;
  out.emplace_back("full", cfg);
  TrainConfig a = cfg;
  a.method = Method::kProtoNetST;
  out.emplace_back("no-interpolation", a);
  TrainConfig b = cfg;
  b.method = Method::kNoBilevel;
  out.emplace_back("no-bilevel", b);
  TrainConfig c = cfg;
  c.method = Method::kNoSingleton;
  out.emplace_back("no-singleton", c);
  return out;
}

protonet::Model build_model(const ModelSpec& spec, std::size_t input_dims, Method method, Rng& rng) {
  std::vector<std::size_t> widths = {input_dims};
  widths.insert(widths.end(), spec.hidden.begin(), spec.hidden.end());
  widths.push_back(spec.out_width);
  protonet::Model m;
  m.encoder = protonet::init_encoder(widths, spec.split, rng);
  m.distance = spec.distance;
  if (!has_set_function(method)) return m;
  const std::size_t d = protonet::interp_width(m.encoder);
  switch (spec.setfn) {
    case setfunc::Kind::kIdentity: m.setfn = setfunc::IdentitySet{}; break;
    case setfunc::Kind::kFirst: m.setfn = setfunc::FirstElementSet{}; break;
    case setfunc::Kind::kSimple:
      m.setfn = setfunc::SetFunction(std::in_place_type<setfunc::SimpleSetParams>,
                                     setfunc::init_simple(d, rng, spec.simple_scale));
      break;
    case setfunc::Kind::kFull:
      m.setfn = setfunc::SetFunction(std::in_place_type<setfunc::FullSetParams>,
                                     setfunc::init_full(d, spec.head_width, spec.heads, spec.dropout, rng));
      break;
    case setfunc::Kind::kDeepSets:
      m.setfn = setfunc::SetFunction(
          std::in_place_type<setfunc::DeepSetsParams>,
          setfunc::init_deepsets(d, spec.deepsets_pre, spec.deepsets_post, rng));
      break;
  }
  return m;
}

void put_model(Checkpoint& ck, const protonet::Model& m, const std::string& prefix) {
  protonet::for_each_tensor(m, [&](const std::string& n, const Tensor& t) { ck.put(prefix + n, t); });
  ck.put_scalar(prefix + "meta.setfn", static_cast<double>(setfunc::kind_of(m.setfn)));
  ck.put_scalar(prefix + "meta.split", static_cast<double>(m.encoder.split));
  ck.put_scalar(prefix + "meta.distance", static_cast<double>(m.distance));
  if (const auto* full = std::get_if<setfunc::FullSetParams>(&m.setfn)) {
    ck.put_scalar(prefix + "meta.dropout", full->dropout);
  }
}

protonet::Model get_model(const Checkpoint& ck, const std::string& prefix) {
  protonet::Model m;
  const std::size_t layers = count_prefixed(ck, prefix + "theta.layer", ".w");
  if (layers == 0) throw ParseError("checkpoint holds no encoder layers under '" + prefix + "'");
  m.encoder.layers.resize(layers);
  m.encoder.split = static_cast<std::size_t>(ck.get_scalar(prefix + "meta.split"));
  const double dist = ck.get_scalar(prefix + "meta.distance");
  if (dist != 0.0 && dist != 1.0) throw ParseError("bad distance code in checkpoint");
  m.distance = static_cast<protonet::Distance>(static_cast<int>(dist));

  const double kind_code = ck.get_scalar(prefix + "meta.setfn");
  if (kind_code < 0 || kind_code > 4 || kind_code != std::floor(kind_code)) {
    throw ParseError("bad set function code in checkpoint");
  }
  const std::string lp = prefix + "lambda.";
  switch (static_cast<setfunc::Kind>(static_cast<int>(kind_code))) {
    case setfunc::Kind::kIdentity: m.setfn = setfunc::IdentitySet{}; break;
    case setfunc::Kind::kFirst: m.setfn = setfunc::FirstElementSet{}; break;
    case setfunc::Kind::kSimple: m.setfn = setfunc::SimpleSetParams{}; break;
    case setfunc::Kind::kFull: {
      setfunc::FullSetParams p;
      p.enc1.heads.resize(count_prefixed(ck, lp + "enc1.head", ".q.w"));
      p.enc2.heads.resize(count_prefixed(ck, lp + "enc2.head", ".q.w"));
      p.pool.heads.resize(count_prefixed(ck, lp + "pool.head", ".q.w"));
      p.dropout = ck.get_scalar(prefix + "meta.dropout");
      m.setfn = std::move(p);
      break;
    }
    case setfunc::Kind::kDeepSets: {
      setfunc::DeepSetsParams p;
      p.pre.resize(count_prefixed(ck, lp + "pre", ".w"));
      p.post.resize(count_prefixed(ck, lp + "post", ".w"));
      m.setfn = std::move(p);
      break;
    }
  }
  protonet::for_each_tensor(m, [&](const std::string& n, Tensor& t) { t = ck.get(prefix + n); });
  protonet::validate(m.encoder);
  return m;
}

Checkpoint save_state(const TrainState& s) {
  Checkpoint ck;
  put_model(ck, s.model);
  put_model(ck, s.best, "best.");
  put_optimizer(ck, s.theta_opt, "opt.theta.");
  put_optimizer(ck, s.lambda_opt, "opt.lambda.");
  ck.put_scalar("state.iter", static_cast<double>(s.iter));
  ck.put_scalar("state.best_acc", s.best_acc);
  ck.put_scalar("state.best_iter", static_cast<double>(s.best_iter));
  ck.put_scalar("state.bad_evals", static_cast<double>(s.bad_evals));
  ck.put_scalar("state.loss_sum", s.loss_sum);
  ck.put_scalar("state.loss_count", static_cast<double>(s.loss_count));
  ck.put_scalar("state.stopped", s.stopped ? 1.0 : 0.0);
  ck.put_scalar("state.wall_ms", s.wall_ms);
  Tensor hist(s.history.size(), 5);
  for (std::size_t r = 0; r < s.history.size(); ++r) {
    const auto& h = s.history[r];
    hist(r, 0) = static_cast<double>(h.iter);
    hist(r, 1) = h.train_loss;
    hist(r, 2) = h.val_loss;
    hist(r, 3) = h.val_acc;
    hist(r, 4) = h.wall_ms;
  }
  ck.put("state.history", hist);
  return ck;
}

TrainState load_state(const Checkpoint& ck) {
  TrainState s;
  s.model = get_model(ck);
  s.best = get_model(ck, "best.");
  s.theta_opt = get_optimizer(ck, "opt.theta.");
  s.lambda_opt = get_optimizer(ck, "opt.lambda.");
  s.iter = static_cast<std::size_t>(ck.get_scalar("state.iter"));
  s.best_acc = ck.get_scalar("state.best_acc");
  s.best_iter = static_cast<std::size_t>(ck.get_scalar("state.best_iter"));
  s.bad_evals = static_cast<std::size_t>(ck.get_scalar("state.bad_evals"));
  s.loss_sum = ck.get_scalar("state.loss_sum");
  s.loss_count = static_cast<std::size_t>(ck.get_scalar("state.loss_count"));
  s.stopped = ck.get_scalar("state.stopped") != 0.0;
  s.wall_ms = ck.get_scalar("state.wall_ms");
  const Tensor& hist = ck.get("state.history");
  if (hist.size() != 0 && hist.cols() != 5) throw ParseError("metric history must have 5 columns");
  for (std::size_t r = 0; r < hist.rows() && hist.size() != 0; ++r) {
    s.history.push_back({static_cast<std::size_t>(hist(r, 0)), hist(r, 1), hist(r, 2), hist(r, 3),
                         hist(r, 4)});
  }
  return s;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (f == nullptr) throw Error("cannot open '" + path + "' for writing");
  std::fprintf(f, "iter,train_loss,val_loss,val_acc,wall_ms\n");
  for (const auto& r : rows) {
    std::fprintf(f, "%zu,%.10g,%.10g,%.10g,%.3f\n", r.iter, r.train_loss, r.val_loss, r.val_acc,
                 r.wall_ms);
  }
  if (std::fclose(f) != 0) throw Error("failed writing '" + path + "'");
}

}  // namespace mi::bilevel
