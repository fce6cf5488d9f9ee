// SPDX-License-Identifier: Apache-2.0
#include "metainterp/protonet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "metainterp/errors.hpp"

namespace mi::protonet {
namespace {

ad::Var run_layers(const EncoderVars& e, ad::Var x, std::size_t begin, std::size_t end) {
  for (std::size_t i = begin; i < end; ++i) {
    const auto& layer = e.layers[i];
    if (x.cols() != layer.w.rows()) {
      throw DimensionError("encoder layer " + std::to_string(i) + " expects width " +
                           std::to_string(layer.w.rows()) + ", got " + std::to_string(x.cols()));
    }
    x = ad::add_row(ad::matmul(x, layer.w), layer.b);
    if (i + 1 < e.layers.size()) x = ad::leaky_relu(x, kLeakySlope);
  }
  return x;
}

template <class E, class F>
void visit_theta(E& e, F& fn) {
  for (std::size_t i = 0; i < e.layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i);
    fn(p + ".w", e.layers[i].w);
    fn(p + ".b", e.layers[i].b);
  }
}

EncoderVars bind_encoder(const Encoder& e, ad::Tape& tape, std::vector<ad::Var>* leaves) {
  EncoderVars out;
  out.split = e.split;
  for (const auto& layer : e.layers) {
    setfunc::AffineT<ad::Var> a;
    if (leaves != nullptr) {
      a.w = tape.variable(layer.w);
      a.b = tape.variable(layer.b);
      leaves->push_back(a.w);
      leaves->push_back(a.b);
    } else {
      a.w = tape.constant(layer.w);
      a.b = tape.constant(layer.b);
    }
    out.layers.push_back(a);
  }
  return out;
}

Tensor one_hot(std::span<const int> targets, std::size_t way) {
  Tensor m(targets.size(), way);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= way) {
      throw DomainError("target " + std::to_string(targets[i]) + " outside [0, " +
                        std::to_string(way) + ")");
    }
    m(i, static_cast<std::size_t>(targets[i])) = 1.0;
  }
  return m;
}

}  // namespace

Encoder init_encoder(std::span<const std::size_t> widths, std::size_t split, Rng& rng) {
  if (widths.size() < 2) throw ConfigError("encoder needs at least one layer");
  Encoder e;
  e.split = split;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    if (widths[i] == 0 || widths[i + 1] == 0) throw ConfigError("encoder widths must be positive");
    const double std = std::sqrt(2.0 / static_cast<double>(widths[i]));
    Tensor w(widths[i], widths[i + 1]);
    for (auto& v : w.data()) v = std * standard_normal(rng);
    e.layers.push_back({std::move(w), Tensor(1, widths[i + 1])});
  }
  validate(e);
  return e;
}

void validate(const Encoder& e) {
  if (e.layers.empty()) throw ConfigError("encoder needs at least one layer");
  if (e.split >= e.layers.size()) {
    throw ConfigError("interpolation layer " + std::to_string(e.split) + " must be below " +
                      std::to_string(e.layers.size()));
  }
  for (std::size_t i = 0; i < e.layers.size(); ++i) {
    const auto& l = e.layers[i];
    if (l.b.shape() != Shape{1, l.w.cols()}) throw ConfigError("encoder bias shape mismatch");
    if (i > 0 && e.layers[i - 1].w.cols() != l.w.rows()) {
      throw ConfigError("encoder widths do not chain at layer " + std::to_string(i));
    }
  }
}

std::size_t interp_width(const Encoder& e) { return e.layers.at(e.split).w.rows(); }
std::size_t input_width(const Encoder& e) { return e.layers.at(0).w.rows(); }
std::size_t output_width(const Encoder& e) { return e.layers.back().w.cols(); }

void for_each_theta(Encoder& e, const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_theta(e, fn);
}

void for_each_theta(const Encoder& e,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit_theta(e, fn);
}

void for_each_tensor(Model& m, const std::function<void(const std::string&, Tensor&)>& fn) {
  for_each_theta(m.encoder, [&](const std::string& n, Tensor& t) { fn("theta." + n, t); });
  setfunc::for_each_tensor(m.setfn, [&](const std::string& n, Tensor& t) { fn("lambda." + n, t); });
}

void for_each_tensor(const Model& m,
                     const std::function<void(const std::string&, const Tensor&)>& fn) {
  for_each_theta(m.encoder, [&](const std::string& n, const Tensor& t) { fn("theta." + n, t); });
  setfunc::for_each_tensor(m.setfn,
                           [&](const std::string& n, const Tensor& t) { fn("lambda." + n, t); });
}

BoundModel bind(const Model& m, ad::Tape& tape, bool theta_variable, bool lambda_variable) {
  BoundModel out;
  out.vars.distance = m.distance;
  out.vars.encoder = bind_encoder(m.encoder, tape, theta_variable ? &out.theta : nullptr);
  out.vars.setfn = lambda_variable ? setfunc::bind_variables(m.setfn, tape, &out.lambda)
                                   : setfunc::bind_constants(m.setfn, tape);
  return out;
}

ad::Var encode_lower(const EncoderVars& e, const ad::Var& x) {
  return run_layers(e, x, 0, e.split);
}

ad::Var encode_upper(const EncoderVars& e, const ad::Var& h) {
  return run_layers(e, h, e.split, e.layers.size());
}

Tensor encode_lower(const Encoder& e, const Tensor& x) {
  ad::Tape tape(false);
  return encode_lower(bind_encoder(e, tape, nullptr), tape.constant(x)).value();
}

Tensor encode_upper(const Encoder& e, const Tensor& h) {
  ad::Tape tape(false);
  return encode_upper(bind_encoder(e, tape, nullptr), tape.constant(h)).value();
}

ad::Var embed(const ModelVars& m, const ad::Var& x, Rng* dropout_rng) {
  ad::Var h = encode_lower(m.encoder, x);
  std::optional<setfunc::DropoutMasks> masks;
  if (dropout_rng != nullptr) masks = setfunc::draw_masks(m.setfn, h.rows(), 1, *dropout_rng);
  ad::Var fused = setfunc::forward_batch(m.setfn, h, 1, masks ? &*masks : nullptr);
  return encode_upper(m.encoder, fused);
}

Tensor embed(const Model& m, const Tensor& x) {
  ad::Tape tape(false);
  BoundModel b = bind(m, tape, false, false);
  return embed(b.vars, tape.constant(x), nullptr).value();
}

Tensor class_average_matrix(std::span<const int> labels, int way) {
  Tensor avg(static_cast<std::size_t>(way), labels.size());
  std::vector<std::size_t> count(static_cast<std::size_t>(way), 0);
  for (int y : labels) {
    if (y < 0 || y >= way) throw DomainError("label " + std::to_string(y) + " out of range");
    ++count[static_cast<std::size_t>(y)];
  }
  for (int k = 0; k < way; ++k) {
    if (count[static_cast<std::size_t>(k)] == 0) throw MissingClassError(k, "prototype inputs");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto k = static_cast<std::size_t>(labels[i]);
    avg(k, i) = 1.0 / static_cast<double>(count[k]);
  }
  return avg;
}

ad::Var prototypes(const ad::Var& embeddings, std::span<const int> labels, int way) {
  if (embeddings.rows() != labels.size()) throw DimensionError("one label per embedding row");
  return ad::matmul(embeddings.tape()->constant(class_average_matrix(labels, way)), embeddings);
}

Tensor prototypes(const Tensor& embeddings, std::span<const int> labels, int way) {
  if (embeddings.rows() != labels.size()) throw DimensionError("one label per embedding row");
  return matmul(class_average_matrix(labels, way), embeddings);
}

double sq_dist(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("sq_dist width mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

ad::Var pairwise_distance(const ad::Var& queries, const ad::Var& protos, Distance d) {
  if (queries.cols() != protos.cols()) throw DimensionError("query/prototype width mismatch");
  const std::size_t m = queries.rows();
  const std::size_t k = protos.rows();
  ad::Var qn = ad::repeat_cols(ad::sum_cols(ad::mul(queries, queries)), k);
  ad::Var cn = ad::repeat_rows(ad::transpose(ad::sum_cols(ad::mul(protos, protos))), m);
  ad::Var cross = ad::scale(ad::matmul(queries, ad::transpose(protos)), 2.0);
  ad::Var sq = ad::sub(ad::add(qn, cn), cross);
  if (d == Distance::kSquaredEuclidean) return sq;
  // Norm expansion can round slightly below zero; shift keeps the root smooth.
  return ad::pow(ad::add_scalar(ad::relu(sq), 1e-12), 0.5);
}

ad::Var proto_loss(const ad::Var& query_emb, const ad::Var& protos, std::span<const int> targets,
                   Distance d) {
  if (query_emb.rows() != targets.size()) throw DimensionError("one target per query row");
  if (targets.empty()) throw DimensionError("episode has no queries");
  ad::Var logp = ad::log_softmax_rows(ad::neg(pairwise_distance(query_emb, protos, d)));
  ad::Var picked = ad::sum(ad::mul_const(logp, one_hot(targets, protos.rows())));
  return ad::scale(picked, -1.0 / static_cast<double>(targets.size()));
}

std::vector<int> labels_of(const std::vector<episodes::Example>& xs) {
  std::vector<int> out;
  out.reserve(xs.size());
  for (const auto& x : xs) out.push_back(x.label);
  return out;
}

ad::Var loss_singleton(const ModelVars& m, const episodes::Task& task, Rng* dropout_rng) {
  ad::Tape& tape = *m.encoder.layers.at(0).w.tape();
  const std::size_t ns = task.support.size();
  const std::size_t nq = task.query.size();
  std::vector<episodes::Example> all;
  all.reserve(ns + nq);
  all.insert(all.end(), task.support.begin(), task.support.end());
  all.insert(all.end(), task.query.begin(), task.query.end());
  ad::Var emb = embed(m, tape.constant(episodes::features_matrix(all)), dropout_rng);
  const auto ys = labels_of(task.support);
  const auto yq = labels_of(task.query);
  ad::Var protos = prototypes(ad::slice_rows(emb, 0, ns), ys, task.way);
  return proto_loss(ad::slice_rows(emb, ns, nq), protos, yq, m.distance);
}

double loss_singleton(const Model& m, const episodes::Task& task) {
  ad::Tape tape(false);
  BoundModel b = bind(m, tape, false, false);
  return loss_singleton(b.vars, task, nullptr).item();
}

int classify_embedding(std::span<const double> emb, const Tensor& protos, Distance) {
  // The root is monotone, so both distances share the squared argmin.
  int best = 0;
  double best_d = 0.0;
  for (std::size_t k = 0; k < protos.rows(); ++k) {
    const double dk = sq_dist(emb, protos.row_span(k));
    if (k == 0 || dk < best_d) {
      best = static_cast<int>(k);
      best_d = dk;
    }
  }
  return best;
}

int classify(const Model& m, std::span<const double> x, const Tensor& protos) {
  Tensor e = embed(m, Tensor::row(x));
  return classify_embedding(e.data(), protos, m.distance);
}

EpisodeScore score_episode(const Model& m, const episodes::Task& episode) {
  const auto ys = labels_of(episode.support);
  Tensor protos = prototypes(embed(m, episodes::features_matrix(episode.support)), ys, episode.way);
  Tensor q = embed(m, episodes::features_matrix(episode.query));
  std::size_t correct = 0;
  double loss = 0.0;
  std::vector<double> logits(protos.rows());
  for (std::size_t i = 0; i < episode.query.size(); ++i) {
    const int label = episode.query[i].label;
    if (classify_embedding(q.row_span(i), protos, m.distance) == label) ++correct;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < protos.rows(); ++k) {
      double d = sq_dist(q.row_span(i), protos.row_span(k));
      if (m.distance == Distance::kEuclidean) d = std::sqrt(d + 1e-12);
      logits[k] = -d;
      mx = std::max(mx, logits[k]);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    loss += mx + std::log(z) - logits[static_cast<std::size_t>(label)];
  }
  const double nq = static_cast<double>(episode.query.size());
  return {static_cast<double>(correct) / nq, loss / nq};
}

double episode_accuracy(const Model& m, const episodes::Task& episode) {
  return score_episode(m, episode).accuracy;
}

int shots_of(const episodes::Task& task) {
  std::vector<int> count(static_cast<std::size_t>(task.way), 0);
  for (const auto& ex : task.support) ++count.at(static_cast<std::size_t>(ex.label));
  return *std::min_element(count.begin(), count.end());
}

SplitScore score_split(const Model& m, const std::vector<episodes::Task>& tasks,
                       std::size_t episodes, int shots, std::uint64_t seed, unsigned threads) {
  if (tasks.empty()) throw Error("evaluation: no tasks");
  if (episodes == 0) throw ConfigError("evaluation: need at least one episode");
  std::vector<EpisodeScore> scores(episodes);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t e = begin; e < end; ++e) {
      Rng rng = make_stream(seed, {0x65766cULL, e});
      const auto& task = tasks[uniform_index(rng, tasks.size())];
      scores[e] = score_episode(m, episodes::resample_episode(task, shots, rng));
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(episodes)));
  if (threads == 1) {
    work(0, episodes);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    const std::size_t chunk = (episodes + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
      const std::size_t b = std::min(episodes, t * chunk);
      const std::size_t e = std::min(episodes, b + chunk);
      pool.emplace_back([&, b, e, t] {
        try {
          work(b, e);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& err : errors) {
      if (err) std::rethrow_exception(err);
    }
  }
  std::vector<double> acc(episodes);
  SplitScore out;
  for (std::size_t e = 0; e < episodes; ++e) {
    acc[e] = scores[e].accuracy;
    out.loss += scores[e].loss;
  }
  out.loss /= static_cast<double>(episodes);
  out.accuracy = aggregate_runs(acc);
  return out;
}

AccuracyResult accuracy(const Model& m, const std::vector<episodes::Task>& tasks,
                        std::size_t episodes, int shots, std::uint64_t seed, unsigned threads) {
  return score_split(m, tasks, episodes, shots, seed, threads).accuracy;
}

AccuracyResult aggregate_runs(std::span<const double> values) {
  AccuracyResult r;
  if (values.empty()) return r;
  const double n = static_cast<double>(values.size());
  for (double v : values) r.mean += v;
  r.mean /= n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - r.mean) * (v - r.mean);
    r.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return r;
}

}  // namespace mi::protonet
