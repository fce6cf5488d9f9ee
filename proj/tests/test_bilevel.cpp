// SPDX-License-Identifier: Apache-2.0
#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "metainterp/bilevel.hpp"
#include "metainterp/checkpoint.hpp"
#include "metainterp/errors.hpp"
#include "test_support.hpp"

using namespace mi;
using namespace mi::bilevel;

namespace {

episodes::TaskDataset small_dataset(std::uint64_t seed, std::size_t train = 3) {
  episodes::GenConfig g;
  g.way = 3;
  g.shots = 1;
  g.queries = 4;
  g.dims = 6;
  g.informative = 4;
  g.train_tasks = static_cast<int>(train);
  g.val_tasks = 2;
  g.test_tasks = 2;
  g.seed = seed;
  return episodes::gen_gaussian_tasks(g);
}

ModelSpec small_spec() {
  ModelSpec s;
  s.hidden = {10};
  s.out_width = 6;
  s.split = 1;
  s.head_width = 4;
  s.heads = 2;
  s.dropout = 0.0;
  return s;
}

TrainConfig small_config(Method m) {
  TrainConfig c;
  c.method = m;
  c.alpha = 1e-2;
  c.eta = 1e-2;
  c.update_period = 3;
  c.batch = 2;
  c.val_batch = 2;
  c.neumann = 2;
  c.max_iters = 9;
  c.eval_episodes = 10;
  c.seed = 5;
  return c;
}

Eigen::MatrixXd to_eigen(const Tensor& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r) {
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t(r, c);
  }
  return m;
}

// Quadratic bilevel problem over row vectors θ, λ ∈ ℝ^{1×n}:
//   L_tr = ½θAθᵀ + θBλᵀ + ½λCλᵀ,  L_V = ½(θ−t)(θ−t)ᵀ + θEλᵀ + eλᵀ.
struct Quadratic {
  Tensor a, b, c, e_mat, target, e_vec;
};

Quadratic random_quadratic(std::mt19937_64& rng, std::size_t n) {
  Quadratic q;
  // A = Q diag(1..2) Qᵀ, so the spectrum lies in [1, 2].
  Eigen::MatrixXd r = to_eigen(testing::random_tensor(rng, n, n));
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(r);
  Eigen::MatrixXd orth = qr.householderQ();
  Eigen::VectorXd diag(n);
  std::uniform_real_distribution<double> uni(1.0, 2.0);
  for (std::size_t i = 0; i < n; ++i) diag(i) = uni(rng);
  Eigen::MatrixXd a = orth * diag.asDiagonal() * orth.transpose();
  q.a = Tensor(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) q.a(i, j) = a(i, j);
  }
  q.b = testing::random_tensor(rng, n, n);
  q.c = Tensor::identity(n);
  q.e_mat = testing::random_tensor(rng, n, n, 0.5);
  q.target = testing::random_tensor(rng, 1, n);
  q.e_vec = testing::random_tensor(rng, 1, n);
  return q;
}

ad::Var quad_form(const ad::Var& x, const Tensor& m, const ad::Var& y) {
  return ad::sum(ad::mul(ad::matmul(x, x.tape()->constant(m)), y));
}

ad::Var train_loss(const Quadratic& q, const ad::Var& th, const ad::Var& la) {
  return ad::scale(quad_form(th, q.a, th), 0.5) + quad_form(th, q.b, la) +
         ad::scale(quad_form(la, q.c, la), 0.5);
}

ad::Var val_loss(const Quadratic& q, const ad::Var& th, const ad::Var& la) {
  ad::Var d = ad::add_const(th, -1.0 * q.target);
  return ad::scale(ad::sum(ad::mul(d, d)), 0.5) + quad_form(th, q.e_mat, la) +
         ad::sum(ad::mul_const(la, q.e_vec));
}

Tensor hypergrad_of(const Quadratic& q, const Tensor& theta, const Tensor& lambda, double alpha,
                    std::size_t steps) {
  ad::Tape tape;
  ad::Var th = tape.variable(theta);
  ad::Var la = tape.variable(lambda);
  const std::vector<ad::Var> ths{th}, las{la};
  auto g = ad::grad(train_loss(q, th, la), ths, true);
  return hypergrad(g, ths, las, val_loss(q, th, la), alpha, steps)[0];
}

// Exact implicit hypergradient at θ: ∂L_V/∂λ − Bᵀ A⁻¹ ∂L_V/∂θ.
Eigen::VectorXd exact_ift(const Quadratic& q, const Tensor& theta, const Tensor& lambda) {
  const Eigen::MatrixXd a = to_eigen(q.a), b = to_eigen(q.b), e = to_eigen(q.e_mat);
  const Eigen::VectorXd th = to_eigen(theta).transpose(), la = to_eigen(lambda).transpose();
  const Eigen::VectorXd dv_dth = th - to_eigen(q.target).transpose() + e * la;
  const Eigen::VectorXd dv_dla = e.transpose() * th + to_eigen(q.e_vec).transpose();
  return dv_dla - b.transpose() * a.ldlt().solve(dv_dth);
}

double vec_err(const Tensor& got, const Eigen::VectorXd& want) {
  double worst = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want(i)));
  return worst;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("mi_bilevel_" + name)).string();
}

double total_loss(const protonet::Model& m, const std::vector<TaskPair>& batch, const LossWeights& w) {
  ad::Tape tape(false);
  auto b = protonet::bind(m, tape, false, false);
  return inner_loss(b.vars, batch, w, nullptr).item();
}

std::string checkpoint_bytes(const Checkpoint& ck) {
  const std::string p = temp_path("bytes.ckpt");
  ck.save(p);
  std::ifstream in(p);
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::filesystem::remove(p);
  return s;
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("named tensors round trip exactly") {
    std::mt19937_64 rng(1);
    Checkpoint ck;
    ck.put("a.w", testing::random_tensor(rng, 3, 4));
    ck.put_scalar("iter", 17);
    ck.put("empty", Tensor(0, 5));
    ck.put("tiny", Tensor::scalar(1e-300));
    CHECK_THROWS_AS(ck.put("has space", Tensor::scalar(0)), Error);
    const std::string p = temp_path("rt.ckpt");
    ck.save(p);
    Checkpoint back = Checkpoint::load(p);
    CHECK(back == ck);
    CHECK(back.get_scalar("iter") == 17);
    CHECK(back.get_scalar("missing", 3.0) == 3.0);
    CHECK_THROWS_AS(back.get("missing"), ParseError);
    std::filesystem::remove(p);
  }

  TEST_CASE("malformed checkpoints are rejected") {
    auto write = [](const std::string& text) {
      const std::string p = temp_path("bad.ckpt");
      std::ofstream(p) << text;
      return p;
    };
    CHECK_THROWS_AS(Checkpoint::load(write("nope\n")), ParseError);
    CHECK_THROWS_AS(Checkpoint::load(write("meta-interp-ckpt v1\nx 1 2\n1\n")), ParseError);
    CHECK_THROWS_AS(Checkpoint::load(write("meta-interp-ckpt v1\nx 1 1\nabc\n")), ParseError);
    CHECK_THROWS_AS(Checkpoint::load(write("meta-interp-ckpt v1\nx 1 1\n1\nx 1 1\n2\n")), ParseError);
    CHECK_THROWS_AS(Checkpoint::load(write("meta-interp-ckpt v1\nx 1\n1\n")), ParseError);
    std::filesystem::remove(temp_path("bad.ckpt"));
  }
}

TEST_SUITE("optimizers") {
  TEST_CASE("sgd step matches the hand formula on a quadratic") {
    // L = ½(x − 3)², x = 1, lr 0.1: x ← 1 − 0.1·(1 − 3) = 1.2.
    Tensor x = Tensor::scalar(1.0);
    Optimizer o;
    o.kind = OptimizerKind::kSgd;
    o.step({&x}, {Tensor::scalar(x.item() - 3.0)}, 0.1);
    CHECK(x.item() == doctest::Approx(1.2).epsilon(1e-15));
  }

  TEST_CASE("adam matches the bias-corrected recursion for three steps") {
    const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double grads[] = {0.3, -1.2, 0.7};
    double ref = 2.0, m = 0.0, v = 0.0;
    Tensor x = Tensor::scalar(2.0);
    Optimizer o;
    for (int t = 1; t <= 3; ++t) {
      const double g = grads[t - 1];
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      const double mh = m / (1 - std::pow(b1, t));
      const double vh = v / (1 - std::pow(b2, t));
      ref -= lr * mh / (std::sqrt(vh) + eps);
      o.step({&x}, {Tensor::scalar(g)}, lr);
      CHECK(std::abs(x.item() - ref) <= 1e-15);
    }
  }

  TEST_CASE("zero gradients leave parameters unchanged") {
    std::mt19937_64 rng(2);
    for (OptimizerKind k : {OptimizerKind::kSgd, OptimizerKind::kAdam}) {
      Tensor x = testing::random_tensor(rng, 2, 3);
      const Tensor before = x;
      Optimizer o;
      o.kind = k;
      for (int i = 0; i < 3; ++i) o.step({&x}, {Tensor(2, 3)}, 0.1);
      CHECK(x == before);
    }
  }
}

TEST_SUITE("hypergrad") {
  TEST_CASE("scalar quadratic gives the truncated geometric series") {
    ad::Tape tape;
    ad::Var th = tape.variable(Tensor::scalar(1.0));
    ad::Var la = tape.variable(Tensor::scalar(1.0));
    ad::Var d = th - la;
    ad::Var ltr = ad::scale(d * d, 0.5);
    ad::Var lv = ad::scale(th * th, 0.5);
    const std::vector<ad::Var> ths{th}, las{la};
    auto g = ad::grad(ltr, ths, true);
    const auto h = hypergrad(g, ths, las, lv, 0.5, 10);
    CHECK(std::abs(h[0].item() - 0.99951171875) <= 1e-12);
  }

  TEST_CASE("no dependence on lambda gives exactly zero") {
    ad::Tape tape;
    ad::Var th = tape.variable(Tensor::from_rows({{0.3, -0.7}}));
    ad::Var la = tape.variable(Tensor::from_rows({{1.5, 2.0}}));
    ad::Var ltr = ad::scale(ad::sum(th * th), 0.5);
    ad::Var lv = ad::sum(ad::exp(th));
    const std::vector<ad::Var> ths{th}, las{la};
    auto g = ad::grad(ltr, ths, true);
    const auto h = hypergrad(g, ths, las, lv, 0.3, 7);
    CHECK(h[0] == Tensor(1, 2));
  }

  TEST_CASE("q = 0 keeps one Neumann term") {
    // L_tr = ½a θ² + bθλ, L_V = ½(θ − t)² + eλ:
    // result = e − α·b·(θ − t).
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    for (int trial = 0; trial < 20; ++trial) {
      const double a = 1.0 + std::abs(n01(rng)), b = n01(rng), t = n01(rng), e = n01(rng);
      const double theta = n01(rng), lambda = n01(rng), alpha = 0.1;
      ad::Tape tape;
      ad::Var th = tape.variable(Tensor::scalar(theta));
      ad::Var la = tape.variable(Tensor::scalar(lambda));
      ad::Var ltr = ad::scale(th * th, 0.5 * a) + ad::scale(th * la, b);
      ad::Var d = ad::add_scalar(th, -t);
      ad::Var lv = ad::scale(d * d, 0.5) + ad::scale(la, e);
      const std::vector<ad::Var> ths{th}, las{la};
      auto g = ad::grad(ltr, ths, true);
      const double got = hypergrad(g, ths, las, lv, alpha, 0)[0].item();
      CHECK(std::abs(got - (e - alpha * b * (theta - t))) <= 1e-12);
    }
  }

  TEST_CASE("random quadratics converge monotonically to the exact implicit gradient") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
      const Quadratic q = random_quadratic(rng, 3);
      const Tensor theta = testing::random_tensor(rng, 1, 3);
      const Tensor lambda = testing::random_tensor(rng, 1, 3);
      const double alpha = 0.45;  // spectrum ⊂ [1, 2], so α·λ_max < 1
      const Eigen::VectorXd exact = exact_ift(q, theta, lambda);
      double prev = std::numeric_limits<double>::infinity();
      for (std::size_t steps = 0; steps <= 50; ++steps) {
        const double err = vec_err(hypergrad_of(q, theta, lambda, alpha, steps), exact);
        CHECK(err <= prev + 1e-15);
        prev = err;
      }
      CHECK(prev <= 1e-6);
      CHECK(prev <= 1e-3 * std::max(1.0, exact.lpNorm<Eigen::Infinity>()));
    }
  }

  TEST_CASE("agrees with differentiating through unrolled inner SGD") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 3; ++trial) {
      const Quadratic q = random_quadratic(rng, 2);
      const Tensor lambda = testing::random_tensor(rng, 1, 2);
      const double alpha = 0.2;
      ad::Tape tape;
      ad::Var la = tape.variable(lambda);
      ad::Var th = tape.variable(Tensor(1, 2));
      for (int s = 0; s < 200; ++s) {
        const ad::Var ins[] = {th};
        auto g = ad::grad(train_loss(q, th, la), ins, true);
        th = th - ad::scale(g[0], alpha);
      }
      const ad::Var las[] = {la};
      const Tensor unrolled = ad::grad(val_loss(q, th, la), las)[0].value();
      const Tensor implicit = hypergrad_of(q, th.value(), lambda, alpha, 200);
      CHECK(testing::max_rel_error(implicit, unrolled) <= 5e-2);
    }
  }

  TEST_CASE("first-order training gradients are rejected") {
    ad::Tape tape;
    ad::Var th = tape.variable(Tensor::scalar(1.0));
    ad::Var la = tape.variable(Tensor::scalar(1.0));
    ad::Var ltr = ad::scale((th - la) * (th - la), 0.5);
    const std::vector<ad::Var> ths{th}, las{la};
    auto g = ad::grad(ltr, ths, false);
    CHECK_THROWS_AS(hypergrad(g, ths, las, th * th, 0.5, 3), ConfigError);
  }
}

TEST_SUITE("inner loss") {
  TEST_CASE("first-element collapse makes both terms the singleton loss") {
    const auto data = small_dataset(1);
    Rng rng(7);
    protonet::Model m = build_model(small_spec(), data.dims, Method::kMetaInterp, rng);
    m.setfn = setfunc::FirstElementSet{};
    TrainConfig cfg = small_config(Method::kMetaInterp);
    cfg.batch = 1;
    Rng brng(8);
    const auto batch = sample_batch(data.meta_train, cfg, protonet::interp_width(m.encoder), brng);
    const double single = protonet::loss_singleton(m, batch[0].first);
    CHECK(std::abs(total_loss(m, batch, {0.5, 0.5, false}) - single) <= 1e-12);
    CHECK(std::abs(total_loss(m, batch, {0.5, 0.0, false}) - 0.5 * single) <= 1e-12);
  }

  TEST_CASE("batch of two is the mean of two single-pair losses") {
    const auto data = small_dataset(2);
    Rng rng(9);
    const protonet::Model m = build_model(small_spec(), data.dims, Method::kMetaInterp, rng);
    TrainConfig cfg = small_config(Method::kMetaInterp);
    Rng brng(10);
    const auto batch = sample_batch(data.meta_train, cfg, protonet::interp_width(m.encoder), brng);
    REQUIRE(batch.size() == 2);
    const LossWeights w = loss_weights(Method::kMetaInterp);
    const double both = total_loss(m, batch, w);
    const double one = total_loss(m, {batch[0]}, w), two = total_loss(m, {batch[1]}, w);
    CHECK(std::abs(both - 0.5 * (one + two)) <= 1e-12);
    CHECK_THROWS_AS(total_loss(m, {}, w), ConfigError);
  }

  TEST_CASE("training loss gradients match finite differences") {
    const auto data = small_dataset(3);
    for (Method method : {Method::kMetaInterp, Method::kMlti}) {
      Rng rng(11);
      protonet::Model m = build_model(small_spec(), data.dims, method, rng);
      TrainConfig cfg = small_config(method);
      Rng brng(12);
      const auto batch = sample_batch(data.meta_train, cfg, protonet::interp_width(m.encoder), brng);
      const LossWeights w = loss_weights(method);

      ad::Tape tape;
      auto bound = protonet::bind(m, tape, true, true);
      auto leaves = bound.theta;
      leaves.insert(leaves.end(), bound.lambda.begin(), bound.lambda.end());
      const auto grads = ad::grad(inner_loss(bound.vars, batch, w, nullptr), leaves);

      std::vector<Tensor*> params;
      protonet::for_each_tensor(m, [&](const std::string&, Tensor& t) { params.push_back(&t); });
      REQUIRE(params.size() == grads.size());
      double worst = 0.0;
      for (int k = 0; k < 20; ++k) {
        const std::size_t which = uniform_index(brng, params.size());
        const std::size_t idx = uniform_index(brng, params[which]->size());
        const double x0 = (*params[which])[idx];
        (*params[which])[idx] = x0 + 1e-5;
        const double up = total_loss(m, batch, w);
        (*params[which])[idx] = x0 - 1e-5;
        const double down = total_loss(m, batch, w);
        (*params[which])[idx] = x0;
        worst = std::max(worst, testing::rel_error(grads[which].value()[idx], (up - down) / 2e-5));
      }
      CHECK(worst <= 1e-5);
    }
  }
}

TEST_SUITE("meta_train") {
  TEST_CASE("zero iterations return the initial parameters") {
    const auto data = small_dataset(4);
    Rng rng(13);
    const protonet::Model m = build_model(small_spec(), data.dims, Method::kMetaInterp, rng);
    TrainConfig cfg = small_config(Method::kMetaInterp);
    cfg.max_iters = 0;
    const auto r = meta_train(data, m, cfg);
    Checkpoint a, b;
    put_model(a, m);
    put_model(b, r.best);
    CHECK(a == b);
    CHECK(r.history.size() == 1);
    CHECK(r.iters == 0);
  }

  TEST_CASE("eta = 0 matches a run with lambda frozen") {
    const auto data = small_dataset(5);
    Rng rng(14);
    const protonet::Model m = build_model(small_spec(), data.dims, Method::kMetaInterp, rng);
    TrainConfig cfg = small_config(Method::kMetaInterp);
    cfg.eta = 0.0;
    cfg.lambda_opt = OptimizerKind::kSgd;
    TrainConfig frozen = cfg;
    frozen.lambda_updates = false;
    int hyper_calls = 0;
    Hooks hooks;
    hooks.on_hypergrad = [&] { ++hyper_calls; };
    const auto a = meta_train(data, m, cfg, &hooks);
    const auto b = meta_train(data, m, frozen);
    CHECK(hyper_calls == 3);
    Checkpoint ca, cb, c0;
    put_model(ca, a.final_model);
    put_model(cb, b.final_model);
    CHECK(ca == cb);
    CHECK(a.history == b.history);
    put_model(c0, m);
    for (const auto& name : c0.names()) {
      if (name.rfind("lambda.", 0) == 0) CHECK(ca.get(name) == c0.get(name));
    }
  }

  TEST_CASE("same seed gives identical histories, other seeds differ") {
    const auto data = small_dataset(6);
    Rng rng(15);
    const protonet::Model m = build_model(small_spec(), data.dims, Method::kMetaInterp, rng);
    const TrainConfig cfg = small_config(Method::kMetaInterp);
    const auto a = meta_train(data, m, cfg);
    const auto b = meta_train(data, m, cfg);
    CHECK(a.history == b.history);
    TrainConfig other = cfg;
    other.seed = 99;
    CHECK_FALSE(meta_train(data, m, other).history == a.history);
    for (const auto& row : a.history) CHECK(row.wall_ms == 0.0);
  }

  TEST_CASE("a run resumed from a checkpoint matches the uninterrupted run") {
    const auto data = small_dataset(7);
    for (Method method : {Method::kMetaInterp, Method::kNoBilevel, Method::kMlti}) {
      Rng rng(16);
      const protonet::Model m = build_model(small_spec(), data.dims, method, rng);
      TrainConfig cfg = small_config(method);
      cfg.eval_every = 2;
      TrainState whole = init_state(m, cfg);
      run(whole, data, cfg);

      TrainState part = init_state(m, cfg);
      run(part, data, cfg, 5);
      CHECK(part.iter == 5);
      const std::string p = temp_path("resume.ckpt");
      save_state(part).save(p);
      TrainState resumed = load_state(Checkpoint::load(p));
      std::filesystem::remove(p);
      run(resumed, data, cfg);
      CHECK(resumed.history == whole.history);
      CHECK(checkpoint_bytes(save_state(resumed)) == checkpoint_bytes(save_state(whole)));
    }
  }

  TEST_CASE("early stopping after patience evaluations without improvement") {
    const auto data = small_dataset(8);
    Rng rng(17);
    const protonet::Model m = build_model(small_spec(), data.dims, Method::kProtoNet, rng);
    TrainConfig cfg = small_config(Method::kProtoNet);
    cfg.alpha = 1e-14;
    cfg.theta_opt = OptimizerKind::kSgd;
    cfg.eval_every = 1;
    cfg.patience = 2;
    cfg.max_iters = 50;
    const auto r = meta_train(data, m, cfg);
    CHECK(r.early_stopped);
    CHECK(r.history.size() == 3);
  }

  TEST_CASE("non-finite losses abort with a diagnostic") {
    const auto data = small_dataset(9);
    Rng rng(18);
    protonet::Model m = build_model(small_spec(), data.dims, Method::kProtoNet, rng);
    m.encoder.layers[0].w(0, 0) = std::nan("");
    CHECK_THROWS_AS(meta_train(data, m, small_config(Method::kProtoNet)), TrainingError);
  }

  TEST_CASE("model checkpoints restore every set function kind") {
    Rng rng(19);
    for (setfunc::Kind k : {setfunc::Kind::kIdentity, setfunc::Kind::kFirst, setfunc::Kind::kSimple,
                            setfunc::Kind::kFull, setfunc::Kind::kDeepSets}) {
      ModelSpec s = small_spec();
      s.setfn = k;
      s.dropout = 0.25;
      s.distance = protonet::Distance::kEuclidean;
      const protonet::Model m = build_model(s, 6, Method::kMetaInterp, rng);
      Checkpoint a;
      put_model(a, m, "x.");
      const protonet::Model back = get_model(a, "x.");
      Checkpoint b;
      put_model(b, back, "x.");
      CHECK(a == b);
      CHECK(setfunc::kind_of(back.setfn) == k);
      CHECK(back.distance == protonet::Distance::kEuclidean);
    }
  }

  TEST_CASE("ablation variants change only the method") {
    const TrainConfig cfg = small_config(Method::kMetaInterp);
    const auto vs = ablation_variants(cfg);
    REQUIRE(vs.size() == 4);
    CHECK(vs[0].second.method == Method::kMetaInterp);
    CHECK(vs[1].second.method == Method::kProtoNetST);
    CHECK(vs[2].second.method == Method::kNoBilevel);
    CHECK(vs[3].second.method == Method::kNoSingleton);

    const auto data = small_dataset(10);
    Rng rng(20);
    const protonet::Model m = build_model(small_spec(), data.dims, Method::kMetaInterp, rng);
    // (a) builds no interpolation draws at all.
    Rng brng(21);
    for (const auto& p : sample_batch(data.meta_train, vs[1].second, 4, brng)) {
      CHECK(p.draws.support_sets.empty());
      CHECK(p.second.support.empty());
    }
    // (b) never computes a hypergradient.
    int hyper_calls = 0;
    Hooks hooks;
    hooks.on_hypergrad = [&] { ++hyper_calls; };
    meta_train(data, m, vs[2].second, &hooks);
    CHECK(hyper_calls == 0);
    // (c) is the mean mixed loss.
    Rng crng(22);
    const auto batch = sample_batch(data.meta_train, vs[3].second, protonet::interp_width(m.encoder), crng);
    double mixed = 0.0;
    for (const auto& p : batch) mixed += interpolate::loss_mix(m, p.first, p.second, p.draws);
    CHECK(std::abs(total_loss(m, batch, loss_weights(Method::kNoSingleton)) -
                   mixed / static_cast<double>(batch.size())) <= 1e-12);
  }

  TEST_CASE("protonet never allocates set function weights") {
    Rng rng(23);
    const protonet::Model m = build_model(small_spec(), 6, Method::kProtoNet, rng);
    CHECK(setfunc::kind_of(m.setfn) == setfunc::Kind::kIdentity);
    CHECK(parse_method(method_name(Method::kNoSingleton)) == Method::kNoSingleton);
    CHECK_THROWS_AS(parse_method("maml"), ConfigError);
  }

  TEST_CASE("linear hyper schedule decays to zero") {
    TrainConfig cfg;
    cfg.eta = 1.0;
    cfg.max_iters = 10;
    CHECK(hyper_lr(cfg, 0) == 1.0);
    CHECK(hyper_lr(cfg, 5) == doctest::Approx(0.5));
    CHECK(hyper_lr(cfg, 10) == 0.0);
    cfg.hyper_schedule = Schedule::kConstant;
    CHECK(hyper_lr(cfg, 9) == 1.0);
  }
}
