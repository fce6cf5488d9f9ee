// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "metainterp/errors.hpp"
#include "metainterp/interpolate.hpp"
#include "test_support.hpp"

using namespace mi;
using namespace mi::interpolate;
using mi::episodes::Example;
using mi::episodes::Task;
using mi::protonet::Model;

namespace {

Task make_task(int way, int shots, int queries, std::size_t dims, Rng& rng, double shift = 0.0) {
  Task t;
  t.way = way;
  for (int k = 0; k < way; ++k) {
    for (int i = 0; i < shots + queries; ++i) {
      Example ex;
      ex.label = k;
      for (std::size_t j = 0; j < dims; ++j) ex.features.push_back(standard_normal(rng) + k + shift);
      (i < shots ? t.support : t.query).push_back(ex);
    }
  }
  return t;
}

Model identity_model(std::size_t d, setfunc::SetFunction f) {
  Model m;
  m.encoder.layers.push_back({Tensor::identity(d), Tensor(1, d)});
  m.setfn = std::move(f);
  return m;
}

std::vector<double> row(const Example& e) { return e.features; }

}  // namespace

TEST_SUITE("interpolate") {
  TEST_CASE("class pairings are uniform bijections") {
    Rng rng(1);
    ClassPairing one = pair_classes(1, rng);
    CHECK(one.sigma1 == std::vector<int>{0});
    CHECK(one.sigma2 == std::vector<int>{0});
    std::map<std::pair<std::vector<int>, std::vector<int>>, int> freq;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      ClassPairing p = pair_classes(3, rng);
      CHECK(std::set<int>(p.sigma1.begin(), p.sigma1.end()).size() == 3);
      CHECK(std::set<int>(p.sigma2.begin(), p.sigma2.end()).size() == 3);
      ++freq[{p.sigma1, p.sigma2}];
    }
    CHECK(freq.size() == 36);
    for (auto& [k, c] : freq) CHECK(std::abs(c / double(draws) - 1.0 / 36) <= 0.01);
  }

  TEST_CASE("pair sets are the support cross product") {
    Rng rng(2);
    for (int s1 = 1; s1 <= 4; ++s1) {
      for (int s2 = 1; s2 <= 4; ++s2) {
        Task a = make_task(3, s1, 1, 2, rng);
        Task b = make_task(3, s2, 1, 2, rng);
        ClassPairing p = pair_classes(3, rng);
        for (int k = 0; k < 3; ++k) {
          auto pairs = build_pairs(a, b, p, k);
          CHECK(pairs.size() == static_cast<std::size_t>(s1 * s2));
          std::vector<std::pair<std::size_t, std::size_t>> oracle;
          for (std::size_t i = 0; i < a.support.size(); ++i)
            for (std::size_t j = 0; j < b.support.size(); ++j)
              if (a.support[i].label == p.sigma1[k] && b.support[j].label == p.sigma2[k])
                oracle.emplace_back(i, j);
          CHECK(pairs == oracle);
        }
      }
    }
    Task a = make_task(2, 1, 1, 2, rng);
    Task b = make_task(2, 1, 1, 2, rng);
    b.support.pop_back();
    ClassPairing id{{0, 1}, {0, 1}};
    CHECK_THROWS_AS(build_pairs(a, b, id, 1), MissingClassError);
  }

  TEST_CASE("mean pooling of one-shot pairs averages the inputs") {
    Rng rng(3);
    Task a = make_task(3, 1, 2, 4, rng);
    Task b = make_task(3, 1, 2, 4, rng, 3.0);
    Model m = identity_model(4, setfunc::deepsets_identity(4));
    InterpDraws d = draw_interp(a, b, {}, 4, rng);
    Tensor c = interpolated_prototypes(m, a, b, d);
    for (int k = 0; k < 3; ++k) {
      auto x1 = row(a.support[d.pairing.sigma1[k]]);
      auto x2 = row(b.support[d.pairing.sigma2[k]]);
      for (std::size_t j = 0; j < 4; ++j) CHECK(c(k, j) == doctest::Approx((x1[j] + x2[j]) / 2));
    }
  }

  TEST_CASE("simple set function prototypes match the pair closed form") {
    Rng rng(4);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      Task a = make_task(2, 2, 1, 3, rng);
      Task b = make_task(2, 3, 1, 3, rng, 1.0);
      Model m;
      const std::vector<std::size_t> widths{3, 4, 2};
      m.encoder = protonet::init_encoder(widths, 1, rng);
      setfunc::SimpleSetParams sp = setfunc::init_simple(4, rng);
      sp.bv1 = mi::testing::random_tensor(rng, 1, 4);
      sp.bk1 = mi::testing::random_tensor(rng, 1, 4);
      m.setfn = sp;
      InterpDraws d = draw_interp(a, b, {}, 4, rng);
      Tensor c = interpolated_prototypes(m, a, b, d);
      const Tensor w = setfunc::simple_effective_weight(sp);
      const Tensor bias = setfunc::simple_effective_bias(sp);
      const auto& g = m.encoder.layers[1];
      for (int k = 0; k < 2; ++k) {
        std::vector<double> acc(2, 0.0);
        auto pairs = build_pairs(a, b, d.pairing, k);
        for (auto [i, j] : pairs) {
          Tensor h = protonet::encode_lower(m.encoder, Tensor::row(a.support[i].features));
          Tensor hp = protonet::encode_lower(m.encoder, Tensor::row(b.support[j].features));
          const double alpha = setfunc::alpha_pair(sp, h.data(), hp.data()).alpha;
          Tensor fused = transpose(matmul(w, transpose(h + alpha * (hp - h))) + bias);
          Tensor out = matmul(fused, g.w) + g.b;
          for (std::size_t c2 = 0; c2 < 2; ++c2) acc[c2] += out(0, c2) / pairs.size();
        }
        for (std::size_t c2 = 0; c2 < 2; ++c2) worst = std::max(worst, std::abs(c(k, c2) - acc[c2]));
      }
    }
    CHECK(worst <= 1e-9);
  }

  TEST_CASE("self interpolation fuses duplicate pairs") {
    Rng rng(5);
    Task a = make_task(3, 1, 2, 4, rng);
    Model m = identity_model(4, setfunc::init_full(4, 4, 4, 0.0, rng));
    InterpDraws d = draw_interp(a, a, {}, 4, rng);
    d.pairing.sigma2 = d.pairing.sigma1;
    d.support_sets.assign(3, {});
    for (int k = 0; k < 3; ++k) {
      const auto idx = static_cast<std::size_t>(d.pairing.sigma1[k]);
      d.support_sets[k].push_back({{Source::kSupport1, idx}, {Source::kSupport2, idx}});
    }
    Tensor c = interpolated_prototypes(m, a, a, d);
    for (int k = 0; k < 3; ++k) {
      const auto& x = a.support[d.pairing.sigma1[k]].features;
      Tensor dup = Tensor::from_rows({{x[0], x[1], x[2], x[3]}, {x[0], x[1], x[2], x[3]}});
      Tensor expect = setfunc::evaluate(m.setfn, dup);
      for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(c(k, j) - expect(0, j)) <= 1e-12);
    }
  }

  TEST_CASE("prototypes do not depend on the order of elements inside a set") {
    Rng rng(6);
    Task a = make_task(3, 2, 2, 4, rng);
    Task b = make_task(3, 2, 2, 4, rng, 1.0);
    Model m = identity_model(4, setfunc::init_full(4, 4, 4, 0.0, rng));
    for (std::size_t n : {2u, 3u, 4u}) {
      InterpDraws d = draw_interp(a, b, {Strategy::kSupport, n}, 4, rng);
      InterpDraws swapped = d;
      for (auto& per_class : swapped.support_sets)
        for (auto& s : per_class) std::reverse(s.begin(), s.end());
      CHECK(max_abs_diff(interpolated_prototypes(m, a, b, d),
                         interpolated_prototypes(m, a, b, swapped)) <= 1e-12);
    }
  }

  TEST_CASE("set composition for larger cardinalities") {
    Rng rng(7);
    Task a = make_task(2, 2, 3, 3, rng);
    Task b = make_task(2, 3, 3, 3, rng);
    for (std::size_t n = 2; n <= 5; ++n) {
      InterpDraws d = draw_interp(a, b, {Strategy::kSupportAndQuery, n}, 3, rng);
      for (int k = 0; k < 2; ++k) {
        CHECK(d.support_sets[k].size() == 6);
        for (const auto& s : d.support_sets[k]) {
          REQUIRE(s.size() == n);
          std::size_t from1 = 0;
          for (const auto& e : s) {
            if (e.source == Source::kSupport1) {
              ++from1;
              CHECK(a.support[e.index].label == d.pairing.sigma1[k]);
            } else {
              CHECK(b.support[e.index].label == d.pairing.sigma2[k]);
            }
          }
          CHECK(from1 == (n + 1) / 2);
        }
      }
      CHECK(d.query_sets.size() == a.query.size());
      for (std::size_t q = 0; q < d.query_sets.size(); ++q) {
        CHECK(d.query_sets[q][0] == ElementRef{Source::kQuery1, q});
        CHECK(d.query_sets[q].size() == n);
      }
    }
    InterpDraws noise = draw_interp(a, b, {Strategy::kSupportNoise, 3}, 3, rng);
    CHECK(noise.noise.shape() == Shape{a.support.size() * 2, 3});
    CHECK(noise.query_sets.empty());
    CHECK_THROWS_AS(draw_interp(a, b, {Strategy::kSupport, 6}, 3, rng), ConfigError);
  }

  TEST_CASE("loss special cases") {
    Rng rng(8);
    Task a1 = make_task(1, 2, 3, 3, rng);
    Task b1 = make_task(1, 2, 3, 3, rng);
    Model id = identity_model(3, setfunc::deepsets_identity(3));
    CHECK(loss_mix(id, a1, b1, draw_interp(a1, b1, {}, 3, rng)) == 0.0);

    Task a = make_task(3, 2, 3, 3, rng);
    Task b = make_task(3, 2, 3, 3, rng, 5.0);
    Model first = identity_model(3, setfunc::FirstElementSet{});
    first.encoder = protonet::init_encoder(std::vector<std::size_t>{3, 5, 4}, 1, rng);
    Model single = first;
    single.setfn = setfunc::IdentitySet{};
    InterpDraws d = draw_interp(a, b, {}, 5, rng);
    CHECK(std::abs(loss_mix(first, a, b, d) - protonet::loss_singleton(single, a)) <= 1e-12);

    // Hand-computed two-way one-shot episode with mean pooling.
    Task t1, t2;
    t1.way = t2.way = 2;
    t1.support = {{{0, 0}, 0}, {{4, 0}, 1}};
    t1.query = {{{1, 1}, 0}};
    t2.support = {{{2, 2}, 0}, {{0, 4}, 1}};
    t2.query = {{{0, 0}, 1}};
    Model mean = identity_model(2, setfunc::deepsets_identity(2));
    InterpDraws hd = draw_interp(t1, t2, {}, 2, rng);
    hd.pairing = {{0, 1}, {1, 0}};
    hd.support_sets = {{{{Source::kSupport1, 0}, {Source::kSupport2, 1}}},
                       {{{Source::kSupport1, 1}, {Source::kSupport2, 0}}}};
    // c0 = (0,2), c1 = (3,1); query (1,1) has target 0.
    const double d0 = 1 + 1, d1 = 4 + 0;
    const double expect = -std::log(std::exp(-d0) / (std::exp(-d0) + std::exp(-d1)));
    CHECK(std::abs(loss_mix(mean, t1, t2, hd) - expect) <= 1e-12);
  }

  TEST_CASE("losses are finite and nonnegative for every strategy") {
    Rng rng(9);
    Task a = make_task(3, 2, 3, 4, rng);
    Task b = make_task(3, 2, 3, 4, rng, 1.0);
    Model m;
    m.encoder = protonet::init_encoder(std::vector<std::size_t>{4, 6, 3}, 1, rng);
    m.setfn = setfunc::init_full(6, 4, 4, 0.1, rng);
    for (Strategy s : {Strategy::kSupport, Strategy::kQuery, Strategy::kSupportAndQuery,
                       Strategy::kSupportNoise}) {
      for (std::size_t n = 2; n <= 5; ++n) {
        InterpDraws d = draw_interp(a, b, {s, n}, 6, rng);
        ad::Tape tape;
        auto bm = protonet::bind(m, tape, true, true);
        const double l = loss_mix(bm.vars, a, b, d, &rng).item();
        CHECK(std::isfinite(l));
        CHECK(l >= 0.0);
        CHECK(std::isfinite(loss_mix(m, a, b, d)));
      }
    }
    CHECK(parse_strategy(strategy_name(Strategy::kSupportNoise)) == Strategy::kSupportNoise);
    CHECK_THROWS_AS(parse_strategy("mixup"), ConfigError);
  }

  TEST_CASE("mixup baseline reductions") {
    Rng rng(10);
    Task a = make_task(3, 1, 3, 4, rng);
    Task b = make_task(3, 1, 3, 4, rng, 2.0);
    Model m;
    m.encoder = protonet::init_encoder(std::vector<std::size_t>{4, 5, 3}, 1, rng);
    InterpDraws d = draw_interp(a, b, {Strategy::kSupportAndQuery, 2}, 5, rng);
    CHECK(std::abs(mlti_loss(m, a, b, d, 1.0) - protonet::loss_singleton(m, a)) <= 1e-12);
    Model mean = m;
    mean.setfn = setfunc::deepsets_identity(5);
    CHECK(std::abs(mlti_loss(m, a, b, d, 0.5) - loss_mix(mean, a, b, d)) <= 1e-12);
    for (int i = 0; i < 1000; ++i) {
      const double v = draw_mix(rng);
      CHECK(v > 0.0);
      CHECK(v < 1.0);
    }
  }

  TEST_CASE("mixed loss gradients match finite differences") {
    Rng rng(11);
    Task a = make_task(2, 2, 2, 3, rng);
    Task b = make_task(2, 2, 2, 3, rng, 1.0);
    Model m;
    m.encoder = protonet::init_encoder(std::vector<std::size_t>{3, 4, 3}, 1, rng);
    m.setfn = setfunc::init_full(4, 4, 4, 0.0, rng);
    InterpDraws d = draw_interp(a, b, {Strategy::kSupportAndQuery, 2}, 4, rng);
    std::vector<Tensor> params;
    protonet::for_each_tensor(static_cast<const Model&>(m),
                              [&](const std::string&, const Tensor& x) { params.push_back(x); });
    mi::testing::ScalarFn fn = [&](ad::Tape& tape, const std::vector<ad::Var>& in) {
      auto bm = protonet::bind(m, tape, false, false);
      std::size_t i = 0;
      for (auto& layer : bm.vars.encoder.layers) {
        layer.w = in[i++];
        layer.b = in[i++];
      }
      bm.vars.setfn = setfunc::map_params(m.setfn, [&](const std::string&, const Tensor&) {
        return in[i++];
      });
      return loss_mix(bm.vars, a, b, d, nullptr);
    };
    auto grads = mi::testing::tape_gradients(fn, params);
    double worst = 0.0;
    for (int c = 0; c < 20; ++c) {
      const std::size_t w = uniform_index(rng, params.size());
      const std::size_t idx = uniform_index(rng, params[w].size());
      worst = std::max(worst, mi::testing::rel_error(grads[w][idx],
                                                     mi::testing::fd_partial(fn, params, w, idx, 1e-5)));
    }
    CHECK(worst <= 1e-5);
  }
}
