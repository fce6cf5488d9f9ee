// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "metainterp/errors.hpp"
#include "metainterp/setfunc.hpp"
#include "test_support.hpp"

using namespace mi;
using namespace mi::setfunc;
using mi::testing::random_tensor;

namespace {

// Simple-form parameters with every weight, bias and the seed random.
SimpleSetParams random_simple(std::size_t d, Rng& rng) {
  SetFunction f = init_simple(d, rng);
  for_each_tensor(f, [&](const std::string&, Tensor& t) {
    t = random_tensor(rng, t.rows(), t.cols(), 0.7);
  });
  return std::get<SimpleSetParams>(f);
}

Tensor stack_rows(const std::vector<Tensor>& rows) {
  Tensor out(rows.size(), rows[0].cols());
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].cols(); ++c) out(r, c) = rows[r](0, c);
  return out;
}

Tensor row_softmax(const Tensor& s) {
  Tensor out = s;
  for (std::size_t r = 0; r < s.rows(); ++r) {
    double mx = s(r, 0);
    for (std::size_t c = 1; c < s.cols(); ++c) mx = std::max(mx, s(r, c));
    double z = 0;
    for (std::size_t c = 0; c < s.cols(); ++c) z += std::exp(s(r, c) - mx);
    for (std::size_t c = 0; c < s.cols(); ++c) out(r, c) = std::exp(s(r, c) - mx) / z;
  }
  return out;
}

Tensor add_bias(Tensor x, const Tensor& b) {
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) += b(0, c);
  return x;
}

// Both attention matrices of the simple form built from plain matrix algebra.
struct RawAttention {
  Tensor first;   // n×n
  Tensor pooled;  // 1×n
};

RawAttention raw_attention(const SimpleSetParams& p, const Tensor& h) {
  const double s = 1.0 / std::sqrt(static_cast<double>(h.cols()));
  Tensor q1 = add_bias(matmul(h, p.wq1), p.bq1);
  Tensor k1 = add_bias(matmul(h, p.wk1), p.bk1);
  Tensor v1 = add_bias(matmul(h, p.wv1), p.bv1);
  Tensor a1 = row_softmax(s * matmul(q1, transpose(k1)));
  Tensor h2 = matmul(a1, v1);
  Tensor q2 = add_bias(matmul(p.seed, p.wq2), p.bq2);
  Tensor k2 = add_bias(matmul(h2, p.wk2), p.bk2);
  return {a1, row_softmax(s * matmul(q2, transpose(k2)))};
}

Tensor column(const Tensor& row) { return transpose(row); }

}  // namespace

TEST_SUITE("setfunc") {
  TEST_CASE("simple singleton is the effective affine map") {
    Rng rng(11);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t d = 1 + trial % 6;
      SimpleSetParams p = random_simple(d, rng);
      Tensor h = random_tensor(rng, 1, d);
      Tensor out = column(simple_forward(p, h));
      Tensor expect = matmul(simple_effective_weight(p), column(h)) + simple_effective_bias(p);
      worst = std::max(worst, max_abs_diff(out, expect));
    }
    CHECK(worst <= 1e-12);
  }

  TEST_CASE("zero query/key parameters average the pair") {
    Rng rng(12);
    const std::size_t d = 4;
    SimpleSetParams p = random_simple(d, rng);
    for (Tensor* t : {&p.wq1, &p.wk1, &p.wq2, &p.wk2, &p.bq1, &p.bk1, &p.bq2, &p.bk2}) {
      *t = Tensor(t->shape());
    }
    Tensor h = random_tensor(rng, 1, d);
    Tensor hp = random_tensor(rng, 1, d);
    AlphaPair a = alpha_pair(p, h.data(), hp.data());
    CHECK(a.alpha == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(a.p1 == doctest::Approx(0.5));
    CHECK(a.p1_tilde == doctest::Approx(0.5));
    CHECK(a.p2 == doctest::Approx(0.5));
    Tensor out = column(simple_forward(p, stack_rows({h, hp})));
    Tensor expect = matmul(simple_effective_weight(p), column(0.5 * (h + hp))) +
                    simple_effective_bias(p);
    CHECK(max_abs_diff(out, expect) <= 1e-12);
  }

  TEST_CASE("pair forward matches the interpolation closed form") {
    Rng rng(13);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t d = 2 + trial % 5;
      SimpleSetParams p = random_simple(d, rng);
      Tensor h = random_tensor(rng, 1, d);
      Tensor hp = random_tensor(rng, 1, d);
      const double alpha = alpha_pair(p, h.data(), hp.data()).alpha;
      Tensor out = column(simple_forward(p, stack_rows({h, hp})));
      Tensor mixed = column(h + alpha * (hp - h));
      Tensor expect = matmul(simple_effective_weight(p), mixed) + simple_effective_bias(p);
      worst = std::max(worst, max_abs_diff(out, expect));
    }
    CHECK(worst <= 1e-9);
  }

  TEST_CASE("alpha equals one minus the pooled first-column attention") {
    Rng rng(14);
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t d = 3;
      SimpleSetParams p = random_simple(d, rng);
      Tensor h = random_tensor(rng, 1, d);
      Tensor hp = random_tensor(rng, 1, d);
      AlphaPair a = alpha_pair(p, h.data(), hp.data());
      RawAttention raw = raw_attention(p, stack_rows({h, hp}));
      CHECK(a.p1 == doctest::Approx(raw.first(0, 0)).epsilon(1e-12));
      CHECK(a.p1_tilde == doctest::Approx(raw.first(1, 0)).epsilon(1e-12));
      CHECK(a.p2 == doctest::Approx(raw.pooled(0, 0)).epsilon(1e-12));
      // First-column weight of the composed map pooled · first.
      const double p_bar = matmul(raw.pooled, raw.first)(0, 0);
      CHECK(std::abs((1.0 - a.alpha) - p_bar) <= 1e-12);
      CHECK(a.alpha >= 0.0);
      CHECK(a.alpha <= 1.0);
      CHECK(a.p1 > 0.0);
      CHECK(a.p1 < 1.0);
    }
  }

  TEST_CASE("duplicate elements give identical first-layer rows") {
    Rng rng(15);
    SimpleSetParams p = random_simple(4, rng);
    Tensor h = random_tensor(rng, 1, 4);
    AlphaPair a = alpha_pair(p, h.data(), h.data());
    CHECK(a.p1 == a.p1_tilde);
    CHECK(std::abs(a.alpha - (1.0 - a.p1)) <= 1e-15);
  }

  TEST_CASE("empty set is rejected") {
    Rng rng(16);
    Tensor empty(0, 3);
    CHECK_THROWS_AS(simple_forward(init_simple(3, rng), empty), CardinalityError);
    CHECK_THROWS_AS(deepsets_forward(deepsets_identity(3), empty), CardinalityError);
    CHECK_THROWS_AS(full_forward(init_full(3, 2, 4, 0.1, rng), empty), CardinalityError);
    CHECK_THROWS_AS(evaluate(IdentitySet{}, random_tensor(rng, 2, 3)), CardinalityError);
  }

  TEST_CASE("full form is permutation invariant with dropout disabled") {
    Rng rng(17);
    FullSetParams p = init_full(5, 3, 4, 0.0, rng);
    for (std::size_t n : {2u, 3u, 5u}) {
      Tensor x = random_tensor(rng, n, 5);
      Tensor rev(n, 5);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < 5; ++c) rev(r, c) = x(n - 1 - r, c);
      CHECK(max_abs_diff(full_forward(p, x), full_forward(p, rev)) <= 1e-12);
    }
    Tensor a = random_tensor(rng, 3, 5);
    CHECK(full_forward(p, a) == full_forward(p, a));
    CHECK(full_forward(p, a).shape() == Shape{1, 5});
  }

  TEST_CASE("simple form and deepsets are permutation invariant") {
    Rng rng(18);
    SimpleSetParams sp = random_simple(4, rng);
    const std::vector<std::size_t> pre{6, 5};
    const std::vector<std::size_t> post{7};
    DeepSetsParams dp = init_deepsets(4, pre, post, rng);
    Tensor x = random_tensor(rng, 4, 4);
    Tensor perm(4, 4);
    const std::size_t order[] = {2, 0, 3, 1};
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 4; ++c) perm(r, c) = x(order[r], c);
    CHECK(max_abs_diff(simple_forward(sp, x), simple_forward(sp, perm)) <= 1e-12);
    CHECK(max_abs_diff(deepsets_forward(dp, x), deepsets_forward(dp, perm)) <= 1e-12);
    CHECK(deepsets_forward(dp, x).shape() == Shape{1, 4});
  }

  TEST_CASE("dropout masks change the training-mode output") {
    Rng rng(19);
    SetFunction f = init_full(4, 2, 4, 0.1, rng);
    Tensor x = random_tensor(rng, 2, 4);
    std::set<std::vector<double>> outputs;
    for (int i = 0; i < 20; ++i) {
      auto masks = draw_masks(f, 1, 2, rng);
      REQUIRE(masks.has_value());
      Tensor y = evaluate(f, x, &*masks);
      outputs.insert(std::vector<double>(y.data().begin(), y.data().end()));
    }
    CHECK(outputs.size() >= 19);

    auto masks = draw_masks(f, 1, 3, rng);
    CHECK_THROWS_AS(evaluate(f, x, &*masks), DimensionError);
    CHECK_FALSE(draw_masks(init_full(4, 2, 4, 0.0, rng), 1, 2, rng).has_value());
  }

  TEST_CASE("deepsets identity stacks compute the mean") {
    DeepSetsParams p = deepsets_identity(3);
    Tensor x = Tensor::from_rows({{1, 2, 3}, {3, 6, -3}});
    CHECK(deepsets_forward(p, x) == Tensor::from_rows({{2, 4, 0}}));
    Rng rng(20);
    const std::vector<std::size_t> pre{5};
    const std::vector<std::size_t> post{};
    DeepSetsParams q = init_deepsets(3, pre, post, rng);
    Tensor h = random_tensor(rng, 1, 3);
    CHECK(deepsets_forward(q, stack_rows({h, h})) == deepsets_forward(q, h));
  }

  TEST_CASE("batched forward equals per-set forwards") {
    Rng rng(21);
    std::vector<SetFunction> fns{init_simple(4, rng), init_full(4, 2, 4, 0.0, rng),
                                 init_deepsets(4, std::vector<std::size_t>{5},
                                               std::vector<std::size_t>{}, rng),
                                 FirstElementSet{}};
    for (const auto& f : fns) {
      for (std::size_t n : {1u, 2u, 3u}) {
        const std::size_t batch = 4;
        Tensor x = random_tensor(rng, batch * n, 4);
        ad::Tape tape(false);
        auto vars = bind_constants(f, tape);
        Tensor y = forward_batch(vars, tape.constant(x), n).value();
        REQUIRE(y.shape() == Shape{batch, 4});
        for (std::size_t b = 0; b < batch; ++b) {
          Tensor one(n, 4);
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < 4; ++c) one(r, c) = x(b * n + r, c);
          Tensor expect = evaluate(f, one);
          for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(y(b, c) - expect(0, c)) <= 1e-12);
        }
      }
    }
  }

  TEST_CASE("set function gradients match finite differences") {
    Rng rng(22);
    std::vector<SetFunction> fns{init_simple(3, rng), init_full(3, 2, 4, 0.0, rng),
                                 init_deepsets(3, std::vector<std::size_t>{4},
                                               std::vector<std::size_t>{4}, rng)};
    for (const auto& f : fns) {
      Tensor x = random_tensor(rng, 4, 3);
      mi::testing::ScalarFn fn = [&f](ad::Tape& tape, const std::vector<ad::Var>& in) {
        auto vars = bind_constants(f, tape);
        ad::Var y = forward_batch(vars, in[0], 2);
        return ad::sum(ad::mul(y, y));
      };
      CHECK(mi::testing::max_gradient_error(fn, {x}) <= 1e-5);
    }
  }

  TEST_CASE("tensor visitation names are unique and stable") {
    Rng rng(23);
    SetFunction f = init_full(3, 2, 4, 0.1, rng);
    std::set<std::string> names;
    std::size_t count = 0;
    for_each_tensor(static_cast<const SetFunction&>(f),
                    [&](const std::string& name, const Tensor&) {
                      names.insert(name);
                      ++count;
                    });
    CHECK(names.size() == count);
    CHECK(names.count("enc1.head0.q.w") == 1);
    CHECK(names.count("seed") == 1);
    CHECK(parse_kind(kind_name(kind_of(f))) == Kind::kFull);
    CHECK_THROWS_AS(parse_kind("bogus"), ConfigError);
  }

  TEST_CASE("bound leaves follow traversal order") {
    Rng rng(29);
    const std::size_t pre[] = {4};
    const std::size_t post[] = {3};
    const std::vector<SetFunction> fs = {SetFunction(std::in_place_type<SimpleSetParams>, init_simple(3, rng)),
                                         SetFunction(std::in_place_type<FullSetParams>, init_full(3, 2, 2, 0.0, rng)),
                                         SetFunction(std::in_place_type<DeepSetsParams>, init_deepsets(3, pre, post, rng))};
    for (const auto& f : fs) {
      ad::Tape tape;
      std::vector<ad::Var> leaves;
      bind_variables(f, tape, &leaves);
      std::size_t i = 0;
      for_each_tensor(f, [&](const std::string&, const Tensor& t) {
        REQUIRE(i < leaves.size());
        CHECK(leaves[i++].value() == t);
      });
      CHECK(i == leaves.size());
    }
  }
}
