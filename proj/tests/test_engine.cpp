#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "advlab/rng.hpp"
#include "advlab/tape.hpp"
#include "advlab/tensor.hpp"

using namespace advlab;

namespace {

Tensor<double> random_matrix(std::size_t r, std::size_t c, RngStream& rng,
                             double scale = 1.0) {
  Tensor<double> t = Tensor<double>::matrix(r, c);
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

// Component-wise gradient comparison: tiny entries are compared absolutely
// (finite differences bottom out around 1e-10), everything else relatively.
double max_rel_err(const Tensor<double>& a, const Tensor<double>& b,
                   double abs_floor = 1e-7) {
  REQUIRE(a.shape == b.shape);
  double worst = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = std::fabs(a.data[i] - b.data[i]);
    if (d <= abs_floor) continue;
    worst = std::max(worst, d / std::max(std::fabs(a.data[i]),
                                         std::fabs(b.data[i])));
  }
  return worst;
}

}  // namespace

TEST_CASE("cosine similarity basics") {
  Tensor<double> a({2}, {1.0, 0.0});
  Tensor<double> b({2}, {1.0, 0.0});
  Tensor<double> c({2}, {-1.0, 0.0});
  Tensor<double> d({2}, {0.0, 1.0});
  CHECK(*cosine_similarity(a, b) == doctest::Approx(1.0));
  CHECK(*cosine_similarity(a, c) == doctest::Approx(-1.0));
  CHECK(*cosine_similarity(a, d) == doctest::Approx(0.0));

  Tensor<double> z({2}, {0.0, 0.0});
  CHECK(!cosine_similarity(a, z).has_value());

  Tensor<double> wrong({3}, {1.0, 0.0, 0.0});
  CHECK_THROWS_AS((void)cosine_similarity(a, wrong), ConfigError);
}

TEST_CASE("finite differences on closed forms") {
  Tensor<double> x({2}, {1.0, 2.0});
  auto sumsq = [](const Tensor<double>& t) {
    double s = 0;
    for (double v : t.data) s += v * v;
    return s;
  };
  Tensor<double> g = finite_diff_grad(sumsq, x, 1e-5);
  CHECK(g.data[0] == doctest::Approx(2.0).epsilon(1e-6));
  CHECK(g.data[1] == doctest::Approx(4.0).epsilon(1e-6));

  auto constant = [](const Tensor<double>&) { return 3.5; };
  Tensor<double> gz = finite_diff_grad(constant, x, 1e-5);
  CHECK(gz.data[0] == 0.0);
  CHECK(gz.data[1] == 0.0);
}

TEST_CASE("backward of x*x with empty hooks") {
  Tape<double> tape;
  const int x = tape.leaf(Tensor<double>({1, 1}, {3.0}));
  tape.label("x", x);
  const int y = tape.matmul_nn(x, x);
  CHECK(tape.value(y).data[0] == doctest::Approx(9.0));

  auto res = tape.backward(y, nullptr, HookSet<double>{}, {{"x"}, false});
  CHECK(res.grads.at("x").data[0] == doctest::Approx(6.0));
}

TEST_CASE("scalar residual block under branch scaling") {
  // z' = z + w*z with w = 2; gamma = 0.5 makes the pullback 1 + 0.5*2 = 2.
  Tape<double> tape;
  const int z = tape.leaf(Tensor<double>({1, 1}, {1.5}));
  tape.label("z", z);
  const int w = tape.leaf(Tensor<double>({1, 1}, {2.0}));
  const int wz = tape.matmul_nn(z, w);
  const int z2 = tape.residual_add(z, wz, 1);

  HookSet<double> hooks;
  hooks.residual_branch_scale = 0.5;
  auto res = tape.backward(z2, nullptr, hooks, {{"z"}, false});
  CHECK(res.grads.at("z").data[0] == doctest::Approx(2.0));

  // Exactly linear in gamma for a one-node branch.
  for (double gamma : {0.0, 0.25, 0.7, 1.0}) {
    HookSet<double> h2;
    h2.residual_branch_scale = gamma;
    auto r2 = tape.backward(z2, nullptr, h2, {{"z"}, false});
    CHECK(r2.grads.at("z").data[0] == 1.0 + gamma * 2.0);
  }
}

TEST_CASE("hook neutrality: empty vs gamma=1 is bit-identical") {
  RngStream rng(7);
  Tape<double> tape;
  const int x = tape.leaf(random_matrix(3, 4, rng));
  tape.label("x", x);
  const int g1 = tape.leaf(Tensor<double>({4}, 1.0));
  const int xn = tape.rmsnorm(x, g1);
  const int w = tape.leaf(random_matrix(4, 4, rng));
  const int br = tape.matmul_nn(xn, w);
  const int z2 = tape.residual_add(x, br, 1);
  const int w2 = tape.leaf(random_matrix(4, 5, rng));
  const int logits = tape.matmul_nn(z2, w2);
  const int loss = tape.ce_mean(logits, 1, {2, 0});

  auto res_empty = tape.backward(loss, nullptr, HookSet<double>{}, {{"x"}, false});
  HookSet<double> h;
  h.residual_branch_scale = 1.0;
  auto res_one = tape.backward(loss, nullptr, h, {{"x"}, false});
  CHECK(res_empty.grads.at("x").data == res_one.grads.at("x").data);
}

TEST_CASE("adjoint linearity in the seed") {
  RngStream rng(12);
  Tape<double> tape;
  const int x = tape.leaf(random_matrix(2, 3, rng));
  tape.label("x", x);
  const int w = tape.leaf(random_matrix(3, 3, rng));
  const int y = tape.matmul_nn(x, w);
  const int g1 = tape.leaf(Tensor<double>({3}, 1.0));
  const int out = tape.rmsnorm(y, g1);

  Tensor<double> u = random_matrix(2, 3, rng);
  Tensor<double> cu = u;
  const double c = 3.75;
  for (double& v : cu.data) v *= c;

  auto ru = tape.backward(out, &u, HookSet<double>{}, {{"x"}, false});
  auto rcu = tape.backward(out, &cu, HookSet<double>{}, {{"x"}, false});
  for (std::size_t i = 0; i < ru.grads.at("x").data.size(); ++i)
    CHECK(rcu.grads.at("x").data[i] ==
          doctest::Approx(c * ru.grads.at("x").data[i]).epsilon(1e-12));
}

TEST_CASE("row replacement equals a truncated-tape backward") {
  RngStream rng(21);
  Tensor<double> xv = random_matrix(1, 4, rng);
  Tensor<double> w1 = random_matrix(4, 4, rng);
  Tensor<double> w2 = random_matrix(4, 3, rng);
  std::vector<double> u = {0.3, -1.2, 0.8, 2.0};

  Tape<double> full;
  const int x = full.leaf(xv);
  full.label("x", x);
  const int mid = full.matmul_nn(x, full.leaf(w1));
  full.label("mid", mid);
  const int out = full.matmul_nn(mid, full.leaf(w2));
  Tensor<double> seed({1, 3}, {1.0, 1.0, 1.0});

  HookSet<double> hooks;
  RowRule<double> rule;
  rule.label = "mid";
  rule.row = 0;
  rule.fn = [&u](std::span<const double>) {
    return RowReplaceOut<double>{u, false};
  };
  hooks.row_replacements.push_back(rule);
  auto replaced = full.backward(out, &seed, hooks, {{"x"}, false});

  Tape<double> lower;
  const int x2 = lower.leaf(xv);
  lower.label("x", x2);
  const int mid2 = lower.matmul_nn(x2, lower.leaf(w1));
  Tensor<double> useed({1, 4}, u);
  auto direct = lower.backward(mid2, &useed, HookSet<double>{}, {{"x"}, false});

  for (std::size_t i = 0; i < 4; ++i)
    CHECK(replaced.grads.at("x").data[i] ==
          doctest::Approx(direct.grads.at("x").data[i]).epsilon(1e-12));
}

TEST_CASE("hook validation errors") {
  Tape<double> tape;
  const int x = tape.leaf(Tensor<double>({1, 2}, {1.0, 2.0}));
  const int y = tape.matmul_nn(x, tape.leaf(Tensor<double>({2, 1}, {1.0, 1.0})));
  tape.label("x", x);

  HookSet<double> hooks;
  RowRule<double> rule;
  rule.label = "nope";
  rule.row = 0;
  rule.fn = [](std::span<const double> g) {
    return RowReplaceOut<double>{{g.begin(), g.end()}, false};
  };
  hooks.row_replacements.push_back(rule);
  CHECK_THROWS_AS(tape.backward(y, nullptr, hooks, {{"x"}, false}),
                  ConfigError);

  CHECK_THROWS_AS(tape.label("x", y), ConfigError);
  CHECK_THROWS_AS(
      tape.backward(y, nullptr, HookSet<double>{}, {{"missing"}, false}),
      ConfigError);
}

TEST_CASE("non-finite values are engine errors") {
  Tape<double> tape;
  CHECK_THROWS_AS(
      tape.leaf(Tensor<double>({1, 2}, {1.0, std::nan("")})), NumericError);
}

TEST_CASE("ce_mean of uniform logits is log(V)") {
  Tape<double> tape;
  const int logits = tape.leaf(Tensor<double>({3, 32}, 0.0));
  const int loss = tape.ce_mean(logits, 1, {5, 17});
  CHECK(tape.value(loss).data[0] == doctest::Approx(std::log(32.0)).epsilon(1e-12));
}

TEST_CASE("primitive gradients match finite differences") {
  RngStream rng(40);

  SUBCASE("matmul_nn + cross-entropy") {
    Tensor<double> xv = random_matrix(3, 4, rng);
    Tensor<double> w = random_matrix(4, 5, rng);
    auto f = [&](const Tensor<double>& x) {
      Tape<double> t;
      const int xi = t.leaf(x);
      const int lo = t.matmul_nn(xi, t.leaf(w));
      return t.value(t.ce_mean(lo, 0, {1, 4, 2})).data[0];
    };
    Tape<double> t;
    const int xi = t.leaf(xv);
    t.label("x", xi);
    const int lo = t.matmul_nn(xi, t.leaf(w));
    const int loss = t.ce_mean(lo, 0, {1, 4, 2});
    auto res = t.backward(loss, nullptr, HookSet<double>{}, {{"x"}, false});
    Tensor<double> fd = finite_diff_grad(f, xv, 1e-6);
    CHECK(max_rel_err(res.grads.at("x"), fd) < 1e-4);
  }

  SUBCASE("matmul_nt") {
    Tensor<double> av = random_matrix(3, 4, rng);
    Tensor<double> bv = random_matrix(5, 4, rng);
    auto f = [&](const Tensor<double>& a) {
      Tape<double> t;
      const int lo = t.matmul_nt(t.leaf(a), t.leaf(bv));
      return t.value(t.ce_mean(lo, 0, {1, 0, 3})).data[0];
    };
    Tape<double> t;
    const int ai = t.leaf(av);
    t.label("a", ai);
    const int lo = t.matmul_nt(ai, t.leaf(bv));
    const int loss = t.ce_mean(lo, 0, {1, 0, 3});
    auto res = t.backward(loss, nullptr, HookSet<double>{}, {{"a"}, false});
    CHECK(max_rel_err(res.grads.at("a"), finite_diff_grad(f, av, 1e-6)) < 1e-4);
  }

  SUBCASE("rmsnorm wrt input and gain") {
    Tensor<double> xv = random_matrix(3, 6, rng);
    Tensor<double> gv = random_matrix(1, 6, rng, 0.5);
    gv.shape = {6};
    Tensor<double> w = random_matrix(6, 4, rng);
    auto build = [&](Tape<double>& t, const Tensor<double>& x,
                     const Tensor<double>& g) {
      const int xi = t.leaf(x);
      t.label("x", xi);
      const int gi = t.leaf(g);
      t.label("g", gi);
      const int y = t.rmsnorm(xi, gi);
      const int lo = t.matmul_nn(y, t.leaf(w));
      return t.ce_mean(lo, 0, {0, 2, 3});
    };
    Tape<double> t;
    const int loss = build(t, xv, gv);
    auto res = t.backward(loss, nullptr, HookSet<double>{}, {{"x", "g"}, false});

    auto fx = [&](const Tensor<double>& x) {
      Tape<double> tt;
      return tt.value(build(tt, x, gv)).data[0];
    };
    auto fg = [&](const Tensor<double>& g) {
      Tape<double> tt;
      return tt.value(build(tt, xv, g)).data[0];
    };
    CHECK(max_rel_err(res.grads.at("x"), finite_diff_grad(fx, xv, 1e-6)) < 1e-4);
    CHECK(max_rel_err(res.grads.at("g"), finite_diff_grad(fg, gv, 1e-6)) < 1e-4);
  }

  SUBCASE("causal softmax") {
    Tensor<double> xv = random_matrix(4, 4, rng);
    Tensor<double> w = random_matrix(4, 5, rng);
    auto f = [&](const Tensor<double>& x) {
      Tape<double> t;
      const int p = t.causal_softmax(t.leaf(x));
      const int lo = t.matmul_nn(p, t.leaf(w));
      return t.value(t.ce_mean(lo, 0, {1, 2, 0, 4})).data[0];
    };
    Tape<double> t;
    const int xi = t.leaf(xv);
    t.label("x", xi);
    const int p = t.causal_softmax(xi);
    const int lo = t.matmul_nn(p, t.leaf(w));
    const int loss = t.ce_mean(lo, 0, {1, 2, 0, 4});
    auto res = t.backward(loss, nullptr, HookSet<double>{}, {{"x"}, false});
    CHECK(max_rel_err(res.grads.at("x"), finite_diff_grad(f, xv, 1e-6)) < 1e-4);
  }

  SUBCASE("silu_mul wrt both inputs") {
    Tensor<double> av = random_matrix(2, 6, rng);
    Tensor<double> bv = random_matrix(2, 6, rng);
    Tensor<double> w = random_matrix(6, 4, rng);
    auto build = [&](Tape<double>& t, const Tensor<double>& a,
                     const Tensor<double>& b) {
      const int ai = t.leaf(a);
      t.label("a", ai);
      const int bi = t.leaf(b);
      t.label("b", bi);
      const int y = t.silu_mul(ai, bi);
      const int lo = t.matmul_nn(y, t.leaf(w));
      return t.ce_mean(lo, 0, {3, 1});
    };
    Tape<double> t;
    const int loss = build(t, av, bv);
    auto res = t.backward(loss, nullptr, HookSet<double>{}, {{"a", "b"}, false});
    auto fa = [&](const Tensor<double>& a) {
      Tape<double> tt;
      return tt.value(build(tt, a, bv)).data[0];
    };
    auto fb = [&](const Tensor<double>& b) {
      Tape<double> tt;
      return tt.value(build(tt, av, b)).data[0];
    };
    CHECK(max_rel_err(res.grads.at("a"), finite_diff_grad(fa, av, 1e-6)) < 1e-4);
    CHECK(max_rel_err(res.grads.at("b"), finite_diff_grad(fb, bv, 1e-6)) < 1e-4);
  }

  SUBCASE("col slice / concat round trip") {
    Tensor<double> xv = random_matrix(3, 6, rng);
    Tensor<double> w = random_matrix(6, 4, rng);
    auto build = [&](Tape<double>& t, const Tensor<double>& x) {
      const int xi = t.leaf(x);
      t.label("x", xi);
      const int left = t.take_cols(xi, 0, 3);
      const int right = t.take_cols(xi, 3, 3);
      const int back = t.concat_cols({right, left});
      const int lo = t.matmul_nn(back, t.leaf(w));
      return t.ce_mean(lo, 0, {2, 0, 1});
    };
    Tape<double> t;
    const int loss = build(t, xv);
    auto res = t.backward(loss, nullptr, HookSet<double>{}, {{"x"}, false});
    auto f = [&](const Tensor<double>& x) {
      Tape<double> tt;
      return tt.value(build(tt, x)).data[0];
    };
    CHECK(max_rel_err(res.grads.at("x"), finite_diff_grad(f, xv, 1e-6)) < 1e-4);
  }
}
