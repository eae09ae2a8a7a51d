// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>

#include "cotrain/gradcheck.hpp"
#include "cotrain/ops.hpp"
#include "cotrain/params.hpp"
#include "cotrain/rng.hpp"

using namespace cotrain;
using namespace cotrain::diff;

namespace {

// analytic-vs-central-difference comparison driver; lossfn must be pure
// when called without a record
void check_grads(ParameterStore& store,
                 const std::function<Tensor(ComputationRecord*, ParameterStore&)>& lossfn,
                 double tol) {
  store.zero_grads();
  ComputationRecord rec;
  store.watch_all(rec);
  Tensor loss = lossfn(&rec, store);
  rec.backward(loss);
  store.harvest(rec);
  rec.clear();
  auto numeric = finite_diff_grad([&](ParameterStore& s) { return lossfn(nullptr, s).value(); }, store);
  double err = max_rel_grad_err(store, numeric);
  INFO("max rel grad err = " << err);
  REQUIRE(err <= tol);
}

Tensor random_tensor(int r, int c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (double& x : *t.data) x = rng.normal(0.0, scale);
  return t;
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
  Tensor eye(2, 2, {1, 0, 0, 1});
  Tensor a(2, 2, {1, 2, 3, 4});
  Tensor out = matmul(nullptr, eye, a);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) REQUIRE(out.at(i, j) == a.at(i, j));

  Tensor row(1, 2, {1, 2});
  Tensor zero_col(2, 1, {0, 0});
  Tensor z = matmul(nullptr, row, zero_col);
  REQUIRE(z.rows == 1);
  REQUIRE(z.cols == 1);
  REQUIRE(z.value() == 0.0);
}

TEST_CASE("matmul rejects shape mismatch naming both shapes") {
  Tensor a(2, 3);
  Tensor b(4, 2);
  try {
    matmul(nullptr, a, b);
    FAIL("expected throw");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("[2x3]") != std::string::npos);
    REQUIRE(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient matches central finite differences") {
  Rng rng(42);
  ParameterStore store;
  store.add("a", random_tensor(3, 3, rng));
  store.add("b", random_tensor(3, 3, rng));
  check_grads(
      store,
      [](ComputationRecord* rec, ParameterStore& s) {
        return sum_all(rec, matmul(rec, s.at("a"), s.at("b")));
      },
      1e-6);
}

TEST_CASE("softmax uniform, stability, and formula oracle") {
  Tensor two(1, 2, {0, 0});
  Tensor s2 = softmax_rows(nullptr, two);
  REQUIRE(s2.at(0, 0) == Catch::Approx(0.5).margin(1e-15));
  REQUIRE(s2.at(0, 1) == Catch::Approx(0.5).margin(1e-15));

  Tensor big(1, 2, {1000, 0});
  Tensor sb = softmax_rows(nullptr, big);
  REQUIRE(std::isfinite(sb.at(0, 0)));
  REQUIRE(sb.at(0, 0) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(sb.at(0, 1) >= 0.0);

  Tensor x(1, 3, {1, 2, 3});
  Tensor y = softmax_rows(nullptr, x);
  double e1 = std::exp(1.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  double sum = e1 + e2 + e3;
  REQUIRE(std::abs(y.at(0, 0) - e1 / sum) <= 1e-12);
  REQUIRE(std::abs(y.at(0, 1) - e2 / sum) <= 1e-12);
  REQUIRE(std::abs(y.at(0, 2) - e3 / sum) <= 1e-12);
}

TEST_CASE("softmax rows sum to one and stay nonnegative") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    int r = 1 + static_cast<int>(rng.below(5));
    int c = 2 + static_cast<int>(rng.below(8));
    Tensor x = random_tensor(r, c, rng, 5.0);
    Tensor y = softmax_rows(nullptr, x);
    for (int i = 0; i < r; ++i) {
      double s = 0.0;
      for (int j = 0; j < c; ++j) {
        REQUIRE(y.at(i, j) >= 0.0);
        s += y.at(i, j);
      }
      REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
  }
}

TEST_CASE("layer_norm constant slice and zero gain") {
  Tensor x(1, 3, {4.2, 4.2, 4.2});
  Tensor gain(1, 3, {1, 1, 1});
  Tensor bias(1, 3, {0, 0, 0});
  Tensor y = layer_norm(nullptr, x, gain, bias, 1e-5);
  for (int j = 0; j < 3; ++j) REQUIRE(y.at(0, j) == Catch::Approx(0.0).margin(1e-12));

  Rng rng(3);
  Tensor xr = random_tensor(2, 5, rng);
  Tensor g0(1, 5);
  Tensor b(1, 5, {1, 2, 3, 4, 5});
  Tensor yb = layer_norm(nullptr, xr, g0, b, 1e-5);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 5; ++j) REQUIRE(yb.at(i, j) == b.at(0, j));
}

TEST_CASE("layer_norm normalises each slice before the affine map") {
  Rng rng(11);
  Tensor x = random_tensor(4, 8, rng, 3.0);
  Tensor gain(1, 8);
  for (double& v : *gain.data) v = 1.0;
  Tensor bias(1, 8);
  Tensor y = layer_norm(nullptr, x, gain, bias, 1e-12);
  for (int i = 0; i < 4; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 8; ++j) mean += y.at(i, j);
    mean /= 8;
    for (int j = 0; j < 8; ++j) var += (y.at(i, j) - mean) * (y.at(i, j) - mean);
    var /= 8;
    REQUIRE(std::abs(mean) <= 1e-10);
    REQUIRE(std::abs(var - 1.0) <= 1e-8);
  }
}

TEST_CASE("layer_norm gradient matches finite differences") {
  Rng rng(5);
  ParameterStore store;
  store.add("x", random_tensor(3, 6, rng));
  store.add("g", random_tensor(1, 6, rng));
  store.add("b", random_tensor(1, 6, rng));
  check_grads(
      store,
      [](ComputationRecord* rec, ParameterStore& s) {
        Tensor y = layer_norm(rec, s.at("x"), s.at("g"), s.at("b"), 1e-5);
        // square via mul to exercise a nonlinear consumer
        return sum_all(rec, mul(rec, y, y));
      },
      1e-6);
}

TEST_CASE("cross_entropy uniform two-class equals ln 2") {
  Tensor logits(1, 2, {0, 0});
  Tensor ce = cross_entropy(nullptr, logits, {0}, {true});
  REQUIRE(ce.value() == Catch::Approx(0.6931471805599453).epsilon(1e-12));
}

TEST_CASE("cross_entropy saturated logit is near zero loss") {
  Tensor logits(1, 4);
  logits.at(0, 2) = 1e6;
  Tensor ce = cross_entropy(nullptr, logits, {2}, {true});
  REQUIRE(ce.value() >= 0.0);
  REQUIRE(ce.value() <= 1e-9);
}

TEST_CASE("cross_entropy matches direct float64 evaluation") {
  Rng rng(17);
  Tensor logits = random_tensor(4, 8, rng, 2.0);
  std::vector<int> targets = {3, 0, 7, 5};
  std::vector<bool> mask = {true, true, false, true};
  Tensor ce = cross_entropy(nullptr, logits, targets, mask);
  double expect = 0.0;
  int n = 0;
  for (int i = 0; i < 4; ++i) {
    if (!mask[i]) continue;
    double mx = logits.at(i, 0);
    for (int j = 1; j < 8; ++j) mx = std::max(mx, logits.at(i, j));
    double s = 0.0;
    for (int j = 0; j < 8; ++j) s += std::exp(logits.at(i, j) - mx);
    expect += mx + std::log(s) - logits.at(i, targets[i]);
    ++n;
  }
  expect /= n;
  REQUIRE(std::abs(ce.value() - expect) <= 1e-12);
}

TEST_CASE("cross_entropy rejects out-of-range targets and empty masks") {
  Tensor logits(2, 4);
  REQUIRE_THROWS_AS(cross_entropy(nullptr, logits, {0, 4}, {true, true}), std::invalid_argument);
  REQUIRE_THROWS_AS(cross_entropy(nullptr, logits, {0, 1}, {false, false}), std::invalid_argument);
}

TEST_CASE("backward of sum gives ones; unreached parameters get zeros") {
  ParameterStore store;
  store.add_const("p", 2, 3, 1.5);
  store.add_const("q", 1, 4, -2.0);
  ComputationRecord rec;
  store.watch_all(rec);
  Tensor loss = sum_all(&rec, store.at("p"));
  rec.backward(loss);
  store.harvest(rec);
  rec.clear();
  for (double g : store.param("p").grad) REQUIRE(g == 1.0);
  for (double g : store.param("q").grad) REQUIRE(g == 0.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  ParameterStore store;
  store.add_const("p", 2, 2, 1.0);
  ComputationRecord rec;
  store.watch_all(rec);
  Tensor y = scale(&rec, store.at("p"), 2.0);
  REQUIRE_THROWS_AS(rec.backward(y), std::invalid_argument);
  rec.clear();
}

TEST_CASE("elementwise and structural ops pass randomized gradient checks") {
  Rng rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    ParameterStore store;
    int m = 2 + static_cast<int>(rng.below(3));
    int n = 2 + static_cast<int>(rng.below(4));
    store.add("a", random_tensor(m, n, rng));
    store.add("b", random_tensor(m, n, rng));
    store.add("v", random_tensor(1, n, rng));
    check_grads(
        store,
        [](ComputationRecord* rec, ParameterStore& s) {
          Tensor t = add(rec, s.at("a"), s.at("b"));
          t = mul(rec, t, s.at("a"));
          t = sub(rec, t, s.at("b"));
          t = add_rowvec(rec, t, s.at("v"));
          t = gelu(rec, t);
          t = transpose(rec, t);
          return mean_all(rec, t);
        },
        1e-5);
  }
}

TEST_CASE("concat, slice, gather, tile and clamp gradients") {
  Rng rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    ParameterStore store;
    store.add("a", random_tensor(3, 4, rng));
    store.add("b", random_tensor(3, 2, rng));
    store.add("c", random_tensor(2, 6, rng));
    store.add("z", random_tensor(1, 6, rng));
    check_grads(
        store,
        [](ComputationRecord* rec, ParameterStore& s) {
          Tensor cat = concat_cols(rec, {s.at("a"), s.at("b")});   // 3 x 6
          Tensor rows = concat_rows(rec, {cat, s.at("c")});        // 5 x 6
          Tensor picked = gather_rows(rec, rows, {0, 2, 2, 4});    // 4 x 6
          Tensor tiled = tile_rows(rec, s.at("z"), 4);
          Tensor both = add(rec, picked, tiled);
          Tensor clamped = clamp(rec, both, -1.2, 1.2);
          Tensor left = slice_cols(rec, clamped, 1, 3);
          Tensor pooled = mean_rows(rec, left);
          return sum_all(rec, mul(rec, pooled, pooled));
        },
        1e-5);
  }
}

TEST_CASE("softmax and exp gradients") {
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    ParameterStore store;
    store.add("x", random_tensor(3, 5, rng, 1.5));
    check_grads(
        store,
        [](ComputationRecord* rec, ParameterStore& s) {
          Tensor y = softmax_rows(rec, s.at("x"));
          Tensor e = diff::exp(rec, scale(rec, s.at("x"), 0.3));
          return sum_all(rec, mul(rec, y, e));
        },
        1e-5);
  }
}

TEST_CASE("cross_entropy gradient matches finite differences") {
  Rng rng(37);
  ParameterStore store;
  store.add("logits", random_tensor(5, 6, rng, 2.0));
  check_grads(
      store,
      [](ComputationRecord* rec, ParameterStore& s) {
        return cross_entropy(rec, s.at("logits"), {1, 5, 0, 3, 3},
                             {true, true, false, true, true});
      },
      1e-6);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  ParameterStore store;
  Rng rng(1);
  store.add("w", random_tensor(2, 2, rng));
  std::vector<double> before = *store.at("w").data;
  adam_step(store, 0.01);
  REQUIRE(store.step_count() == 1);
  for (int i = 0; i < 4; ++i) REQUIRE((*store.at("w").data)[i] == before[i]);
}

TEST_CASE("adam: first step magnitude is about lr") {
  ParameterStore store;
  store.add_const("w", 1, 1, 0.0);
  store.param("w").grad[0] = 1.0;
  adam_step(store, 1e-3);
  REQUIRE(std::abs(-store.at("w").value() - 1e-3) <= 1e-9);
  REQUIRE(store.param("w").grad[0] == 0.0);
}

TEST_CASE("adam: 3-step trajectory matches a hand-rolled oracle") {
  const double lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ParameterStore store;
  store.add_const("w", 1, 1, 3.0);

  // independent float64 Adam on f(x) = x^2
  double x = 3.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    double g = 2.0 * x;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    x -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
  }

  for (int t = 0; t < 3; ++t) {
    store.param("w").grad[0] = 2.0 * store.at("w").value();
    adam_step(store, lr, b1, b2, eps);
  }
  REQUIRE(std::abs(store.at("w").value() - x) <= 1e-12);
}

TEST_CASE("adam with lr=0 is the identity on values") {
  Rng rng(13);
  ParameterStore store;
  store.add("w", random_tensor(3, 3, rng));
  for (double& g : store.param("w").grad) g = 0.7;
  std::vector<double> before = *store.at("w").data;
  adam_step(store, 0.0);
  for (std::size_t i = 0; i < before.size(); ++i) REQUIRE((*store.at("w").data)[i] == before[i]);
}

TEST_CASE("finite differences on theta^2 and on a constant") {
  ParameterStore store;
  store.add_const("theta", 1, 1, 3.0);
  auto g = finite_diff_grad(
      [](ParameterStore& s) { return s.at("theta").value() * s.at("theta").value(); }, store, 1e-5);
  REQUIRE(std::abs(g.at("theta")[0] - 6.0) <= 1e-8);

  auto gc = finite_diff_grad([](ParameterStore&) { return 4.25; }, store, 1e-5);
  REQUIRE(gc.at("theta")[0] == 0.0);
}

TEST_CASE("identical inputs and noise produce bit-identical losses") {
  auto run = [] {
    Rng rng(99);
    ParameterStore store;
    store.add("a", random_tensor(4, 4, rng));
    store.add("b", random_tensor(4, 4, rng));
    ComputationRecord rec;
    store.watch_all(rec);
    Tensor h = gelu(&rec, matmul(&rec, store.at("a"), store.at("b")));
    Tensor loss = mean_all(&rec, mul(&rec, h, h));
    rec.backward(loss);
    store.harvest(rec);
    rec.clear();
    return std::make_pair(loss.value(), store.param("a").grad);
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  REQUIRE(l1 == l2);
  REQUIRE(g1 == g2);
}

TEST_CASE("record is cleared after use and can be rebuilt") {
  ParameterStore store;
  store.add_const("p", 1, 3, 2.0);
  for (int step = 0; step < 3; ++step) {
    ComputationRecord rec;
    store.watch_all(rec);
    Tensor loss = sum_all(&rec, mul(&rec, store.at("p"), store.at("p")));
    rec.backward(loss);
    store.harvest(rec);
    rec.clear();
    REQUIRE(rec.size() == 0);
    for (double g : store.param("p").grad) REQUIRE(g == Catch::Approx(4.0).margin(1e-12));
    store.zero_grads();
  }
}
