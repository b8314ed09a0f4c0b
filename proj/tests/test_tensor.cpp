#include "doctest.h"

#include "fd_check.hpp"
#include "sdvlm/ops.hpp"
#include "sdvlm/rng.hpp"
#include "sdvlm/tensor.hpp"

#include <cmath>
#include <stdexcept>

using namespace sdvlm;

namespace {

fdcheck::Leaf rand_leaf(Dims dims, Rng& rng) {
  std::vector<double> v(dims.numel());
  for (double& x : v) x = rng.gauss(0.0, 1.0);
  return {dims, v};
}

// Random projection turns a non-scalar op output into a scalar loss so the
// backward pass is exercised with a dense cotangent.
Tensor project(Tape& t, const Tensor& y, Rng& rng) {
  std::vector<double> r(y.dims().numel());
  for (double& x : r) x = rng.gauss(0.0, 1.0);
  return sum_all(mul(y, t.constant(y.dims(), r)));
}

constexpr double kTol = 1e-4;  // per-op FD tolerance pinned by the test suite

}  // namespace

TEST_CASE("matmul gradient matches finite differences on random 3x3") {
  Rng rng(101);
  auto rep = fdcheck::check(
      [](Tape& t, const std::vector<Tensor>& xs) {
        (void)t;
        return sum_all(matmul(xs[0], xs[1]));
      },
      {rand_leaf(Dims{3, 3}, rng), rand_leaf(Dims{3, 3}, rng)});
  CHECK(rep.checked == 18);
  CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("matmul gradient with random cotangent, rectangular") {
  Rng rng(102);
  Rng prng(103);
  auto rep = fdcheck::check(
      [&prng](Tape& t, const std::vector<Tensor>& xs) {
        Rng local(prng.state_copy());
        return project(t, matmul(xs[0], xs[1]), local);
      },
      {rand_leaf(Dims{2, 4}, rng), rand_leaf(Dims{4, 3}, rng)});
  CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("elementwise ops match finite differences on random 2x3") {
  Rng rng(104);
  Rng prng(105);
  auto run = [&](auto opfn, int nleaves) {
    std::vector<fdcheck::Leaf> leaves;
    for (int i = 0; i < nleaves; ++i) leaves.push_back(rand_leaf(Dims{2, 3}, rng));
    auto rep = fdcheck::check(
        [&](Tape& t, const std::vector<Tensor>& xs) {
          Rng local(prng.state_copy());
          return project(t, opfn(t, xs), local);
        },
        leaves);
    CHECK(rep.max_rel_err < kTol);
  };
  run([](Tape&, const std::vector<Tensor>& xs) { return add(xs[0], xs[1]); }, 2);
  run([](Tape&, const std::vector<Tensor>& xs) { return sub(xs[0], xs[1]); }, 2);
  run([](Tape&, const std::vector<Tensor>& xs) { return mul(xs[0], xs[1]); }, 2);
  run([](Tape&, const std::vector<Tensor>& xs) { return scale(xs[0], -1.7); }, 1);
  run([](Tape&, const std::vector<Tensor>& xs) { return gelu(xs[0]); }, 1);
  run([](Tape&, const std::vector<Tensor>& xs) { return transpose(xs[0]); }, 1);
}

TEST_CASE("add_bias broadcasts over rows and its gradient column-sums") {
  Rng rng(106);
  Rng prng(107);
  auto rep = fdcheck::check(
      [&prng](Tape& t, const std::vector<Tensor>& xs) {
        Rng local(prng.state_copy());
        return project(t, add_bias(xs[0], xs[1]), local);
      },
      {rand_leaf(Dims{2, 3}, rng), rand_leaf(Dims{3}, rng)});
  CHECK(rep.max_rel_err < kTol);

  Tape t;
  Tensor a = t.constant(Dims{2, 2}, {1, 2, 3, 4});
  Tensor b = t.constant(Dims{2}, {10, 20});
  Tensor y = add_bias(a, b);
  CHECK(y.val() == std::vector<double>{11, 22, 13, 24});
}

TEST_CASE("concat and slice match finite differences and round-trip") {
  Rng rng(108);
  Rng prng(109);
  for (int axis : {0, 1}) {
    auto rep = fdcheck::check(
        [&prng, axis](Tape& t, const std::vector<Tensor>& xs) {
          Rng local(prng.state_copy());
          return project(t, concat(xs[0], xs[1], axis), local);
        },
        {rand_leaf(Dims{2, 3}, rng), rand_leaf(Dims{2, 3}, rng)});
    CHECK(rep.max_rel_err < kTol);
    auto rep2 = fdcheck::check(
        [&prng, axis](Tape& t, const std::vector<Tensor>& xs) {
          Rng local(prng.state_copy());
          return project(t, slice(xs[0], axis, 1, 1), local);
        },
        {rand_leaf(Dims{2, 3}, rng)});
    CHECK(rep2.max_rel_err < kTol);
  }

  Tape t;
  Tensor a = t.constant(Dims{2, 2}, {1, 2, 3, 4});
  Tensor b = t.constant(Dims{2, 2}, {5, 6, 7, 8});
  CHECK(slice(concat(a, b, 0), 0, 0, 2).val() == a.val());
  CHECK(slice(concat(a, b, 0), 0, 2, 2).val() == b.val());
  CHECK(slice(concat(a, b, 1), 1, 2, 2).val() == b.val());

  Tensor v = t.constant(Dims{4}, {1, 2, 3, 4});
  CHECK(slice(v, 0, 1, 2).val() == std::vector<double>{2, 3});
}

TEST_CASE("gather_rows forward and scatter-add backward") {
  Rng rng(110);
  Rng prng(111);
  auto rep = fdcheck::check(
      [&prng](Tape& t, const std::vector<Tensor>& xs) {
        Rng local(prng.state_copy());
        return project(t, gather_rows(xs[0], {2, 0, 2}), local);
      },
      {rand_leaf(Dims{3, 2}, rng)});
  CHECK(rep.max_rel_err < kTol);

  Tape t;
  Tensor tab = t.constant(Dims{3, 2}, {1, 2, 3, 4, 5, 6});
  CHECK(gather_rows(tab, {2, 0}).val() == std::vector<double>{5, 6, 1, 2});
  CHECK_THROWS_AS(gather_rows(tab, {3}), std::invalid_argument);
}

TEST_CASE("sum and mean reductions match finite differences") {
  Rng rng(112);
  auto rep = fdcheck::check(
      [](Tape&, const std::vector<Tensor>& xs) { return sum_all(xs[0]); },
      {rand_leaf(Dims{2, 3}, rng)});
  CHECK(rep.max_rel_err < kTol);
  auto rep2 = fdcheck::check(
      [](Tape&, const std::vector<Tensor>& xs) { return mean_all(xs[0]); },
      {rand_leaf(Dims{2, 3}, rng)});
  CHECK(rep2.max_rel_err < kTol);
}

TEST_CASE("layer_norm gradient matches finite differences for x, gamma, beta") {
  Rng rng(113);
  Rng prng(114);
  auto rep = fdcheck::check(
      [&prng](Tape& t, const std::vector<Tensor>& xs) {
        Rng local(prng.state_copy());
        return project(t, layer_norm(xs[0], xs[1], xs[2]), local);
      },
      {rand_leaf(Dims{2, 3}, rng), rand_leaf(Dims{3}, rng), rand_leaf(Dims{3}, rng)});
  CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("layer_norm of a constant row is all zeros before the affine part") {
  Tape t;
  Tensor x = t.constant(Dims{1, 4}, {3.7, 3.7, 3.7, 3.7});
  Tensor g = t.constant(Dims{4}, {1, 1, 1, 1});
  Tensor b = t.constant(Dims{4}, {0, 0, 0, 0});
  for (double v : layer_norm(x, g, b).val()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one and stay finite for huge logits") {
  Tape t;
  Tensor x = t.constant(Dims{2, 3}, {1e4, 1e4 - 2, 3.0, -1e4, 0.0, 1.0});
  Tensor s = softmax(x);
  const auto& v = s.val();
  for (double e : v) CHECK(std::isfinite(e));
  CHECK(v[0] + v[1] + v[2] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(v[3] + v[4] + v[5] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("softmax gradient matches finite differences along both axes") {
  Rng rng(115);
  Rng prng(116);
  for (int axis : {-1, 0, 1}) {
    auto rep = fdcheck::check(
        [&prng, axis](Tape& t, const std::vector<Tensor>& xs) {
          Rng local(prng.state_copy());
          return project(t, softmax(xs[0], axis), local);
        },
        {rand_leaf(Dims{2, 3}, rng)});
    CHECK(rep.max_rel_err < kTol);
  }
}

TEST_CASE("kl_divergence is zero on itself, nonnegative, and differentiates through q") {
  Tape t;
  Tensor p = t.constant(Dims{2, 3}, {0.3, -1.0, 2.0, 0.0, 0.1, -0.2});
  CHECK(kl_divergence(p, p).item() == doctest::Approx(0.0).epsilon(1e-12));

  Rng rng(117);
  fdcheck::Leaf pl = rand_leaf(Dims{2, 4}, rng);
  fdcheck::Leaf ql = rand_leaf(Dims{2, 4}, rng);
  {
    Tape t2;
    Tensor pp = t2.constant(pl.dims, pl.val);
    Tensor qq = t2.constant(ql.dims, ql.val);
    CHECK(kl_divergence(pp, qq).item() >= 0.0);
  }
  auto rep = fdcheck::check(
      [&pl](Tape& tt, const std::vector<Tensor>& xs) {
        return kl_divergence(tt.constant(pl.dims, pl.val), xs[0]);
      },
      {ql});
  CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("kl_divergence treats the p side as detached") {
  Rng rng(118);
  Tape t;
  fdcheck::Leaf pl = rand_leaf(Dims{2, 3}, rng);
  fdcheck::Leaf ql = rand_leaf(Dims{2, 3}, rng);
  Tensor p = t.leaf(pl.dims, pl.val, true);
  Tensor q = t.leaf(ql.dims, ql.val, true);
  t.backward(kl_divergence(p, q));
  for (double g : p.grad()) CHECK(g == 0.0);
  double qnorm = 0.0;
  for (double g : q.grad()) qnorm += g * g;
  CHECK(qnorm > 0.0);
}

TEST_CASE("mse value and 2(b-a)/n gradient match finite differences") {
  Rng rng(119);
  fdcheck::Leaf al = rand_leaf(Dims{2, 3}, rng);
  fdcheck::Leaf bl = rand_leaf(Dims{2, 3}, rng);

  auto rep = fdcheck::check(
      [&al](Tape& t, const std::vector<Tensor>& xs) {
        return mse(t.constant(al.dims, al.val), xs[0]);
      },
      {bl});
  CHECK(rep.max_rel_err < kTol);

  Tape t;
  Tensor a = t.leaf(al.dims, al.val, true);
  Tensor b = t.leaf(bl.dims, bl.val, true);
  t.backward(mse(a, b));
  for (size_t i = 0; i < bl.val.size(); ++i) {
    double expect = 2.0 * (bl.val[i] - al.val[i]) / double(bl.val.size());
    CHECK(b.grad()[i] == doctest::Approx(expect).epsilon(1e-12));
    CHECK(a.grad()[i] == 0.0);  // target side is detached by contract
  }
}

TEST_CASE("cross_entropy equals -log softmax at the target and matches finite differences") {
  Tape t;
  Tensor logits = t.constant(Dims{2, 3}, {1.0, 2.0, 3.0, 0.5, 0.5, 0.5});
  double expect = -(1.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)));
  CHECK(cross_entropy(logits, {0}, {0}).item() == doctest::Approx(expect).epsilon(1e-12));

  Rng rng(120);
  auto rep = fdcheck::check(
      [](Tape&, const std::vector<Tensor>& xs) {
        return cross_entropy(xs[0], {2, 0}, {0, 1});
      },
      {rand_leaf(Dims{2, 3}, rng)});
  CHECK(rep.max_rel_err < kTol);
}

TEST_CASE("op shape mismatches throw and name both shapes") {
  Tape t;
  Tensor a = t.constant(Dims{2, 3}, std::vector<double>(6, 0.0));
  Tensor b = t.constant(Dims{3, 2}, std::vector<double>(6, 0.0));
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("[3x2]"), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, t.constant(Dims{2, 2}, std::vector<double>(4, 0.0))),
                  std::invalid_argument);
  CHECK_THROWS_AS(slice(a, 0, 1, 5), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(a, {0}, {5}), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy(a, {9}, {0}), std::invalid_argument);
  CHECK_THROWS_AS(t.backward(a), std::invalid_argument);  // non-scalar loss
}

TEST_CASE("a node used twice accumulates both gradient paths") {
  // y = x*x + 3x  =>  dy/dx = 2x + 3
  Tape t;
  Tensor x = t.leaf(Dims{2}, {1.5, -0.5}, true);
  Tensor y = sum_all(add(mul(x, x), scale(x, 3.0)));
  t.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(2 * 1.5 + 3).epsilon(1e-12));
  CHECK(x.grad()[1] == doctest::Approx(2 * -0.5 + 3).epsilon(1e-12));
}

TEST_CASE("repeated backward accumulates until zero_grad") {
  Tape t;
  Tensor x = t.leaf(Dims{2}, {1.0, 2.0}, true);
  Tensor loss = sum_all(mul(x, x));
  t.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  t.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(4.0));  // accumulated
  t.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("frozen leaves keep an all-zero gradient buffer") {
  Tape t;
  Tensor frozen = t.leaf(Dims{2}, {1.0, 2.0}, false);
  Tensor live = t.leaf(Dims{2}, {3.0, 4.0}, true);
  t.backward(sum_all(mul(frozen, live)));
  CHECK(frozen.grad().size() == 2);
  for (double g : frozen.grad()) CHECK(g == 0.0);
  CHECK(live.grad()[0] == doctest::Approx(1.0));
}

TEST_CASE("param bindings round-trip gradients into Param::grad") {
  Param p("w", Dims{2, 2});
  p.val = {1.0, 2.0, 3.0, 4.0};
  {
    Tape t;
    Tensor w = t.leaf(p);
    t.backward(sum_all(mul(w, w)));
    t.collect_param_grads();
  }
  CHECK(p.grad[0] == doctest::Approx(2.0));
  CHECK(p.grad[3] == doctest::Approx(8.0));

  // a second tape accumulates on top
  {
    Tape t;
    Tensor w = t.leaf(p);
    t.backward(sum_all(w));
    t.collect_param_grads();
  }
  CHECK(p.grad[0] == doctest::Approx(3.0));
  CHECK(p.grad_norm() > 0.0);

  // per-binding grads come back in insertion order
  Param q("q", Dims{2});
  {
    Tape t;
    Tensor w = t.leaf(p);
    Tensor v = t.leaf(q);
    t.backward(add(sum_all(w), sum_all(v)));
    auto gs = t.param_grads();
    REQUIRE(gs.size() == 2);
    CHECK(gs[0].first == &p);
    CHECK(gs[1].first == &q);
    CHECK(gs[0].second == std::vector<double>(4, 1.0));
  }
}

TEST_CASE("non-trainable Param leaves do not require grad") {
  Param p("frozen", Dims{2}, /*train=*/false);
  p.val = {1.0, 2.0};
  Tape t;
  Tensor w = t.leaf(p);
  CHECK_FALSE(w.requires_grad());
  Tensor live = t.leaf(Dims{2}, {1.0, 1.0}, true);
  t.backward(sum_all(mul(w, live)));
  t.collect_param_grads();
  for (double g : p.grad) CHECK(g == 0.0);
}

TEST_CASE("no-grad tapes run the same forward values and skip backward") {
  std::vector<double> xv = {0.3, -1.2, 0.7, 2.2, -0.4, 0.9};
  auto fwd = [&](bool grad_on) {
    Tape t(grad_on);
    Tensor x = t.leaf(Dims{2, 3}, xv, true);
    Tensor g = t.constant(Dims{3}, {1, 1, 1});
    Tensor b = t.constant(Dims{3}, {0, 0, 0});
    return mean_all(gelu(layer_norm(x, g, b))).item();
  };
  double on = fwd(true), off = fwd(false);
  CHECK(on == off);  // bitwise: same code path, only recording differs

  Tape t(false);
  Tensor x = t.leaf(Dims{2, 3}, xv, true);
  CHECK_FALSE(x.requires_grad());
  Tensor loss = mean_all(x);
  t.backward(loss);  // nothing reachable: silently a no-op
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("detach cuts the graph") {
  Tape t;
  Tensor x = t.leaf(Dims{2}, {2.0, 3.0}, true);
  Tensor d = detach(x);
  CHECK_FALSE(d.requires_grad());
  CHECK(d.val() == x.val());
  Tensor live = t.leaf(Dims{2}, {1.0, 1.0}, true);
  t.backward(sum_all(mul(d, live)));
  for (double g : x.grad()) CHECK(g == 0.0);
}

TEST_CASE("composite chain matches finite differences (jvp-style projection)") {
  Rng rng(121);
  Rng prng(122);
  auto rep = fdcheck::check(
      [&prng](Tape& t, const std::vector<Tensor>& xs) {
        Tensor h = layer_norm(xs[0], xs[1], xs[2]);
        Tensor y = softmax(matmul(gelu(h), xs[3]));
        Rng local(prng.state_copy());
        return project(t, y, local);
      },
      {rand_leaf(Dims{2, 3}, rng), rand_leaf(Dims{3}, rng), rand_leaf(Dims{3}, rng),
       rand_leaf(Dims{3, 4}, rng)});
  CHECK(rep.max_rel_err < kTol);
}
