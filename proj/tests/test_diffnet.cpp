#include <cmath>
#include <random>

#include "doctest.h"
#include "test_support.hpp"
#include "ttyd/diffnet.hpp"
#include "ttyd/errors.hpp"

using namespace ttyd;
using ttyd::testing::random_matrix;
using ttyd::testing::random_param;

namespace {

// Sum of out * r for a fixed random r: a generic scalar probe of a layer.
double probe(const Tensor& out, const Tensor& r) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.data.size(); ++i) s += out.data[i] * r.data[i];
  return s;
}

}  // namespace

TEST_CASE("linear_forward small cases") {
  Param eye(Tensor::from_rows({{1, 0}, {0, 1}}));
  Param zero(Tensor::vector({0, 0}));
  CHECK(linear_forward(Tensor::from_rows({{1, 2}}), eye, zero) ==
        Tensor::from_rows({{1, 2}}));
  Param w(Tensor::from_rows({{1}, {1}}));
  Param b(Tensor::vector({1}));
  CHECK(linear_forward(Tensor::from_rows({{1, 1}}), w, b).data ==
        std::vector<double>{3.0});
}

TEST_CASE("linear_forward rejects shape mismatch") {
  Param w(Tensor::matrix(3, 2));
  Param b(Tensor::vector({0, 0}));
  CHECK_THROWS_AS(linear_forward(Tensor::matrix(1, 2), w, b), ConfigError);
}

TEST_CASE("linear backward matches finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    Param x(random_matrix(rng, 5, 4));
    Param w = random_param(rng, {4, 3});
    Param b = random_param(rng, {3});
    const Tensor r = random_matrix(rng, 5, 3);
    x.zero_grad();
    w.zero_grad();
    b.zero_grad();
    x.grad = linear_backward(x.value, r, w, b);
    Param* ps[] = {&x, &w, &b};
    const double err = grad_check(
        [&] { return probe(linear_forward(x.value, w, b), r); }, ps);
    CHECK(err < 1e-6);
  }
}

TEST_CASE("batchnorm TrainBatch normalizes and updates running statistics") {
  std::mt19937_64 rng(3);
  Tensor x = random_matrix(rng, 32, 4, 3.0);
  for (std::size_t i = 0; i < 32; ++i) x.at(i, 1) += 5.0;
  BnStats stats = BnStats::identity(4);
  const Tensor y = batchnorm_forward(x, stats, BnMode::TrainBatch);
  for (std::size_t c = 0; c < 4; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < 32; ++i) mean += y.at(i, c);
    mean /= 32;
    for (std::size_t i = 0; i < 32; ++i) var += (y.at(i, c) - mean) * (y.at(i, c) - mean);
    var /= 32;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
  CHECK(stats.running_mean[1] > 0.3);
  CHECK_FALSE(stats == BnStats::identity(4));
}

TEST_CASE("batchnorm EvalRunning and EvalBatch leave statistics untouched") {
  std::mt19937_64 rng(4);
  const Tensor x = random_matrix(rng, 8, 3);
  BnStats stats = BnStats::identity(3);
  stats.running_mean = {0.5, -1.0, 2.0};
  const BnStats before = stats;
  batchnorm_forward(x, stats, BnMode::EvalRunning);
  batchnorm_forward(x, stats, BnMode::EvalBatch);
  CHECK(stats == before);
  const Tensor y = batchnorm_forward(x, stats, BnMode::EvalRunning);
  CHECK(y.at(0, 0) == doctest::Approx((x.at(0, 0) - 0.5) / std::sqrt(1.0 + 1e-5)));
}

TEST_CASE("batchnorm with batch statistics needs two rows") {
  BnStats stats = BnStats::identity(2);
  CHECK_THROWS_AS(batchnorm_forward(Tensor::matrix(1, 2), stats, BnMode::TrainBatch),
                  DegenerateBatchError);
  CHECK_THROWS_AS(batchnorm_forward(Tensor::matrix(1, 2), stats, BnMode::EvalBatch),
                  DegenerateBatchError);
  CHECK_NOTHROW(batchnorm_forward(Tensor::matrix(1, 2), stats, BnMode::EvalRunning));
  const BnStats frozen = BnStats::identity(2);
  CHECK_THROWS_AS(batchnorm_forward(Tensor::matrix(4, 2), frozen, BnMode::TrainBatch),
                  ConfigError);
}

TEST_CASE("batchnorm backward matches finite differences") {
  for (BnMode mode : {BnMode::TrainBatch, BnMode::EvalBatch, BnMode::EvalRunning}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      std::mt19937_64 rng(seed + 100);
      Param x(random_matrix(rng, 6, 3, 2.0));
      const Tensor r = random_matrix(rng, 6, 3);
      BnStats stats = BnStats::identity(3);
      stats.running_mean = {0.3, -0.2, 0.1};
      stats.running_var = {1.5, 0.7, 2.0};
      const BnStats fixed = stats;
      BnCache cache;
      BnStats scratch = fixed;
      batchnorm_forward(x.value, scratch, mode, &cache);
      x.zero_grad();
      x.grad = batchnorm_backward(r, cache);
      Param* ps[] = {&x};
      const double err = grad_check(
          [&] {
            BnStats s = fixed;
            return probe(batchnorm_forward(x.value, s, mode), r);
          },
          ps);
      CHECK(err < 1e-5);
    }
  }
}

TEST_CASE("channel affine and activation backward match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed + 200);
    Param x(random_matrix(rng, 5, 4));
    Param scale = random_param(rng, {4});
    Param shift = random_param(rng, {4});
    const Tensor r = random_matrix(rng, 5, 4);
    x.zero_grad();
    scale.zero_grad();
    shift.zero_grad();
    x.grad = channel_affine_backward(x.value, r, scale, shift);
    Param* ps[] = {&x, &scale, &shift};
    CHECK(grad_check([&] { return probe(channel_affine_forward(x.value, scale, shift), r); },
                     ps) < 1e-6);

    for (Activation act : {Activation::Relu, Activation::Tanh}) {
      Param z(random_matrix(rng, 5, 4));
      const Tensor out = activation_forward(z.value, act);
      z.grad = activation_backward(out, r, act);
      Param* pz[] = {&z};
      CHECK(grad_check([&] { return probe(activation_forward(z.value, act), r); }, pz) <
            1e-6);
    }
  }
}

TEST_CASE("softmax rows are distributions") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const Tensor p = softmax(random_matrix(rng, 7, 5, 30.0));
    for (std::size_t i = 0; i < 7; ++i) {
      double s = 0.0, h = 0.0;
      for (double v : p.row(i)) {
        s += v;
        if (v > 0.0) h -= v * std::log(v);
      }
      CHECK(std::abs(s - 1.0) < 1e-12);
      CHECK(h >= 0.0);
      CHECK(h <= std::log(5.0) + 1e-12);
    }
  }
  const Tensor big = softmax(Tensor::from_rows({{1000.0, 0.0}}));
  CHECK(big.all_finite());
  CHECK(big.at(0, 0) == 1.0);
}

TEST_CASE("adamw decay-only step scales values") {
  Param p(Tensor::vector({2.0, -4.0}));
  p.zero_grad();
  Param* ps[] = {&p};
  adamw_step(ps, {.lr = 0.1, .weight_decay = 0.01});
  CHECK(p.value.data[0] == 2.0 * (1.0 - 0.1 * 0.01));
  CHECK(p.value.data[1] == -4.0 * (1.0 - 0.1 * 0.01));
  CHECK(p.step_count == 1);
}

TEST_CASE("adamw first step moves by lr against the gradient sign") {
  Param p(Tensor::vector({1.0, 1.0}));
  p.grad.data = {0.3, -7.0};
  Param* ps[] = {&p};
  adamw_step(ps, {.lr = 0.01, .weight_decay = 0.0});
  CHECK(p.value.data[0] == doctest::Approx(0.99).epsilon(1e-9));
  CHECK(p.value.data[1] == doctest::Approx(1.01).epsilon(1e-9));
}

TEST_CASE("adamw with zero gradient and zero decay is the identity") {
  Param p(Tensor::vector({0.5, -0.25, 3.0}));
  p.zero_grad();
  Param* ps[] = {&p};
  for (int i = 0; i < 5; ++i) adamw_step(ps, {.lr = 0.1, .weight_decay = 0.0});
  CHECK(p.value.data == std::vector<double>{0.5, -0.25, 3.0});
  CHECK(p.step_count == 5);
}

TEST_CASE("adamw minimizes a quadratic") {
  // Reference values from an independent scalar re-implementation of the
  // bias-corrected update (beta1 0.9, beta2 0.999, eps 1e-8).
  Param w(Tensor::vector({1.0}));
  Param* ps[] = {&w};
  auto run_to = [&](int from, int to) {
    for (int i = from; i < to; ++i) {
      w.grad.data[0] = 2.0 * w.value.data[0];
      adamw_step(ps, {.lr = 0.05, .weight_decay = 0.0});
    }
  };
  run_to(0, 100);
  CHECK(w.value.data[0] == doctest::Approx(-0.00421140038463886).epsilon(1e-9));
  run_to(100, 150);
  CHECK(std::abs(w.value.data[0]) < 1e-3);
  CHECK(w.value.data[0] == doctest::Approx(-8.666846501482443e-05).epsilon(1e-6));
}

TEST_CASE("grad_check trivial cases") {
  Param w(Tensor::vector({0.3, -1.2, 2.0}));
  for (std::size_t i = 0; i < 3; ++i) w.grad.data[i] = 2.0 * w.value.data[i];
  Param* ps[] = {&w};
  const double err = grad_check(
      [&] {
        double s = 0.0;
        for (double v : w.value.data) s += v * v;
        return s;
      },
      ps);
  CHECK(err < 1e-9);
  w.zero_grad();
  CHECK(grad_check([] { return 4.0; }, ps) == 0.0);
}
