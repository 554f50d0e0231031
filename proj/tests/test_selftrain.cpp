#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "test_support.hpp"
#include "ttyd/agreestop.hpp"
#include "ttyd/errors.hpp"
#include "ttyd/selftrain.hpp"

using namespace ttyd;
using ttyd::testing::random_matrix;

namespace {

ModelSpec small_spec() {
  ModelSpec s;
  s.input_dim = 6;
  s.hidden_dims = {10, 8};
  s.num_classes = 4;
  return s;
}

Model fixed_model(std::uint64_t seed) {
  Model m = build_model(small_spec(), seed);
  m.stats_mode = StatsMode::FixedSource;
  // Non-trivial running statistics so the EMA on them is observable.
  std::mt19937_64 rng(seed + 1000);
  std::uniform_real_distribution<double> u(0.5, 2.0);
  for (auto& l : m.layers) {
    for (double& v : l.bn.stats.running_mean) v = u(rng) - 1.0;
    for (double& v : l.bn.stats.running_var) v = u(rng);
  }
  return m;
}

std::vector<double> flat_state(const Model& m) {
  std::vector<double> out;
  for (const Param* p : m.all_params()) {
    out.insert(out.end(), p->value.data.begin(), p->value.data.end());
  }
  for (const auto& l : m.layers) {
    out.insert(out.end(), l.bn.stats.running_mean.begin(), l.bn.stats.running_mean.end());
    out.insert(out.end(), l.bn.stats.running_var.begin(), l.bn.stats.running_var.end());
  }
  return out;
}

double dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

// Plain mean cross-entropy over all rows, from log-sum-exp.
double plain_ce(const Tensor& logits, const std::vector<int>& labels) {
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto z = logits.row(i);
    double s = 0.0;
    for (double v : z) s += std::exp(v);
    total += std::log(s) - z[static_cast<std::size_t>(labels[i])];
  }
  return total / static_cast<double>(logits.rows());
}

}  // namespace

TEST_CASE("ema update endpoints") {
  Model t = fixed_model(1);
  const Model s = fixed_model(2);
  const Model t0 = clone_model(t);

  ema_update(t, s, 1.0);
  CHECK(flat_state(t) == flat_state(t0));

  ema_update(t, s, 0.0);
  CHECK(flat_state(t) == flat_state(s));

  Model other = build_model(ModelSpec{}, 3);
  CHECK_THROWS_AS(ema_update(t, other, 0.5), ConfigError);
  CHECK_THROWS_AS(ema_update(t, s, 1.5), ConfigError);
}

TEST_CASE("ema converges geometrically to a fixed student") {
  Model t = fixed_model(4);
  const Model s = fixed_model(5);
  const auto target = flat_state(s);
  for (double alpha : {0.5, 0.9, 0.99}) {
    Model tt = clone_model(t);
    double prev = dist(flat_state(tt), target);
    for (int i = 0; i < 20; ++i) {
      ema_update(tt, s, alpha);
      const double d = dist(flat_state(tt), target);
      CHECK(d / prev == doctest::Approx(alpha).epsilon(1e-9));
      prev = d;
    }
  }
}

TEST_CASE("class thresholds") {
  const std::vector<double> conf{0.9, 0.5, 0.7, 0.6, 0.8, 0.4};
  const std::vector<int> labels{0, 0, 0, 1, 1, 1};
  auto th = class_thresholds(conf, labels, 0.0, 3);
  CHECK(th == std::vector<double>{0.5, 0.4, 0.0});
  th = class_thresholds(conf, labels, 1.0, 3);
  CHECK(th == std::vector<double>{0.9, 0.8, 0.0});
  th = class_thresholds(conf, labels, 0.5, 3);
  CHECK(th[0] == doctest::Approx(0.7));
  CHECK(th[1] == doctest::Approx(0.6));
  // Interpolated quartile: sorted {0.5, 0.7, 0.9}, position 0.5.
  th = class_thresholds(conf, labels, 0.25, 3);
  CHECK(th[0] == doctest::Approx(0.6));

  const std::vector<int> single(6, 2);
  th = class_thresholds(conf, single, 0.5, 4);
  CHECK(th[0] == 0.0);
  CHECK(th[1] == 0.0);
  CHECK(th[3] == 0.0);
  CHECK(th[2] > 0.0);
  CHECK_THROWS_AS(class_thresholds(conf, labels, -0.1, 3), ConfigError);
}

TEST_CASE("pseudo labels and acceptance") {
  const Model teacher = fixed_model(6);
  std::mt19937_64 rng(6);
  const Tensor x = random_matrix(rng, 200, 6, 2.0);

  const std::vector<double> zeros(4, 0.0);
  PseudoBatch pb = pseudo_label(teacher, x, zeros);
  CHECK(pb.accepted() == 200);
  CHECK(pb.accept_rate() == 1.0);
  const Tensor probs = teacher.predict_probs(x);
  for (std::size_t i = 0; i < 200; ++i) {
    const auto r = probs.row(i);
    CHECK(pb.pseudo_labels[i] == std::max_element(r.begin(), r.end()) - r.begin());
    CHECK(pb.confidences[i] == *std::max_element(r.begin(), r.end()));
  }

  const std::vector<double> above(4, 1.5);
  pb = pseudo_label(teacher, x, above);
  CHECK(pb.accepted() == 0);

  // p = 0 accepts everything; p = 1 keeps only each class's top-confidence
  // point(s).
  pb = pseudo_label_quantile(teacher, x, 0.0);
  CHECK(pb.accepted() == 200);
  pb = pseudo_label_quantile(teacher, x, 1.0);
  std::vector<int> present(4, 0);
  for (int y : pb.pseudo_labels) present[static_cast<std::size_t>(y)] = 1;
  int classes = 0;
  for (int v : present) classes += v;
  CHECK(pb.accepted() == static_cast<std::size_t>(classes));
}

TEST_CASE("accept rate is non-increasing in the quantile") {
  std::mt19937_64 rng(7);
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Model teacher = fixed_model(20 + s);
    const Tensor x = random_matrix(rng, 300, 6, 2.0);
    double prev = 2.0;
    std::vector<bool> prev_mask;
    for (int i = 0; i <= 20; ++i) {
      const PseudoBatch pb = pseudo_label_quantile(teacher, x, i / 20.0);
      CHECK(pb.accept_rate() <= prev);
      // Accepted sets are nested.
      if (!prev_mask.empty()) {
        for (std::size_t r = 0; r < pb.accept_mask.size(); ++r) {
          if (pb.accept_mask[r]) CHECK(prev_mask[r]);
        }
      }
      prev = pb.accept_rate();
      prev_mask = pb.accept_mask;
    }
  }
}

TEST_CASE("masked cross-entropy equals the cross-entropy of the accepted subset") {
  std::mt19937_64 rng(8);
  std::bernoulli_distribution keep(0.6);
  std::uniform_int_distribution<int> cls(0, 4);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor logits = random_matrix(rng, 25, 5, 3.0);
    std::vector<int> labels(25);
    std::vector<bool> mask(25);
    for (int i = 0; i < 25; ++i) {
      labels[i] = cls(rng);
      mask[i] = keep(rng);
    }
    mask[0] = true;
    const MaskedCe ce = masked_cross_entropy(logits, labels, mask);

    std::vector<int> sub_labels;
    Tensor sub = Tensor::matrix(0, 5);
    for (std::size_t i = 0; i < 25; ++i) {
      if (!mask[i]) continue;
      sub_labels.push_back(labels[i]);
      sub.data.insert(sub.data.end(), logits.row(i).begin(), logits.row(i).end());
    }
    sub.shape = {sub_labels.size(), 5};
    CHECK(ce.loss == doctest::Approx(plain_ce(sub, sub_labels)).epsilon(1e-12));
    CHECK(ce.loss >= 0.0);

    // Gradient by central differences; rejected rows get exactly zero.
    for (std::size_t i = 0; i < 25; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        if (!mask[i]) {
          REQUIRE(ce.dlogits.at(i, j) == 0.0);
          continue;
        }
        Tensor lp = logits, lm = logits;
        lp.at(i, j) += 1e-6;
        lm.at(i, j) -= 1e-6;
        const double fd = (masked_cross_entropy(lp, labels, mask).loss -
                           masked_cross_entropy(lm, labels, mask).loss) / 2e-6;
        REQUIRE(ce.dlogits.at(i, j) == doctest::Approx(fd).epsilon(1e-6));
      }
    }
  }
  const std::vector<bool> none(3, false);
  const MaskedCe empty =
      masked_cross_entropy(Tensor::from_rows({{1, 2}, {3, 4}, {5, 6}}),
                           std::vector<int>{0, 1, 0}, none);
  CHECK(empty.loss == 0.0);
  CHECK(std::all_of(empty.dlogits.data.begin(), empty.dlogits.data.end(),
                    [](double v) { return v == 0.0; }));
}

TEST_CASE("dtu-lite interval rules") {
  DtuState flat;
  flat.window_size = 5;
  flat.current_interval = 800;
  for (int i = 0; i < 100; ++i) {
    flat = dtu_adjust(flat, 1.0);
    CHECK(flat.current_interval >= flat.min_interval);
    CHECK(flat.current_interval <= flat.max_interval);
  }
  CHECK(flat.current_interval == flat.min_interval);

  DtuState rising;
  rising.window_size = 5;
  for (int i = 0; i < 100; ++i) {
    rising = dtu_adjust(rising, static_cast<double>(i));
    CHECK(rising.current_interval >= rising.min_interval);
    CHECK(rising.current_interval <= rising.max_interval);
  }
  CHECK(rising.current_interval == rising.max_interval);

  // One window rise doubles, one window drop halves.
  DtuState s;
  s.window_size = 2;
  s.current_interval = 400;
  s = dtu_adjust(dtu_adjust(s, 1.0), 1.0);
  CHECK(s.current_interval == 200);
  s = dtu_adjust(dtu_adjust(s, 2.0), 2.0);
  CHECK(s.current_interval == 400);
  s = dtu_adjust(dtu_adjust(s, 0.5), 0.5);
  CHECK(s.current_interval == 200);

  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  DtuState r;
  r.window_size = 3;
  for (int i = 0; i < 2000; ++i) {
    r = dtu_adjust(r, n(rng));
    REQUIRE(r.current_interval >= r.min_interval);
    REQUIRE(r.current_interval <= r.max_interval);
  }
  CHECK_THROWS_AS(dtu_adjust(r, std::nan("")), ConfigError);
}

TEST_CASE("all-masked step leaves the student unchanged") {
  Model student = freeze_and_insert_adapters(fixed_model(10));
  TeacherState ts{clone_model(student), 0.999, 0, {}};
  std::mt19937_64 rng(10);
  const Tensor x = random_matrix(rng, 32, 6, 2.0);
  SelfTrainOptions opt;
  opt.fixed_thresholds.assign(4, 2.0);
  const auto before = flat_state(student);
  for (int i = 0; i < 5; ++i) {
    const SelfTrainStepStats st = selftrain_step(student, ts, x, opt, rng);
    CHECK(st.skipped);
    CHECK(st.accept_rate == 0.0);
    CHECK(st.ce_loss == 0.0);
  }
  CHECK(flat_state(student) == before);
}

TEST_CASE("alpha 1 keeps the teacher bit-identical over many steps") {
  Model student = freeze_and_insert_adapters(fixed_model(11));
  TeacherState ts{clone_model(student), 1.0, 0, {}};
  ts.dtu.window_size = 4;
  ts.dtu.min_interval = 1;
  ts.dtu.current_interval = 1;
  ts.dtu.max_interval = 8;
  const Model initial = clone_model(ts.teacher);
  std::mt19937_64 rng(11);
  SelfTrainOptions opt;
  opt.optimizer.lr = 1e-2;
  std::size_t updates = 0;
  for (int i = 0; i < 60; ++i) {
    const Tensor x = random_matrix(rng, 32, 6, 2.0);
    const auto st = selftrain_step(student, ts, x, opt, rng);
    updates += st.teacher_updated ? 1 : 0;
    REQUIRE(ts.teacher == initial);
  }
  CHECK(updates > 5);
  // The student did move.
  CHECK(flat_state(student) != flat_state(initial));
}

TEST_CASE("self-distillation step from an identical teacher") {
  Model student = freeze_and_insert_adapters(fixed_model(12));
  TeacherState ts{clone_model(student), 0.0, 0, {}};
  std::mt19937_64 rng(12);
  const Tensor x = random_matrix(rng, 40, 6, 2.0);
  SelfTrainOptions opt;
  opt.quantile = 0.0;
  opt.jitter_sigma = 0.0;
  const auto st = selftrain_step(student, ts, x, opt, rng);
  CHECK_FALSE(st.skipped);
  CHECK(st.accept_rate == 1.0);
  CHECK(st.ce_loss >= 0.0);
  // Loss is the CE of the student against its own argmax.
  const Model before_step = clone_model(ts.teacher);
  const Tensor logits = before_step.eval_logits(x);
  CHECK(st.ce_loss == doctest::Approx(plain_ce(logits, argmax_rows(softmax(logits)))).epsilon(1e-12));
  std::size_t total = 0;
  for (auto c : st.pseudo_histogram) total += c;
  CHECK(total == 40);
}

TEST_CASE("teacher parameters never receive gradients") {
  Model student = freeze_and_insert_adapters(fixed_model(13));
  TeacherState ts{clone_model(student), 0.9, 0, {}};
  ts.dtu.min_interval = 1000;
  ts.dtu.current_interval = 1000;
  std::mt19937_64 rng(13);
  SelfTrainOptions opt;
  const Model t0 = clone_model(ts.teacher);
  for (int i = 0; i < 20; ++i) {
    selftrain_step(student, ts, random_matrix(rng, 16, 6, 2.0), opt, rng);
  }
  // No update interval elapsed: bit-identical, gradients included.
  CHECK(ts.teacher == t0);
}
