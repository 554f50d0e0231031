#include <algorithm>
#include <random>
#include <set>
#include <sstream>

#include "doctest.h"
#include "model_gradcheck.hpp"
#include "test_support.hpp"
#include "ttyd/errors.hpp"
#include "ttyd/netmodel.hpp"

using namespace ttyd;
using ttyd::testing::random_matrix;

namespace {

ModelSpec small_spec(std::size_t k = 3) {
  ModelSpec s;
  s.input_dim = 4;
  s.hidden_dims = {6, 5};
  s.num_classes = k;
  return s;
}

// Source-like statistics so folding is not an identity map.
void randomize_stats(Model& m, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.2, 3.0);
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& l : m.layers) {
    if (!l.has_bn) continue;
    for (double& v : l.bn.stats.running_mean) v = n(rng);
    for (double& v : l.bn.stats.running_var) v = u(rng);
    for (double& v : l.bn.scale.value.data) v = u(rng);
    for (double& v : l.bn.shift.value.data) v = n(rng);
  }
}

}  // namespace

TEST_CASE("build_model is deterministic in the seed") {
  const Model a = build_model(small_spec(), 7);
  const Model b = build_model(small_spec(), 7);
  const Model c = build_model(small_spec(), 8);
  CHECK(a == b);
  CHECK_FALSE(a.layers[0].weight == c.layers[0].weight);
  for (const auto& l : a.layers) {
    CHECK(l.bn.stats == BnStats::identity(l.bn.stats.channels()));
  }
}

TEST_CASE("ModelSpec validation") {
  ModelSpec s = small_spec();
  s.num_classes = 1;
  CHECK_THROWS_AS(build_model(s, 0), ConfigError);
  s = small_spec();
  s.hidden_dims = {4, 0};
  CHECK_THROWS_AS(build_model(s, 0), ConfigError);
}

TEST_CASE("forward yields probability rows with K columns") {
  std::mt19937_64 rng(1);
  Model m = build_model(small_spec(3), 2);
  const Tensor x = random_matrix(rng, 9, 4);
  for (Phase ph : {Phase::Train, Phase::Eval}) {
    const Tensor p = m.forward(x, ph);
    CHECK(p.cols() == 3);
    for (std::size_t i = 0; i < 9; ++i) {
      double s = 0.0;
      for (double v : p.row(i)) s += v;
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
  }
  CHECK_THROWS_AS(m.forward(random_matrix(rng, 3, 5)), ConfigError);
}

TEST_CASE("fixed statistics make rows independent; batch statistics do not") {
  std::mt19937_64 rng(2);
  Model m = build_model(small_spec(), 3);
  randomize_stats(m, rng);
  const Tensor a = random_matrix(rng, 6, 4);
  Tensor b = a;
  for (std::size_t j = 0; j < 4; ++j) b.at(5, j) += 10.0;  // change one other row

  m.stats_mode = StatsMode::FixedSource;
  const Tensor pa = m.forward(a, Phase::Train), pb = m.forward(b, Phase::Train);
  for (std::size_t j = 0; j < 3; ++j) CHECK(pa.at(0, j) == pb.at(0, j));

  m.stats_mode = StatsMode::OnlineTrainEval;
  const Tensor qa = m.predict_probs(a), qb = m.predict_probs(b);
  CHECK(qa.at(0, 0) != qb.at(0, 0));
}

TEST_CASE("fixed statistics modes never touch BnStats") {
  std::mt19937_64 rng(3);
  for (StatsMode mode :
       {StatsMode::FixedSource, StatsMode::FixedTarget, StatsMode::FixedMean}) {
    Model m = build_model(small_spec(), 4);
    randomize_stats(m, rng);
    m.stats_mode = mode;
    m.adapt_mode = AdaptMode::Full;
    const Model before = m;
    ForwardCache cache;
    const Tensor x = random_matrix(rng, 8, 4);
    const Tensor logits = m.logits(x, Phase::Train, &cache);
    m.backward(cache, logits);
    const auto ps = m.trainable_params();
    adamw_step(ps, {});
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      CHECK(m.layers[l].bn.stats == before.layers[l].bn.stats);
    }
  }
}

TEST_CASE("adapter insertion reproduces the EvalRunning forward") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    for (const auto& hidden : std::vector<std::vector<std::size_t>>{{6}, {6, 5}, {8, 4, 3}}) {
      ModelSpec s = small_spec();
      s.hidden_dims = hidden;
      s.activation = seed % 2 ? Activation::Tanh : Activation::Relu;
      Model m = build_model(s, seed);
      randomize_stats(m, rng);
      m.stats_mode = StatsMode::FixedSource;
      const Model adapted = freeze_and_insert_adapters(m, true);
      const Tensor x = random_matrix(rng, 10, 4, 2.0);
      const Tensor a = m.predict_probs(x), b = adapted.predict_probs(x);
      for (std::size_t i = 0; i < a.data.size(); ++i) {
        CHECK(std::abs(a.data[i] - b.data[i]) < 1e-12);
      }
    }
  }
}

TEST_CASE("adapter insertion needs batch norm") {
  ModelSpec s = small_spec();
  s.bn_after_each_hidden = false;
  CHECK_THROWS_AS(freeze_and_insert_adapters(build_model(s, 0)), ConfigError);
}

TEST_CASE("trainable parameter sets per adapt mode") {
  Model m = build_model(small_spec(), 5);
  auto as_set = [](const std::vector<Param*>& v) { return std::set<Param*>(v.begin(), v.end()); };

  m.adapt_mode = AdaptMode::ClassifierOnly;
  const auto cls = as_set(m.trainable_params());
  CHECK(cls == std::set<Param*>{&m.cls_weight, &m.cls_bias});

  m.adapt_mode = AdaptMode::BackboneOnly;
  const auto backbone = as_set(m.trainable_params());
  m.adapt_mode = AdaptMode::Full;
  const auto full = as_set(m.trainable_params());
  CHECK(m.trainable_params() == m.trainable_params());
  for (Param* p : cls) CHECK(backbone.count(p) == 0);
  std::set<Param*> uni = backbone;
  uni.insert(cls.begin(), cls.end());
  CHECK(uni == full);

  Model adapted = freeze_and_insert_adapters(m, true);
  CHECK(adapted.trainable_param_count() == 2 * adapted.bn_channel_count());
  Model scale_only = freeze_and_insert_adapters(m, false);
  CHECK(scale_only.trainable_param_count() == scale_only.bn_channel_count());
  for (Param* p : scale_only.trainable_params()) {
    for (auto& l : scale_only.layers) CHECK(p != &l.bn.shift);
  }
}

TEST_CASE("adapted parameters are a small fraction of the default model") {
  Model m = freeze_and_insert_adapters(build_model(ModelSpec{}, 0), true);
  const double frac = static_cast<double>(m.trainable_param_count()) /
                      static_cast<double>(m.param_count());
  MESSAGE("adapter fraction of parameters: " << frac);
  CHECK(frac < 0.1);
}

TEST_CASE("frozen parameters stay bit-identical through optimizer steps") {
  std::mt19937_64 rng(6);
  for (AdaptMode mode : {AdaptMode::ClassifierOnly, AdaptMode::BackboneOnly,
                         AdaptMode::BnAffineAdapter}) {
    Model m = build_model(small_spec(), 6);
    randomize_stats(m, rng);
    m.stats_mode = StatsMode::FixedSource;
    if (mode == AdaptMode::BnAffineAdapter) {
      m = freeze_and_insert_adapters(m, true);
    } else {
      m.adapt_mode = mode;
    }
    const Model before = m;
    for (int step = 0; step < 5; ++step) {
      ForwardCache cache;
      const Tensor logits = m.logits(random_matrix(rng, 8, 4), Phase::Train, &cache);
      m.zero_grad();
      m.backward(cache, logits);
      const auto ps = m.trainable_params();
      adamw_step(ps, {.lr = 0.01, .weight_decay = 0.01});
    }
    const auto trainable = m.trainable_params();
    auto now = m.all_params();
    const auto old = before.all_params();
    std::size_t frozen = 0;
    for (std::size_t i = 0; i < now.size(); ++i) {
      if (std::find(trainable.begin(), trainable.end(), now[i]) != trainable.end()) {
        CHECK_FALSE(now[i]->value == old[i]->value);
        continue;
      }
      ++frozen;
      CHECK(now[i]->value == old[i]->value);
    }
    CHECK(frozen > 0);
  }
}

TEST_CASE("snapshot and restore") {
  std::mt19937_64 rng(7);
  Model m = build_model(small_spec(), 7);
  const Model snap = clone_model(m);
  CHECK(clone_model(snap) == snap);
  const Tensor x = random_matrix(rng, 5, 4);
  const Tensor before = m.predict_probs(x);
  ForwardCache cache;
  const Tensor logits = m.logits(x, Phase::Train, &cache);
  m.backward(cache, logits);
  const auto ps = m.trainable_params();
  adamw_step(ps, {.lr = 0.1});
  CHECK_FALSE(m.predict_probs(x) == before);
  restore_model(m, snap);
  CHECK(m.predict_probs(x) == before);
  Model other = build_model(small_spec(4), 7);
  CHECK_THROWS_AS(restore_model(other, snap), ConfigError);
}

TEST_CASE("checkpoint text round trip is bit-exact") {
  std::mt19937_64 rng(8);
  Model m = build_model(small_spec(), 8);
  randomize_stats(m, rng);
  for (const Model& candidate : {m, freeze_and_insert_adapters(m, false)}) {
    std::stringstream ss;
    save_model(candidate, ss);
    Model back = load_model(ss);
    back.reset_optimizer_state();
    Model ref = candidate;
    ref.reset_optimizer_state();
    for (Param* p : ref.all_params()) p->zero_grad();
    for (Param* p : back.all_params()) p->zero_grad();
    CHECK(back == ref);
  }
  std::stringstream bad("ttyd-model 99\n");
  CHECK_THROWS(load_model(bad));
}

TEST_CASE("mode names round trip") {
  for (AdaptMode m : {AdaptMode::Full, AdaptMode::BackboneOnly, AdaptMode::ClassifierOnly,
                      AdaptMode::BnAffineAdapter}) {
    CHECK(parse_adapt_mode(to_string(m)) == m);
  }
  for (StatsMode m : {StatsMode::FixedSource, StatsMode::FixedTarget, StatsMode::FixedMean,
                      StatsMode::OnlineTrain, StatsMode::OnlineTrainEval}) {
    CHECK(parse_stats_mode(to_string(m)) == m);
  }
  CHECK(parse_activation("tanh") == Activation::Tanh);
  CHECK_THROWS_AS(parse_adapt_mode("everything"), ConfigError);
}

TEST_CASE("chunked eval equals single-batch eval under running statistics") {
  std::mt19937_64 rng(9);
  Model m = build_model(small_spec(), 9);
  randomize_stats(m, rng);
  m.stats_mode = StatsMode::FixedSource;
  const Tensor x = random_matrix(rng, 103, 4);
  CHECK(m.predict_probs(x, 10) == m.predict_probs(x));
}

TEST_CASE("full model with adaptation loss passes the gradient check") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (StatsMode stats : {StatsMode::OnlineTrain, StatsMode::FixedSource}) {
      const auto r = ttyd::testing::model_loss_gradcheck(seed, Activation::Relu, stats);
      CHECK(r.l_discrim > 0.02);
      CHECK(r.max_rel_error < 1e-5);
    }
    CHECK(ttyd::testing::model_loss_gradcheck(seed, Activation::Tanh).max_rel_error < 1e-5);
  }
}
