#pragma once

// End-to-end gradient check of a batch-norm MLP trained on the hinged
// adaptation loss: analytic backward vs central differences over every
// parameter.

#include <algorithm>
#include <cmath>
#include <random>

#include "test_support.hpp"
#include "ttyd/netmodel.hpp"
#include "ttyd/ttydloss.hpp"

namespace ttyd::testing {

struct ModelGradCheck {
  double max_rel_error = 0.0;
  double l_discrim = 0.0;
  double l_simsrc = 0.0;
};

// Smallest |pre-activation| over all hidden units of a cached forward.
inline double min_kink_distance(const Model& model, const ForwardCache& cache) {
  double m = 1e300;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& lc = cache.layers[l];
    const auto& bn = model.layers[l].bn;
    const std::size_t c = lc.normalized.cols();
    for (std::size_t i = 0; i < lc.normalized.data.size(); ++i) {
      const double a = lc.normalized.data[i] * bn.scale.value.data[i % c] +
                       bn.shift.value.data[i % c];
      m = std::min(m, std::abs(a));
    }
  }
  return m;
}

inline ModelGradCheck model_loss_gradcheck(std::uint64_t seed,
                                           Activation act = Activation::Relu,
                                           StatsMode stats = StatsMode::OnlineTrain) {
  std::mt19937_64 rng(seed);
  ModelSpec spec;
  spec.input_dim = 5;
  spec.hidden_dims = {7, 6};
  spec.num_classes = 4;
  spec.activation = act;
  Model model = build_model(spec, seed);
  model.adapt_mode = AdaptMode::Full;
  model.stats_mode = stats;
  // Central differences are only meaningful away from ReLU kinks: redraw the
  // batch until every pre-activation clears the step size by a wide margin.
  Tensor x = random_matrix(rng, 12, spec.input_dim, 1.5);
  while (act == Activation::Relu) {
    ForwardCache probe;
    model.logits(x, Phase::Train, &probe);
    if (min_kink_distance(model, probe) > 1e-3) break;
    x = random_matrix(rng, 12, spec.input_dim, 1.5);
  }
  model = build_model(spec, seed);  // undo running-stat updates of the probes
  model.adapt_mode = AdaptMode::Full;
  model.stats_mode = stats;
  // Skewed prior so the KL hinge is active.
  const std::vector<double> prior = random_simplex(rng, spec.num_classes, 0.05);
  LossConfig cfg;  // lambda 0.02, both terms

  ForwardCache cache;
  const Tensor logits = model.logits(x, Phase::Train, &cache);
  const LossGrad lg = loss_grad_logits(logits, cfg, prior);
  model.zero_grad();
  model.backward(cache, lg.dlogits);

  const auto params = model.all_params();
  ModelGradCheck out;
  out.l_discrim = lg.report.l_discrim;
  out.l_simsrc = lg.report.l_simsrc;
  out.max_rel_error = grad_check(
      [&] {
        return evaluate_loss(softmax(model.logits(x, Phase::Train)), prior, cfg).total;
      },
      params, 1e-5);
  return out;
}

}  // namespace ttyd::testing
