#include "ttyd/selftrain.hpp"

#include <algorithm>
#include <cmath>

#include "ttyd/agreestop.hpp"
#include "ttyd/errors.hpp"

namespace ttyd {
namespace {

void ema_values(std::vector<double>& t, const std::vector<double>& s,
                double alpha) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = alpha * t[i] + (1.0 - alpha) * s[i];
  }
}

}  // namespace

void ema_update(Model& teacher, const Model& student, double alpha) {
  if (!(teacher.spec == student.spec) ||
      teacher.layers.size() != student.layers.size()) {
    throw ConfigError("ema_update: architecture mismatch");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ConfigError("ema_update: alpha must lie in [0, 1]");
  }
  auto tp = teacher.all_params();
  const auto sp = student.all_params();
  if (tp.size() != sp.size()) throw ConfigError("ema_update: layout mismatch");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    ema_values(tp[i]->value.data, sp[i]->value.data, alpha);
  }
  for (std::size_t l = 0; l < teacher.layers.size(); ++l) {
    HiddenLayer& t = teacher.layers[l];
    const HiddenLayer& s = student.layers[l];
    if (!t.has_bn) continue;
    ema_values(t.bn.stats.running_mean, s.bn.stats.running_mean, alpha);
    ema_values(t.bn.stats.running_var, s.bn.stats.running_var, alpha);
  }
}

std::vector<double> class_thresholds(std::span<const double> confidences,
                                     std::span<const int> pseudo_labels,
                                     double quantile, std::size_t num_classes) {
  if (!(quantile >= 0.0 && quantile <= 1.0)) {
    throw ConfigError("quantile must lie in [0, 1]");
  }
  std::vector<std::vector<double>> per_class(num_classes);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    per_class[static_cast<std::size_t>(pseudo_labels[i])].push_back(confidences[i]);
  }
  std::vector<double> out(num_classes, 0.0);
  for (std::size_t k = 0; k < num_classes; ++k) {
    auto& v = per_class[k];
    if (v.empty()) continue;
    std::sort(v.begin(), v.end());
    const double pos = quantile * static_cast<double>(v.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    out[k] = frac == 0.0 ? v[lo] : v[lo] + frac * (v[hi] - v[lo]);
  }
  return out;
}

std::size_t PseudoBatch::accepted() const {
  return static_cast<std::size_t>(
      std::count(accept_mask.begin(), accept_mask.end(), true));
}

double PseudoBatch::accept_rate() const {
  return accept_mask.empty() ? 0.0
                             : static_cast<double>(accepted()) /
                                   static_cast<double>(accept_mask.size());
}

PseudoBatch pseudo_label(const Model& teacher, const Tensor& features,
                         std::span<const double> thresholds) {
  const Tensor probs = teacher.predict_probs(features);
  PseudoBatch out;
  out.features = features;
  out.pseudo_labels = argmax_rows(probs);
  out.confidences.resize(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    out.confidences[i] = probs.at(i, static_cast<std::size_t>(out.pseudo_labels[i]));
  }
  std::vector<double> derived;
  if (thresholds.empty()) {
    derived.assign(probs.cols(), 0.0);
    thresholds = derived;
  }
  out.accept_mask.resize(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    out.accept_mask[i] =
        out.confidences[i] >= thresholds[static_cast<std::size_t>(out.pseudo_labels[i])];
  }
  return out;
}

PseudoBatch pseudo_label_quantile(const Model& teacher, const Tensor& features,
                                  double quantile) {
  PseudoBatch out = pseudo_label(teacher, features, {});
  const auto th = class_thresholds(out.confidences, out.pseudo_labels, quantile,
                                   teacher.spec.num_classes);
  for (std::size_t i = 0; i < out.accept_mask.size(); ++i) {
    out.accept_mask[i] =
        out.confidences[i] >= th[static_cast<std::size_t>(out.pseudo_labels[i])];
  }
  return out;
}

MaskedCe masked_cross_entropy(const Tensor& logits, std::span<const int> labels,
                              const std::vector<bool>& mask) {
  const Tensor probs = softmax(logits);
  const std::size_t n = probs.rows(), k = probs.cols();
  MaskedCe out;
  out.dlogits = Tensor::matrix(n, k);
  const auto accepted =
      static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true));
  if (accepted == 0) return out;
  const double inv = 1.0 / static_cast<double>(accepted);
  for (std::size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const auto y = static_cast<std::size_t>(labels[i]);
    // log softmax via the max-shifted logits for accuracy
    const auto z = logits.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - mx);
    out.loss -= (z[y] - mx - std::log(s)) * inv;
    auto g = out.dlogits.row(i);
    for (std::size_t j = 0; j < k; ++j) {
      g[j] = (probs.at(i, j) - (j == y ? 1.0 : 0.0)) * inv;
    }
  }
  return out;
}

DtuState dtu_adjust(DtuState state, double monitor_value) {
  if (!std::isfinite(monitor_value)) {
    throw ConfigError("dtu_adjust: monitor value must be finite");
  }
  state.window.push_back(monitor_value);
  if (state.window.size() < std::max<std::size_t>(state.window_size, 1)) {
    return state;
  }
  double mean = 0.0;
  for (double v : state.window) mean += v;
  mean /= static_cast<double>(state.window.size());
  state.window.clear();
  if (state.previous_window_mean && mean > *state.previous_window_mean) {
    state.current_interval = std::min(state.current_interval * 2, state.max_interval);
  } else {
    state.current_interval = std::max(state.current_interval / 2, state.min_interval);
  }
  state.current_interval =
      std::clamp(state.current_interval, state.min_interval, state.max_interval);
  state.previous_window_mean = mean;
  return state;
}

SelfTrainStepStats selftrain_step(Model& student, TeacherState& teacher,
                                  const Tensor& batch,
                                  const SelfTrainOptions& options,
                                  std::mt19937_64& rng) {
  SelfTrainStepStats stats;
  const PseudoBatch pb =
      options.fixed_thresholds.empty()
          ? pseudo_label_quantile(teacher.teacher, batch, options.quantile)
          : pseudo_label(teacher.teacher, batch, options.fixed_thresholds);
  stats.accept_rate = pb.accept_rate();
  stats.pseudo_histogram.assign(student.spec.num_classes, 0);
  for (int y : pb.pseudo_labels) ++stats.pseudo_histogram[static_cast<std::size_t>(y)];

  Tensor input = batch;
  if (options.jitter_sigma > 0.0) {
    std::normal_distribution<double> noise(0.0, options.jitter_sigma);
    for (double& v : input.data) v += noise(rng);
  }
  ForwardCache cache;
  const Tensor logits = student.logits(input, Phase::Train, &cache);
  MaskedCe ce = masked_cross_entropy(logits, pb.pseudo_labels, pb.accept_mask);
  stats.ce_loss = ce.loss;
  const Tensor probs = softmax(logits);
  stats.student_entropy = loss_discrim(probs);

  Tensor grad = std::move(ce.dlogits);
  bool has_signal = pb.accepted() > 0;
  if (options.combined) {
    const LossGrad lg = loss_grad_logits(logits, *options.combined, options.prior);
    for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] += lg.dlogits.data[i];
    has_signal = true;
  }
  if (has_signal) {
    student.zero_grad();
    student.backward(cache, grad);
    const auto params = student.trainable_params();
    adamw_step(params, options.optimizer);
  } else {
    stats.skipped = true;
  }

  teacher.dtu = dtu_adjust(std::move(teacher.dtu), stats.student_entropy);
  ++teacher.iterations_since_update;
  if (teacher.iterations_since_update >= teacher.dtu.current_interval) {
    ema_update(teacher.teacher, student, teacher.alpha);
    teacher.iterations_since_update = 0;
    stats.teacher_updated = true;
  }
  return stats;
}

}  // namespace ttyd
