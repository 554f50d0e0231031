#include "ttyd/agreestop.hpp"

#include <algorithm>
#include <cmath>

#include "ttyd/errors.hpp"
#include "ttyd/ttydloss.hpp"

namespace ttyd {

double agreement(std::span<const int> preds_f, std::span<const int> preds_g) {
  if (preds_f.size() != preds_g.size()) {
    throw ConfigError("agreement: prediction lengths differ");
  }
  if (preds_f.empty()) throw ConfigError("agreement: empty evaluation set");
  std::size_t same = 0;
  for (std::size_t i = 0; i < preds_f.size(); ++i) {
    same += preds_f[i] == preds_g[i] ? 1 : 0;
  }
  return static_cast<double>(same) / static_cast<double>(preds_f.size());
}

std::vector<int> argmax_rows(const Tensor& probs) {
  std::vector<int> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    const auto r = probs.row(i);
    out[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return out;
}

double soft_divergence(const Tensor& probs_f, const Tensor& probs_g,
                       AgreementMetric metric) {
  if (probs_f.shape != probs_g.shape) {
    throw ConfigError("soft_divergence: shape mismatch");
  }
  if (metric == AgreementMetric::Hard) {
    return 1.0 - agreement(argmax_rows(probs_f), argmax_rows(probs_g));
  }
  const std::size_t n = probs_f.rows(), k = probs_f.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = probs_f.row(i);
    const auto q = probs_g.row(i);
    double d = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      switch (metric) {
        case AgreementMetric::SymmetricKL: {
          const double a = std::max(p[j], 1e-12), b = std::max(q[j], 1e-12);
          d += (a - b) * std::log(a / b);
          break;
        }
        case AgreementMetric::L1:
          d += std::abs(p[j] - q[j]);
          break;
        case AgreementMetric::L2:
          d += (p[j] - q[j]) * (p[j] - q[j]);
          break;
        case AgreementMetric::Hard:
          break;
      }
    }
    if (metric == AgreementMetric::L2) d = std::sqrt(d);
    total += d;
  }
  return total / static_cast<double>(n);
}

double agreement_score(const Tensor& probs_f, const Tensor& probs_g,
                       AgreementMetric metric) {
  if (metric == AgreementMetric::Hard) {
    return agreement(argmax_rows(probs_f), argmax_rows(probs_g));
  }
  return -soft_divergence(probs_f, probs_g, metric);
}

std::size_t closest_agreement_point(std::span<const double> agreements) {
  if (agreements.empty()) throw ConfigError("empty trajectory");
  return static_cast<std::size_t>(
      std::max_element(agreements.begin(), agreements.end()) -
      agreements.begin());
}

StopDecision first_disagreement_stop(std::span<const double> agreements) {
  if (agreements.empty()) throw ConfigError("empty trajectory");
  DisagreementMonitor monitor;
  for (double a : agreements) {
    if (auto d = monitor.push(a)) return *d;
  }
  return monitor.finish();
}

std::optional<StopDecision> DisagreementMonitor::push(double agreement) {
  if (decision_) return decision_;
  history_.push_back(agreement);
  const std::size_t n = history_.size();
  if (n >= 2 && history_[n - 2] >= history_[n - 1]) {
    decision_ = StopDecision{n - 2, history_[n - 2],
                             StopReason::FirstDisagreement};
  }
  return decision_;
}

StopDecision DisagreementMonitor::finish() const {
  if (decision_) return *decision_;
  if (history_.empty()) throw ConfigError("empty trajectory");
  return {history_.size() - 1, history_.back(), StopReason::HorizonExhausted};
}

std::size_t select_by_agreement(std::span<const double> scores) {
  if (scores.empty()) throw ConfigError("validator: empty candidate set");
  return closest_agreement_point(scores);
}

std::size_t validate_models(std::span<const Model> candidates,
                            const Model& reference, const Tensor& eval_features,
                            std::size_t eval_batch, AgreementMetric metric) {
  if (candidates.empty()) throw ConfigError("validator: empty candidate set");
  const Tensor ref = reference.predict_probs(eval_features, eval_batch);
  std::vector<double> scores;
  for (const Model& m : candidates) {
    scores.push_back(
        agreement_score(m.predict_probs(eval_features, eval_batch), ref, metric));
  }
  return select_by_agreement(scores);
}

double entropy_validator(const Tensor& probs) { return -loss_discrim(probs); }

double im_validator(const Tensor& probs) {
  return -loss_discrim(probs) + entropy(predicted_distribution(probs));
}

std::string to_string(AgreementMetric metric) {
  switch (metric) {
    case AgreementMetric::Hard: return "hard";
    case AgreementMetric::SymmetricKL: return "symkl";
    case AgreementMetric::L1: return "l1";
    case AgreementMetric::L2: return "l2";
  }
  return "?";
}

AgreementMetric parse_agreement_metric(const std::string& s) {
  for (AgreementMetric m : {AgreementMetric::Hard, AgreementMetric::SymmetricKL,
                            AgreementMetric::L1, AgreementMetric::L2}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown agreement metric '" + s + "'");
}

std::string to_string(StopReason reason) {
  return reason == StopReason::FirstDisagreement ? "first_disagreement"
                                                 : "horizon_exhausted";
}

}  // namespace ttyd
