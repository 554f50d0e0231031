#pragma once

// Agreement between two classifiers, the agreement validator, and the
// first-disagreement stopping rule. Selection functions take plain agreement
// sequences: they have no way to see oracle labels or mIoU.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ttyd/diffnet.hpp"
#include "ttyd/netmodel.hpp"

namespace ttyd {

enum class AgreementMetric { Hard, SymmetricKL, L1, L2 };

// Fraction of positions where the two label vectors coincide.
double agreement(std::span<const int> preds_f, std::span<const int> preds_g);

// Mean per-row divergence between two probability matrices (0 when equal).
// Hard is 1 - agreement of the row argmaxes. SymmetricKL clamps entries at
// 1e-12.
double soft_divergence(const Tensor& probs_f, const Tensor& probs_g,
                       AgreementMetric metric);

// Higher means closer: agreement for Hard, negated divergence otherwise.
double agreement_score(const Tensor& probs_f, const Tensor& probs_g,
                       AgreementMetric metric);

std::vector<int> argmax_rows(const Tensor& probs);

enum class StopReason { FirstDisagreement, HorizonExhausted };

struct StopDecision {
  std::size_t stop_index = 0;
  double agreement_at_stop = 0.0;
  StopReason reason = StopReason::HorizonExhausted;
};

// Smallest index attaining the maximum.
std::size_t closest_agreement_point(std::span<const double> agreements);

// Smallest i with a[i] >= a[i+1]; the last index (HorizonExhausted) when the
// sequence increases strictly throughout. Requires a nonempty sequence.
StopDecision first_disagreement_stop(std::span<const double> agreements);

// Streaming form of first_disagreement_stop: feed agreements in checkpoint
// order; a decision is returned as soon as one is reached.
class DisagreementMonitor {
 public:
  std::optional<StopDecision> push(double agreement);
  // Decision for a sequence that ended without a reversal.
  StopDecision finish() const;
  std::size_t size() const { return history_.size(); }
  bool stopped() const { return decision_.has_value(); }

 private:
  std::vector<double> history_;
  std::optional<StopDecision> decision_;
};

// Index of the candidate agreeing most with the reference predictions; ties
// go to the lowest index.
std::size_t select_by_agreement(std::span<const double> scores);
std::size_t validate_models(std::span<const Model> candidates,
                            const Model& reference, const Tensor& eval_features,
                            std::size_t eval_batch = 0,
                            AgreementMetric metric = AgreementMetric::Hard);

// -mean entropy (higher is better).
double entropy_validator(const Tensor& probs);
// -mean entropy + entropy of the mean prediction.
double im_validator(const Tensor& probs);

std::string to_string(AgreementMetric metric);
AgreementMetric parse_agreement_metric(const std::string& s);
std::string to_string(StopReason reason);

}  // namespace ttyd
