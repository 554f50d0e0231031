#pragma once

// Second-phase self-training: an EMA teacher produces pseudo-labels, filtered
// by per-class confidence thresholds; the student minimizes masked
// cross-entropy. The teacher refresh interval follows a windowed entropy rule.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "ttyd/diffnet.hpp"
#include "ttyd/netmodel.hpp"
#include "ttyd/ttydloss.hpp"

namespace ttyd {

// teacher <- alpha * teacher + (1 - alpha) * student, for every parameter
// value and BN running statistic.
void ema_update(Model& teacher, const Model& student, double alpha);

// Per-class p-quantile of the confidences of points pseudo-labeled with that
// class (linear interpolation between order statistics). Classes with no
// points get threshold 0.
std::vector<double> class_thresholds(std::span<const double> confidences,
                                     std::span<const int> pseudo_labels,
                                     double quantile, std::size_t num_classes);

struct PseudoBatch {
  Tensor features;
  std::vector<int> pseudo_labels;
  std::vector<bool> accept_mask;
  std::vector<double> confidences;

  std::size_t accepted() const;
  double accept_rate() const;
};

// Labels are the teacher's argmax; a row is accepted when its confidence
// reaches the threshold of its label. Empty thresholds derive them from this
// batch with `quantile`.
PseudoBatch pseudo_label(const Model& teacher, const Tensor& features,
                         std::span<const double> thresholds);
PseudoBatch pseudo_label_quantile(const Model& teacher, const Tensor& features,
                                  double quantile);

// Mean cross-entropy over accepted rows and its gradient w.r.t. logits
// (zero on rejected rows). Loss is 0 when nothing is accepted.
struct MaskedCe {
  double loss = 0.0;
  Tensor dlogits;
};
MaskedCe masked_cross_entropy(const Tensor& logits, std::span<const int> labels,
                              const std::vector<bool>& mask);

struct DtuState {
  std::size_t window_size = 200;
  std::size_t current_interval = 100;
  std::size_t min_interval = 100;
  std::size_t max_interval = 2000;
  std::vector<double> window;
  std::optional<double> previous_window_mean;
};

// Appends a monitor value; when the window is full, doubles the interval if
// the window mean rose over the previous window and halves it otherwise.
DtuState dtu_adjust(DtuState state, double monitor_value);

struct TeacherState {
  Model teacher;
  double alpha = 0.999;
  std::size_t iterations_since_update = 0;
  DtuState dtu;
};

struct SelfTrainOptions {
  AdamWConfig optimizer;
  double quantile = 0.5;
  // Per-class thresholds used instead of the batch quantile when non-empty.
  std::vector<double> fixed_thresholds;
  double jitter_sigma = 0.05;
  // When set, the hinged adaptation loss (against `prior`) is added to the
  // cross-entropy.
  std::optional<LossConfig> combined;
  std::vector<double> prior;
};

struct SelfTrainStepStats {
  double ce_loss = 0.0;
  double accept_rate = 0.0;
  double student_entropy = 0.0;
  bool skipped = false;
  bool teacher_updated = false;
  std::vector<std::size_t> pseudo_histogram;
};

// One optimizer step on masked cross-entropy against teacher pseudo-labels.
// The student sees jittered features. Skips the step (no parameter change)
// when no pseudo-label is accepted.
SelfTrainStepStats selftrain_step(Model& student, TeacherState& teacher,
                                  const Tensor& batch,
                                  const SelfTrainOptions& options,
                                  std::mt19937_64& rng);

}  // namespace ttyd
