#pragma once

// Oracle-side metrics. Nothing in here is reachable from selection or
// stopping code.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ttyd {

// Rows: ground truth, columns: prediction.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes = 0);

  std::size_t num_classes() const { return k_; }
  void add(int truth, int pred);
  std::uint64_t at(std::size_t truth, std::size_t pred) const {
    return counts_[truth * k_ + pred];
  }
  std::uint64_t total() const;
  ConfusionMatrix& operator+=(const ConfusionMatrix& other);
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

// Accumulates one matrix over the whole set; ignored rows are skipped.
// An empty ignore mask means nothing is ignored.
ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred,
                          const std::vector<bool>& ignore,
                          std::size_t num_classes);

// TP / (TP + FP + FN); nullopt for classes absent from both truth and
// prediction.
std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm);
// Mean over classes with a defined IoU. Throws UndefinedMetricError if none.
double miou(const ConfusionMatrix& cm);
double accuracy(const ConfusionMatrix& cm);

enum class SpearmanWeighting { Plain, TopWeighted };

// Rank correlation (average ranks for ties). TopWeighted computes a weighted
// Pearson correlation of the ranks with weights proportional to the target
// rank. Throws UndefinedMetricError for fewer than 3 pairs or constant ranks.
double spearman(std::span<const double> scores, std::span<const double> targets,
                SpearmanWeighting weighting = SpearmanWeighting::Plain);

std::vector<double> average_ranks(std::span<const double> values);

}  // namespace ttyd
