#include "ttyd/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ttyd/errors.hpp"

namespace ttyd {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : k_(num_classes), counts_(num_classes * num_classes, 0) {}

void ConfusionMatrix::add(int truth, int pred) {
  if (truth < 0 || pred < 0 || static_cast<std::size_t>(truth) >= k_ ||
      static_cast<std::size_t>(pred) >= k_) {
    throw ConfigError("confusion: label out of range");
  }
  ++counts_[static_cast<std::size_t>(truth) * k_ + static_cast<std::size_t>(pred)];
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw ConfigError("confusion: class count mismatch");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  return *this;
}

ConfusionMatrix confusion(std::span<const int> truth, std::span<const int> pred,
                          const std::vector<bool>& ignore,
                          std::size_t num_classes) {
  if (truth.size() != pred.size() ||
      (!ignore.empty() && ignore.size() != truth.size())) {
    throw ConfigError("confusion: length mismatch");
  }
  ConfusionMatrix cm(num_classes);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (!ignore.empty() && ignore[i]) continue;
    cm.add(truth[i], pred[i]);
  }
  return cm;
}

std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm) {
  const std::size_t k = cm.num_classes();
  std::vector<std::optional<double>> out(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    const std::uint64_t denom = row + col - tp;
    if (denom > 0) out[c] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

double miou(const ConfusionMatrix& cm) {
  double sum = 0.0;
  int n = 0;
  for (const auto& v : iou_per_class(cm)) {
    if (v) {
      sum += *v;
      ++n;
    }
  }
  if (n == 0) throw UndefinedMetricError("mIoU undefined: no evaluated points");
  return sum / n;
}

double accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw UndefinedMetricError("accuracy undefined: empty set");
  std::uint64_t diag = 0;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) diag += cm.at(c, c);
  return static_cast<double>(diag) / static_cast<double>(total);
}

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> scores, std::span<const double> targets,
                SpearmanWeighting weighting) {
  const std::size_t n = scores.size();
  if (n != targets.size()) throw ConfigError("spearman: length mismatch");
  if (n < 3) throw UndefinedMetricError("spearman needs at least 3 pairs");
  const auto rx = average_ranks(scores);
  const auto ry = average_ranks(targets);
  auto constant = [](const std::vector<double>& r) {
    return std::all_of(r.begin(), r.end(), [&](double v) { return v == r[0]; });
  };
  if (constant(rx) || constant(ry)) {
    throw UndefinedMetricError("spearman undefined for constant ranks");
  }

  std::vector<double> w(n, 1.0);
  if (weighting == SpearmanWeighting::TopWeighted) w = ry;
  const double wsum = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& v : w) v /= wsum;

  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += w[i] * rx[i];
    my += w[i] * ry[i];
  }
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = rx[i] - mx, dy = ry[i] - my;
    sxy += w[i] * dx * dy;
    sxx += w[i] * dx * dx;
    syy += w[i] * dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) {
    throw UndefinedMetricError("spearman undefined for constant ranks");
  }
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace ttyd
