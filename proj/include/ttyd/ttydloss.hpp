#pragma once

// Hinged entropy + prior-KL adaptation loss and its gradient w.r.t. logits.
// All logarithms are natural, so the margin is in nats.

#include <span>
#include <string>
#include <vector>

#include "ttyd/diffnet.hpp"

namespace ttyd {

enum class PriorChoice { SourcePrior, Uniform, TargetOracle };

struct LossConfig {
  double lambda = 0.02;
  bool use_discrim = true;
  bool use_simsrc = true;
  PriorChoice prior = PriorChoice::SourcePrior;

  void validate() const;
  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

struct LossReport {
  double l_discrim = 0.0;
  double l_simsrc = 0.0;
  double total = 0.0;
  std::vector<double> d_of_p;
};

// Shannon entropy; terms with p <= 1e-12 count as zero.
double entropy(std::span<const double> p);
// H(p, q) = -sum p log q.
double cross_entropy(std::span<const double> p, std::span<const double> q);

// Mean per-row prediction entropy.
double loss_discrim(const Tensor& probs);
// Column means of the probability matrix.
std::vector<double> predicted_distribution(const Tensor& probs);
// KL(D(P) || prior). Throws InfiniteDivergenceError on a zero prior entry
// that receives positive predicted mass.
double loss_simsrc(const Tensor& probs, const std::vector<double>& prior);

// max(0, l_discrim - lambda) [use_discrim] + max(0, l_simsrc - lambda) [use_simsrc]
double hinged_total(double l_discrim, double l_simsrc, const LossConfig& config);

LossReport evaluate_loss(const Tensor& probs, const std::vector<double>& prior,
                         const LossConfig& config);

struct LossGrad {
  LossReport report;
  Tensor dlogits;
};
// Inactive hinges (term <= lambda) contribute exactly zero gradient.
LossGrad loss_grad_logits(const Tensor& logits, const LossConfig& config,
                          const std::vector<double>& prior);

std::vector<double> uniform_prior(std::size_t num_classes);
std::vector<double> resolve_prior(PriorChoice choice,
                                  const std::vector<double>& source_prior,
                                  const std::vector<double>& target_prior);

std::string to_string(PriorChoice choice);
PriorChoice parse_prior_choice(const std::string& s);

}  // namespace ttyd
