#include "ttyd/ttydloss.hpp"

#include <algorithm>
#include <cmath>

#include "ttyd/errors.hpp"

namespace ttyd {
namespace {

constexpr double kTiny = 1e-12;

double plogp(double p) { return p > kTiny ? p * std::log(p) : 0.0; }

void check_prior(const std::vector<double>& prior,
                 const std::vector<double>& q) {
  if (prior.size() != q.size()) {
    throw ConfigError("prior length does not match class count");
  }
  for (std::size_t k = 0; k < q.size(); ++k) {
    if (prior[k] <= 0.0 && q[k] > 0.0) {
      throw InfiniteDivergenceError("prior has zero mass on class " +
                                    std::to_string(k));
    }
  }
}

double kl(const std::vector<double>& q, const std::vector<double>& prior) {
  double out = 0.0;
  for (std::size_t k = 0; k < q.size(); ++k) {
    if (q[k] > kTiny) out += q[k] * std::log(q[k] / prior[k]);
  }
  return out;
}

}  // namespace

void LossConfig::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (!use_discrim && !use_simsrc) {
    throw ConfigError("at least one loss term must be enabled");
  }
}

double entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) h -= plogp(v);
  return h;
}

double cross_entropy(std::span<const double> p, std::span<const double> q) {
  double h = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) h -= p[k] * std::log(q[k]);
  }
  return h;
}

double loss_discrim(const Tensor& probs) {
  const std::size_t n = probs.rows();
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) sum += entropy(probs.row(i));
  return sum / static_cast<double>(n);
}

std::vector<double> predicted_distribution(const Tensor& probs) {
  const std::size_t n = probs.rows(), k = probs.cols();
  std::vector<double> q(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = probs.row(i);
    for (std::size_t j = 0; j < k; ++j) q[j] += r[j];
  }
  for (double& v : q) v /= static_cast<double>(n);
  return q;
}

double loss_simsrc(const Tensor& probs, const std::vector<double>& prior) {
  const auto q = predicted_distribution(probs);
  check_prior(prior, q);
  return kl(q, prior);
}

double hinged_total(double l_discrim, double l_simsrc,
                    const LossConfig& config) {
  config.validate();
  double total = 0.0;
  if (config.use_discrim) total += std::max(0.0, l_discrim - config.lambda);
  if (config.use_simsrc) total += std::max(0.0, l_simsrc - config.lambda);
  return total;
}

LossReport evaluate_loss(const Tensor& probs, const std::vector<double>& prior,
                         const LossConfig& config) {
  config.validate();
  LossReport r;
  r.d_of_p = predicted_distribution(probs);
  check_prior(prior, r.d_of_p);
  r.l_discrim = loss_discrim(probs);
  r.l_simsrc = kl(r.d_of_p, prior);
  r.total = hinged_total(r.l_discrim, r.l_simsrc, config);
  return r;
}

LossGrad loss_grad_logits(const Tensor& logits, const LossConfig& config,
                          const std::vector<double>& prior) {
  const Tensor probs = softmax(logits);
  LossGrad out;
  out.report = evaluate_loss(probs, prior, config);
  const std::size_t n = probs.rows(), k = probs.cols();
  out.dlogits = Tensor::matrix(n, k);
  const double inv_n = 1.0 / static_cast<double>(n);

  const bool discrim_active =
      config.use_discrim && out.report.l_discrim > config.lambda;
  const bool simsrc_active =
      config.use_simsrc && out.report.l_simsrc > config.lambda;

  if (discrim_active) {
    // dH/dz_j = -(p_j log p_j + p_j H)
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = probs.row(i);
      const double h = entropy(p);
      auto g = out.dlogits.row(i);
      for (std::size_t j = 0; j < k; ++j) {
        g[j] -= (plogp(p[j]) + p[j] * h) * inv_n;
      }
    }
  }
  if (simsrc_active) {
    // dKL/dz_ij = p_ij (r_j - sum_k p_ik r_k) / n,  r = log(q / prior)
    std::vector<double> r(k);
    for (std::size_t j = 0; j < k; ++j) {
      r[j] = std::log(std::max(out.report.d_of_p[j], 1e-300) / prior[j]);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const auto p = probs.row(i);
      double mean_r = 0.0;
      for (std::size_t j = 0; j < k; ++j) mean_r += p[j] * r[j];
      auto g = out.dlogits.row(i);
      for (std::size_t j = 0; j < k; ++j) {
        g[j] += p[j] * (r[j] - mean_r) * inv_n;
      }
    }
  }
  return out;
}

std::vector<double> uniform_prior(std::size_t num_classes) {
  return std::vector<double>(num_classes, 1.0 / static_cast<double>(num_classes));
}

std::vector<double> resolve_prior(PriorChoice choice,
                                  const std::vector<double>& source_prior,
                                  const std::vector<double>& target_prior) {
  switch (choice) {
    case PriorChoice::SourcePrior: return source_prior;
    case PriorChoice::Uniform: return uniform_prior(source_prior.size());
    case PriorChoice::TargetOracle: return target_prior;
  }
  return source_prior;
}

std::string to_string(PriorChoice choice) {
  switch (choice) {
    case PriorChoice::SourcePrior: return "source";
    case PriorChoice::Uniform: return "uniform";
    case PriorChoice::TargetOracle: return "target_oracle";
  }
  return "?";
}

PriorChoice parse_prior_choice(const std::string& s) {
  for (PriorChoice c : {PriorChoice::SourcePrior, PriorChoice::Uniform,
                        PriorChoice::TargetOracle}) {
    if (to_string(c) == s) return c;
  }
  throw ConfigError("unknown prior '" + s + "'");
}

}  // namespace ttyd
