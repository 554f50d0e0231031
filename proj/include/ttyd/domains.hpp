#pragma once

// Gaussian-mixture source/target domains with affine covariate shift and
// class-prior shift. Labels drawn here feed source training and oracle
// evaluation only.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ttyd/diffnet.hpp"

namespace ttyd {

struct GaussianComponent {
  double weight = 1.0;           // within-class mixing weight
  std::vector<double> mean;
  std::vector<double> variance;  // diagonal
  friend bool operator==(const GaussianComponent&,
                         const GaussianComponent&) = default;
};

// y = matrix * x + offset, matrix stored row-major d x d.
struct AffineShift {
  std::vector<double> matrix;
  std::vector<double> offset;

  static AffineShift identity(std::size_t dim);
  std::size_t dim() const { return offset.size(); }
  // (this ∘ inner)(x) = this(inner(x))
  AffineShift compose(const AffineShift& inner) const;
  friend bool operator==(const AffineShift&, const AffineShift&) = default;
};

struct DomainSpec {
  std::size_t dim = 0;
  std::vector<double> class_priors;
  std::vector<std::vector<GaussianComponent>> classes;
  AffineShift shift;

  std::size_t num_classes() const { return class_priors.size(); }
  void validate() const;
  friend bool operator==(const DomainSpec&, const DomainSpec&) = default;
};

struct PointBatch {
  Tensor features;
  std::vector<int> labels;
  std::size_t size() const { return labels.size(); }
};

PointBatch sample_batch(const DomainSpec& spec, std::size_t n,
                        std::uint64_t seed);

DomainSpec make_target(const DomainSpec& spec, const AffineShift& shift,
                       const std::vector<double>& new_priors);

std::vector<double> source_class_distribution(const DomainSpec& spec);

// Posterior argmax under the generative model of `spec`.
std::vector<int> bayes_predict(const DomainSpec& spec, const Tensor& features);

// Raw class id -> common class id, or kIgnore.
struct ClassMap {
  static constexpr int kIgnore = -1;
  std::vector<int> target;

  static ClassMap identity(std::size_t num_classes);
  std::size_t num_common_classes() const;
};

struct MappedLabels {
  std::vector<int> labels;
  std::vector<bool> ignore;
};

MappedLabels apply_class_map(const std::vector<int>& labels,
                             const ClassMap& map);

// Named source/target pairs. "default" is the synthA->synthB benchmark.
struct DomainPair {
  DomainSpec source;
  DomainSpec target;
};
// Class centers ~ N(0, center_scale^2 I); each class has `components`
// sub-Gaussians placed component_offset away from its center.
struct MixtureRecipe {
  std::size_t dim = 8;
  std::vector<double> priors;
  double center_scale = 2.0;
  double component_offset = 1.0;
  double var_lo = 0.5, var_hi = 1.0;
  std::size_t components = 2;
  std::uint64_t seed = 0;
};

// Target = source pushed through Q diag(s) Q^T x + b (s log-spaced around
// shift_gain with condition number shift_condition, b ~ N(0, shift_offset^2 I))
// with the class priors replaced.
struct PairRecipe {
  MixtureRecipe mixture;
  double shift_condition = 1.0;
  double shift_gain = 1.0;
  double shift_offset = 0.0;
  std::uint64_t shift_seed = 0;
  std::vector<double> target_priors;  // empty = keep source priors
};

DomainPair make_domain_pair(const PairRecipe& recipe);
PairRecipe pair_recipe(const std::string& name);
DomainPair domain_preset(const std::string& name);
std::vector<std::string> domain_preset_names();

void validate_priors(const std::vector<double>& priors);
double kl_divergence(const std::vector<double>& p, const std::vector<double>& q);

}  // namespace ttyd
