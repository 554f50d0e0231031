#include "ttyd/domains.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include <Eigen/Dense>

#include "ttyd/errors.hpp"

namespace ttyd {

AffineShift AffineShift::identity(std::size_t dim) {
  AffineShift a;
  a.matrix.assign(dim * dim, 0.0);
  for (std::size_t i = 0; i < dim; ++i) a.matrix[i * dim + i] = 1.0;
  a.offset.assign(dim, 0.0);
  return a;
}

AffineShift AffineShift::compose(const AffineShift& inner) const {
  const std::size_t d = dim();
  if (inner.dim() != d) throw ConfigError("compose: dimension mismatch");
  AffineShift out;
  out.matrix.assign(d * d, 0.0);
  out.offset = offset;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < d; ++k) {
      const double a = matrix[i * d + k];
      for (std::size_t j = 0; j < d; ++j) {
        out.matrix[i * d + j] += a * inner.matrix[k * d + j];
      }
      out.offset[i] += a * inner.offset[k];
    }
  }
  return out;
}

void validate_priors(const std::vector<double>& priors) {
  if (priors.size() < 2) throw ConfigError("priors need at least 2 classes");
  double sum = 0.0;
  for (double p : priors) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw ConfigError("priors must be finite and non-negative");
    }
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw ConfigError("priors must sum to 1 (got " + std::to_string(sum) + ")");
  }
}

double kl_divergence(const std::vector<double>& p,
                     const std::vector<double>& q) {
  double kl = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k] > 0.0) kl += p[k] * std::log(p[k] / q[k]);
  }
  return kl;
}

void DomainSpec::validate() const {
  validate_priors(class_priors);
  if (classes.size() != class_priors.size()) {
    throw ConfigError("one component list per class required");
  }
  if (shift.dim() != dim || shift.matrix.size() != dim * dim) {
    throw ConfigError("affine shift dimension mismatch");
  }
  for (const auto& comps : classes) {
    if (comps.empty()) throw ConfigError("class without components");
    for (const auto& c : comps) {
      if (c.mean.size() != dim || c.variance.size() != dim) {
        throw ConfigError("component dimension mismatch");
      }
      if (!(c.weight > 0.0)) throw ConfigError("component weight must be > 0");
      for (double v : c.variance) {
        if (!(v > 0.0)) throw ConfigError("covariance entries must be > 0");
      }
    }
  }
}

PointBatch sample_batch(const DomainSpec& spec, std::size_t n,
                        std::uint64_t seed) {
  if (n < 1) throw ConfigError("sample_batch: n must be >= 1");
  const std::size_t d = spec.dim;
  std::mt19937_64 rng(seed);
  std::discrete_distribution<int> label_dist(spec.class_priors.begin(),
                                             spec.class_priors.end());
  std::vector<std::discrete_distribution<int>> comp_dist;
  for (const auto& comps : spec.classes) {
    std::vector<double> w;
    for (const auto& c : comps) w.push_back(c.weight);
    comp_dist.emplace_back(w.begin(), w.end());
  }
  std::normal_distribution<double> normal(0.0, 1.0);

  PointBatch batch;
  batch.features = Tensor::matrix(n, d);
  batch.labels.resize(n);
  std::vector<double> x(d);
  for (std::size_t i = 0; i < n; ++i) {
    const int label = label_dist(rng);
    const auto& comp = spec.classes[label][comp_dist[label](rng)];
    for (std::size_t j = 0; j < d; ++j) {
      x[j] = comp.mean[j] + std::sqrt(comp.variance[j]) * normal(rng);
    }
    auto out = batch.features.row(i);
    for (std::size_t r = 0; r < d; ++r) {
      double acc = spec.shift.offset[r];
      for (std::size_t c = 0; c < d; ++c) {
        acc += spec.shift.matrix[r * d + c] * x[c];
      }
      out[r] = acc;
    }
    batch.labels[i] = label;
  }
  return batch;
}

DomainSpec make_target(const DomainSpec& spec, const AffineShift& shift,
                       const std::vector<double>& new_priors) {
  validate_priors(new_priors);
  if (new_priors.size() != spec.num_classes()) {
    throw ConfigError("make_target: prior length mismatch");
  }
  DomainSpec out = spec;
  out.shift = shift.compose(spec.shift);
  out.class_priors = new_priors;
  return out;
}

std::vector<double> source_class_distribution(const DomainSpec& spec) {
  return spec.class_priors;
}

std::vector<int> bayes_predict(const DomainSpec& spec, const Tensor& features) {
  const std::size_t d = spec.dim, n = features.rows();
  Eigen::MatrixXd a(d, d);
  for (std::size_t r = 0; r < d; ++r) {
    for (std::size_t c = 0; c < d; ++c) a(r, c) = spec.shift.matrix[r * d + c];
  }
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(a);
  Eigen::VectorXd offset(d);
  for (std::size_t r = 0; r < d; ++r) offset(r) = spec.shift.offset[r];

  // The Jacobian of the shift is common to all classes and drops out.
  std::vector<int> labels(n);
  Eigen::VectorXd y(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < d; ++r) y(r) = features.at(i, r);
    const Eigen::VectorXd x = lu.solve(y - offset);
    double best = -std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (std::size_t k = 0; k < spec.num_classes(); ++k) {
      if (spec.class_priors[k] <= 0.0) continue;
      const auto& comps = spec.classes[k];
      double wsum = 0.0;
      for (const auto& c : comps) wsum += c.weight;
      // log-sum-exp over components
      std::vector<double> logs;
      for (const auto& c : comps) {
        double lp = std::log(c.weight / wsum);
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = x(j) - c.mean[j];
          lp -= 0.5 * (diff * diff / c.variance[j] +
                       std::log(2.0 * std::numbers::pi * c.variance[j]));
        }
        logs.push_back(lp);
      }
      const double mx = *std::max_element(logs.begin(), logs.end());
      double s = 0.0;
      for (double l : logs) s += std::exp(l - mx);
      const double score = std::log(spec.class_priors[k]) + mx + std::log(s);
      if (score > best) {
        best = score;
        best_k = static_cast<int>(k);
      }
    }
    labels[i] = best_k;
  }
  return labels;
}

ClassMap ClassMap::identity(std::size_t num_classes) {
  ClassMap m;
  m.target.resize(num_classes);
  std::iota(m.target.begin(), m.target.end(), 0);
  return m;
}

std::size_t ClassMap::num_common_classes() const {
  int mx = -1;
  for (int t : target) mx = std::max(mx, t);
  return static_cast<std::size_t>(mx + 1);
}

MappedLabels apply_class_map(const std::vector<int>& labels,
                             const ClassMap& map) {
  MappedLabels out;
  out.labels.resize(labels.size());
  out.ignore.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int raw = labels[i];
    if (raw < 0 || static_cast<std::size_t>(raw) >= map.target.size()) {
      throw ConfigError("class map has no entry for id " + std::to_string(raw));
    }
    const int mapped = map.target[raw];
    out.ignore[i] = mapped == ClassMap::kIgnore;
    out.labels[i] = out.ignore[i] ? 0 : mapped;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Presets

namespace {

DomainSpec make_mixture(const MixtureRecipe& r) {
  std::mt19937_64 rng(r.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> var_u(r.var_lo, r.var_hi);
  DomainSpec s;
  s.dim = r.dim;
  s.class_priors = r.priors;
  s.shift = AffineShift::identity(r.dim);
  for (std::size_t k = 0; k < r.priors.size(); ++k) {
    std::vector<double> center(r.dim);
    for (double& c : center) c = r.center_scale * normal(rng);
    std::vector<GaussianComponent> comps;
    for (std::size_t m = 0; m < r.components; ++m) {
      std::vector<double> dir(r.dim);
      double norm = 0.0;
      for (double& v : dir) {
        v = normal(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
      GaussianComponent c;
      c.mean.resize(r.dim);
      c.variance.resize(r.dim);
      for (std::size_t j = 0; j < r.dim; ++j) {
        c.mean[j] = center[j] + r.component_offset * dir[j] / norm;
        c.variance[j] = var_u(rng);
      }
      comps.push_back(std::move(c));
    }
    s.classes.push_back(std::move(comps));
  }
  return s;
}

// Q diag(s) Q^T with s log-spaced so that cond = `condition`, plus an offset.
AffineShift random_shift(std::size_t dim, double condition, double gain,
                         double offset_scale, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) g(i, j) = normal(rng);
  }
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Eigen::VectorXd s(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double t = dim > 1 ? static_cast<double>(i) / (dim - 1) : 0.5;
    s(i) = gain * std::pow(condition, t - 0.5);
  }
  const Eigen::MatrixXd a = q * s.asDiagonal() * q.transpose();
  AffineShift out;
  out.matrix.resize(dim * dim);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) out.matrix[i * dim + j] = a(i, j);
  }
  out.offset.resize(dim);
  for (double& o : out.offset) o = offset_scale * normal(rng);
  return out;
}

std::vector<double> normalized(std::vector<double> v) {
  const double s = std::accumulate(v.begin(), v.end(), 0.0);
  for (double& x : v) x /= s;
  // Fold rounding residue into the largest entry so the sum is exact to 1e-12.
  const double residue = 1.0 - std::accumulate(v.begin(), v.end(), 0.0);
  *std::max_element(v.begin(), v.end()) += residue;
  return v;
}

}  // namespace

DomainPair make_domain_pair(const PairRecipe& recipe) {
  DomainPair p;
  p.source = make_mixture(recipe.mixture);
  const AffineShift shift = random_shift(recipe.mixture.dim, recipe.shift_condition,
                                         recipe.shift_gain, recipe.shift_offset,
                                         recipe.shift_seed);
  p.target = make_target(p.source, shift,
                         recipe.target_priors.empty() ? recipe.mixture.priors
                                                      : recipe.target_priors);
  p.source.validate();
  p.target.validate();
  return p;
}

PairRecipe pair_recipe(const std::string& name) {
  PairRecipe r;
  if (name == "default") {
    r.mixture.priors = normalized({0.40, 0.27, 0.17, 0.10, 0.06});
    r.mixture.center_scale = 0.7;
    r.mixture.seed = 11;
    r.shift_condition = 1.2;
    r.shift_offset = 2.0;
    r.shift_seed = 12;
    return r;
  }
  if (name == "imbalanced") {
    // Largest to smallest class prior is 1000:1 in both domains.
    r = pair_recipe("default");
    r.mixture.priors = normalized({0.3, 1.0, 0.02, 0.001, 0.08});
    r.target_priors = normalized({0.35, 1.0, 0.03, 0.001, 0.1});
    return r;
  }
  if (name == "separated2") {
    r.mixture.priors = {0.5, 0.5};
    r.mixture.center_scale = 3.0;
    r.mixture.component_offset = 0.5;
    r.mixture.var_lo = 0.3;
    r.mixture.var_hi = 0.5;
    r.mixture.seed = 5;
    r.shift_condition = 1.0;
    r.shift_offset = 0.0;
    return r;
  }
  throw ConfigError("unknown domain preset '" + name + "'");
}

DomainPair domain_preset(const std::string& name) {
  return make_domain_pair(pair_recipe(name));
}

std::vector<std::string> domain_preset_names() {
  return {"default", "imbalanced", "separated2"};
}

}  // namespace ttyd
