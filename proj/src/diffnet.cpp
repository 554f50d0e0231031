#include "ttyd/diffnet.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ttyd/errors.hpp"

namespace ttyd {
namespace {

std::size_t product(const std::vector<std::size_t>& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Tensor& t) {
  std::string s = "[";
  for (std::size_t i = 0; i < t.shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(t.shape[i]);
  }
  return s + "]";
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.shape.size() != 2) {
    throw ConfigError(std::string(what) + ": expected a matrix, got " +
                      shape_str(t));
  }
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> dims, double fill)
    : shape(std::move(dims)), data(product(shape), fill) {}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, double fill) {
  return Tensor({rows, cols}, fill);
}

Tensor Tensor::from_rows(
    std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  Tensor t = matrix(r, c);
  std::size_t i = 0;
  for (const auto& row : rows) {
    if (row.size() != c) throw ConfigError("from_rows: ragged rows");
    for (double v : row) t.data[i++] = v;
  }
  return t;
}

Tensor Tensor::vector(std::vector<double> values) {
  Tensor t;
  t.shape = {values.size()};
  t.data = std::move(values);
  return t;
}

std::size_t Tensor::rows() const {
  if (shape.size() == 1) return 1;
  return shape.empty() ? 0 : shape[0];
}

std::size_t Tensor::cols() const {
  if (shape.size() == 1) return shape[0];
  return shape.size() < 2 ? 0 : shape[1];
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(),
                     [](double v) { return std::isfinite(v); });
}

Param::Param(Tensor init)
    : value(std::move(init)),
      grad(value.shape),
      opt_m(value.shape),
      opt_v(value.shape) {}

void Param::zero_grad() { std::fill(grad.data.begin(), grad.data.end(), 0.0); }

BnStats BnStats::identity(std::size_t channels, double momentum, double eps) {
  BnStats s;
  s.running_mean.assign(channels, 0.0);
  s.running_var.assign(channels, 1.0);
  s.momentum = momentum;
  s.eps = eps;
  return s;
}

Tensor linear_forward(const Tensor& x, const Param& w, const Param& b) {
  require_matrix(x, "linear_forward input");
  const std::size_t n = x.rows(), d_in = x.cols();
  const std::size_t d_out = w.value.cols();
  if (w.value.shape.size() != 2 || w.value.rows() != d_in ||
      b.value.numel() != d_out) {
    throw ConfigError("linear_forward: shape mismatch x" + shape_str(x) +
                      " w" + shape_str(w.value) + " b" + shape_str(b.value));
  }
  Tensor out = Tensor::matrix(n, d_out);
  const double* wd = w.value.data.data();
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.data.data() + i * d_out;
    std::copy(b.value.data.begin(), b.value.data.end(), o);
    const double* xi = x.data.data() + i * d_in;
    for (std::size_t k = 0; k < d_in; ++k) {
      const double xv = xi[k];
      const double* wk = wd + k * d_out;
      for (std::size_t j = 0; j < d_out; ++j) o[j] += xv * wk[j];
    }
  }
  return out;
}

Tensor linear_backward(const Tensor& x, const Tensor& dout, Param& w, Param& b,
                       bool want_dx, bool want_param_grads) {
  const std::size_t n = x.rows(), d_in = x.cols(), d_out = w.value.cols();
  if (dout.rows() != n || dout.cols() != d_out) {
    throw ConfigError("linear_backward: gradient shape mismatch");
  }
  double* gw = w.grad.data.data();
  double* gb = b.grad.data.data();
  for (std::size_t i = 0; want_param_grads && i < n; ++i) {
    const double* g = dout.data.data() + i * d_out;
    const double* xi = x.data.data() + i * d_in;
    for (std::size_t j = 0; j < d_out; ++j) gb[j] += g[j];
    for (std::size_t k = 0; k < d_in; ++k) {
      const double xv = xi[k];
      double* gwk = gw + k * d_out;
      for (std::size_t j = 0; j < d_out; ++j) gwk[j] += xv * g[j];
    }
  }
  if (!want_dx) return {};
  Tensor dx = Tensor::matrix(n, d_in);
  const double* wd = w.value.data.data();
  for (std::size_t i = 0; i < n; ++i) {
    const double* g = dout.data.data() + i * d_out;
    double* dxi = dx.data.data() + i * d_in;
    for (std::size_t k = 0; k < d_in; ++k) {
      const double* wk = wd + k * d_out;
      double acc = 0.0;
      for (std::size_t j = 0; j < d_out; ++j) acc += wk[j] * g[j];
      dxi[k] = acc;
    }
  }
  return dx;
}

namespace {

Tensor batchnorm_impl(const Tensor& x, const BnStats& stats, BnMode mode,
                      BnCache* cache, BnStats* update) {
  require_matrix(x, "batchnorm_forward input");
  const std::size_t n = x.rows(), c = x.cols();
  if (stats.channels() != c || stats.running_var.size() != c) {
    throw ConfigError("batchnorm_forward: channel mismatch");
  }
  const bool batch = mode != BnMode::EvalRunning;
  if (batch && n < 2) {
    throw DegenerateBatchError("batch statistics need at least 2 rows, got " +
                               std::to_string(n));
  }

  std::vector<double> mean(c), var(c);
  if (batch) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) mean[j] += x.data[i * c + j];
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double d = x.data[i * c + j] - mean[j];
        var[j] += d * d;
      }
    }
    // Biased variance, both for normalization and for the running average.
    for (double& v : var) v /= static_cast<double>(n);
    if (mode == BnMode::TrainBatch) {
      const double m = update->momentum;
      for (std::size_t j = 0; j < c; ++j) {
        update->running_mean[j] =
            (1.0 - m) * update->running_mean[j] + m * mean[j];
        update->running_var[j] = (1.0 - m) * update->running_var[j] + m * var[j];
      }
    }
  } else {
    mean = stats.running_mean;
    var = stats.running_var;
  }

  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) {
    inv_std[j] = 1.0 / std::sqrt(var[j] + stats.eps);
  }
  Tensor out = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out.data[i * c + j] = (x.data[i * c + j] - mean[j]) * inv_std[j];
    }
  }
  if (cache) {
    cache->x_hat = out;
    cache->inv_std = std::move(inv_std);
    cache->batch_stats = batch;
  }
  return out;
}

}  // namespace

Tensor batchnorm_forward(const Tensor& x, BnStats& stats, BnMode mode,
                         BnCache* cache) {
  return batchnorm_impl(x, stats, mode, cache, &stats);
}

Tensor batchnorm_forward(const Tensor& x, const BnStats& stats, BnMode mode,
                         BnCache* cache) {
  if (mode == BnMode::TrainBatch) {
    throw ConfigError("batchnorm_forward: TrainBatch needs mutable statistics");
  }
  return batchnorm_impl(x, stats, mode, cache, nullptr);
}

Tensor batchnorm_backward(const Tensor& dout, const BnCache& cache) {
  const std::size_t n = dout.rows(), c = dout.cols();
  Tensor dx = Tensor::matrix(n, c);
  if (!cache.batch_stats) {
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        dx.data[i * c + j] = dout.data[i * c + j] * cache.inv_std[j];
      }
    }
    return dx;
  }
  std::vector<double> sum_g(c), sum_gx(c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double g = dout.data[i * c + j];
      sum_g[j] += g;
      sum_gx[j] += g * cache.x_hat.data[i * c + j];
    }
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double g = dout.data[i * c + j];
      const double xh = cache.x_hat.data[i * c + j];
      dx.data[i * c + j] =
          cache.inv_std[j] * (g - inv_n * sum_g[j] - xh * inv_n * sum_gx[j]);
    }
  }
  return dx;
}

Tensor channel_affine_forward(const Tensor& x, const Param& scale,
                              const Param& shift) {
  const std::size_t n = x.rows(), c = x.cols();
  if (scale.value.numel() != c || shift.value.numel() != c) {
    throw ConfigError("channel_affine_forward: channel mismatch");
  }
  Tensor out = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      out.data[i * c + j] =
          scale.value.data[j] * x.data[i * c + j] + shift.value.data[j];
    }
  }
  return out;
}

Tensor channel_affine_backward(const Tensor& x, const Tensor& dout,
                               Param& scale, Param& shift) {
  const std::size_t n = x.rows(), c = x.cols();
  Tensor dx = Tensor::matrix(n, c);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      const double g = dout.data[i * c + j];
      scale.grad.data[j] += g * x.data[i * c + j];
      shift.grad.data[j] += g;
      dx.data[i * c + j] = g * scale.value.data[j];
    }
  }
  return dx;
}

Tensor activation_forward(const Tensor& x, Activation act) {
  Tensor out = x;
  if (act == Activation::Relu) {
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  } else {
    for (double& v : out.data) v = std::tanh(v);
  }
  return out;
}

Tensor activation_backward(const Tensor& out, const Tensor& dout,
                           Activation act) {
  Tensor dx = dout;
  if (act == Activation::Relu) {
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
      if (out.data[i] <= 0.0) dx.data[i] = 0.0;
    }
  } else {
    for (std::size_t i = 0; i < dx.data.size(); ++i) {
      dx.data[i] *= 1.0 - out.data[i] * out.data[i];
    }
  }
  return dx;
}

Tensor softmax(const Tensor& logits) {
  Tensor out = logits;
  const std::size_t n = out.rows();
  for (std::size_t i = 0; i < n; ++i) {
    auto r = out.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double sum = 0.0;
    for (double& v : r) {
      v = std::exp(v - mx);
      sum += v;
    }
    for (double& v : r) v /= sum;
  }
  return out;
}

void adamw_step(std::span<Param* const> params, const AdamWConfig& cfg) {
  for (Param* p : params) {
    ++p->step_count;
    const double t = static_cast<double>(p->step_count);
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    const double decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      const double g = p->grad.data[i];
      double& m = p->opt_m.data[i];
      double& v = p->opt_v.data[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
      double& w = p->value.data[i];
      w *= decay;
      w -= cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
    }
  }
}

double grad_check(const std::function<double()>& loss,
                  std::span<Param* const> params, double eps) {
  double worst = 0.0;
  for (Param* p : params) {
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      double& w = p->value.data[i];
      const double saved = w;
      w = saved + eps;
      const double up = loss();
      w = saved - eps;
      const double down = loss();
      w = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(p->grad.data[i] - numeric) /
                         std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace ttyd
