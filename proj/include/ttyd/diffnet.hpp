#pragma once

// Dense double-precision tensors, per-layer forward/backward kernels and the
// AdamW optimizer. Everything the classifier needs and nothing more.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace ttyd {

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::vector<double> values);

  std::size_t numel() const { return data.size(); }
  // Rows/cols for rank-2 tensors; a rank-1 tensor is treated as 1 x n.
  std::size_t rows() const;
  std::size_t cols() const;

  double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data.data() + r * cols(), cols()};
  }

  bool all_finite() const;
  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// A trainable tensor with its gradient and Adam moment estimates.
struct Param {
  Tensor value;
  Tensor grad;
  Tensor opt_m;
  Tensor opt_v;
  std::uint64_t step_count = 0;

  Param() = default;
  explicit Param(Tensor init);

  void zero_grad();
  friend bool operator==(const Param&, const Param&) = default;
};

// Running statistics of one batch-normalization layer.
struct BnStats {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  static BnStats identity(std::size_t channels, double momentum = 0.1,
                          double eps = 1e-5);
  std::size_t channels() const { return running_mean.size(); }
  friend bool operator==(const BnStats&, const BnStats&) = default;
};

enum class BnMode {
  TrainBatch,   // normalize with batch statistics, update running statistics
  EvalRunning,  // normalize with stored running statistics
  EvalBatch,    // normalize with batch statistics, leave stored ones untouched
};

// Values saved by batchnorm_forward for the backward pass.
struct BnCache {
  Tensor x_hat;
  std::vector<double> inv_std;
  bool batch_stats = false;
};

enum class Activation { Relu, Tanh };

// out = x w + b
Tensor linear_forward(const Tensor& x, const Param& w, const Param& b);
// Accumulates dL/dw and dL/db (unless want_param_grads is false) and returns
// dL/dx (empty when want_dx is false).
Tensor linear_backward(const Tensor& x, const Tensor& dout, Param& w, Param& b,
                       bool want_dx = true, bool want_param_grads = true);

// TrainBatch updates `stats` in place.
Tensor batchnorm_forward(const Tensor& x, BnStats& stats, BnMode mode,
                         BnCache* cache = nullptr);
// Read-only variant; TrainBatch is rejected.
Tensor batchnorm_forward(const Tensor& x, const BnStats& stats, BnMode mode,
                         BnCache* cache = nullptr);
Tensor batchnorm_backward(const Tensor& dout, const BnCache& cache);

// Per-channel y = scale * x + shift.
Tensor channel_affine_forward(const Tensor& x, const Param& scale,
                              const Param& shift);
Tensor channel_affine_backward(const Tensor& x, const Tensor& dout,
                               Param& scale, Param& shift);

Tensor activation_forward(const Tensor& x, Activation act);
// `out` is the forward output; both activations have derivatives expressible
// in terms of it.
Tensor activation_backward(const Tensor& out, const Tensor& dout,
                           Activation act);

// Row-wise softmax, max-subtracted.
Tensor softmax(const Tensor& logits);

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  friend bool operator==(const AdamWConfig&, const AdamWConfig&) = default;
};

// Decoupled weight decay followed by a bias-corrected Adam update.
void adamw_step(std::span<Param* const> params, const AdamWConfig& cfg);

// Central-difference check of analytic gradients. The caller must have
// populated each Param's grad at the current values; `loss` must evaluate the
// scalar loss from the current values only. Returns
// max |analytic - numeric| / max(1, |numeric|) over all parameter entries.
double grad_check(const std::function<double()>& loss,
                  std::span<Param* const> params, double eps = 1e-5);

}  // namespace ttyd
