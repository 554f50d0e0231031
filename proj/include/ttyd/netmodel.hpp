#pragma once

// MLP classifier with optional batch normalization after each hidden layer.
// Each BN layer carries its running statistics plus a per-channel affine
// (scale, shift). "Folding" a BN layer turns it into a plain per-channel
// affine adapter initialized from those statistics.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ttyd/diffnet.hpp"

namespace ttyd {

struct ModelSpec {
  std::size_t input_dim = 8;
  std::vector<std::size_t> hidden_dims{64, 64};
  std::size_t num_classes = 5;
  Activation activation = Activation::Relu;
  bool bn_after_each_hidden = true;

  void validate() const;
  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

enum class AdaptMode { Full, BackboneOnly, ClassifierOnly, BnAffineAdapter };

enum class StatsMode {
  FixedSource,
  FixedTarget,
  FixedMean,
  OnlineTrain,
  OnlineTrainEval,
};

enum class Phase { Train, Eval };

struct BnLayer {
  BnStats stats;
  Param scale;
  Param shift;
  // When folded, forward is scale * x + shift with no normalization.
  bool folded = false;
  friend bool operator==(const BnLayer&, const BnLayer&) = default;
};

struct HiddenLayer {
  Param weight;
  Param bias;
  bool has_bn = false;
  BnLayer bn;
  friend bool operator==(const HiddenLayer&, const HiddenLayer&) = default;
};

struct ForwardCache {
  struct LayerCache {
    Tensor input;
    Tensor pre_bn;
    BnCache bn;
    Tensor normalized;
    Tensor activated;
  };
  std::vector<LayerCache> layers;
  Tensor classifier_input;
};

class Model {
 public:
  ModelSpec spec;
  std::vector<HiddenLayer> layers;
  Param cls_weight;
  Param cls_bias;
  AdaptMode adapt_mode = AdaptMode::Full;
  bool adapter_bias = true;
  StatsMode stats_mode = StatsMode::OnlineTrain;

  // Train phase may update BN running statistics (online stats modes).
  Tensor logits(const Tensor& x, Phase phase, ForwardCache* cache = nullptr);
  // Eval-phase logits on the whole input as one batch.
  Tensor eval_logits(const Tensor& x) const;

  Tensor forward(const Tensor& x, Phase phase = Phase::Train);
  // Eval-phase probabilities, computed in near-equal chunks of at most
  // `eval_batch` rows (0 = a single batch). Chunking matters only when BN uses
  // batch statistics at eval time.
  Tensor predict_probs(const Tensor& x, std::size_t eval_batch = 0) const;
  std::vector<int> predict_labels(const Tensor& x,
                                  std::size_t eval_batch = 0) const;

  // Accumulates gradients of the loss given dL/dlogits. Gradients of frozen
  // linear layers are skipped when `trainable_only` is set.
  void backward(ForwardCache& cache, const Tensor& dlogits,
                bool trainable_only = true);

  std::vector<Param*> trainable_params();
  std::vector<Param*> all_params();
  std::vector<const Param*> all_params() const;
  void zero_grad();
  // Clears Adam moments and step counts of every parameter.
  void reset_optimizer_state();

  bool has_bn() const;
  std::size_t bn_channel_count() const;
  std::size_t param_count() const;
  std::size_t trainable_param_count();

  friend bool operator==(const Model&, const Model&) = default;

 private:
  BnMode bn_mode(Phase phase) const;
  bool is_trainable(const Param* p);
};

Model build_model(const ModelSpec& spec, std::uint64_t seed);

// Freezes every existing parameter and folds each BN layer into a trainable
// per-channel adapter that reproduces the EvalRunning forward at init.
Model freeze_and_insert_adapters(const Model& model, bool with_bias = true);

Model clone_model(const Model& model);
// Copies `snapshot` into `target`; the two must share a ModelSpec.
void restore_model(Model& target, const Model& snapshot);

// Versioned flat-text checkpoint. Doubles are written as hex floats so the
// round trip is bit-exact. Optimizer state is not stored.
void save_model(const Model& model, std::ostream& out);
Model load_model(std::istream& in);
void save_model_file(const Model& model, const std::string& path);
Model load_model_file(const std::string& path);

std::string to_string(AdaptMode mode);
std::string to_string(StatsMode mode);
std::string to_string(Activation act);
AdaptMode parse_adapt_mode(const std::string& s);
StatsMode parse_stats_mode(const std::string& s);
Activation parse_activation(const std::string& s);

}  // namespace ttyd
