#include "ttyd/netmodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>

#include "ttyd/errors.hpp"

namespace ttyd {

void ModelSpec::validate() const {
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
  if (input_dim < 1) throw ConfigError("input_dim must be >= 1");
  for (std::size_t h : hidden_dims) {
    if (h < 1) throw ConfigError("hidden dims must be >= 1");
  }
}

BnMode Model::bn_mode(Phase phase) const {
  switch (stats_mode) {
    case StatsMode::FixedSource:
    case StatsMode::FixedTarget:
    case StatsMode::FixedMean:
      return BnMode::EvalRunning;
    case StatsMode::OnlineTrain:
      return phase == Phase::Train ? BnMode::TrainBatch : BnMode::EvalRunning;
    case StatsMode::OnlineTrainEval:
      return phase == Phase::Train ? BnMode::TrainBatch : BnMode::EvalBatch;
  }
  return BnMode::EvalRunning;
}

Tensor Model::logits(const Tensor& x, Phase phase, ForwardCache* cache) {
  if (x.shape.size() != 2 || x.cols() != spec.input_dim) {
    throw ConfigError("forward: expected n x " + std::to_string(spec.input_dim) +
                      " input");
  }
  const BnMode mode = bn_mode(phase);
  if (cache) cache->layers.assign(layers.size(), {});
  Tensor h = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    HiddenLayer& layer = layers[l];
    Tensor z = linear_forward(h, layer.weight, layer.bias);
    Tensor a;
    BnCache bn_cache;
    Tensor normalized;
    if (layer.has_bn) {
      BnLayer& bn = layer.bn;
      if (bn.folded) {
        a = channel_affine_forward(z, bn.scale, bn.shift);
      } else {
        if (mode == BnMode::TrainBatch) {
          normalized = batchnorm_forward(z, bn.stats, mode, &bn_cache);
        } else {
          normalized = batchnorm_forward(z, std::as_const(bn.stats), mode,
                                         &bn_cache);
        }
        a = channel_affine_forward(normalized, bn.scale, bn.shift);
      }
    } else {
      a = std::move(z);
    }
    Tensor out = activation_forward(a, spec.activation);
    if (cache) {
      auto& lc = cache->layers[l];
      lc.input = std::move(h);
      if (layer.has_bn) lc.pre_bn = std::move(z);
      lc.bn = std::move(bn_cache);
      lc.normalized = std::move(normalized);
      lc.activated = out;
    }
    h = std::move(out);
  }
  Tensor result = linear_forward(h, cls_weight, cls_bias);
  if (cache) cache->classifier_input = std::move(h);
  return result;
}

Tensor Model::eval_logits(const Tensor& x) const {
  if (bn_mode(Phase::Eval) == BnMode::TrainBatch) {
    throw ConfigError("eval_logits: eval phase must not update statistics");
  }
  // Eval-phase BN modes never write to the statistics.
  return const_cast<Model*>(this)->logits(x, Phase::Eval, nullptr);
}

Tensor Model::forward(const Tensor& x, Phase phase) {
  return softmax(logits(x, phase));
}

Tensor Model::predict_probs(const Tensor& x, std::size_t eval_batch) const {
  const std::size_t n = x.rows();
  if (eval_batch == 0 || eval_batch >= n) return softmax(eval_logits(x));
  const std::size_t chunks = (n + eval_batch - 1) / eval_batch;
  const std::size_t d = x.cols(), k = spec.num_classes;
  Tensor probs = Tensor::matrix(n, k);
  std::size_t start = 0;
  for (std::size_t c = 0; c < chunks; ++c) {
    const std::size_t len = n / chunks + (c < n % chunks ? 1 : 0);
    Tensor part = Tensor::matrix(len, d);
    std::copy_n(x.data.begin() + start * d, len * d, part.data.begin());
    Tensor p = softmax(eval_logits(part));
    std::copy(p.data.begin(), p.data.end(), probs.data.begin() + start * k);
    start += len;
  }
  return probs;
}

std::vector<int> Model::predict_labels(const Tensor& x,
                                       std::size_t eval_batch) const {
  const Tensor probs = predict_probs(x, eval_batch);
  std::vector<int> labels(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    auto r = probs.row(i);
    labels[i] = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  return labels;
}

void Model::backward(ForwardCache& cache, const Tensor& dlogits,
                     bool trainable_only) {
  auto wants = [&](const Param& p) {
    return !trainable_only || is_trainable(&p);
  };
  Tensor g = linear_backward(cache.classifier_input, dlogits, cls_weight,
                             cls_bias, !layers.empty(),
                             wants(cls_weight) || wants(cls_bias));
  for (std::size_t l = layers.size(); l-- > 0;) {
    HiddenLayer& layer = layers[l];
    auto& lc = cache.layers[l];
    g = activation_backward(lc.activated, g, spec.activation);
    if (layer.has_bn) {
      BnLayer& bn = layer.bn;
      if (bn.folded) {
        g = channel_affine_backward(lc.pre_bn, g, bn.scale, bn.shift);
      } else {
        g = channel_affine_backward(lc.normalized, g, bn.scale, bn.shift);
        g = batchnorm_backward(g, lc.bn);
      }
    }
    g = linear_backward(lc.input, g, layer.weight, layer.bias, l > 0,
                        wants(layer.weight) || wants(layer.bias));
  }
}

std::vector<Param*> Model::all_params() {
  std::vector<Param*> out;
  for (HiddenLayer& layer : layers) {
    out.push_back(&layer.weight);
    out.push_back(&layer.bias);
    if (layer.has_bn) {
      out.push_back(&layer.bn.scale);
      out.push_back(&layer.bn.shift);
    }
  }
  out.push_back(&cls_weight);
  out.push_back(&cls_bias);
  return out;
}

std::vector<const Param*> Model::all_params() const {
  std::vector<const Param*> out;
  for (Param* p : const_cast<Model*>(this)->all_params()) out.push_back(p);
  return out;
}

std::vector<Param*> Model::trainable_params() {
  std::vector<Param*> out;
  switch (adapt_mode) {
    case AdaptMode::Full:
      return all_params();
    case AdaptMode::BackboneOnly:
      out = all_params();
      out.resize(out.size() - 2);
      return out;
    case AdaptMode::ClassifierOnly:
      return {&cls_weight, &cls_bias};
    case AdaptMode::BnAffineAdapter:
      for (HiddenLayer& layer : layers) {
        if (!layer.has_bn) continue;
        out.push_back(&layer.bn.scale);
        if (adapter_bias) out.push_back(&layer.bn.shift);
      }
      return out;
  }
  return out;
}

bool Model::is_trainable(const Param* p) {
  const auto t = trainable_params();
  return std::find(t.begin(), t.end(), p) != t.end();
}

void Model::zero_grad() {
  for (Param* p : all_params()) p->zero_grad();
}

void Model::reset_optimizer_state() {
  for (Param* p : all_params()) {
    std::fill(p->opt_m.data.begin(), p->opt_m.data.end(), 0.0);
    std::fill(p->opt_v.data.begin(), p->opt_v.data.end(), 0.0);
    p->step_count = 0;
  }
}

bool Model::has_bn() const {
  return std::any_of(layers.begin(), layers.end(),
                     [](const HiddenLayer& l) { return l.has_bn; });
}

std::size_t Model::bn_channel_count() const {
  std::size_t c = 0;
  for (const HiddenLayer& l : layers) {
    if (l.has_bn) c += l.bn.scale.value.numel();
  }
  return c;
}

std::size_t Model::param_count() const {
  std::size_t c = 0;
  for (const Param* p : all_params()) c += p->value.numel();
  return c;
}

std::size_t Model::trainable_param_count() {
  std::size_t c = 0;
  for (const Param* p : trainable_params()) c += p->value.numel();
  return c;
}

Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  auto init_linear = [&](std::size_t fan_in, std::size_t fan_out, Param& w,
                         Param& b) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor wt = Tensor::matrix(fan_in, fan_out);
    for (double& v : wt.data) v = u(rng);
    Tensor bt({fan_out});
    for (double& v : bt.data) v = u(rng);
    w = Param(std::move(wt));
    b = Param(std::move(bt));
  };

  Model m;
  m.spec = spec;
  std::size_t in = spec.input_dim;
  for (std::size_t h : spec.hidden_dims) {
    HiddenLayer layer;
    init_linear(in, h, layer.weight, layer.bias);
    layer.has_bn = spec.bn_after_each_hidden;
    if (layer.has_bn) {
      layer.bn.stats = BnStats::identity(h);
      layer.bn.scale = Param(Tensor({h}, 1.0));
      layer.bn.shift = Param(Tensor({h}, 0.0));
    }
    m.layers.push_back(std::move(layer));
    in = h;
  }
  init_linear(in, spec.num_classes, m.cls_weight, m.cls_bias);
  return m;
}

Model freeze_and_insert_adapters(const Model& model, bool with_bias) {
  if (!model.has_bn()) {
    throw ConfigError("adapter insertion requires batch-norm layers");
  }
  Model out = model;
  for (HiddenLayer& layer : out.layers) {
    if (!layer.has_bn || layer.bn.folded) continue;
    BnLayer& bn = layer.bn;
    const std::size_t c = bn.stats.channels();
    Tensor scale({c}), shift({c});
    for (std::size_t j = 0; j < c; ++j) {
      const double inv_std =
          1.0 / std::sqrt(bn.stats.running_var[j] + bn.stats.eps);
      scale.data[j] = bn.scale.value.data[j] * inv_std;
      shift.data[j] = bn.shift.value.data[j] -
                      bn.scale.value.data[j] * bn.stats.running_mean[j] * inv_std;
    }
    bn.scale = Param(std::move(scale));
    bn.shift = Param(std::move(shift));
    bn.folded = true;
  }
  out.adapt_mode = AdaptMode::BnAffineAdapter;
  out.adapter_bias = with_bias;
  return out;
}

Model clone_model(const Model& model) { return model; }

void restore_model(Model& target, const Model& snapshot) {
  if (!(target.spec == snapshot.spec)) {
    throw ConfigError("restore_model: architecture mismatch");
  }
  target = snapshot;
}

std::string to_string(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::Full: return "full";
    case AdaptMode::BackboneOnly: return "backbone";
    case AdaptMode::ClassifierOnly: return "classifier";
    case AdaptMode::BnAffineAdapter: return "bn_adapter";
  }
  return "?";
}

std::string to_string(StatsMode mode) {
  switch (mode) {
    case StatsMode::FixedSource: return "fixed_source";
    case StatsMode::FixedTarget: return "fixed_target";
    case StatsMode::FixedMean: return "fixed_mean";
    case StatsMode::OnlineTrain: return "online_train";
    case StatsMode::OnlineTrainEval: return "online_train_eval";
  }
  return "?";
}

std::string to_string(Activation act) {
  return act == Activation::Relu ? "relu" : "tanh";
}

AdaptMode parse_adapt_mode(const std::string& s) {
  for (AdaptMode m : {AdaptMode::Full, AdaptMode::BackboneOnly,
                      AdaptMode::ClassifierOnly, AdaptMode::BnAffineAdapter}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown adapt mode '" + s + "'");
}

StatsMode parse_stats_mode(const std::string& s) {
  for (StatsMode m : {StatsMode::FixedSource, StatsMode::FixedTarget,
                      StatsMode::FixedMean, StatsMode::OnlineTrain,
                      StatsMode::OnlineTrainEval}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown stats mode '" + s + "'");
}

Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

// ---------------------------------------------------------------------------
// Checkpoint format (v1):
//
//   ttyd-model 1
//   spec <input_dim> <num_classes> <activation> <bn 0|1> <n_hidden> <dims...>
//   mode <adapt_mode> <adapter_bias 0|1> <stats_mode>
//   tensor <name> <numel> <hex doubles...>        (one line per tensor)
//   bn <layer> <folded> <momentum> <eps>
//   end

namespace {

constexpr const char* kMagic = "ttyd-model";
constexpr int kVersion = 1;

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

void write_values(std::ostream& out, const std::string& name,
                  const std::vector<double>& values) {
  out << "tensor " << name << ' ' << values.size();
  for (double v : values) out << ' ' << hex(v);
  out << '\n';
}

double read_hex(std::istream& in) {
  std::string tok;
  if (!(in >> tok)) throw ConfigError("checkpoint: truncated");
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') {
    throw ConfigError("checkpoint: bad number '" + tok + "'");
  }
  return v;
}

void expect(std::istream& in, const std::string& word) {
  std::string tok;
  if (!(in >> tok) || tok != word) {
    throw ConfigError("checkpoint: expected '" + word + "', got '" + tok + "'");
  }
}

void read_values(std::istream& in, const std::string& name,
                 std::vector<double>& values) {
  expect(in, "tensor");
  expect(in, name);
  std::size_t n = 0;
  if (!(in >> n) || n != values.size()) {
    throw ConfigError("checkpoint: size mismatch for " + name);
  }
  for (double& v : values) v = read_hex(in);
}

}  // namespace

void save_model(const Model& model, std::ostream& out) {
  const ModelSpec& s = model.spec;
  out << kMagic << ' ' << kVersion << '\n';
  out << "spec " << s.input_dim << ' ' << s.num_classes << ' '
      << to_string(s.activation) << ' ' << (s.bn_after_each_hidden ? 1 : 0)
      << ' ' << s.hidden_dims.size();
  for (std::size_t h : s.hidden_dims) out << ' ' << h;
  out << '\n';
  out << "mode " << to_string(model.adapt_mode) << ' '
      << (model.adapter_bias ? 1 : 0) << ' ' << to_string(model.stats_mode)
      << '\n';
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const HiddenLayer& layer = model.layers[l];
    const std::string p = "h" + std::to_string(l) + ".";
    write_values(out, p + "weight", layer.weight.value.data);
    write_values(out, p + "bias", layer.bias.value.data);
    if (layer.has_bn) {
      const BnLayer& bn = layer.bn;
      out << "bn " << l << ' ' << (bn.folded ? 1 : 0) << ' '
          << hex(bn.stats.momentum) << ' ' << hex(bn.stats.eps) << '\n';
      write_values(out, p + "running_mean", bn.stats.running_mean);
      write_values(out, p + "running_var", bn.stats.running_var);
      write_values(out, p + "scale", bn.scale.value.data);
      write_values(out, p + "shift", bn.shift.value.data);
    }
  }
  write_values(out, "cls.weight", model.cls_weight.value.data);
  write_values(out, "cls.bias", model.cls_bias.value.data);
  out << "end\n";
}

Model load_model(std::istream& in) {
  expect(in, kMagic);
  int version = 0;
  if (!(in >> version) || version != kVersion) {
    throw ConfigError("checkpoint: unsupported version");
  }
  ModelSpec spec;
  std::string act;
  int bn = 0;
  std::size_t n_hidden = 0;
  expect(in, "spec");
  if (!(in >> spec.input_dim >> spec.num_classes >> act >> bn >> n_hidden)) {
    throw ConfigError("checkpoint: bad spec line");
  }
  spec.activation = parse_activation(act);
  spec.bn_after_each_hidden = bn != 0;
  spec.hidden_dims.resize(n_hidden);
  for (std::size_t& h : spec.hidden_dims) {
    if (!(in >> h)) throw ConfigError("checkpoint: bad hidden dims");
  }
  Model m = build_model(spec, 0);

  std::string adapt, stats;
  int bias = 1;
  expect(in, "mode");
  if (!(in >> adapt >> bias >> stats)) throw ConfigError("checkpoint: bad mode");
  m.adapt_mode = parse_adapt_mode(adapt);
  m.adapter_bias = bias != 0;
  m.stats_mode = parse_stats_mode(stats);

  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    HiddenLayer& layer = m.layers[l];
    const std::string p = "h" + std::to_string(l) + ".";
    read_values(in, p + "weight", layer.weight.value.data);
    read_values(in, p + "bias", layer.bias.value.data);
    if (layer.has_bn) {
      std::size_t idx = 0;
      int folded = 0;
      expect(in, "bn");
      if (!(in >> idx >> folded) || idx != l) {
        throw ConfigError("checkpoint: bad bn header");
      }
      layer.bn.folded = folded != 0;
      layer.bn.stats.momentum = read_hex(in);
      layer.bn.stats.eps = read_hex(in);
      read_values(in, p + "running_mean", layer.bn.stats.running_mean);
      read_values(in, p + "running_var", layer.bn.stats.running_var);
      read_values(in, p + "scale", layer.bn.scale.value.data);
      read_values(in, p + "shift", layer.bn.shift.value.data);
    }
  }
  read_values(in, "cls.weight", m.cls_weight.value.data);
  read_values(in, "cls.bias", m.cls_bias.value.data);
  expect(in, "end");
  return m;
}

void save_model_file(const Model& model, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write checkpoint " + path);
  save_model(model, out);
}

Model load_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read checkpoint " + path);
  return load_model(in);
}

}  // namespace ttyd
