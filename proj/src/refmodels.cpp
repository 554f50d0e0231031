#include "ttyd/refmodels.hpp"

#include "ttyd/errors.hpp"
#include "ttyd/seeding.hpp"

namespace ttyd {
namespace {

void require_bn(const Model& m) {
  if (!m.has_bn()) throw ConfigError("reference model needs batch-norm layers");
  for (const HiddenLayer& l : m.layers) {
    if (l.has_bn && l.bn.folded) {
      throw ConfigError("reference model needs unfolded batch-norm layers");
    }
  }
}

}  // namespace

Model adabn(const Model& source_model, std::span<const Tensor> target_stream,
            std::optional<double> momentum) {
  require_bn(source_model);
  if (target_stream.empty()) throw ConfigError("adabn: empty target stream");
  Model m = source_model;
  if (momentum) {
    for (HiddenLayer& l : m.layers) {
      if (l.has_bn) l.bn.stats.momentum = *momentum;
    }
  }
  m.stats_mode = StatsMode::OnlineTrain;
  for (const Tensor& batch : target_stream) m.logits(batch, Phase::Train);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    if (m.layers[l].has_bn) {
      m.layers[l].bn.stats.momentum = source_model.layers[l].bn.stats.momentum;
    }
  }
  m.stats_mode = StatsMode::FixedTarget;
  return m;
}

Model ptbn(const Model& source_model) {
  require_bn(source_model);
  Model m = source_model;
  m.stats_mode = StatsMode::OnlineTrainEval;
  return m;
}

Model meanbn(const Model& source_model, const Model& adabn_model) {
  require_bn(source_model);
  if (!(source_model.spec == adabn_model.spec)) {
    throw ConfigError("meanbn: architecture mismatch");
  }
  Model m = source_model;
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    if (!m.layers[l].has_bn) continue;
    BnStats& s = m.layers[l].bn.stats;
    const BnStats& t = adabn_model.layers[l].bn.stats;
    for (std::size_t j = 0; j < s.channels(); ++j) {
      s.running_mean[j] = 0.5 * (s.running_mean[j] + t.running_mean[j]);
      s.running_var[j] = 0.5 * (s.running_var[j] + t.running_var[j]);
    }
  }
  m.stats_mode = StatsMode::FixedMean;
  return m;
}

Model build_reference(ReferenceKind kind, const Model& source_model,
                      std::span<const Tensor> target_stream) {
  switch (kind) {
    case ReferenceKind::SourceOnly: {
      Model m = source_model;
      m.stats_mode = StatsMode::FixedSource;
      return m;
    }
    case ReferenceKind::AdaBN:
      return adabn(source_model, target_stream);
    case ReferenceKind::PTBN:
      return ptbn(source_model);
    case ReferenceKind::MeanBN:
      return meanbn(source_model, adabn(source_model, target_stream));
  }
  throw ConfigError("unknown reference kind");
}

std::vector<Tensor> target_stream(const DomainSpec& target,
                                  std::size_t num_batches,
                                  std::size_t batch_size, std::uint64_t seed) {
  std::vector<Tensor> out;
  out.reserve(num_batches);
  for (std::size_t b = 0; b < num_batches; ++b) {
    out.push_back(sample_batch(target, batch_size, derive_seed(seed, b)).features);
  }
  return out;
}

std::string to_string(ReferenceKind kind) {
  switch (kind) {
    case ReferenceKind::SourceOnly: return "sourceonly";
    case ReferenceKind::AdaBN: return "adabn";
    case ReferenceKind::PTBN: return "ptbn";
    case ReferenceKind::MeanBN: return "meanbn";
  }
  return "?";
}

ReferenceKind parse_reference_kind(const std::string& s) {
  for (ReferenceKind k : {ReferenceKind::SourceOnly, ReferenceKind::AdaBN,
                          ReferenceKind::PTBN, ReferenceKind::MeanBN}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown reference kind '" + s + "'");
}

}  // namespace ttyd
