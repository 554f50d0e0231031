#pragma once

// Training-free reference models derived from a source model by changing only
// how batch normalization gets its statistics.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ttyd/diffnet.hpp"
#include "ttyd/domains.hpp"
#include "ttyd/netmodel.hpp"

namespace ttyd {

enum class ReferenceKind { SourceOnly, AdaBN, PTBN, MeanBN };

// Running statistics re-estimated from the stream with TrainBatch forward
// passes; no gradient steps. `momentum` overrides the layers' own momentum.
// The result evaluates with the stored (target) statistics.
Model adabn(const Model& source_model, std::span<const Tensor> target_stream,
            std::optional<double> momentum = std::nullopt);

// Evaluates with the statistics of each inference batch.
Model ptbn(const Model& source_model);

// Statistics are the equal-weight mean of the two models' running statistics.
Model meanbn(const Model& source_model, const Model& adabn_model);

Model build_reference(ReferenceKind kind, const Model& source_model,
                      std::span<const Tensor> target_stream);

// `num_batches` unlabeled target batches, deterministic in `seed`.
std::vector<Tensor> target_stream(const DomainSpec& target,
                                  std::size_t num_batches,
                                  std::size_t batch_size, std::uint64_t seed);

std::string to_string(ReferenceKind kind);
ReferenceKind parse_reference_kind(const std::string& s);

}  // namespace ttyd
