#pragma once

// Experiment configuration. Serialized as a flat INI file (sections of
// key = value pairs); every field has a default and the round trip is exact.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ttyd/agreestop.hpp"
#include "ttyd/diffnet.hpp"
#include "ttyd/domains.hpp"
#include "ttyd/netmodel.hpp"
#include "ttyd/refmodels.hpp"
#include "ttyd/ttydloss.hpp"

namespace ttyd {

struct PretrainConfig {
  AdamWConfig optimizer{.lr = 1e-3, .weight_decay = 0.01};
  std::size_t batch_size = 128;
  std::size_t max_iterations = 8000;
  std::size_t eval_every = 200;
  std::size_t patience = 5;
  std::size_t val_size = 5000;
  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct SelfTrainConfig {
  bool enabled = false;
  std::size_t iterations = 2000;
  std::size_t checkpoint_every = 200;
  double alpha = 0.999;
  double quantile = 0.5;
  double jitter_sigma = 0.05;
  std::size_t dtu_window = 200;
  std::size_t min_interval = 100;
  std::size_t max_interval = 2000;
  double lr = 1e-3;
  bool combined_loss = false;
  friend bool operator==(const SelfTrainConfig&, const SelfTrainConfig&) = default;
};

struct SweepConfig {
  std::vector<double> lrs{1e-4, 3e-4, 1e-3, 3e-3, 1e-2};
  std::vector<double> lambdas{0.02};
  friend bool operator==(const SweepConfig&, const SweepConfig&) = default;
};

struct RunConfig {
  std::string preset = "desk";
  std::string domain = "default";
  ModelSpec model;
  PretrainConfig pretrain;

  AdaptMode adapt_mode = AdaptMode::BnAffineAdapter;
  bool adapter_bias = true;
  StatsMode stats_mode = StatsMode::FixedSource;
  LossConfig loss;
  AdamWConfig optimizer{.lr = 1e-3, .weight_decay = 0.01};
  std::size_t batch_size = 64;
  std::size_t checkpoint_every = 200;
  std::size_t max_iterations = 4000;

  bool stop_enabled = true;
  // Halt training as soon as the stop fires instead of running the horizon.
  bool halt_at_stop = false;
  ReferenceKind reference = ReferenceKind::PTBN;
  AgreementMetric metric = AgreementMetric::Hard;
  std::size_t adabn_batches = 50;

  std::size_t eval_size = 20000;
  // Chunk size for eval forwards; matters only for batch-statistics BN.
  std::size_t eval_batch = 1000;
  std::vector<int> class_map;  // empty = identity

  SelfTrainConfig selftrain;
  SweepConfig sweep;

  std::uint64_t seed = 0;
  std::string out_dir = "runs/default";

  void validate() const;
  ClassMap resolved_class_map() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// "desk" (defaults above) or "paper" (lr 1e-5, wd 0.01, batch 4, checkpoints
// every 1k iterations, 20k-iteration horizon).
RunConfig preset_config(const std::string& name);

void write_config(const RunConfig& config, std::ostream& out);
std::string config_to_string(const RunConfig& config);
// Keys absent from the file keep their defaults (taken from the file's
// `run.preset` when present).
RunConfig read_config(std::istream& in);
RunConfig read_config_file(const std::string& path);

}  // namespace ttyd
