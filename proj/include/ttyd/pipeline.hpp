#pragma once

// Experiment orchestration shared by the CLI and the test suites.
//
// Oracle isolation: target labels live only in Experiment::eval_split.labels
// and are read only by oracle_evaluate(). Stop and validator decisions are
// computed from agreement sequences alone.

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ttyd/agreestop.hpp"
#include "ttyd/config.hpp"
#include "ttyd/domains.hpp"
#include "ttyd/evalmetrics.hpp"
#include "ttyd/netmodel.hpp"
#include "ttyd/selftrain.hpp"

namespace ttyd {

// Per-purpose seeds derived from RunConfig::seed.
enum class SeedStream : std::uint64_t {
  ModelInit = 1,
  SourceTrain = 2,
  SourceVal = 3,
  TargetEval = 4,
  TargetTrain = 5,
  AdaBnStream = 6,
  SelfTrain = 7,
  Jitter = 8,
};
std::uint64_t stream_seed(const RunConfig& config, SeedStream stream);

struct Experiment {
  RunConfig config;
  DomainPair domains;
  // Frozen target evaluation split. Features feed agreement; labels are
  // oracle-only.
  PointBatch eval_split;
};

Experiment make_experiment(const RunConfig& config);

struct PretrainResult {
  Model model;
  double val_accuracy = 0.0;
  double bayes_accuracy = 0.0;
  std::size_t iterations = 0;
  bool converged = false;  // plateau reached before the iteration cap
};

PretrainResult pretrain_source(const RunConfig& config, const DomainPair& domains);

struct OracleEval {
  ConfusionMatrix cm;
  std::vector<std::optional<double>> iou;
  double miou = 0.0;
  double accuracy = 0.0;
};
OracleEval oracle_evaluate(const Tensor& probs, const std::vector<int>& labels,
                           const ClassMap& map);

inline constexpr std::array<AgreementMetric, 4> kAllMetrics{
    AgreementMetric::Hard, AgreementMetric::SymmetricKL, AgreementMetric::L1,
    AgreementMetric::L2};

struct TrajectoryRecord {
  std::size_t checkpoint_index = 0;
  std::size_t iteration = 0;
  double agreement = 0.0;  // with the reference, under config.metric
  double oracle_miou = 0.0;
  double l_discrim = 0.0;  // on the eval split
  double l_simsrc = 0.0;
  double entropy_score = 0.0;
  double im_score = 0.0;
  std::array<double, 4> metric_scores{};  // indexed like kAllMetrics
};

struct AdaptHooks {
  // Applied to each oracle mIoU before it is recorded (tests use this to
  // poison oracle values).
  std::function<double(double)> oracle_transform;
  bool keep_checkpoints = true;
};

struct AdaptResult {
  std::vector<TrajectoryRecord> trajectory;
  std::vector<Model> checkpoints;  // aligned with trajectory when kept
  std::optional<StopDecision> stop;
  Model selected;  // stopped checkpoint, or last when stopping is disabled
  std::size_t selected_index = 0;
  double source_only_miou = 0.0;
  double reference_miou = 0.0;
  std::size_t iterations_run = 0;
};

// Applies the configured stats mode and adapt mode to a copy of the source
// model (folding BN into adapters for fixed-statistics adapter runs).
Model prepare_for_adaptation(const RunConfig& config, const Model& source,
                             const Experiment& experiment);

Model build_reference_model(const RunConfig& config, const Model& source,
                            const Experiment& experiment);

AdaptResult run_adaptation(const RunConfig& config, const Model& source,
                           const Experiment& experiment,
                           const AdaptHooks& hooks = {});

std::vector<double> agreements_of(const std::vector<TrajectoryRecord>& trajectory);
std::vector<double> metric_scores_of(const std::vector<TrajectoryRecord>& trajectory,
                                     AgreementMetric metric);

struct SweepCell {
  double lr = 0.0;
  double lambda = 0.0;
  std::size_t stop_index = 0;
  StopReason reason = StopReason::HorizonExhausted;
  double agreement_at_stop = 0.0;
  double entropy_at_stop = 0.0;
  double im_at_stop = 0.0;
  double miou_at_stop = 0.0;
  double max_miou = 0.0;
  // Checkpoint the entropy validator would pick along the same trajectory.
  std::size_t entropy_index = 0;
  double miou_at_entropy = 0.0;
  std::string error;  // non-empty when the cell failed
};

struct SweepResult {
  std::vector<SweepCell> cells;
  std::size_t selected = 0;  // by agreement at stop
  std::size_t selected_by_entropy = 0;
};

SweepResult run_sweep(const RunConfig& config, const Model& source,
                      const Experiment& experiment, const AdaptHooks& hooks = {});

struct SelfTrainRecord {
  std::size_t checkpoint_index = 0;
  std::size_t iteration = 0;
  double accept_rate = 0.0;  // mean over the interval
  double agreement = 0.0;
  double oracle_miou = 0.0;
  std::size_t teacher_interval = 0;
  std::size_t skipped_steps = 0;
  std::vector<std::size_t> pseudo_histogram;  // summed over the interval
};

struct SelfTrainResult {
  std::vector<SelfTrainRecord> trajectory;
  Model student;
  Model teacher;
  double core_miou = 0.0;
  double final_miou = 0.0;
  std::size_t skipped_steps = 0;
};

// `reference` is used only to log agreement along the phase.
SelfTrainResult run_selftrain(const RunConfig& config, const Model& core,
                              const Model& reference,
                              const Experiment& experiment);

struct AblationCell {
  std::string group;
  std::string setting;
  double source_only_miou = 0.0;
  double max_miou = 0.0;
  double stop_miou = 0.0;
  double last_miou = 0.0;
  std::string error;
};

// One-factor-at-a-time grids around `config`: loss terms, prior, adapted
// parameters, BN statistics.
std::vector<AblationCell> run_ablation(const RunConfig& config,
                                       const Model& source,
                                       const Experiment& experiment);

// Runs fn(0..n-1) on a small thread pool; results are index-ordered, so
// output does not depend on scheduling.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t workers = 0);

}  // namespace ttyd
