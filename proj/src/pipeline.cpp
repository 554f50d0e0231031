#include "ttyd/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <thread>

#include "ttyd/errors.hpp"
#include "ttyd/refmodels.hpp"
#include "ttyd/seeding.hpp"
#include "ttyd/ttydloss.hpp"

namespace ttyd {
namespace {

bool fixed_stats(StatsMode mode) {
  return mode == StatsMode::FixedSource || mode == StatsMode::FixedTarget ||
         mode == StatsMode::FixedMean;
}

double eval_accuracy(const Model& model, const PointBatch& batch) {
  const auto pred = model.predict_labels(batch.features);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == batch.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

std::vector<Tensor> adabn_stream(const RunConfig& config,
                                 const Experiment& experiment) {
  return target_stream(experiment.domains.target, config.adabn_batches,
                       config.batch_size, stream_seed(config, SeedStream::AdaBnStream));
}

}  // namespace

std::uint64_t stream_seed(const RunConfig& config, SeedStream stream) {
  return derive_seed(config.seed, static_cast<std::uint64_t>(stream));
}

Experiment make_experiment(const RunConfig& config) {
  config.validate();
  Experiment e;
  e.config = config;
  e.domains = domain_preset(config.domain);
  if (e.domains.source.dim != config.model.input_dim ||
      e.domains.source.num_classes() != config.model.num_classes) {
    throw ConfigError("model shape does not match domain '" + config.domain + "'");
  }
  e.eval_split = sample_batch(e.domains.target, config.eval_size,
                              stream_seed(config, SeedStream::TargetEval));
  return e;
}

PretrainResult pretrain_source(const RunConfig& config, const DomainPair& domains) {
  const PretrainConfig& pc = config.pretrain;
  Model model = build_model(config.model, stream_seed(config, SeedStream::ModelInit));
  model.adapt_mode = AdaptMode::Full;
  model.stats_mode = StatsMode::OnlineTrain;
  const PointBatch val = sample_batch(domains.source, pc.val_size,
                                      stream_seed(config, SeedStream::SourceVal));
  const std::vector<bool> all(pc.batch_size, true);
  const std::uint64_t train_seed = stream_seed(config, SeedStream::SourceTrain);

  PretrainResult result;
  Model best = model;
  double best_acc = -1.0;
  std::size_t since_best = 0;
  std::size_t it = 0;
  while (it < pc.max_iterations) {
    ++it;
    const PointBatch batch = sample_batch(domains.source, pc.batch_size,
                                          derive_seed(train_seed, it));
    ForwardCache cache;
    const Tensor logits = model.logits(batch.features, Phase::Train, &cache);
    const MaskedCe ce = masked_cross_entropy(logits, batch.labels, all);
    model.zero_grad();
    model.backward(cache, ce.dlogits);
    const auto params = model.trainable_params();
    adamw_step(params, pc.optimizer);
    if (it % pc.eval_every == 0) {
      const double acc = eval_accuracy(model, val);
      if (acc > best_acc) {
        best_acc = acc;
        best = model;
        since_best = 0;
      } else if (++since_best >= pc.patience) {
        result.converged = true;
        break;
      }
    }
  }
  if (best_acc < 0.0) {
    best = model;
    best_acc = eval_accuracy(model, val);
  }
  best.reset_optimizer_state();
  best.zero_grad();
  result.model = std::move(best);
  result.val_accuracy = best_acc;
  result.iterations = it;
  const auto bayes = bayes_predict(domains.source, val.features);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < bayes.size(); ++i) hit += bayes[i] == val.labels[i];
  result.bayes_accuracy = static_cast<double>(hit) / static_cast<double>(bayes.size());
  return result;
}

OracleEval oracle_evaluate(const Tensor& probs, const std::vector<int>& labels,
                           const ClassMap& map) {
  const MappedLabels truth = apply_class_map(labels, map);
  const MappedLabels pred = apply_class_map(argmax_rows(probs), map);
  const std::size_t k = map.num_common_classes();
  // Column k collects predictions of classes outside the common set; they
  // count as misses of the true class.
  ConfusionMatrix wide(k + 1);
  ConfusionMatrix cm(k);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (truth.ignore[i]) continue;
    if (pred.ignore[i]) {
      wide.add(truth.labels[i], static_cast<int>(k));
      continue;
    }
    wide.add(truth.labels[i], pred.labels[i]);
    cm.add(truth.labels[i], pred.labels[i]);
  }
  OracleEval out;
  out.cm = cm;
  out.iou.assign(k, std::nullopt);
  double sum = 0.0;
  std::size_t defined = 0;
  std::uint64_t correct = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t fp = 0, fn = 0;
    const std::uint64_t tp = wide.at(c, c);
    for (std::size_t o = 0; o <= k; ++o) {
      if (o == c) continue;
      fn += wide.at(c, o);
      if (o < k) fp += wide.at(o, c);
    }
    correct += tp;
    if (tp + fp + fn == 0) continue;
    out.iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
    sum += *out.iou[c];
    ++defined;
  }
  if (defined == 0) throw UndefinedMetricError("mIoU undefined: no class present");
  out.miou = 100.0 * sum / static_cast<double>(defined);
  const std::uint64_t total = wide.total();
  out.accuracy = total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  return out;
}

Model prepare_for_adaptation(const RunConfig& config, const Model& source,
                             const Experiment& experiment) {
  Model m = source;
  switch (config.stats_mode) {
    case StatsMode::FixedTarget:
      m = adabn(source, adabn_stream(config, experiment));
      break;
    case StatsMode::FixedMean:
      m = meanbn(source, adabn(source, adabn_stream(config, experiment)));
      break;
    default:
      break;
  }
  m.stats_mode = config.stats_mode;
  if (config.adapt_mode == AdaptMode::BnAffineAdapter && fixed_stats(config.stats_mode)) {
    m = freeze_and_insert_adapters(m, config.adapter_bias);
  } else {
    m.adapt_mode = config.adapt_mode;
    m.adapter_bias = config.adapter_bias;
  }
  m.reset_optimizer_state();
  m.zero_grad();
  return m;
}

Model build_reference_model(const RunConfig& config, const Model& source,
                            const Experiment& experiment) {
  if (config.reference == ReferenceKind::AdaBN ||
      config.reference == ReferenceKind::MeanBN) {
    const auto stream = adabn_stream(config, experiment);
    return build_reference(config.reference, source, stream);
  }
  return build_reference(config.reference, source, {});
}

AdaptResult run_adaptation(const RunConfig& config, const Model& source,
                           const Experiment& experiment, const AdaptHooks& hooks) {
  config.validate();
  AdaptResult result;
  Model model = prepare_for_adaptation(config, source, experiment);
  const Model reference = build_reference_model(config, source, experiment);
  const Tensor& x_eval = experiment.eval_split.features;
  const ClassMap map = config.resolved_class_map();
  const Tensor ref_probs = reference.predict_probs(x_eval, config.eval_batch);

  auto oracle = [&](const Tensor& probs) {
    const double v = oracle_evaluate(probs, experiment.eval_split.labels, map).miou;
    return hooks.oracle_transform ? hooks.oracle_transform(v) : v;
  };
  {
    Model so = source;
    so.stats_mode = StatsMode::FixedSource;
    result.source_only_miou = oracle(so.predict_probs(x_eval, config.eval_batch));
    result.reference_miou = oracle(ref_probs);
  }
  const std::vector<double> prior = resolve_prior(
      config.loss.prior, experiment.domains.source.class_priors,
      experiment.domains.target.class_priors);

  std::vector<Model> checkpoints;
  DisagreementMonitor monitor;
  auto record = [&](std::size_t iteration) {
    const Tensor probs = model.predict_probs(x_eval, config.eval_batch);
    TrajectoryRecord r;
    r.checkpoint_index = result.trajectory.size();
    r.iteration = iteration;
    for (std::size_t m = 0; m < kAllMetrics.size(); ++m) {
      r.metric_scores[m] = agreement_score(probs, ref_probs, kAllMetrics[m]);
      if (kAllMetrics[m] == config.metric) r.agreement = r.metric_scores[m];
    }
    r.oracle_miou = oracle(probs);
    r.l_discrim = loss_discrim(probs);
    r.l_simsrc = kl_divergence(predicted_distribution(probs), prior);
    r.entropy_score = entropy_validator(probs);
    r.im_score = im_validator(probs);
    result.trajectory.push_back(r);
    checkpoints.push_back(model);
    return monitor.push(r.agreement);
  };

  std::optional<StopDecision> decision = record(0);
  const std::uint64_t train_seed = stream_seed(config, SeedStream::TargetTrain);
  std::size_t it = 0;
  while (it < config.max_iterations) {
    if (decision && config.stop_enabled && config.halt_at_stop) break;
    ++it;
    const PointBatch batch = sample_batch(experiment.domains.target,
                                          config.batch_size,
                                          derive_seed(train_seed, it));
    ForwardCache cache;
    const Tensor logits = model.logits(batch.features, Phase::Train, &cache);
    const LossGrad lg = loss_grad_logits(logits, config.loss, prior);
    model.zero_grad();
    model.backward(cache, lg.dlogits);
    const auto params = model.trainable_params();
    adamw_step(params, config.optimizer);
    if (it % config.checkpoint_every == 0 || it == config.max_iterations) {
      auto d = record(it);
      if (!decision) decision = d;
    }
  }
  result.iterations_run = it;

  if (config.stop_enabled) {
    result.stop = decision ? *decision : monitor.finish();
    result.selected_index = result.stop->stop_index;
  } else {
    result.selected_index = checkpoints.size() - 1;
  }
  result.selected = checkpoints[result.selected_index];
  if (hooks.keep_checkpoints) result.checkpoints = std::move(checkpoints);
  return result;
}

std::vector<double> agreements_of(const std::vector<TrajectoryRecord>& trajectory) {
  std::vector<double> out;
  out.reserve(trajectory.size());
  for (const auto& r : trajectory) out.push_back(r.agreement);
  return out;
}

std::vector<double> metric_scores_of(const std::vector<TrajectoryRecord>& trajectory,
                                     AgreementMetric metric) {
  const auto pos = std::find(kAllMetrics.begin(), kAllMetrics.end(), metric) -
                   kAllMetrics.begin();
  std::vector<double> out;
  out.reserve(trajectory.size());
  for (const auto& r : trajectory) out.push_back(r.metric_scores[static_cast<std::size_t>(pos)]);
  return out;
}

SweepResult run_sweep(const RunConfig& config, const Model& source,
                      const Experiment& experiment, const AdaptHooks& hooks) {
  config.validate();
  SweepResult result;
  for (double lr : config.sweep.lrs) {
    for (double lambda : config.sweep.lambdas) {
      SweepCell cell;
      cell.lr = lr;
      cell.lambda = lambda;
      result.cells.push_back(cell);
    }
  }
  AdaptHooks cell_hooks = hooks;
  cell_hooks.keep_checkpoints = false;
  parallel_for(result.cells.size(), [&](std::size_t i) {
    SweepCell& cell = result.cells[i];
    RunConfig c = config;
    c.optimizer.lr = cell.lr;
    c.loss.lambda = cell.lambda;
    c.stop_enabled = true;
    c.halt_at_stop = false;
    try {
      const AdaptResult r = run_adaptation(c, source, experiment, cell_hooks);
      const TrajectoryRecord& at = r.trajectory[r.selected_index];
      cell.stop_index = r.selected_index;
      cell.reason = r.stop->reason;
      cell.agreement_at_stop = at.agreement;
      cell.entropy_at_stop = at.entropy_score;
      cell.im_at_stop = at.im_score;
      cell.miou_at_stop = at.oracle_miou;
      std::vector<double> entropy_scores;
      for (const auto& rec : r.trajectory) {
        cell.max_miou = std::max(cell.max_miou, rec.oracle_miou);
        entropy_scores.push_back(rec.entropy_score);
      }
      cell.entropy_index = select_by_agreement(entropy_scores);
      cell.miou_at_entropy = r.trajectory[cell.entropy_index].oracle_miou;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });
  constexpr double kWorst = -std::numeric_limits<double>::infinity();
  std::vector<double> agree, ent;
  for (const auto& cell : result.cells) {
    agree.push_back(cell.error.empty() ? cell.agreement_at_stop : kWorst);
    ent.push_back(cell.error.empty() ? cell.entropy_at_stop : kWorst);
  }
  if (!agree.empty()) {
    result.selected = select_by_agreement(agree);
    result.selected_by_entropy = select_by_agreement(ent);
  }
  return result;
}

SelfTrainResult run_selftrain(const RunConfig& config, const Model& core,
                              const Model& reference,
                              const Experiment& experiment) {
  config.validate();
  const SelfTrainConfig& sc = config.selftrain;
  const Tensor& x_eval = experiment.eval_split.features;
  const ClassMap map = config.resolved_class_map();
  const Tensor ref_labels_probs = reference.predict_probs(x_eval, config.eval_batch);
  const std::vector<int> ref_labels = argmax_rows(ref_labels_probs);

  SelfTrainResult result;
  Model student = core;
  student.reset_optimizer_state();
  TeacherState teacher;
  teacher.teacher = core;
  teacher.alpha = sc.alpha;
  teacher.dtu.window_size = sc.dtu_window;
  teacher.dtu.min_interval = sc.min_interval;
  teacher.dtu.max_interval = sc.max_interval;
  teacher.dtu.current_interval = sc.min_interval;

  SelfTrainOptions opts;
  opts.optimizer = config.optimizer;
  opts.optimizer.lr = sc.lr;
  opts.quantile = sc.quantile;
  opts.jitter_sigma = sc.jitter_sigma;
  if (sc.combined_loss) {
    opts.combined = config.loss;
    opts.prior = resolve_prior(config.loss.prior,
                               experiment.domains.source.class_priors,
                               experiment.domains.target.class_priors);
  }
  std::mt19937_64 rng(stream_seed(config, SeedStream::Jitter));
  const std::uint64_t batch_seed = stream_seed(config, SeedStream::SelfTrain);
  const std::size_t k = config.model.num_classes;

  double accept_sum = 0.0;
  std::size_t interval_steps = 0, interval_skipped = 0;
  std::vector<std::size_t> hist(k, 0);
  auto record = [&](std::size_t iteration) {
    const Tensor probs = student.predict_probs(x_eval, config.eval_batch);
    SelfTrainRecord r;
    r.checkpoint_index = result.trajectory.size();
    r.iteration = iteration;
    r.accept_rate = interval_steps ? accept_sum / static_cast<double>(interval_steps) : 0.0;
    r.agreement = agreement(argmax_rows(probs), ref_labels);
    r.oracle_miou = oracle_evaluate(probs, experiment.eval_split.labels, map).miou;
    r.teacher_interval = teacher.dtu.current_interval;
    r.skipped_steps = interval_skipped;
    r.pseudo_histogram = hist;
    result.trajectory.push_back(std::move(r));
    accept_sum = 0.0;
    interval_steps = interval_skipped = 0;
    std::fill(hist.begin(), hist.end(), 0);
  };

  record(0);
  result.core_miou = result.trajectory.front().oracle_miou;
  for (std::size_t it = 1; it <= sc.iterations; ++it) {
    const PointBatch batch = sample_batch(experiment.domains.target,
                                          config.batch_size,
                                          derive_seed(batch_seed, it));
    const SelfTrainStepStats s =
        selftrain_step(student, teacher, batch.features, opts, rng);
    accept_sum += s.accept_rate;
    ++interval_steps;
    if (s.skipped) {
      ++interval_skipped;
      ++result.skipped_steps;
    }
    for (std::size_t c = 0; c < k; ++c) hist[c] += s.pseudo_histogram[c];
    if (it % sc.checkpoint_every == 0 || it == sc.iterations) record(it);
  }
  result.final_miou = result.trajectory.back().oracle_miou;
  result.student = std::move(student);
  result.teacher = std::move(teacher.teacher);
  return result;
}

std::vector<AblationCell> run_ablation(const RunConfig& config,
                                       const Model& source,
                                       const Experiment& experiment) {
  struct Variant {
    std::string group, setting;
    std::function<void(RunConfig&)> apply;
  };
  std::vector<Variant> variants = {
      {"loss", "discrim+simsrc", [](RunConfig&) {}},
      {"loss", "discrim_only", [](RunConfig& c) { c.loss.use_simsrc = false; }},
      {"loss", "simsrc_only", [](RunConfig& c) { c.loss.use_discrim = false; }},
      {"loss", "none",
       [](RunConfig& c) { c.loss.use_discrim = c.loss.use_simsrc = false; }},
  };
  for (PriorChoice p : {PriorChoice::Uniform, PriorChoice::SourcePrior,
                        PriorChoice::TargetOracle}) {
    variants.push_back({"prior", to_string(p), [p](RunConfig& c) { c.loss.prior = p; }});
  }
  variants.push_back({"params", "bn_adapter", [](RunConfig& c) {
                        c.adapt_mode = AdaptMode::BnAffineAdapter;
                        c.adapter_bias = true;
                      }});
  variants.push_back({"params", "bn_adapter_scale_only", [](RunConfig& c) {
                        c.adapt_mode = AdaptMode::BnAffineAdapter;
                        c.adapter_bias = false;
                      }});
  for (AdaptMode m : {AdaptMode::ClassifierOnly, AdaptMode::BackboneOnly,
                      AdaptMode::Full}) {
    variants.push_back({"params", to_string(m), [m](RunConfig& c) { c.adapt_mode = m; }});
  }
  for (StatsMode s : {StatsMode::FixedSource, StatsMode::FixedTarget,
                      StatsMode::FixedMean, StatsMode::OnlineTrain,
                      StatsMode::OnlineTrainEval}) {
    variants.push_back({"stats", to_string(s), [s](RunConfig& c) { c.stats_mode = s; }});
  }

  std::vector<AblationCell> cells(variants.size());
  AdaptHooks hooks;
  hooks.keep_checkpoints = false;
  parallel_for(variants.size(), [&](std::size_t i) {
    AblationCell& cell = cells[i];
    cell.group = variants[i].group;
    cell.setting = variants[i].setting;
    RunConfig c = config;
    variants[i].apply(c);
    c.stop_enabled = true;
    c.halt_at_stop = false;
    try {
      const AdaptResult r = run_adaptation(c, source, experiment, hooks);
      cell.source_only_miou = r.source_only_miou;
      for (const auto& rec : r.trajectory) cell.max_miou = std::max(cell.max_miou, rec.oracle_miou);
      cell.stop_miou = r.trajectory[r.selected_index].oracle_miou;
      cell.last_miou = r.trajectory.back().oracle_miou;
    } catch (const std::exception& e) {
      cell.error = e.what();
    }
  });
  return cells;
}

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                  std::size_t workers) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace ttyd
