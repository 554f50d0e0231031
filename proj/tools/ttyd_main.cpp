// Command-line driver: pretrain, adapt, sweep, selftrain, ablate, eval.
//
// Exit codes: 0 success, 2 configuration error, 3 degraded run (stop horizon
// exhausted, or pretraining hit its iteration cap), 1 anything else.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ttyd/artifacts.hpp"
#include "ttyd/config.hpp"
#include "ttyd/errors.hpp"
#include "ttyd/pipeline.hpp"
#include "ttyd/refmodels.hpp"

namespace fs = std::filesystem;
using namespace ttyd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCrash = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDegraded = 3;

struct CommonArgs {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string preset;
  std::string domain;
  std::string reference;
  bool no_stop = false;
};

struct Args {
  CommonArgs common;
  std::string source_path;  // adapt, sweep, selftrain, ablate
  std::string core_path;    // selftrain
  std::string model_path;   // eval
  std::vector<double> lrs;
  std::vector<double> lambdas;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "INI config file");
  cmd->add_option("--seed", a.seed, "run seed");
  cmd->add_option("--out", a.out, "output directory");
  cmd->add_option("--preset", a.preset, "config preset (desk, paper)");
  cmd->add_option("--domain", a.domain, "domain preset (default, imbalanced, separated2)");
  cmd->add_option("--reference", a.reference, "sourceonly|adabn|ptbn|meanbn");
  cmd->add_flag("--no-stop", a.no_stop, "run the full horizon and keep the last checkpoint");
}

RunConfig resolve_config(const std::string& command, const CommonArgs& a) {
  RunConfig c = a.config_path.empty() ? preset_config(a.preset.empty() ? "desk" : a.preset)
                                      : read_config_file(a.config_path);
  if (!a.config_path.empty() && !a.preset.empty() && a.preset != c.preset) {
    throw ConfigError("--preset conflicts with run.preset in " + a.config_path);
  }
  if (a.seed) c.seed = *a.seed;
  if (!a.domain.empty()) c.domain = a.domain;
  if (!a.reference.empty()) c.reference = parse_reference_kind(a.reference);
  if (a.no_stop) c.stop_enabled = false;
  if (!a.out.empty()) {
    c.out_dir = a.out;
  } else if (const char* root = std::getenv("TTYD_OUT_ROOT"); root && *root) {
    c.out_dir = (fs::path(root) / (command + "-" + c.domain + "-s" + std::to_string(c.seed))).string();
  }
  c.validate();
  return c;
}

std::string path_in(const RunConfig& c, const std::string& name) {
  return (fs::path(c.out_dir) / name).string();
}

template <typename Fn>
void write_csv(const RunConfig& c, const std::string& name, Fn&& fn) {
  std::ostringstream ss;
  fn(ss);
  write_text_file(path_in(c, name), ss.str());
}

Model load_checkpoint(const std::string& path, const RunConfig& c) {
  if (!fs::exists(path)) throw ConfigError("missing checkpoint: " + path);
  Model m = load_model_file(path);
  if (!(m.spec == c.model)) {
    throw ConfigError("checkpoint " + path + " does not match the configured model");
  }
  return m;
}

// Source model from --source, or pretrained in place and saved next to the
// other artifacts.
Model obtain_source(const RunConfig& c, const Experiment& e, const std::string& source_path) {
  if (!source_path.empty()) return load_checkpoint(source_path, c);
  std::cerr << "no --source given; pretraining\n";
  PretrainResult pr = pretrain_source(c, e.domains);
  save_model_file(pr.model, path_in(c, "source.model"));
  return std::move(pr.model);
}

OracleEval evaluate_model(const Model& m, const RunConfig& c, const Experiment& e) {
  return oracle_evaluate(m.predict_probs(e.eval_split.features, c.eval_batch),
                         e.eval_split.labels, c.resolved_class_map());
}

int cmd_pretrain(const RunConfig& c) {
  const Experiment e = make_experiment(c);
  const PretrainResult pr = pretrain_source(c, e.domains);
  save_model_file(pr.model, path_in(c, "source.model"));
  Model so = pr.model;
  so.stats_mode = StatsMode::FixedSource;
  write_csv(c, "metrics.csv", [&](std::ostream& out) {
    write_metrics_csv(out, {{"source_only_target", evaluate_model(so, c, e)}});
  });
  std::ostringstream s;
  s << "val_accuracy=" << format_double(pr.val_accuracy) << '\n'
    << "bayes_accuracy=" << format_double(pr.bayes_accuracy) << '\n'
    << "iterations=" << pr.iterations << '\n'
    << "converged=" << (pr.converged ? 1 : 0) << '\n';
  write_text_file(path_in(c, "pretrain.txt"), s.str());
  std::cout << s.str();
  if (!pr.converged) {
    std::cerr << "warning: pretraining stopped at the iteration cap before a plateau\n";
    return kExitDegraded;
  }
  return kExitOk;
}

int cmd_adapt(const RunConfig& c, const Args& a) {
  const Experiment e = make_experiment(c);
  const Model source = obtain_source(c, e, a.source_path);
  AdaptHooks hooks;
  hooks.keep_checkpoints = false;
  const AdaptResult r = run_adaptation(c, source, e, hooks);
  save_model_file(r.selected, path_in(c, "stopped.model"));
  write_csv(c, "trajectory.csv", [&](std::ostream& out) { write_trajectory_csv(out, r.trajectory); });
  write_csv(c, "metrics.csv", [&](std::ostream& out) {
    write_metrics_csv(out, {{"reference_" + to_string(c.reference),
                             evaluate_model(build_reference_model(c, source, e), c, e)},
                            {"selected", evaluate_model(r.selected, c, e)}});
  });
  std::ostringstream s;
  write_stop_summary(s, r);
  s << "source_only_miou=" << format_double(r.source_only_miou) << '\n'
    << "reference_miou=" << format_double(r.reference_miou) << '\n'
    << "selected_miou=" << format_double(r.trajectory[r.selected_index].oracle_miou) << '\n';
  write_text_file(path_in(c, "stop.txt"), s.str());
  std::cout << s.str();
  if (r.stop && r.stop->reason == StopReason::HorizonExhausted) {
    std::cerr << "warning: agreement never decreased within the horizon\n";
    return kExitDegraded;
  }
  return kExitOk;
}

int cmd_sweep(RunConfig c, const Args& a) {
  if (!a.lrs.empty()) c.sweep.lrs = a.lrs;
  if (!a.lambdas.empty()) c.sweep.lambdas = a.lambdas;
  c.validate();
  if (c.sweep.lrs.empty() || c.sweep.lambdas.empty()) throw ConfigError("empty sweep grid");
  const Experiment e = make_experiment(c);
  const Model source = obtain_source(c, e, a.source_path);
  AdaptHooks hooks;
  hooks.keep_checkpoints = false;
  const SweepResult s = run_sweep(c, source, e, hooks);
  write_csv(c, "sweep_summary.csv", [&](std::ostream& out) { write_sweep_csv(out, s); });
  const SweepCell& sel = s.cells[s.selected];
  std::cout << "selected lr=" << format_double(sel.lr) << " lambda=" << format_double(sel.lambda)
            << " agreement_at_stop=" << format_double(sel.agreement_at_stop) << '\n';
  if (!sel.error.empty()) {
    std::cerr << "every sweep cell failed\n";
    return kExitCrash;
  }
  return kExitOk;
}

int cmd_selftrain(const RunConfig& c, const Args& a) {
  const Experiment e = make_experiment(c);
  Model core;
  const Model source = obtain_source(c, e, a.source_path);
  if (!a.core_path.empty()) {
    core = load_checkpoint(a.core_path, c);
  } else {
    std::cerr << "no --core given; running adaptation first\n";
    AdaptHooks hooks;
    hooks.keep_checkpoints = false;
    core = run_adaptation(c, source, e, hooks).selected;
    save_model_file(core, path_in(c, "stopped.model"));
  }
  const Model reference = build_reference_model(c, source, e);
  const SelfTrainResult r = run_selftrain(c, core, reference, e);
  save_model_file(r.student, path_in(c, "selftrained.model"));
  write_csv(c, "selftrain_trajectory.csv",
            [&](std::ostream& out) { write_selftrain_csv(out, r.trajectory); });
  write_csv(c, "metrics.csv", [&](std::ostream& out) {
    write_metrics_csv(out, {{"core", evaluate_model(core, c, e)},
                            {"selftrained", evaluate_model(r.student, c, e)}});
  });
  std::cout << "core_miou=" << format_double(r.core_miou) << '\n'
            << "final_miou=" << format_double(r.final_miou) << '\n'
            << "skipped_steps=" << r.skipped_steps << '\n';
  return kExitOk;
}

int cmd_ablate(const RunConfig& c, const Args& a) {
  const Experiment e = make_experiment(c);
  const Model source = obtain_source(c, e, a.source_path);
  const auto cells = run_ablation(c, source, e);
  write_csv(c, "ablation.csv", [&](std::ostream& out) { write_ablation_csv(out, cells); });
  for (const auto& cell : cells) {
    std::cout << cell.group << '/' << cell.setting << ": "
              << (cell.error.empty() ? "max " + format_double(cell.max_miou) : cell.error) << '\n';
  }
  return kExitOk;
}

int cmd_eval(const RunConfig& c, const Args& a) {
  if (a.model_path.empty()) throw ConfigError("eval needs --model");
  const Experiment e = make_experiment(c);
  const Model m = load_checkpoint(a.model_path, c);
  const OracleEval ev = evaluate_model(m, c, e);
  write_csv(c, "metrics.csv", [&](std::ostream& out) {
    write_metrics_csv(out, {{fs::path(a.model_path).filename().string(), ev}});
  });
  std::cout << "miou=" << format_double(ev.miou) << " accuracy=" << format_double(ev.accuracy)
            << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Test-time adaptation with a hinged entropy loss and agreement-based stopping"};
  app.require_subcommand(1);
  Args a;
  std::vector<std::pair<std::string, CLI::App*>> cmds;
  const std::pair<const char*, const char*> commands[] = {
      {"pretrain", "train the source model"},
      {"adapt", "adapt to the target domain, stopping on the first disagreement"},
      {"sweep", "lr x lambda grid, selected by agreement at stop"},
      {"selftrain", "mean-teacher self-training from a stopped core model"},
      {"ablate", "ablation grid over loss terms, prior, trained parameters and BN statistics"},
      {"eval", "oracle metrics of a saved checkpoint"}};
  for (const auto& [name, help] : commands) {
    CLI::App* cmd = app.add_subcommand(name, help);
    add_common(cmd, a.common);
    cmds.emplace_back(name, cmd);
  }
  for (auto& [name, cmd] : cmds) {
    if (name != "pretrain" && name != "eval") {
      cmd->add_option("--source", a.source_path, "source model checkpoint");
    }
  }
  cmds[2].second->add_option("--lrs", a.lrs, "learning rates")->delimiter(',');
  cmds[2].second->add_option("--lambdas", a.lambdas, "hinge margins")->delimiter(',');
  cmds[3].second->add_option("--core", a.core_path, "stopped core checkpoint");
  cmds[5].second->add_option("--model", a.model_path, "checkpoint to evaluate")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  std::string command;
  for (auto& [name, cmd] : cmds) {
    if (cmd->parsed()) command = name;
  }
  try {
    const RunConfig c = resolve_config(command, a.common);
    fs::create_directories(c.out_dir);
    write_text_file(path_in(c, "config.ini"), config_to_string(c));
    if (command == "pretrain") return cmd_pretrain(c);
    if (command == "adapt") return cmd_adapt(c, a);
    if (command == "sweep") return cmd_sweep(c, a);
    if (command == "selftrain") return cmd_selftrain(c, a);
    if (command == "ablate") return cmd_ablate(c, a);
    return cmd_eval(c, a);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitCrash;
  }
}
