#include "ttyd/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ttyd/errors.hpp"

namespace ttyd {
namespace {

namespace pt = boost::property_tree;

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += fmt_double(values[i]);
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

std::vector<std::string> split(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    const auto b = tok.find_first_not_of(" \t");
    const auto e = tok.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(tok.substr(b, e - b + 1));
  }
  return out;
}

double parse_double(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: '" + s + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  try {
    std::size_t used = 0;
    if (!s.empty() && s[0] == '-') throw std::invalid_argument(s);
    const unsigned long long v = std::stoull(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a non-negative integer: '" +
                      s + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': not a boolean: '" + s + "'");
}

// Visits every field with its key; the same table drives reading and writing.
template <typename Visitor>
void visit_fields(RunConfig& c, Visitor&& v) {
  v.str("run.preset", c.preset);
  v.u64("run.seed", c.seed);
  v.str("run.out_dir", c.out_dir);

  v.str("domain.preset", c.domain);

  v.size("model.input_dim", c.model.input_dim);
  v.sizes("model.hidden_dims", c.model.hidden_dims);
  v.size("model.num_classes", c.model.num_classes);
  v.activation("model.activation", c.model.activation);
  v.flag("model.bn_after_each_hidden", c.model.bn_after_each_hidden);

  v.real("pretrain.lr", c.pretrain.optimizer.lr);
  v.real("pretrain.weight_decay", c.pretrain.optimizer.weight_decay);
  v.real("pretrain.beta1", c.pretrain.optimizer.beta1);
  v.real("pretrain.beta2", c.pretrain.optimizer.beta2);
  v.real("pretrain.eps", c.pretrain.optimizer.eps);
  v.size("pretrain.batch_size", c.pretrain.batch_size);
  v.size("pretrain.max_iterations", c.pretrain.max_iterations);
  v.size("pretrain.eval_every", c.pretrain.eval_every);
  v.size("pretrain.patience", c.pretrain.patience);
  v.size("pretrain.val_size", c.pretrain.val_size);

  v.adapt("adapt.mode", c.adapt_mode);
  v.flag("adapt.adapter_bias", c.adapter_bias);
  v.stats("adapt.stats_mode", c.stats_mode);
  v.size("adapt.batch_size", c.batch_size);
  v.size("adapt.checkpoint_every", c.checkpoint_every);
  v.size("adapt.max_iterations", c.max_iterations);

  v.real("loss.lambda", c.loss.lambda);
  v.flag("loss.use_discrim", c.loss.use_discrim);
  v.flag("loss.use_simsrc", c.loss.use_simsrc);
  v.prior("loss.prior", c.loss.prior);

  v.real("optimizer.lr", c.optimizer.lr);
  v.real("optimizer.weight_decay", c.optimizer.weight_decay);
  v.real("optimizer.beta1", c.optimizer.beta1);
  v.real("optimizer.beta2", c.optimizer.beta2);
  v.real("optimizer.eps", c.optimizer.eps);

  v.flag("stop.enabled", c.stop_enabled);
  v.flag("stop.halt_at_stop", c.halt_at_stop);
  v.reference("stop.reference", c.reference);
  v.metric("stop.metric", c.metric);
  v.size("stop.adabn_batches", c.adabn_batches);

  v.size("eval.size", c.eval_size);
  v.size("eval.batch", c.eval_batch);
  v.ints("eval.class_map", c.class_map);

  v.flag("selftrain.enabled", c.selftrain.enabled);
  v.size("selftrain.iterations", c.selftrain.iterations);
  v.size("selftrain.checkpoint_every", c.selftrain.checkpoint_every);
  v.real("selftrain.alpha", c.selftrain.alpha);
  v.real("selftrain.quantile", c.selftrain.quantile);
  v.real("selftrain.jitter_sigma", c.selftrain.jitter_sigma);
  v.size("selftrain.dtu_window", c.selftrain.dtu_window);
  v.size("selftrain.min_interval", c.selftrain.min_interval);
  v.size("selftrain.max_interval", c.selftrain.max_interval);
  v.real("selftrain.lr", c.selftrain.lr);
  v.flag("selftrain.combined_loss", c.selftrain.combined_loss);

  v.reals("sweep.lrs", c.sweep.lrs);
  v.reals("sweep.lambdas", c.sweep.lambdas);
}

struct Writer {
  pt::ptree& tree;
  void put(const std::string& k, const std::string& v) { tree.put(k, v); }
  void str(const std::string& k, std::string& v) { put(k, v); }
  void u64(const std::string& k, std::uint64_t& v) { put(k, std::to_string(v)); }
  void size(const std::string& k, std::size_t& v) { put(k, std::to_string(v)); }
  void real(const std::string& k, double& v) { put(k, fmt_double(v)); }
  void flag(const std::string& k, bool& v) { put(k, v ? "true" : "false"); }
  void sizes(const std::string& k, std::vector<std::size_t>& v) { put(k, join(v)); }
  void ints(const std::string& k, std::vector<int>& v) { put(k, join(v)); }
  void reals(const std::string& k, std::vector<double>& v) { put(k, join(v)); }
  void activation(const std::string& k, Activation& v) { put(k, to_string(v)); }
  void adapt(const std::string& k, AdaptMode& v) { put(k, to_string(v)); }
  void stats(const std::string& k, StatsMode& v) { put(k, to_string(v)); }
  void prior(const std::string& k, PriorChoice& v) { put(k, to_string(v)); }
  void reference(const std::string& k, ReferenceKind& v) { put(k, to_string(v)); }
  void metric(const std::string& k, AgreementMetric& v) { put(k, to_string(v)); }
};

struct Reader {
  const pt::ptree& tree;
  std::size_t consumed = 0;

  bool get(const std::string& k, std::string& out) {
    const auto v = tree.get_optional<std::string>(k);
    if (!v) return false;
    ++consumed;
    out = *v;
    return true;
  }
  void str(const std::string& k, std::string& v) { get(k, v); }
  void u64(const std::string& k, std::uint64_t& v) {
    std::string s;
    if (get(k, s)) v = parse_uint(k, s);
  }
  void size(const std::string& k, std::size_t& v) {
    std::string s;
    if (get(k, s)) v = static_cast<std::size_t>(parse_uint(k, s));
  }
  void real(const std::string& k, double& v) {
    std::string s;
    if (get(k, s)) v = parse_double(k, s);
  }
  void flag(const std::string& k, bool& v) {
    std::string s;
    if (get(k, s)) v = parse_bool(k, s);
  }
  void sizes(const std::string& k, std::vector<std::size_t>& v) {
    std::string s;
    if (!get(k, s)) return;
    v.clear();
    for (const auto& t : split(s)) v.push_back(static_cast<std::size_t>(parse_uint(k, t)));
  }
  void ints(const std::string& k, std::vector<int>& v) {
    std::string s;
    if (!get(k, s)) return;
    v.clear();
    for (const auto& t : split(s)) {
      v.push_back(static_cast<int>(parse_double(k, t)));
    }
  }
  void reals(const std::string& k, std::vector<double>& v) {
    std::string s;
    if (!get(k, s)) return;
    v.clear();
    for (const auto& t : split(s)) v.push_back(parse_double(k, t));
  }
  template <typename E, typename Parse>
  void enumerated(const std::string& k, E& v, Parse parse) {
    std::string s;
    if (get(k, s)) v = parse(s);
  }
  void activation(const std::string& k, Activation& v) { enumerated(k, v, parse_activation); }
  void adapt(const std::string& k, AdaptMode& v) { enumerated(k, v, parse_adapt_mode); }
  void stats(const std::string& k, StatsMode& v) { enumerated(k, v, parse_stats_mode); }
  void prior(const std::string& k, PriorChoice& v) { enumerated(k, v, parse_prior_choice); }
  void reference(const std::string& k, ReferenceKind& v) {
    enumerated(k, v, parse_reference_kind);
  }
  void metric(const std::string& k, AgreementMetric& v) {
    enumerated(k, v, parse_agreement_metric);
  }
};

std::size_t count_leaves(const pt::ptree& tree) {
  std::size_t n = 0;
  for (const auto& [key, child] : tree) n += child.empty() ? 1 : count_leaves(child);
  return n;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  if (batch_size < 2) throw ConfigError("adapt.batch_size must be >= 2");
  if (checkpoint_every == 0) throw ConfigError("adapt.checkpoint_every must be > 0");
  if (max_iterations < checkpoint_every) {
    throw ConfigError("adapt.max_iterations must cover at least one checkpoint");
  }
  if (!(optimizer.lr > 0.0)) throw ConfigError("optimizer.lr must be > 0");
  if (eval_size < 2) throw ConfigError("eval.size must be >= 2");
  if (pretrain.batch_size < 2) throw ConfigError("pretrain.batch_size must be >= 2");
  if (pretrain.eval_every == 0) throw ConfigError("pretrain.eval_every must be > 0");
  if (selftrain.checkpoint_every == 0) {
    throw ConfigError("selftrain.checkpoint_every must be > 0");
  }
  if (!(selftrain.alpha >= 0.0 && selftrain.alpha <= 1.0)) {
    throw ConfigError("selftrain.alpha must lie in [0, 1]");
  }
  if (!(selftrain.quantile >= 0.0 && selftrain.quantile <= 1.0)) {
    throw ConfigError("selftrain.quantile must lie in [0, 1]");
  }
  if (selftrain.min_interval == 0 || selftrain.min_interval > selftrain.max_interval) {
    throw ConfigError("selftrain interval bounds invalid");
  }
  if (adapt_mode == AdaptMode::BnAffineAdapter && !model.bn_after_each_hidden) {
    throw ConfigError("bn_adapter mode needs batch-norm layers");
  }
  if (!class_map.empty()) {
    if (class_map.size() != model.num_classes) {
      throw ConfigError("eval.class_map needs one entry per class");
    }
    for (int t : class_map) {
      if (t < ClassMap::kIgnore) throw ConfigError("eval.class_map: bad entry");
    }
  }
  domain_preset(domain);
}

ClassMap RunConfig::resolved_class_map() const {
  if (class_map.empty()) return ClassMap::identity(model.num_classes);
  return ClassMap{class_map};
}

RunConfig preset_config(const std::string& name) {
  RunConfig c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.preset = "paper";
    c.optimizer.lr = 1e-5;
    c.optimizer.weight_decay = 0.01;
    c.batch_size = 4;
    c.checkpoint_every = 1000;
    c.max_iterations = 20000;
    c.loss.lambda = 0.02;
    c.sweep.lrs = {1e-5};
    c.sweep.lambdas = {0.02};
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

void write_config(const RunConfig& config, std::ostream& out) {
  pt::ptree tree;
  RunConfig copy = config;
  visit_fields(copy, Writer{tree});
  pt::write_ini(out, tree);
}

std::string config_to_string(const RunConfig& config) {
  std::ostringstream ss;
  write_config(config, ss);
  return ss.str();
}

RunConfig read_config(std::istream& in) {
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  RunConfig c = preset_config(tree.get<std::string>("run.preset", "desk"));
  Reader reader{tree};
  visit_fields(c, reader);
  if (reader.consumed != count_leaves(tree)) {
    throw ConfigError("config contains unknown keys");
  }
  return c;
}

RunConfig read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path);
  return read_config(in);
}

}  // namespace ttyd
