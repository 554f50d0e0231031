#include "ttyd/artifacts.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <stdexcept>

namespace ttyd {
namespace {

// Quotes a free-text field when it would break the row.
std::string csv_text(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c == '\n' ? ' ' : c;
  }
  return q + "\"";
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_trajectory_csv(std::ostream& out,
                          const std::vector<TrajectoryRecord>& trajectory) {
  out << "checkpoint_index,iteration,agreement,oracle_miou,l_discrim,l_simsrc,"
         "entropy_score,im_score,score_hard,score_symkl,score_l1,score_l2\n";
  for (const auto& r : trajectory) {
    out << r.checkpoint_index << ',' << r.iteration << ',' << format_double(r.agreement)
        << ',' << format_double(r.oracle_miou) << ',' << format_double(r.l_discrim)
        << ',' << format_double(r.l_simsrc) << ',' << format_double(r.entropy_score)
        << ',' << format_double(r.im_score);
    for (double s : r.metric_scores) out << ',' << format_double(s);
    out << '\n';
  }
}

void write_metrics_csv(std::ostream& out,
                       const std::vector<std::pair<std::string, OracleEval>>& rows) {
  const std::size_t k = rows.empty() ? 0 : rows.front().second.iou.size();
  out << "model,miou,accuracy";
  for (std::size_t c = 0; c < k; ++c) out << ",iou_" << c;
  out << '\n';
  for (const auto& [name, ev] : rows) {
    out << csv_text(name) << ',' << format_double(ev.miou) << ','
        << format_double(ev.accuracy);
    for (const auto& v : ev.iou) {
      out << ',';
      if (v) out << format_double(*v);
    }
    out << '\n';
  }
}

void write_sweep_csv(std::ostream& out, const SweepResult& sweep) {
  out << "lr,lambda,stop_index,reason,agreement_at_stop,entropy_at_stop,"
         "im_at_stop,miou_at_stop,max_miou,entropy_index,miou_at_entropy,"
         "selected,error\n";
  for (std::size_t i = 0; i < sweep.cells.size(); ++i) {
    const SweepCell& c = sweep.cells[i];
    out << format_double(c.lr) << ',' << format_double(c.lambda) << ','
        << c.stop_index << ',' << to_string(c.reason) << ','
        << format_double(c.agreement_at_stop) << ','
        << format_double(c.entropy_at_stop) << ',' << format_double(c.im_at_stop)
        << ',' << format_double(c.miou_at_stop) << ','
        << format_double(c.max_miou) << ',' << c.entropy_index << ','
        << format_double(c.miou_at_entropy) << ','
        << (i == sweep.selected ? 1 : 0) << ',' << csv_text(c.error) << '\n';
  }
}

void write_selftrain_csv(std::ostream& out,
                         const std::vector<SelfTrainRecord>& trajectory) {
  const std::size_t k =
      trajectory.empty() ? 0 : trajectory.front().pseudo_histogram.size();
  out << "checkpoint_index,iteration,accept_rate,agreement,oracle_miou,"
         "teacher_interval,skipped_steps";
  for (std::size_t c = 0; c < k; ++c) out << ",pseudo_" << c;
  out << '\n';
  for (const auto& r : trajectory) {
    out << r.checkpoint_index << ',' << r.iteration << ','
        << format_double(r.accept_rate) << ',' << format_double(r.agreement) << ','
        << format_double(r.oracle_miou) << ',' << r.teacher_interval << ','
        << r.skipped_steps;
    for (std::size_t h : r.pseudo_histogram) out << ',' << h;
    out << '\n';
  }
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationCell>& cells) {
  out << "group,setting,source_only_miou,max_miou,stop_miou,last_miou,error\n";
  for (const auto& c : cells) {
    out << csv_text(c.group) << ',' << csv_text(c.setting) << ','
        << format_double(c.source_only_miou) << ',' << format_double(c.max_miou)
        << ',' << format_double(c.stop_miou) << ',' << format_double(c.last_miou)
        << ',' << csv_text(c.error) << '\n';
  }
}

void write_stop_summary(std::ostream& out, const AdaptResult& result) {
  out << "selected_index=" << result.selected_index << '\n';
  out << "iterations_run=" << result.iterations_run << '\n';
  if (result.stop) {
    out << "stop_reason=" << to_string(result.stop->reason) << '\n';
    out << "agreement_at_stop=" << format_double(result.stop->agreement_at_stop)
        << '\n';
  } else {
    out << "stop_reason=disabled\n";
  }
  if (!result.trajectory.empty()) {
    out << "selected_iteration="
        << result.trajectory[result.selected_index].iteration << '\n';
  }
}

void write_text_file(const std::string& path, const std::string& contents) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << contents;
  if (!f) throw std::runtime_error("write failed: " + path);
}

}  // namespace ttyd
