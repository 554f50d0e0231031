#pragma once

// CSV run artifacts. Comma separated, header row, '.' decimal, doubles with
// 17 significant digits so identical runs produce identical bytes.
//
//   trajectory.csv   checkpoint_index,iteration,agreement,oracle_miou,
//                    l_discrim,l_simsrc,entropy_score,im_score,
//                    score_hard,score_symkl,score_l1,score_l2
//   metrics.csv      model,miou,accuracy,iou_0..iou_{K-1} (empty = undefined)
//   sweep_summary.csv lr,lambda,stop_index,reason,agreement_at_stop,
//                    entropy_at_stop,im_at_stop,miou_at_stop,max_miou,
//                    entropy_index,miou_at_entropy,selected,error
//   selftrain_trajectory.csv checkpoint_index,iteration,accept_rate,agreement,
//                    oracle_miou,teacher_interval,skipped_steps,pseudo_0..
//   ablation.csv     group,setting,source_only_miou,max_miou,stop_miou,
//                    last_miou,error

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "ttyd/pipeline.hpp"

namespace ttyd {

std::string format_double(double v);

void write_trajectory_csv(std::ostream& out,
                          const std::vector<TrajectoryRecord>& trajectory);
void write_metrics_csv(std::ostream& out,
                       const std::vector<std::pair<std::string, OracleEval>>& rows);
void write_sweep_csv(std::ostream& out, const SweepResult& sweep);
void write_selftrain_csv(std::ostream& out,
                         const std::vector<SelfTrainRecord>& trajectory);
void write_ablation_csv(std::ostream& out, const std::vector<AblationCell>& cells);

// key=value lines describing the stop decision.
void write_stop_summary(std::ostream& out, const AdaptResult& result);

// Creates parent directories; throws std::runtime_error on I/O failure.
void write_text_file(const std::string& path, const std::string& contents);

}  // namespace ttyd
