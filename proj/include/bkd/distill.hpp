#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "bkd/auxgen.hpp"
#include "bkd/data.hpp"
#include "bkd/losses.hpp"
#include "bkd/nn.hpp"

namespace bkd {

struct EpochStat {
  int epoch = 0;  // 1-based, global across phases
  std::string phase;
  double train_loss = 0.0;
  // accuracy for classification/token, MSE for regression; NaN without an eval set
  double eval_metric = std::numeric_limits<double>::quiet_NaN();
};

struct TrainReport {
  std::string mode;
  std::vector<EpochStat> epochs;
  // one entry per hyper epoch
  std::vector<double> hyper_aux_divergence;
  std::vector<double> hyper_base_divergence;
  std::vector<double> hyper_q_residual;           // embedding pipeline only
  std::vector<std::uint8_t> hyper_trace_monotone;
  long optimizer_steps = 0;
  double wall_seconds = 0.0;
  double final_metric = std::numeric_limits<double>::quiet_NaN();
  double final_loss = std::numeric_limits<double>::quiet_NaN();
  KdHyperParams params;

  // one row per epoch plus a trailing summary line echoing the full config
  void write_csv(std::ostream& os) const;
  void write_hyper_csv(std::ostream& os) const;
};

struct EvalMetrics {
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double mean_loss = std::numeric_limits<double>::quiet_NaN();
  double mse = std::numeric_limits<double>::quiet_NaN();
  int count = 0;
};

EvalMetrics evaluate(const Network& model, const Dataset& data);
EvalMetrics evaluate(const EmbeddingModel& model, const Dataset& data);

using PhaseHook = std::function<void(const std::string& phase, const Network& student)>;
using EmbeddingPhaseHook =
    std::function<void(const std::string& phase, const EmbeddingModel& student)>;

// Supervised baseline; trains in place for train_epochs epochs.
TrainReport train_scratch(Network& model, const Dataset& train, const Dataset* eval_data,
                          const KdHyperParams& params);
// End-to-end token training (embedding matrix and head both learn).
TrainReport train_scratch(EmbeddingModel& model, const Dataset& train, const Dataset* eval_data,
                          const KdHyperParams& params);

// Distills for train_epochs epochs against a frozen teacher.
TrainReport vanilla_kd(Network& student, const Network& teacher, const Dataset& train,
                       const Dataset* eval_data, const KdHyperParams& params);

// Three-phase pipeline: pre-train on the data, then hyper_epochs rounds of
// auxiliary generation + training on the union, then fine-tune on the data
// alone. With hyper_epochs=0 this consumes the same random stream as a
// 2*train_epochs vanilla run and lands on bit-identical weights.
TrainReport backward_kd(Network& student, const Network& teacher, const Dataset& train,
                        const Dataset* eval_data, const KdHyperParams& params,
                        const PhaseHook& hook = {});

// Token-level distillation: the student consumes raw token ids, so gradients
// reach its embedding matrix as well as the head. This is how the "pretrained
// compact student" for the embedding pipeline is produced.
TrainReport vanilla_kd_tokens(EmbeddingModel& student, const EmbeddingModel& teacher,
                              const Dataset& train, const Dataset* eval_data,
                              const KdHyperParams& params);

// Embedding-space counterparts: both models consume their own fixed embedding
// streams; auxiliary pairs come from ascent on the student stream with the
// teacher evaluated through the least-squares transform.
TrainReport vanilla_kd_embedding(EmbeddingModel& student, const EmbeddingModel& teacher,
                                 const Dataset& train, const Dataset* eval_data,
                                 const KdHyperParams& params);
TrainReport backward_kd_embedding(EmbeddingModel& student, const EmbeddingModel& teacher,
                                  const Dataset& train, const Dataset* eval_data,
                                  const KdHyperParams& params,
                                  const EmbeddingPhaseHook& hook = {});

}  // namespace bkd
