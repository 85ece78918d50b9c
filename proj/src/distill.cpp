#include "bkd/distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "bkd/rng.hpp"

namespace bkd {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

class SgdOptimizer {
 public:
  SgdOptimizer(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  void step(const std::vector<Tensor*>& params, const GradMap& grads) {
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        velocity_[i].assign(params[i]->data().size(), 0.0);
      }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& w = *params[i];
      const Tensor g = grads.grad_of(w);
      const auto& gv = g.data();
      std::vector<double> next = w.data();
      auto& vel = velocity_[i];
      if (momentum_ > 0.0) {
        for (std::size_t j = 0; j < next.size(); ++j) {
          vel[j] = momentum_ * vel[j] - lr_ * gv[j];
          next[j] += vel[j];
        }
      } else {
        for (std::size_t j = 0; j < next.size(); ++j) {
          next[j] -= lr_ * gv[j];
        }
      }
      w = Tensor::from_data(w.shape(), std::move(next)).set_requires_grad();
    }
  }

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

// One homogeneous training stream: inputs (raw features or embedding
// vectors), labels or targets, optional precomputed teacher outputs, and an
// auxiliary marker per sample.
struct TrainView {
  Tensor inputs;
  std::vector<int> labels;
  std::vector<double> targets;
  Tensor teacher_outputs;
  std::vector<std::uint8_t> is_aux;

  int size() const { return inputs.rows(); }
};

Tensor concat_view_rows(const std::vector<Tensor>& blocks) {
  const int d = blocks.front().cols();
  int n = 0;
  for (const auto& b : blocks) {
    if (b.cols() != d) {
      throw ShapeError("cannot mix streams of different widths");
    }
    n += b.rows();
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(n) * d);
  for (const auto& b : blocks) {
    out.insert(out.end(), b.data().begin(), b.data().end());
  }
  return Tensor::from_data({n, d}, std::move(out));
}

using StudentForward = std::function<Tensor(const Tensor&)>;

struct TrainContext {
  StudentForward student_fwd;
  std::vector<Tensor*> params;
  DatasetKind kind = DatasetKind::classification;
  SgdOptimizer* optimizer = nullptr;
  const KdHyperParams* hp = nullptr;
  bool distill = false;  // false: supervised loss only
};

Tensor classification_kd_loss(const TrainContext& ctx, const Tensor& s_out, const Tensor& t_out,
                              const std::vector<int>& labels, bool teacher_term_only) {
  if (ctx.hp->kd_loss_form == KdLossForm::alpha_form) {
    return kd_loss_alpha(s_out, t_out, labels, teacher_term_only ? 0.0 : ctx.hp->alpha,
                         ctx.hp->temperature);
  }
  return kd_loss_lambda(s_out, t_out, labels, teacher_term_only ? 1.0 : ctx.hp->lambda,
                        ctx.hp->temperature);
}

Tensor batch_loss(const TrainContext& ctx, const TrainView& view, const std::vector<int>& rows) {
  const Tensor xb = gather_rows(view.inputs, rows);
  const Tensor s_out = ctx.student_fwd(xb);
  if (ctx.kind == DatasetKind::regression) {
    std::vector<double> yb(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      yb[i] = view.targets[static_cast<std::size_t>(rows[i])];
    }
    if (!ctx.distill) {
      return mse_loss(s_out, yb);
    }
    const Tensor t_out = gather_rows(view.teacher_outputs, rows);
    return kd_loss_regression(s_out, t_out, yb, ctx.hp->lambda);
  }
  std::vector<int> yb(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    yb[i] = view.labels[static_cast<std::size_t>(rows[i])];
  }
  if (!ctx.distill) {
    return cross_entropy(softmax(s_out, 1), yb);
  }
  const Tensor t_out = gather_rows(view.teacher_outputs, rows);
  if (ctx.hp->aux_kl_only && !view.is_aux.empty()) {
    // auxiliary rows carry no trusted hard label; train them on the teacher
    // term alone and recombine by sample count
    std::vector<int> orig_local, aux_local;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      (view.is_aux[static_cast<std::size_t>(rows[i])] ? aux_local : orig_local)
          .push_back(static_cast<int>(i));
    }
    if (!orig_local.empty() && !aux_local.empty()) {
      std::vector<int> y_orig;
      for (int i : orig_local) {
        y_orig.push_back(yb[static_cast<std::size_t>(i)]);
      }
      std::vector<int> y_aux;
      for (int i : aux_local) {
        y_aux.push_back(yb[static_cast<std::size_t>(i)]);
      }
      const Tensor loss_orig = classification_kd_loss(ctx, gather_rows(s_out, orig_local),
                                                      gather_rows(t_out, orig_local), y_orig,
                                                      false);
      const Tensor loss_aux = classification_kd_loss(ctx, gather_rows(s_out, aux_local),
                                                     gather_rows(t_out, aux_local), y_aux, true);
      const double n = static_cast<double>(rows.size());
      return add(scale(loss_orig, orig_local.size() / n), scale(loss_aux, aux_local.size() / n));
    }
    if (!aux_local.empty()) {
      return classification_kd_loss(ctx, s_out, t_out, yb, true);
    }
  }
  return classification_kd_loss(ctx, s_out, t_out, yb, false);
}

double eval_metric_for(const TrainContext& ctx, const EvalMetrics& m) {
  return ctx.kind == DatasetKind::regression ? m.mse : m.accuracy;
}

// Runs `epochs` epochs of shuffled mini-batch SGD on the view. Exactly one
// shuffle of view-size indices is drawn from rng per epoch, which is what
// makes the h=0 pipeline replay a plain 2e-epoch run.
void run_epochs(const TrainContext& ctx, const TrainView& view, int epochs,
                const std::string& phase, Rng& rng, TrainReport& report,
                const std::function<EvalMetrics()>& eval_fn) {
  const int n = view.size();
  const int bs = ctx.hp->batch_size;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int e = 0; e < epochs; ++e) {
    // order restarts from identity so an epoch's permutation depends only on
    // how far the rng stream has advanced, not on earlier phases
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (int lo = 0; lo < n; lo += bs) {
      const int hi = std::min(n, lo + bs);
      const std::vector<int> rows(order.begin() + lo, order.begin() + hi);
      Tensor loss;
      try {
        loss = batch_loss(ctx, view, rows);
      } catch (const NumericError& err) {
        throw NumericError("training diverged at epoch " +
                           std::to_string(report.epochs.size() + 1) + ", step " +
                           std::to_string(report.optimizer_steps + 1) + ": " + err.what());
      }
      const GradMap grads = backward(loss);
      ctx.optimizer->step(ctx.params, grads);
      ++report.optimizer_steps;
      loss_sum += loss.value() * (hi - lo);
    }
    EpochStat stat;
    stat.epoch = static_cast<int>(report.epochs.size()) + 1;
    stat.phase = phase;
    stat.train_loss = loss_sum / n;
    if (eval_fn) {
      stat.eval_metric = eval_metric_for(ctx, eval_fn());
    }
    report.epochs.push_back(std::move(stat));
  }
}

void require_nonempty(const Dataset& data, const char* op) {
  if (data.size() == 0) {
    throw std::invalid_argument(std::string(op) + ": empty dataset");
  }
}

TrainView view_of(const Dataset& data, const Tensor& teacher_outputs) {
  TrainView view;
  view.inputs = data.inputs;
  view.labels = data.labels;
  view.targets = data.targets;
  view.teacher_outputs = teacher_outputs;
  return view;
}

Tensor forward_in_chunks(const std::function<Tensor(const Tensor&)>& fwd, const Tensor& inputs,
                         int chunk) {
  const NoGradGuard guard;  // inference only
  const int n = inputs.rows();
  if (n <= chunk) {
    return fwd(inputs).detach();
  }
  std::vector<Tensor> parts;
  for (int lo = 0; lo < n; lo += chunk) {
    const int hi = std::min(n, lo + chunk);
    std::vector<int> rows(static_cast<std::size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    parts.push_back(fwd(gather_rows(inputs, rows).detach()).detach());
  }
  return concat_view_rows(parts);
}

constexpr int kEvalChunk = 2048;

EvalMetrics evaluate_outputs(const Tensor& outputs, const Dataset& data) {
  EvalMetrics m;
  m.count = data.size();
  if (data.kind == DatasetKind::regression) {
    double acc = 0.0;
    for (int i = 0; i < outputs.rows(); ++i) {
      const double d = outputs.at(i, 0) - data.targets[static_cast<std::size_t>(i)];
      acc += d * d;
    }
    m.mse = acc / outputs.rows();
    m.mean_loss = m.mse;
    return m;
  }
  const int c = outputs.cols();
  int correct = 0;
  const Tensor probs = softmax(outputs, 1);
  double loss_sum = 0.0;
  for (int i = 0; i < outputs.rows(); ++i) {
    const auto& v = outputs.data();
    const double* row = v.data() + static_cast<std::size_t>(i) * c;
    const int pred = static_cast<int>(std::max_element(row, row + c) - row);
    const int y = data.labels[static_cast<std::size_t>(i)];
    correct += pred == y ? 1 : 0;
    loss_sum += -std::log(std::max(probs.at(i, y), kProbEpsilon));
  }
  m.accuracy = static_cast<double>(correct) / outputs.rows();
  m.mean_loss = loss_sum / outputs.rows();
  return m;
}

}  // namespace

// ------------------------------------------------------------------
// evaluation
// ------------------------------------------------------------------

EvalMetrics evaluate(const Network& model, const Dataset& data) {
  require_nonempty(data, "evaluate");
  const Tensor outputs = forward_in_chunks(
      [&model](const Tensor& x) { return forward(model, x); }, data.inputs, kEvalChunk);
  return evaluate_outputs(outputs, data);
}

EvalMetrics evaluate(const EmbeddingModel& model, const Dataset& data) {
  require_nonempty(data, "evaluate");
  if (data.kind != DatasetKind::token) {
    throw std::invalid_argument("evaluate: embedding models expect token datasets");
  }
  const NoGradGuard guard;
  const int n = data.size();
  std::vector<Tensor> parts;
  for (int lo = 0; lo < n; lo += kEvalChunk) {
    const int hi = std::min(n, lo + kEvalChunk);
    const std::vector<int> chunk_tokens(
        data.tokens.begin() + static_cast<std::size_t>(lo) * data.seq_len,
        data.tokens.begin() + static_cast<std::size_t>(hi) * data.seq_len);
    parts.push_back(forward(model, chunk_tokens, hi - lo).detach());
  }
  return evaluate_outputs(concat_view_rows(parts), data);
}

// ------------------------------------------------------------------
// report output
// ------------------------------------------------------------------

namespace {

std::string params_echo(const KdHyperParams& p) {
  std::ostringstream os;
  os.precision(17);
  os << "alpha=" << p.alpha << ";lambda=" << p.lambda << ";temperature=" << p.temperature
     << ";perturb_rate=" << p.perturb_rate << ";train_epochs=" << p.train_epochs
     << ";hyper_epochs=" << p.hyper_epochs << ";perturb_steps=" << p.perturb_steps
     << ";learning_rate=" << p.learning_rate << ";momentum=" << p.momentum
     << ";batch_size=" << p.batch_size << ";seed=" << p.seed << ";kd_loss_form="
     << (p.kd_loss_form == KdLossForm::alpha_form ? "alpha" : "lambda")
     << ";bkd_on_probabilities=" << (p.bkd_on_probabilities ? 1 : 0) << ";aux_retention="
     << (p.aux_retention == AuxRetention::accumulate ? "accumulate" : "reset_each_hyper_epoch")
     << ";aux_kl_only=" << (p.aux_kl_only ? 1 : 0);
  if (p.input_clip) {
    os << ";input_clip=" << (*p.input_clip)[0] << "," << (*p.input_clip)[1];
  }
  return os.str();
}

}  // namespace

void TrainReport::write_csv(std::ostream& os) const {
  os << "epoch,phase,train_loss,eval_metric\n";
  os.precision(17);
  for (const auto& e : epochs) {
    os << e.epoch << "," << e.phase << "," << e.train_loss << "," << e.eval_metric << "\n";
  }
  os << "# mode=" << mode << ";final_metric=" << final_metric << ";final_loss=" << final_loss
     << ";optimizer_steps=" << optimizer_steps << ";wall_seconds=" << wall_seconds << ";"
     << params_echo(params) << "\n";
}

void TrainReport::write_hyper_csv(std::ostream& os) const {
  os << "hyper_epoch,mean_aux_divergence,mean_base_divergence,q_residual,trace_monotone\n";
  os.precision(17);
  for (std::size_t i = 0; i < hyper_aux_divergence.size(); ++i) {
    os << (i + 1) << "," << hyper_aux_divergence[i] << "," << hyper_base_divergence[i] << ",";
    if (i < hyper_q_residual.size()) {
      os << hyper_q_residual[i];
    }
    os << "," << (i < hyper_trace_monotone.size() ? (hyper_trace_monotone[i] ? 1 : 0) : 1)
       << "\n";
  }
}

// ------------------------------------------------------------------
// plain-network training
// ------------------------------------------------------------------

namespace {

TrainContext make_context(Network& model, const KdHyperParams& p, SgdOptimizer& opt,
                          DatasetKind kind, bool distill) {
  TrainContext ctx;
  ctx.student_fwd = [&model](const Tensor& x) { return forward(model, x); };
  ctx.params = model.params();
  ctx.kind = kind;
  ctx.optimizer = &opt;
  ctx.hp = &p;
  ctx.distill = distill;
  return ctx;
}

std::function<EvalMetrics()> eval_closure(const Network& model, const Dataset* eval_data) {
  if (eval_data == nullptr) {
    return {};
  }
  return [&model, eval_data] { return evaluate(model, *eval_data); };
}

void finish_report(TrainReport& report, const TrainContext& ctx,
                   const std::function<EvalMetrics()>& eval_fn, Clock::time_point start) {
  if (eval_fn) {
    const EvalMetrics m = eval_fn();
    report.final_metric = ctx.kind == DatasetKind::regression ? m.mse : m.accuracy;
    report.final_loss = m.mean_loss;
  } else if (!report.epochs.empty()) {
    report.final_loss = report.epochs.back().train_loss;
  }
  report.wall_seconds = seconds_since(start);
}

}  // namespace

TrainReport train_scratch(Network& model, const Dataset& train, const Dataset* eval_data,
                          const KdHyperParams& params) {
  params.validate();
  require_nonempty(train, "train_scratch");
  const auto start = Clock::now();
  TrainReport report;
  report.mode = "scratch";
  report.params = params;
  Rng rng(params.seed);
  SgdOptimizer opt(params.learning_rate, params.momentum);
  TrainContext ctx = make_context(model, params, opt, train.kind, /*distill=*/false);
  const TrainView view = view_of(train, Tensor());
  const auto eval_fn = eval_closure(model, eval_data);
  run_epochs(ctx, view, params.train_epochs, "train", rng, report, eval_fn);
  finish_report(report, ctx, eval_fn, start);
  return report;
}

namespace {

// teacher outputs over a fixed input stream; the teacher is frozen, so this
// is computed once per run
Tensor teacher_outputs_for(const Network& teacher, const Tensor& inputs) {
  return forward_in_chunks([&teacher](const Tensor& x) { return forward(teacher, x); }, inputs,
                           kEvalChunk);
}

TrainReport distill_run(Network& student, const Network& teacher, const Dataset& train,
                        const Dataset* eval_data, const KdHyperParams& params,
                        const std::string& mode, int hyper_epochs, const PhaseHook& hook) {
  params.validate();
  require_nonempty(train, mode.c_str());
  if (train.kind == DatasetKind::token) {
    throw std::invalid_argument(mode + ": token datasets use the embedding pipeline");
  }
  const auto start = Clock::now();
  TrainReport report;
  report.mode = mode;
  report.params = params;
  Rng rng(params.seed);
  SgdOptimizer opt(params.learning_rate, params.momentum);
  TrainContext ctx = make_context(student, params, opt, train.kind, /*distill=*/true);
  const auto eval_fn = eval_closure(student, eval_data);

  const Tensor base_teacher_out = teacher_outputs_for(teacher, train.inputs);
  const TrainView base_view = view_of(train, base_teacher_out);

  const bool pipeline = hyper_epochs >= 0;  // <0 means plain vanilla run
  if (!pipeline) {
    run_epochs(ctx, base_view, params.train_epochs, "train", rng, report, eval_fn);
    finish_report(report, ctx, eval_fn, start);
    return report;
  }

  run_epochs(ctx, base_view, params.train_epochs, "pretrain", rng, report, eval_fn);
  if (hook) {
    hook("pretrain", student);
  }

  // retained auxiliary blocks (accumulate mode keeps all of them)
  std::vector<Tensor> aux_inputs, aux_outputs;
  std::vector<std::vector<int>> aux_labels;
  std::vector<std::vector<double>> aux_targets;

  for (int h = 1; h <= hyper_epochs; ++h) {
    AuxiliaryBatch aux = generate_auxiliary(train, student, teacher, params);
    report.hyper_aux_divergence.push_back(aux.mean_divergence());
    report.hyper_base_divergence.push_back(aux.mean_origin_divergence());
    report.hyper_trace_monotone.push_back(aux.traces_monotone ? 1 : 0);
    if (params.aux_retention == AuxRetention::reset_each_hyper_epoch) {
      aux_inputs.clear();
      aux_outputs.clear();
      aux_labels.clear();
      aux_targets.clear();
    }
    aux_inputs.push_back(aux.inputs);
    aux_outputs.push_back(aux.teacher_outputs);
    if (train.kind == DatasetKind::classification) {
      aux_labels.push_back(aux.pseudo_labels);
    } else {
      std::vector<double> t(aux.teacher_outputs.data());
      aux_targets.push_back(std::move(t));
    }

    TrainView mixed;
    std::vector<Tensor> in_blocks{train.inputs};
    std::vector<Tensor> out_blocks{base_teacher_out};
    in_blocks.insert(in_blocks.end(), aux_inputs.begin(), aux_inputs.end());
    out_blocks.insert(out_blocks.end(), aux_outputs.begin(), aux_outputs.end());
    mixed.inputs = concat_view_rows(in_blocks);
    mixed.teacher_outputs = concat_view_rows(out_blocks);
    mixed.is_aux.assign(static_cast<std::size_t>(mixed.inputs.rows()), 1);
    std::fill_n(mixed.is_aux.begin(), train.size(), 0);
    if (train.kind == DatasetKind::classification) {
      mixed.labels = train.labels;
      for (const auto& block : aux_labels) {
        mixed.labels.insert(mixed.labels.end(), block.begin(), block.end());
      }
    } else {
      mixed.targets = train.targets;
      for (const auto& block : aux_targets) {
        mixed.targets.insert(mixed.targets.end(), block.begin(), block.end());
      }
    }
    run_epochs(ctx, mixed, params.train_epochs, "minmax" + std::to_string(h), rng, report,
               eval_fn);
    if (hook) {
      hook("minmax" + std::to_string(h), student);
    }
  }

  run_epochs(ctx, base_view, params.train_epochs, "finetune", rng, report, eval_fn);
  if (hook) {
    hook("finetune", student);
  }
  finish_report(report, ctx, eval_fn, start);
  return report;
}

}  // namespace

TrainReport vanilla_kd(Network& student, const Network& teacher, const Dataset& train,
                       const Dataset* eval_data, const KdHyperParams& params) {
  return distill_run(student, teacher, train, eval_data, params, "vanilla_kd", -1, {});
}

TrainReport backward_kd(Network& student, const Network& teacher, const Dataset& train,
                        const Dataset* eval_data, const KdHyperParams& params,
                        const PhaseHook& hook) {
  return distill_run(student, teacher, train, eval_data, params, "backward_kd",
                     params.hyper_epochs, hook);
}

// ------------------------------------------------------------------
// embedding-stream training
// ------------------------------------------------------------------

namespace {

Tensor embedding_stream(const EmbeddingModel& model, const Dataset& data) {
  const NoGradGuard guard;
  return embed_tokens(model.embedding, data.tokens, data.size(), data.seq_len).detach();
}

TrainReport embedding_distill_run(EmbeddingModel& student, const EmbeddingModel& teacher,
                                  const Dataset& train, const Dataset* eval_data,
                                  const KdHyperParams& params, const std::string& mode,
                                  int hyper_epochs, const EmbeddingPhaseHook& hook) {
  params.validate();
  require_nonempty(train, mode.c_str());
  if (train.kind != DatasetKind::token) {
    throw std::invalid_argument(mode + ": expected a token dataset");
  }
  if (train.seq_len != student.seq_len || train.seq_len != teacher.seq_len) {
    throw ShapeError(mode + ": sequence length mismatch between data and models");
  }
  const auto start = Clock::now();
  TrainReport report;
  report.mode = mode;
  report.params = params;
  Rng rng(params.seed);
  SgdOptimizer opt(params.learning_rate, params.momentum);

  // the pipeline trains the head on fixed embedding streams; each network
  // consumes vectors from its own embedding space
  TrainContext ctx;
  ctx.student_fwd = [&student](const Tensor& z) { return forward_from_embedding(student, z); };
  ctx.params = student.head.params();
  ctx.kind = DatasetKind::classification;
  ctx.optimizer = &opt;
  ctx.hp = &params;
  ctx.distill = true;

  std::function<EvalMetrics()> eval_fn;
  if (eval_data != nullptr) {
    eval_fn = [&student, eval_data] { return evaluate(student, *eval_data); };
  }

  const Tensor z_student = embedding_stream(student, train);
  const Tensor z_teacher = embedding_stream(teacher, train);
  const Tensor teacher_out = forward_in_chunks(
      [&teacher](const Tensor& z) { return forward_from_embedding(teacher, z); }, z_teacher,
      kEvalChunk);

  TrainView base_view;
  base_view.inputs = z_student;
  base_view.labels = train.labels;
  base_view.teacher_outputs = teacher_out;

  if (hyper_epochs < 0) {
    run_epochs(ctx, base_view, params.train_epochs, "train", rng, report, eval_fn);
    finish_report(report, ctx, eval_fn, start);
    return report;
  }

  run_epochs(ctx, base_view, params.train_epochs, "pretrain", rng, report, eval_fn);
  if (hook) {
    hook("pretrain", student);
  }

  std::vector<Tensor> aux_inputs, aux_outputs;
  std::vector<std::vector<int>> aux_labels;

  for (int h = 1; h <= hyper_epochs; ++h) {
    // embedding matrices are frozen during generation, so one solve per
    // hyper epoch is exact
    const EmbeddingTransform transform =
        compute_transform(student.embedding, teacher.embedding);
    EmbeddingAuxBatch aux =
        generate_auxiliary_embedding(z_student, student, teacher, transform, params);
    const double aux_div =
        aux.divergence.empty()
            ? 0.0
            : std::accumulate(aux.divergence.begin(), aux.divergence.end(), 0.0) /
                  aux.divergence.size();
    const double base_div = aux.origin_divergence.empty()
                                ? 0.0
                                : std::accumulate(aux.origin_divergence.begin(),
                                                  aux.origin_divergence.end(), 0.0) /
                                      aux.origin_divergence.size();
    report.hyper_aux_divergence.push_back(aux_div);
    report.hyper_base_divergence.push_back(base_div);
    report.hyper_q_residual.push_back(transform.residual);
    report.hyper_trace_monotone.push_back(aux.traces_monotone ? 1 : 0);

    if (params.aux_retention == AuxRetention::reset_each_hyper_epoch) {
      aux_inputs.clear();
      aux_outputs.clear();
      aux_labels.clear();
    }
    aux_inputs.push_back(aux.z_student);
    aux_outputs.push_back(aux.teacher_outputs);
    aux_labels.push_back(aux.pseudo_labels);

    TrainView mixed;
    std::vector<Tensor> in_blocks{z_student};
    std::vector<Tensor> out_blocks{teacher_out};
    in_blocks.insert(in_blocks.end(), aux_inputs.begin(), aux_inputs.end());
    out_blocks.insert(out_blocks.end(), aux_outputs.begin(), aux_outputs.end());
    mixed.inputs = concat_view_rows(in_blocks);
    mixed.teacher_outputs = concat_view_rows(out_blocks);
    mixed.labels = train.labels;
    for (const auto& block : aux_labels) {
      mixed.labels.insert(mixed.labels.end(), block.begin(), block.end());
    }
    mixed.is_aux.assign(static_cast<std::size_t>(mixed.inputs.rows()), 1);
    std::fill_n(mixed.is_aux.begin(), train.size(), 0);
    run_epochs(ctx, mixed, params.train_epochs, "minmax" + std::to_string(h), rng, report,
               eval_fn);
    if (hook) {
      hook("minmax" + std::to_string(h), student);
    }
  }

  run_epochs(ctx, base_view, params.train_epochs, "finetune", rng, report, eval_fn);
  if (hook) {
    hook("finetune", student);
  }
  finish_report(report, ctx, eval_fn, start);
  return report;
}

}  // namespace

TrainReport train_scratch(EmbeddingModel& model, const Dataset& train, const Dataset* eval_data,
                          const KdHyperParams& params) {
  params.validate();
  require_nonempty(train, "train_scratch");
  if (train.kind != DatasetKind::token) {
    throw std::invalid_argument("train_scratch: embedding models expect token datasets");
  }
  const auto start = Clock::now();
  TrainReport report;
  report.mode = "scratch";
  report.params = params;
  Rng rng(params.seed);
  SgdOptimizer opt(params.learning_rate, params.momentum);

  // end to end: token ids in, gradients into the embedding matrix and head
  const int seq_len = train.seq_len;
  std::vector<Tensor*> all_params = model.head.params();
  all_params.push_back(&model.embedding);

  std::function<EvalMetrics()> eval_fn;
  if (eval_data != nullptr) {
    eval_fn = [&model, eval_data] { return evaluate(model, *eval_data); };
  }

  const int n = train.size();
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int e = 0; e < params.train_epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (int lo = 0; lo < n; lo += params.batch_size) {
      const int hi = std::min(n, lo + params.batch_size);
      std::vector<int> batch_tokens;
      batch_tokens.reserve(static_cast<std::size_t>(hi - lo) * seq_len);
      std::vector<int> yb;
      yb.reserve(static_cast<std::size_t>(hi - lo));
      for (int i = lo; i < hi; ++i) {
        const int row = order[static_cast<std::size_t>(i)];
        const auto* src = train.tokens.data() + static_cast<std::size_t>(row) * seq_len;
        batch_tokens.insert(batch_tokens.end(), src, src + seq_len);
        yb.push_back(train.labels[static_cast<std::size_t>(row)]);
      }
      const Tensor logits = forward(model, batch_tokens, hi - lo);
      const Tensor loss = cross_entropy(softmax(logits, 1), yb);
      const GradMap grads = backward(loss);
      opt.step(all_params, grads);
      ++report.optimizer_steps;
      loss_sum += loss.value() * (hi - lo);
    }
    EpochStat stat;
    stat.epoch = static_cast<int>(report.epochs.size()) + 1;
    stat.phase = "train";
    stat.train_loss = loss_sum / n;
    if (eval_fn) {
      stat.eval_metric = eval_fn().accuracy;
    }
    report.epochs.push_back(std::move(stat));
  }
  if (eval_fn) {
    const EvalMetrics m = eval_fn();
    report.final_metric = m.accuracy;
    report.final_loss = m.mean_loss;
  } else if (!report.epochs.empty()) {
    report.final_loss = report.epochs.back().train_loss;
  }
  report.wall_seconds = seconds_since(start);
  return report;
}

TrainReport vanilla_kd_tokens(EmbeddingModel& student, const EmbeddingModel& teacher,
                              const Dataset& train, const Dataset* eval_data,
                              const KdHyperParams& params) {
  params.validate();
  require_nonempty(train, "vanilla_kd_tokens");
  if (train.kind != DatasetKind::token) {
    throw std::invalid_argument("vanilla_kd_tokens: expected a token dataset");
  }
  const auto start = Clock::now();
  TrainReport report;
  report.mode = "vanilla_kd_tokens";
  report.params = params;
  Rng rng(params.seed);
  SgdOptimizer opt(params.learning_rate, params.momentum);

  Tensor teacher_logits_all;
  {
    const NoGradGuard guard;
    teacher_logits_all = forward(teacher, train.tokens, train.size()).detach();
  }
  std::vector<Tensor*> all_params = student.head.params();
  all_params.push_back(&student.embedding);

  std::function<EvalMetrics()> eval_fn;
  if (eval_data != nullptr) {
    eval_fn = [&student, eval_data] { return evaluate(student, *eval_data); };
  }

  const int n = train.size();
  const int seq_len = train.seq_len;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int e = 0; e < params.train_epochs; ++e) {
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (int lo = 0; lo < n; lo += params.batch_size) {
      const int hi = std::min(n, lo + params.batch_size);
      std::vector<int> batch_tokens;
      batch_tokens.reserve(static_cast<std::size_t>(hi - lo) * seq_len);
      std::vector<int> yb;
      std::vector<int> rows;
      for (int i = lo; i < hi; ++i) {
        const int row = order[static_cast<std::size_t>(i)];
        rows.push_back(row);
        yb.push_back(train.labels[static_cast<std::size_t>(row)]);
        const auto* src = train.tokens.data() + static_cast<std::size_t>(row) * seq_len;
        batch_tokens.insert(batch_tokens.end(), src, src + seq_len);
      }
      const Tensor s_logits = forward(student, batch_tokens, hi - lo);
      const Tensor t_logits = gather_rows(teacher_logits_all, rows).detach();
      const Tensor loss =
          params.kd_loss_form == KdLossForm::alpha_form
              ? kd_loss_alpha(s_logits, t_logits, yb, params.alpha, params.temperature)
              : kd_loss_lambda(s_logits, t_logits, yb, params.lambda, params.temperature);
      const GradMap grads = backward(loss);
      opt.step(all_params, grads);
      ++report.optimizer_steps;
      loss_sum += loss.value() * (hi - lo);
    }
    EpochStat stat;
    stat.epoch = static_cast<int>(report.epochs.size()) + 1;
    stat.phase = "train";
    stat.train_loss = loss_sum / n;
    if (eval_fn) {
      stat.eval_metric = eval_fn().accuracy;
    }
    report.epochs.push_back(std::move(stat));
  }
  if (eval_fn) {
    const EvalMetrics m = eval_fn();
    report.final_metric = m.accuracy;
    report.final_loss = m.mean_loss;
  } else if (!report.epochs.empty()) {
    report.final_loss = report.epochs.back().train_loss;
  }
  report.wall_seconds = seconds_since(start);
  return report;
}

TrainReport vanilla_kd_embedding(EmbeddingModel& student, const EmbeddingModel& teacher,
                                 const Dataset& train, const Dataset* eval_data,
                                 const KdHyperParams& params) {
  return embedding_distill_run(student, teacher, train, eval_data, params,
                               "vanilla_kd_embedding", -1, {});
}

TrainReport backward_kd_embedding(EmbeddingModel& student, const EmbeddingModel& teacher,
                                  const Dataset& train, const Dataset* eval_data,
                                  const KdHyperParams& params, const EmbeddingPhaseHook& hook) {
  return embedding_distill_run(student, teacher, train, eval_data, params,
                               "backward_kd_embedding", params.hyper_epochs, hook);
}

}  // namespace bkd
