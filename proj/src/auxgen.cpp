#include "bkd/auxgen.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace bkd {

namespace detail {

namespace {

constexpr int kMaxHalvings = 10;

std::vector<double> row_divergence(const Tensor& s_out, const Tensor& t_out) {
  const int n = s_out.rows(), c = s_out.cols();
  const auto& s = s_out.data();
  const auto& t = t_out.data();
  std::vector<double> div(static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = s[static_cast<std::size_t>(i) * c + j] - t[static_cast<std::size_t>(i) * c + j];
      acc += d * d;
    }
    div[static_cast<std::size_t>(i)] = acc;
  }
  return div;
}

std::vector<double> eval_divergence(const std::vector<double>& flat, int n, int d,
                                    const ForwardFn& student_fwd, const ForwardFn& teacher_fwd) {
  const NoGradGuard guard;  // value-only probe
  const Tensor x = Tensor::from_data({n, d}, std::vector<double>(flat));
  return row_divergence(student_fwd(x), teacher_fwd(x));
}

}  // namespace

AscentResult ascend_rows(const Tensor& x0, const ForwardFn& student_fwd,
                         const ForwardFn& teacher_fwd, double eta, int steps,
                         std::optional<std::array<double, 2>> clip, double grad_norm_floor) {
  if (x0.shape().size() != 2) {
    throw ShapeError("ascend_rows: expected rank-2 input");
  }
  const int n = x0.rows(), d = x0.cols();
  AscentResult res;
  res.values = x0.data();
  res.origin_div = eval_divergence(res.values, n, d, student_fwd, teacher_fwd);
  res.final_div = res.origin_div;
  res.aborted.assign(static_cast<std::size_t>(n), 0);
  res.traces.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    res.traces[static_cast<std::size_t>(i)].push_back(res.origin_div[static_cast<std::size_t>(i)]);
  }

  const auto clip_value = [&clip](double v) {
    if (!clip) {
      return v;
    }
    return std::min(std::max(v, (*clip)[0]), (*clip)[1]);
  };

  std::vector<std::uint8_t> active(static_cast<std::size_t>(n), 1);
  for (int step = 0; step < steps; ++step) {
    if (std::none_of(active.begin(), active.end(), [](std::uint8_t a) { return a != 0; })) {
      break;
    }
    Tensor x = Tensor::from_data({n, d}, std::vector<double>(res.values));
    x.set_requires_grad();
    const Tensor diff = sub(student_fwd(x), teacher_fwd(x));
    const Tensor loss = sum(mul(diff, diff));  // rows are independent samples
    const Tensor grad = backward(loss).grad_of(x);
    const auto& g = grad.data();

    struct Pending {
      int row;
      double eta_try;
    };
    std::vector<Pending> pending;
    for (int i = 0; i < n; ++i) {
      if (!active[static_cast<std::size_t>(i)]) {
        continue;
      }
      double norm_sq = 0.0;
      bool finite = true;
      for (int c = 0; c < d; ++c) {
        const double gv = g[static_cast<std::size_t>(i) * d + c];
        finite = finite && std::isfinite(gv);
        norm_sq += gv * gv;
      }
      if (!finite) {
        // give back the untouched origin for this sample
        res.aborted[static_cast<std::size_t>(i)] = 1;
        active[static_cast<std::size_t>(i)] = 0;
        std::copy_n(x0.data().data() + static_cast<std::size_t>(i) * d, d,
                    res.values.data() + static_cast<std::size_t>(i) * d);
        res.final_div[static_cast<std::size_t>(i)] = res.origin_div[static_cast<std::size_t>(i)];
        res.traces[static_cast<std::size_t>(i)] = {res.origin_div[static_cast<std::size_t>(i)]};
        continue;
      }
      if (std::sqrt(norm_sq) < grad_norm_floor) {
        active[static_cast<std::size_t>(i)] = 0;
        continue;
      }
      pending.push_back({i, eta});
    }

    // per-sample step halving: accept only strict divergence increases
    for (int round = 0; round <= kMaxHalvings && !pending.empty(); ++round) {
      std::vector<double> cand(pending.size() * static_cast<std::size_t>(d));
      for (std::size_t p = 0; p < pending.size(); ++p) {
        const int i = pending[p].row;
        for (int c = 0; c < d; ++c) {
          const double v = res.values[static_cast<std::size_t>(i) * d + c] +
                           pending[p].eta_try * g[static_cast<std::size_t>(i) * d + c];
          cand[p * static_cast<std::size_t>(d) + c] = clip_value(v);
        }
      }
      const std::vector<double> cand_div =
          eval_divergence(cand, static_cast<int>(pending.size()), d, student_fwd, teacher_fwd);
      std::vector<Pending> still;
      for (std::size_t p = 0; p < pending.size(); ++p) {
        const int i = pending[p].row;
        if (cand_div[p] > res.final_div[static_cast<std::size_t>(i)]) {
          std::copy_n(cand.data() + p * static_cast<std::size_t>(d), d,
                      res.values.data() + static_cast<std::size_t>(i) * d);
          res.final_div[static_cast<std::size_t>(i)] = cand_div[p];
          res.traces[static_cast<std::size_t>(i)].push_back(cand_div[p]);
        } else if (round < kMaxHalvings) {
          still.push_back({i, pending[p].eta_try * 0.5});
        } else {
          active[static_cast<std::size_t>(i)] = 0;  // still decreasing: stop early
        }
      }
      pending.swap(still);
    }
  }
  return res;
}

}  // namespace detail

// ------------------------------------------------------------------
// input-space perturbation
// ------------------------------------------------------------------

namespace {

Tensor as_row_matrix(const Tensor& x) {
  if (x.shape().size() == 1) {
    return reshape(x, {1, x.shape()[0]});
  }
  if (x.shape().size() == 2 && x.rows() == 1) {
    return x;
  }
  throw ShapeError("perturb_sample: expected a single sample, rank-1 or [1 x d]");
}

}  // namespace

PerturbResult perturb_sample(const Tensor& x, const Network& student, const Network& teacher,
                             double eta, int steps, std::optional<std::array<double, 2>> clip) {
  const Tensor x_row = as_row_matrix(x);
  const Network frozen_student = frozen_clone(student);
  const Network frozen_teacher = frozen_clone(teacher);
  auto res = detail::ascend_rows(
      x_row.detach(), [&frozen_student](const Tensor& v) { return forward(frozen_student, v); },
      [&frozen_teacher](const Tensor& v) { return forward(frozen_teacher, v); }, eta, steps,
      clip, 1e-8);
  PerturbResult out;
  Tensor flat = Tensor::from_data({1, x_row.cols()}, std::move(res.values));
  out.input = x.shape().size() == 1 ? reshape(flat, x.shape()).detach() : flat;
  out.trace = std::move(res.traces[0]);
  out.aborted = res.aborted[0] != 0;
  return out;
}

double AuxiliaryBatch::mean_divergence() const {
  return divergence.empty()
             ? 0.0
             : std::accumulate(divergence.begin(), divergence.end(), 0.0) / divergence.size();
}

double AuxiliaryBatch::mean_origin_divergence() const {
  return origin_divergence.empty() ? 0.0
                                   : std::accumulate(origin_divergence.begin(),
                                                     origin_divergence.end(), 0.0) /
                                         origin_divergence.size();
}

AuxiliaryBatch generate_auxiliary(const Dataset& data, const Network& student,
                                  const Network& teacher, const KdHyperParams& params) {
  if (data.kind == DatasetKind::token) {
    throw std::invalid_argument("generate_auxiliary: token datasets use the embedding pipeline");
  }
  const int n = data.size();
  if (n == 0) {
    throw std::invalid_argument("generate_auxiliary: empty dataset");
  }
  const int d = data.inputs.cols();

  AuxiliaryBatch batch;
  batch.origin.resize(static_cast<std::size_t>(n));
  std::iota(batch.origin.begin(), batch.origin.end(), 0);
  std::vector<double> values(static_cast<std::size_t>(n) * d);
  batch.divergence.resize(static_cast<std::size_t>(n));
  batch.origin_divergence.resize(static_cast<std::size_t>(n));
  batch.aborted.resize(static_cast<std::size_t>(n));

  const Network frozen_student = frozen_clone(student);
  const Network frozen_teacher = frozen_clone(teacher);
  // the divergence is measured on raw outputs by default; on probabilities
  // when configured (classification only)
  const bool on_probs = params.bkd_on_probabilities && data.kind == DatasetKind::classification;
  const auto student_fwd = [&frozen_student, on_probs](const Tensor& v) {
    const Tensor out = forward(frozen_student, v);
    return on_probs ? softmax(out, 1) : out;
  };
  const auto teacher_fwd = [&frozen_teacher, on_probs](const Tensor& v) {
    const Tensor out = forward(frozen_teacher, v);
    return on_probs ? softmax(out, 1) : out;
  };

  for (int lo = 0; lo < n; lo += params.batch_size) {
    const int hi = std::min(n, lo + params.batch_size);
    std::vector<int> rows(static_cast<std::size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    const Tensor x0 = gather_rows(data.inputs, rows).detach();
    auto res = detail::ascend_rows(x0, student_fwd, teacher_fwd, params.perturb_rate,
                                   params.perturb_steps, params.input_clip,
                                   params.grad_norm_floor);
    std::copy(res.values.begin(), res.values.end(),
              values.begin() + static_cast<std::size_t>(lo) * d);
    for (int i = lo; i < hi; ++i) {
      const std::size_t local = static_cast<std::size_t>(i - lo);
      batch.divergence[static_cast<std::size_t>(i)] = res.final_div[local];
      batch.origin_divergence[static_cast<std::size_t>(i)] = res.origin_div[local];
      batch.aborted[static_cast<std::size_t>(i)] = res.aborted[local];
      const auto& trace = res.traces[local];
      for (std::size_t t = 1; t < trace.size(); ++t) {
        batch.traces_monotone = batch.traces_monotone && trace[t] >= trace[t - 1];
      }
    }
  }
  batch.inputs = Tensor::from_data({n, d}, std::move(values));

  // teacher relabels the perturbed points
  const NoGradGuard guard;
  batch.teacher_outputs = forward(teacher, batch.inputs).detach();
  if (data.kind == DatasetKind::classification) {
    batch.teacher_soft =
        softmax(scale(batch.teacher_outputs, 1.0 / params.temperature), 1).detach();
    const int c = batch.teacher_outputs.cols();
    batch.pseudo_labels.resize(static_cast<std::size_t>(n));
    const auto& logits = batch.teacher_outputs.data();
    for (int i = 0; i < n; ++i) {
      const double* row = logits.data() + static_cast<std::size_t>(i) * c;
      batch.pseudo_labels[static_cast<std::size_t>(i)] =
          static_cast<int>(std::max_element(row, row + c) - row);
    }
  }
  return batch;
}

// ------------------------------------------------------------------
// embedding transform
// ------------------------------------------------------------------

namespace {

// Cholesky factorization in place; returns false on a non-positive pivot.
// diag_min/diag_max report the factor's diagonal range for conditioning.
bool cholesky(std::vector<double>& a, int n, double& diag_min, double& diag_max) {
  diag_min = std::numeric_limits<double>::infinity();
  diag_max = 0.0;
  for (int j = 0; j < n; ++j) {
    double sum = a[static_cast<std::size_t>(j) * n + j];
    for (int k = 0; k < j; ++k) {
      const double l = a[static_cast<std::size_t>(j) * n + k];
      sum -= l * l;
    }
    if (!(sum > 0.0) || !std::isfinite(sum)) {
      return false;
    }
    const double root = std::sqrt(sum);
    a[static_cast<std::size_t>(j) * n + j] = root;
    diag_min = std::min(diag_min, root);
    diag_max = std::max(diag_max, root);
    for (int i = j + 1; i < n; ++i) {
      double s = a[static_cast<std::size_t>(i) * n + j];
      for (int k = 0; k < j; ++k) {
        s -= a[static_cast<std::size_t>(i) * n + k] * a[static_cast<std::size_t>(j) * n + k];
      }
      a[static_cast<std::size_t>(i) * n + j] = s / root;
    }
  }
  return true;
}

void cholesky_solve(const std::vector<double>& l, int n, std::vector<double>& b) {
  for (int i = 0; i < n; ++i) {
    double s = b[static_cast<std::size_t>(i)];
    for (int k = 0; k < i; ++k) {
      s -= l[static_cast<std::size_t>(i) * n + k] * b[static_cast<std::size_t>(k)];
    }
    b[static_cast<std::size_t>(i)] = s / l[static_cast<std::size_t>(i) * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = b[static_cast<std::size_t>(i)];
    for (int k = i + 1; k < n; ++k) {
      s -= l[static_cast<std::size_t>(k) * n + i] * b[static_cast<std::size_t>(k)];
    }
    b[static_cast<std::size_t>(i)] = s / l[static_cast<std::size_t>(i) * n + i];
  }
}

}  // namespace

EmbeddingTransform compute_transform(const Tensor& w_student, const Tensor& w_teacher) {
  if (w_student.shape().size() != 2 || w_teacher.shape().size() != 2) {
    throw ShapeError("compute_transform: embedding matrices must be rank-2");
  }
  if (w_student.cols() != w_teacher.cols()) {
    throw ShapeError("compute_transform: vocab sizes differ, " +
                     std::to_string(w_student.cols()) + " vs " +
                     std::to_string(w_teacher.cols()));
  }
  const int d1 = w_student.rows();
  const int d2 = w_teacher.rows();
  const int vocab = w_student.cols();
  if (vocab < d1) {
    throw SingularMatrixError("compute_transform: W_S is " + std::to_string(d1) + "x" +
                              std::to_string(vocab) + "; fewer columns than rows cannot have "
                              "full row rank");
  }

  const Tensor gram = matmul(w_student, transpose(w_student));   // [d1 x d1]
  const Tensor rhs = matmul(w_teacher, transpose(w_student));    // [d2 x d1]

  std::vector<double> factor = gram.data();
  double diag_min = 0.0, diag_max = 0.0;
  if (!cholesky(factor, d1, diag_min, diag_max)) {
    std::ostringstream os;
    os << "compute_transform: W_S W_S^T is not positive definite (rank-deficient W_S); "
       << "condition number estimate >= 1e16";
    throw SingularMatrixError(os.str());
  }
  const double cond_est = (diag_max / diag_min) * (diag_max / diag_min);
  if (cond_est > 1e12) {
    std::ostringstream os;
    os << "compute_transform: W_S W_S^T too ill-conditioned to solve reliably; "
       << "condition number estimate " << cond_est;
    throw SingularMatrixError(os.str());
  }

  // solve q gram = rhs row by row: gram is symmetric, so gram y = rhs_i
  std::vector<double> q(static_cast<std::size_t>(d2) * d1);
  std::vector<double> row(static_cast<std::size_t>(d1));
  for (int i = 0; i < d2; ++i) {
    std::copy_n(rhs.data().data() + static_cast<std::size_t>(i) * d1, d1, row.data());
    cholesky_solve(factor, d1, row);
    std::copy_n(row.data(), d1, q.data() + static_cast<std::size_t>(i) * d1);
  }

  EmbeddingTransform transform;
  transform.q = Tensor::from_data({d2, d1}, std::move(q));
  transform.student_dim = d1;
  transform.teacher_dim = d2;
  transform.vocab = vocab;

  const Tensor residual = sub(matmul(transform.q, gram), rhs);
  double num = 0.0, den = 0.0;
  for (double v : residual.data()) {
    num += v * v;
  }
  for (double v : rhs.data()) {
    den += v * v;
  }
  transform.residual = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
  if (transform.residual > 1e-8) {
    std::ostringstream os;
    os << "compute_transform: normal-equation residual " << transform.residual
       << " exceeds 1e-8; condition number estimate " << cond_est;
    throw SingularMatrixError(os.str());
  }
  return transform;
}

Tensor apply_transform_blockwise(const EmbeddingTransform& transform, const Tensor& z,
                                 int seq_len) {
  if (z.shape().size() != 2 || z.cols() != seq_len * transform.student_dim) {
    throw ShapeError("apply_transform_blockwise: expected [n x " +
                     std::to_string(seq_len * transform.student_dim) + "]");
  }
  const int n = z.rows();
  const Tensor per_token = reshape(z, {n * seq_len, transform.student_dim});
  const Tensor mapped = matmul(per_token, transpose(transform.q));
  return reshape(mapped, {n, seq_len * transform.teacher_dim});
}

// ------------------------------------------------------------------
// embedding-space perturbation
// ------------------------------------------------------------------

namespace {

detail::AscentResult ascend_embedding(const Tensor& z0, const EmbeddingModel& student,
                                      const EmbeddingModel& teacher,
                                      const EmbeddingTransform& transform, double eta, int steps,
                                      double grad_norm_floor, bool on_probs) {
  const int seq_len = student.seq_len;
  const EmbeddingModel frozen_student = frozen_clone(student);
  const EmbeddingModel frozen_teacher = frozen_clone(teacher);
  return detail::ascend_rows(
      z0,
      [&frozen_student, on_probs](const Tensor& z) {
        const Tensor out = forward_from_embedding(frozen_student, z);
        return on_probs ? softmax(out, 1) : out;
      },
      [&frozen_teacher, &transform, seq_len, on_probs](const Tensor& z) {
        const Tensor out = forward_from_embedding(
            frozen_teacher, apply_transform_blockwise(transform, z, seq_len));
        return on_probs ? softmax(out, 1) : out;
      },
      eta, steps, std::nullopt, grad_norm_floor);
}

}  // namespace

EmbeddingPerturbResult perturb_embedding(const Tensor& z_student, const EmbeddingModel& student,
                                         const EmbeddingModel& teacher,
                                         const EmbeddingTransform& transform, double eta,
                                         int steps) {
  Tensor z_row = z_student;
  const bool was_rank1 = z_student.shape().size() == 1;
  if (was_rank1) {
    z_row = reshape(z_student, {1, z_student.shape()[0]});
  }
  if (z_row.cols() != student.seq_len * student.embed_dim) {
    throw ShapeError("perturb_embedding: z width " + std::to_string(z_row.cols()) +
                     " != seq_len * embed_dim");
  }
  auto res = ascend_embedding(z_row.detach(), student, teacher, transform, eta, steps, 1e-8,
                              /*on_probs=*/false);
  EmbeddingPerturbResult out;
  Tensor z_s = Tensor::from_data({1, z_row.cols()}, std::move(res.values));
  Tensor z_t = apply_transform_blockwise(transform, z_s, student.seq_len).detach();
  if (was_rank1) {
    z_s = reshape(z_s, z_student.shape()).detach();
    z_t = reshape(z_t, {z_t.cols()}).detach();
  }
  out.z_student = z_s;
  out.z_teacher = z_t;
  out.trace = std::move(res.traces[0]);
  out.aborted = res.aborted[0] != 0;
  return out;
}

EmbeddingAuxBatch generate_auxiliary_embedding(const Tensor& z_student_all,
                                               const EmbeddingModel& student,
                                               const EmbeddingModel& teacher,
                                               const EmbeddingTransform& transform,
                                               const KdHyperParams& params) {
  const int n = z_student_all.rows();
  const int d = z_student_all.cols();
  EmbeddingAuxBatch batch;
  batch.origin.resize(static_cast<std::size_t>(n));
  std::iota(batch.origin.begin(), batch.origin.end(), 0);
  std::vector<double> values(static_cast<std::size_t>(n) * d);
  batch.divergence.resize(static_cast<std::size_t>(n));
  batch.origin_divergence.resize(static_cast<std::size_t>(n));
  batch.aborted.resize(static_cast<std::size_t>(n));

  for (int lo = 0; lo < n; lo += params.batch_size) {
    const int hi = std::min(n, lo + params.batch_size);
    std::vector<int> rows(static_cast<std::size_t>(hi - lo));
    std::iota(rows.begin(), rows.end(), lo);
    const Tensor z0 = gather_rows(z_student_all, rows).detach();
    auto res = ascend_embedding(z0, student, teacher, transform, params.perturb_rate,
                                params.perturb_steps, params.grad_norm_floor,
                                params.bkd_on_probabilities);
    std::copy(res.values.begin(), res.values.end(),
              values.begin() + static_cast<std::size_t>(lo) * d);
    for (int i = lo; i < hi; ++i) {
      const std::size_t local = static_cast<std::size_t>(i - lo);
      batch.divergence[static_cast<std::size_t>(i)] = res.final_div[local];
      batch.origin_divergence[static_cast<std::size_t>(i)] = res.origin_div[local];
      batch.aborted[static_cast<std::size_t>(i)] = res.aborted[local];
      const auto& trace = res.traces[local];
      for (std::size_t t = 1; t < trace.size(); ++t) {
        batch.traces_monotone = batch.traces_monotone && trace[t] >= trace[t - 1];
      }
    }
  }
  batch.z_student = Tensor::from_data({n, d}, std::move(values));
  const NoGradGuard guard;
  batch.z_teacher =
      apply_transform_blockwise(transform, batch.z_student, student.seq_len).detach();
  batch.teacher_outputs = forward_from_embedding(teacher, batch.z_teacher).detach();
  batch.teacher_soft =
      softmax(scale(batch.teacher_outputs, 1.0 / params.temperature), 1).detach();
  const int c = batch.teacher_outputs.cols();
  batch.pseudo_labels.resize(static_cast<std::size_t>(n));
  const auto& logits = batch.teacher_outputs.data();
  for (int i = 0; i < n; ++i) {
    const double* row = logits.data() + static_cast<std::size_t>(i) * c;
    batch.pseudo_labels[static_cast<std::size_t>(i)] =
        static_cast<int>(std::max_element(row, row + c) - row);
  }
  return batch;
}

}  // namespace bkd
