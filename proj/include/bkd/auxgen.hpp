#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "bkd/data.hpp"
#include "bkd/losses.hpp"
#include "bkd/nn.hpp"
#include "bkd/tensor.hpp"

namespace bkd {

// Rank-deficient embedding matrix in the transform solve.
class SingularMatrixError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One gradient-ascent run on the student/teacher divergence. trace holds the
// divergence after the starting point and each accepted step, so it is
// non-decreasing by construction; aborted marks a non-finite gradient, in
// which case the origin is returned unchanged.
struct PerturbResult {
  Tensor input;  // x' with the same shape as x
  std::vector<double> trace;
  bool aborted = false;
};

PerturbResult perturb_sample(const Tensor& x, const Network& student, const Network& teacher,
                             double eta, int steps,
                             std::optional<std::array<double, 2>> clip);

// Auxiliary samples at maximum student/teacher divergence, one per origin
// sample, labeled by the teacher at the perturbed point.
struct AuxiliaryBatch {
  Tensor inputs;                   // x' [n x d]
  std::vector<int> origin;         // index into the source dataset
  Tensor teacher_outputs;          // T(x') raw outputs [n x c]
  Tensor teacher_soft;             // softmax(T(x') / tau), classification only
  std::vector<int> pseudo_labels;  // argmax T(x'), classification only
  std::vector<double> divergence;         // per-sample ||S(x')-T(x')||^2
  std::vector<double> origin_divergence;  // per-sample ||S(x)-T(x)||^2
  std::vector<std::uint8_t> aborted;
  bool traces_monotone = true;

  double mean_divergence() const;
  double mean_origin_divergence() const;
};

AuxiliaryBatch generate_auxiliary(const Dataset& data, const Network& student,
                                  const Network& teacher, const KdHyperParams& params);

// Least-squares map from student embedding space to teacher embedding space:
// q minimizes ||W_T - q W_S||_F, i.e. q (W_S W_S^T) = W_T W_S^T.
struct EmbeddingTransform {
  Tensor q;  // [teacher_dim x student_dim]
  int student_dim = 0;
  int teacher_dim = 0;
  int vocab = 0;
  double residual = 0.0;  // ||q G - B||_F / ||B||_F of the normal equations
};

EmbeddingTransform compute_transform(const Tensor& w_student, const Tensor& w_teacher);

// q applied per token block: [n x L*d1] -> [n x L*d2]; differentiable in z
Tensor apply_transform_blockwise(const EmbeddingTransform& transform, const Tensor& z,
                                 int seq_len);

struct EmbeddingPerturbResult {
  Tensor z_student;
  Tensor z_teacher;  // q z_student, recomputed after every accepted step
  std::vector<double> trace;
  bool aborted = false;
};

// Ascent on ||S(z) - T(q z)||^2 over the student embedding vector; the
// teacher is always evaluated at the transformed point.
EmbeddingPerturbResult perturb_embedding(const Tensor& z_student, const EmbeddingModel& student,
                                         const EmbeddingModel& teacher,
                                         const EmbeddingTransform& transform, double eta,
                                         int steps);

// Batch variant over an embedding-stream dataset; mirrors generate_auxiliary.
struct EmbeddingAuxBatch {
  Tensor z_student;  // [n x L*d1]
  Tensor z_teacher;  // [n x L*d2]
  std::vector<int> origin;
  Tensor teacher_outputs;
  Tensor teacher_soft;
  std::vector<int> pseudo_labels;
  std::vector<double> divergence;
  std::vector<double> origin_divergence;
  std::vector<std::uint8_t> aborted;
  bool traces_monotone = true;
};

EmbeddingAuxBatch generate_auxiliary_embedding(const Tensor& z_student_all,
                                               const EmbeddingModel& student,
                                               const EmbeddingModel& teacher,
                                               const EmbeddingTransform& transform,
                                               const KdHyperParams& params);

namespace detail {

// Shared ascent driver: student_fwd and teacher_fwd map the ascent variable
// [n x d] to outputs [n x c]. Rows are independent, so batched results match
// one-sample runs bit for bit.
struct AscentResult {
  std::vector<double> values;  // [n x d] row-major
  std::vector<std::vector<double>> traces;
  std::vector<double> final_div;
  std::vector<double> origin_div;
  std::vector<std::uint8_t> aborted;
};

using ForwardFn = std::function<Tensor(const Tensor&)>;

AscentResult ascend_rows(const Tensor& x0, const ForwardFn& student_fwd,
                         const ForwardFn& teacher_fwd, double eta, int steps,
                         std::optional<std::array<double, 2>> clip, double grad_norm_floor);

}  // namespace detail

}  // namespace bkd
