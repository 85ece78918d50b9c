#include "bkd/losses.hpp"

#include <cmath>

namespace bkd {

namespace {

void check_logit_pair(const Tensor& s, const Tensor& t, const char* op) {
  if (s.shape().size() != 2) {
    throw ShapeError(std::string(op) + ": logits must be rank-2");
  }
  if (s.shape() != t.shape()) {
    throw ShapeError(std::string(op) + ": student and teacher shapes differ");
  }
}

void check_labels(const Tensor& logits, const std::vector<int>& labels, const char* op) {
  if (static_cast<int>(labels.size()) != logits.rows()) {
    throw ShapeError(std::string(op) + ": need one label per row");
  }
  for (int y : labels) {
    if (y < 0 || y >= logits.cols()) {
      throw std::invalid_argument(std::string(op) + ": label " + std::to_string(y) +
                                  " outside [0," + std::to_string(logits.cols()) + ")");
    }
  }
}

void check_tau(double tau, const char* op) {
  if (!(tau > 0.0)) {
    throw std::invalid_argument(std::string(op) + ": temperature must be positive");
  }
}

Tensor soft_kl_term(const Tensor& student_logits, const Tensor& teacher_logits, double tau) {
  const Tensor p_s = softmax(scale(student_logits, 1.0 / tau), 1);
  const Tensor p_t = softmax(scale(teacher_logits, 1.0 / tau), 1);
  return kl_div(p_s, p_t);
}

}  // namespace

void KdHyperParams::validate() const {
  if (alpha < 0.0 || alpha > 1.0) {
    throw std::invalid_argument("alpha must lie in [0,1]");
  }
  if (lambda < 0.0 || lambda > 1.0) {
    throw std::invalid_argument("lambda must lie in [0,1]");
  }
  if (!(temperature > 0.0)) {
    throw std::invalid_argument("temperature must be positive");
  }
  if (!(perturb_rate >= 0.0)) {
    throw std::invalid_argument("perturb_rate must be nonnegative");
  }
  if (train_epochs < 1) {
    throw std::invalid_argument("train_epochs must be >= 1");
  }
  if (hyper_epochs < 0) {
    throw std::invalid_argument("hyper_epochs must be >= 0");
  }
  if (perturb_steps < 0) {
    throw std::invalid_argument("perturb_steps must be >= 0");
  }
  if (!(learning_rate > 0.0)) {
    throw std::invalid_argument("learning_rate must be positive");
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("momentum must lie in [0,1)");
  }
  if (batch_size < 1) {
    throw std::invalid_argument("batch_size must be >= 1");
  }
  if (input_clip && !((*input_clip)[0] < (*input_clip)[1])) {
    throw std::invalid_argument("input_clip needs lo < hi");
  }
}

Tensor kd_loss_alpha(const Tensor& student_logits, const Tensor& teacher_logits,
                     const std::vector<int>& labels, double alpha, double tau) {
  check_logit_pair(student_logits, teacher_logits, "kd_loss_alpha");
  check_labels(student_logits, labels, "kd_loss_alpha");
  if (alpha < 0.0 || alpha > 1.0) {
    throw std::invalid_argument("kd_loss_alpha: alpha outside [0,1]");
  }
  check_tau(tau, "kd_loss_alpha");
  // weight-zero terms are skipped entirely so the boundary cases reduce to
  // the single remaining loss, bit for bit
  if (alpha == 1.0) {
    return cross_entropy(softmax(student_logits, 1), labels);
  }
  if (alpha == 0.0) {
    return soft_kl_term(student_logits, teacher_logits, tau);
  }
  const Tensor hard = cross_entropy(softmax(student_logits, 1), labels);
  const Tensor soft = soft_kl_term(student_logits, teacher_logits, tau);
  return add(scale(hard, alpha), scale(soft, 1.0 - alpha));
}

Tensor kd_loss_lambda(const Tensor& student_logits, const Tensor& teacher_logits,
                      const std::vector<int>& labels, double lambda, double tau) {
  check_logit_pair(student_logits, teacher_logits, "kd_loss_lambda");
  check_labels(student_logits, labels, "kd_loss_lambda");
  if (lambda < 0.0 || lambda > 1.0) {
    throw std::invalid_argument("kd_loss_lambda: lambda outside [0,1]");
  }
  check_tau(tau, "kd_loss_lambda");
  if (lambda == 0.0) {
    return cross_entropy(softmax(student_logits, 1), labels);
  }
  if (lambda == 1.0) {
    return scale(soft_kl_term(student_logits, teacher_logits, tau), tau * tau);
  }
  const Tensor hard = cross_entropy(softmax(student_logits, 1), labels);
  const Tensor soft = soft_kl_term(student_logits, teacher_logits, tau);
  return add(scale(hard, 1.0 - lambda), scale(soft, tau * tau * lambda));
}

Tensor bkd_loss(const Tensor& student_out, const Tensor& teacher_out) {
  check_logit_pair(student_out, teacher_out, "bkd_loss");
  const Tensor diff = sub(student_out, teacher_out);
  return scale(sum(mul(diff, diff)), 1.0 / student_out.rows());
}

Tensor mse_loss(const Tensor& out, const std::vector<double>& targets) {
  if (out.shape().size() != 2 || out.cols() != 1) {
    throw ShapeError("mse_loss: expected [n x 1] outputs");
  }
  if (static_cast<int>(targets.size()) != out.rows()) {
    throw ShapeError("mse_loss: need one target per row");
  }
  const Tensor t = Tensor::from_data({out.rows(), 1}, std::vector<double>(targets));
  const Tensor diff = sub(out, t);
  return scale(sum(mul(diff, diff)), 1.0 / out.rows());
}

Tensor kd_loss_regression(const Tensor& student_out, const Tensor& teacher_out,
                          const std::vector<double>& targets, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) {
    throw std::invalid_argument("kd_loss_regression: lambda outside [0,1]");
  }
  if (lambda == 0.0) {
    return mse_loss(student_out, targets);
  }
  if (lambda == 1.0) {
    return bkd_loss(student_out, teacher_out);
  }
  return add(scale(mse_loss(student_out, targets), 1.0 - lambda),
             scale(bkd_loss(student_out, teacher_out), lambda));
}

Tensor kl_div(const Tensor& p, const Tensor& q) {
  if (p.shape().size() != 2) {
    throw ShapeError("kl_div: expected rank-2 distributions");
  }
  if (p.shape() != q.shape()) {
    throw ShapeError("kl_div: shape mismatch");
  }
  for (double v : p.data()) {
    if (v < 0.0) {
      throw std::invalid_argument("kl_div: negative entry in p");
    }
  }
  for (double v : q.data()) {
    if (v < 0.0) {
      throw std::invalid_argument("kl_div: negative entry in q");
    }
  }
  const Tensor pf = clamp_min(p, kProbEpsilon);
  const Tensor qf = clamp_min(q, kProbEpsilon);
  const Tensor row_terms = mul(pf, sub(log_e(pf), log_e(qf)));
  return scale(sum(row_terms), 1.0 / p.rows());
}

Tensor cross_entropy(const Tensor& probs, const std::vector<int>& labels) {
  if (probs.shape().size() != 2) {
    throw ShapeError("cross_entropy: expected rank-2 probabilities");
  }
  check_labels(probs, labels, "cross_entropy");
  for (double v : probs.data()) {
    if (v < 0.0) {
      throw std::invalid_argument("cross_entropy: negative probability");
    }
  }
  const Tensor picked = take_per_row(probs, labels);
  const Tensor floored = clamp_min(reshape(picked, {probs.rows(), 1}), kProbEpsilon);
  return scale(sum(log_e(floored)), -1.0 / probs.rows());
}

}  // namespace bkd
