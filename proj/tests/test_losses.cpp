#include <cmath>

#include "bkd/losses.hpp"
#include "bkd/rng.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bkd;

namespace {

Tensor random_logits(int n, int c, Rng& rng, double spread = 3.0) {
  std::vector<double> v(static_cast<std::size_t>(n) * c);
  for (double& x : v) {
    x = rng.uniform(-spread, spread);
  }
  return Tensor::from_data({n, c}, std::move(v));
}

std::vector<double> row_of(const Tensor& t, int r) {
  std::vector<double> out(static_cast<std::size_t>(t.cols()));
  for (int c = 0; c < t.cols(); ++c) {
    out[static_cast<std::size_t>(c)] = t.at(r, c);
  }
  return out;
}

// direct-summation reference for the lambda-form loss
double lambda_loss_oracle(const Tensor& s, const Tensor& t, const std::vector<int>& labels,
                          double lambda, double tau) {
  double hard = 0.0, soft = 0.0;
  for (int r = 0; r < s.rows(); ++r) {
    auto srow = row_of(s, r);
    auto trow = row_of(t, r);
    hard += oracle::cross_entropy_row(oracle::softmax_row(srow),
                                      labels[static_cast<std::size_t>(r)]);
    for (double& x : srow) {
      x /= tau;
    }
    for (double& x : trow) {
      x /= tau;
    }
    soft += oracle::kl_row(oracle::softmax_row(srow), oracle::softmax_row(trow));
  }
  hard /= s.rows();
  soft /= s.rows();
  return (1.0 - lambda) * hard + tau * tau * lambda * soft;
}

double alpha_loss_oracle(const Tensor& s, const Tensor& t, const std::vector<int>& labels,
                         double alpha, double tau) {
  double hard = 0.0, soft = 0.0;
  for (int r = 0; r < s.rows(); ++r) {
    auto srow = row_of(s, r);
    auto trow = row_of(t, r);
    hard += oracle::cross_entropy_row(oracle::softmax_row(srow),
                                      labels[static_cast<std::size_t>(r)]);
    for (double& x : srow) {
      x /= tau;
    }
    for (double& x : trow) {
      x /= tau;
    }
    soft += oracle::kl_row(oracle::softmax_row(srow), oracle::softmax_row(trow));
  }
  hard /= s.rows();
  soft /= s.rows();
  return alpha * hard + (1.0 - alpha) * soft;
}

}  // namespace

TEST_CASE("alpha-form loss boundaries") {
  Rng rng(2);
  const Tensor s = random_logits(4, 5, rng);
  const Tensor t = random_logits(4, 5, rng);
  const std::vector<int> y{0, 3, 1, 4};

  const double pure_ce = cross_entropy(softmax(s, 1), y).value();
  CHECK(kd_loss_alpha(s, t, y, 1.0, 2.0).value() == pure_ce);

  CHECK(kd_loss_alpha(s, s, y, 0.0, 2.0).value() == 0.0);

  const double mixed = kd_loss_alpha(s, t, y, 0.5, 2.0).value();
  CHECK(std::abs(mixed - alpha_loss_oracle(s, t, y, 0.5, 2.0)) < 1e-10);
}

TEST_CASE("lambda-form loss matches the direct computation") {
  Rng rng(3);
  const Tensor s = random_logits(6, 4, rng);
  const Tensor t = random_logits(6, 4, rng);
  const std::vector<int> y{0, 1, 2, 3, 0, 2};

  CHECK(kd_loss_lambda(s, t, y, 0.0, 3.0).value() == cross_entropy(softmax(s, 1), y).value());

  for (double lambda : {0.25, 0.5, 0.9, 1.0}) {
    const double got = kd_loss_lambda(s, t, y, lambda, 2.0).value();
    CHECK(std::abs(got - lambda_loss_oracle(s, t, y, lambda, 2.0)) < 1e-10);
  }

  // identical networks leave only the hard term
  const double only_hard = kd_loss_lambda(s, s, y, 0.7, 2.0).value();
  CHECK(std::abs(only_hard - 0.3 * cross_entropy(softmax(s, 1), y).value()) < 1e-15);
}

TEST_CASE("lambda-form worked two-logit example") {
  const Tensor s = Tensor::from_data({1, 2}, {0, 1});
  const Tensor t = Tensor::from_data({1, 2}, {1, 0});
  const std::vector<int> y{0};
  const double got = kd_loss_lambda(s, t, y, 1.0, 2.0).value();
  const double expect =
      4.0 * oracle::kl_row(oracle::softmax_row({0, 0.5}), oracle::softmax_row({0.5, 0}));
  CHECK(std::abs(got - expect) < 1e-12);
}

TEST_CASE("lambda endpoints are continuous") {
  Rng rng(4);
  const Tensor s = random_logits(3, 4, rng);
  const Tensor t = random_logits(3, 4, rng);
  const std::vector<int> y{1, 0, 3};
  const double at0 = kd_loss_lambda(s, t, y, 0.0, 2.0).value();
  const double near0 = kd_loss_lambda(s, t, y, 1e-9, 2.0).value();
  const double at1 = kd_loss_lambda(s, t, y, 1.0, 2.0).value();
  const double near1 = kd_loss_lambda(s, t, y, 1.0 - 1e-9, 2.0).value();
  CHECK(std::abs(at0 - near0) < 1e-6);
  CHECK(std::abs(at1 - near1) < 1e-6);
}

TEST_CASE("bkd loss") {
  const Tensor a = Tensor::from_data({1, 2}, {1, 2});
  const Tensor zero = Tensor::from_data({1, 2}, {0, 0});
  CHECK(bkd_loss(a, a).value() == 0.0);
  CHECK(bkd_loss(a, zero).value() == 5.0);

  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const Tensor s = random_logits(3, 4, rng);
    const Tensor t = random_logits(3, 4, rng);
    CHECK(bkd_loss(s, t).value() == bkd_loss(t, s).value());
    CHECK(bkd_loss(s, t).value() >= 0.0);
  }
  CHECK_THROWS_AS(bkd_loss(Tensor::zeros({1, 2}), Tensor::zeros({1, 3})), ShapeError);
}

TEST_CASE("bkd loss is zero only for equal outputs") {
  const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_data({2, 2}, {1, 2, 3, 4 + 1e-5});
  CHECK(bkd_loss(a, b).value() > 1e-12);
}

TEST_CASE("kl divergence values and properties") {
  const Tensor p = Tensor::from_data({1, 2}, {0.5, 0.5});
  CHECK(kl_div(p, p).value() == 0.0);

  const Tensor q = Tensor::from_data({1, 2}, {0.25, 0.75});
  CHECK(kl_div(p, q).value() == doctest::Approx(0.14384103622589045).epsilon(1e-9));

  CHECK_THROWS_AS(kl_div(Tensor::from_data({1, 2}, {-0.1, 1.1}), p), std::invalid_argument);

  Rng rng(6);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> a(4), b(4);
    double sa = 0.0, sb = 0.0;
    for (int i = 0; i < 4; ++i) {
      a[static_cast<std::size_t>(i)] = rng.uniform(1e-6, 1.0);
      b[static_cast<std::size_t>(i)] = rng.uniform(1e-6, 1.0);
      sa += a[static_cast<std::size_t>(i)];
      sb += b[static_cast<std::size_t>(i)];
    }
    for (int i = 0; i < 4; ++i) {
      a[static_cast<std::size_t>(i)] /= sa;
      b[static_cast<std::size_t>(i)] /= sb;
    }
    const double kl = kl_div(Tensor::from_data({1, 4}, std::move(a)),
                             Tensor::from_data({1, 4}, std::move(b)))
                          .value();
    CHECK(kl >= -1e-15);
  }
}

TEST_CASE("cross entropy on a floored one-hot distribution") {
  const double eps = kProbEpsilon;
  const int c = 3;
  const Tensor probs = Tensor::from_data({1, c}, {1.0 - (c - 1) * eps, eps, eps});
  CHECK(cross_entropy(probs, {0}).value() ==
        doctest::Approx(-std::log(1.0 - (c - 1) * eps)).epsilon(1e-15));
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(7);
  const std::vector<int> y{2, 0, 1};
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor s0 = random_logits(3, 4, rng);
    const Tensor t0 = random_logits(3, 4, rng);

    const auto check = [&](const std::function<Tensor(const Tensor&)>& loss_of_s) {
      Tensor s = s0.detach();
      s.set_requires_grad();
      const GradMap grads = backward(loss_of_s(s));
      const auto fd = oracle::fd_gradient(
          [&](const std::vector<double>& raw) {
            return loss_of_s(Tensor::from_data({3, 4}, std::vector<double>(raw))).value();
          },
          s0.data());
      CHECK(oracle::grad_close(grads.grad_of(s).data(), fd, 1e-4));
    };

    check([&](const Tensor& s) { return kd_loss_alpha(s, t0, y, 0.3, 2.5); });
    check([&](const Tensor& s) { return kd_loss_lambda(s, t0, y, 0.8, 3.0); });
    check([&](const Tensor& s) { return bkd_loss(s, t0); });
  }
}

TEST_CASE("loss parameter validation") {
  const Tensor s = Tensor::zeros({1, 3});
  const std::vector<int> y{0};
  CHECK_THROWS_AS(kd_loss_alpha(s, s, y, -0.1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(kd_loss_alpha(s, s, y, 1.1, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(kd_loss_alpha(s, s, y, 0.5, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(kd_loss_lambda(s, s, y, 2.0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(kd_loss_lambda(s, s, y, 0.5, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(kd_loss_lambda(s, s, {5}, 0.5, 1.0), std::invalid_argument);

  KdHyperParams hp;
  hp.lambda = 1.5;
  CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
  hp.lambda = 0.5;
  hp.temperature = 0.0;
  CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
}

TEST_CASE("regression loss endpoints") {
  const Tensor s = Tensor::from_data({2, 1}, {1.0, 2.0});
  const Tensor t = Tensor::from_data({2, 1}, {0.5, 2.5});
  const std::vector<double> targets{1.5, 1.5};
  CHECK(kd_loss_regression(s, t, targets, 0.0).value() == mse_loss(s, targets).value());
  CHECK(kd_loss_regression(s, t, targets, 1.0).value() == bkd_loss(s, t).value());
  const double mid = kd_loss_regression(s, t, targets, 0.25).value();
  CHECK(mid == doctest::Approx(0.75 * mse_loss(s, targets).value() +
                               0.25 * bkd_loss(s, t).value())
                   .epsilon(1e-15));
}
