#include <cmath>
#include <thread>
#include <vector>

#include "bkd/rng.hpp"
#include "bkd/tensor.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bkd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  int n = 1;
  for (int d : shape) {
    n *= d;
  }
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) {
    x = rng.uniform(lo, hi);
  }
  return Tensor::from_data(std::move(shape), std::move(v));
}

// weighted-sum scalarizer so every output element contributes to the loss
double weighted_loss(const Tensor& out, const std::vector<double>& w) {
  double acc = 0.0;
  const auto& v = out.data();
  for (std::size_t i = 0; i < v.size(); ++i) {
    acc += v[i] * w[i];
  }
  return acc;
}

Tensor weighted_loss_node(const Tensor& out, const std::vector<double>& w) {
  return sum(mul(out, Tensor::from_data(out.shape(), std::vector<double>(w))));
}

// checks one primitive's input gradient against central differences
void check_unary_gradient(const std::function<Tensor(const Tensor&)>& op, Shape shape, Rng& rng,
                          double lo, double hi, double tol = 1e-4) {
  const Tensor x0 = random_tensor(shape, rng, lo, hi);
  const Tensor probe = op(x0);
  std::vector<double> w(static_cast<std::size_t>(probe.size()));
  for (double& v : w) {
    v = rng.uniform(-1.0, 1.0);
  }
  Tensor x = x0.detach();
  x.set_requires_grad();
  const GradMap grads = backward(weighted_loss_node(op(x), w));
  const auto fd = oracle::fd_gradient(
      [&](const std::vector<double>& raw) {
        return weighted_loss(op(Tensor::from_data(shape, std::vector<double>(raw))), w);
      },
      x0.data());
  CHECK(oracle::grad_close(grads.grad_of(x).data(), fd, tol));
}

}  // namespace

TEST_CASE("matmul basics") {
  const Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  const Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  CHECK(matmul(eye, a).data() == a.data());

  const Tensor ones = Tensor::from_data({2, 1}, {1, 1});
  const Tensor prod = matmul(a, ones);
  CHECK(prod.at(0, 0) == 3.0);
  CHECK(prod.at(1, 0) == 7.0);
}

TEST_CASE("matmul rejects mismatched shapes naming both") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& err) {
    const std::string msg = err.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences tightly") {
  Rng rng(11);
  const Tensor a0 = random_tensor({3, 4}, rng);
  const Tensor b0 = random_tensor({4, 2}, rng);
  std::vector<double> w(6);
  for (double& v : w) {
    v = rng.uniform(-1.0, 1.0);
  }
  Tensor a = a0.detach();
  Tensor b = b0.detach();
  a.set_requires_grad();
  b.set_requires_grad();
  const GradMap grads = backward(weighted_loss_node(matmul(a, b), w));
  const auto fd_a = oracle::fd_gradient(
      [&](const std::vector<double>& raw) {
        return weighted_loss(matmul(Tensor::from_data({3, 4}, std::vector<double>(raw)), b0), w);
      },
      a0.data());
  const auto fd_b = oracle::fd_gradient(
      [&](const std::vector<double>& raw) {
        return weighted_loss(matmul(a0, Tensor::from_data({4, 2}, std::vector<double>(raw))), w);
      },
      b0.data());
  CHECK(oracle::grad_close(grads.grad_of(a).data(), fd_a, 1e-6));
  CHECK(oracle::grad_close(grads.grad_of(b).data(), fd_b, 1e-6));
}

TEST_CASE("softmax values") {
  const Tensor flat = softmax(Tensor::from_data({1, 3}, {0, 0, 0}), 1);
  for (int j = 0; j < 3; ++j) {
    CHECK(flat.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-14));
  }

  // against direct exp/sum computation
  const std::vector<double> logits{1, 2, 3};
  const Tensor sm = softmax(Tensor::from_data({1, 3}, std::vector<double>(logits)), 1);
  const auto expected = oracle::softmax_row(logits);
  for (int j = 0; j < 3; ++j) {
    CHECK(std::abs(sm.at(0, j) - expected[static_cast<std::size_t>(j)]) < 1e-12);
  }

  // rows sum to one
  Rng rng(3);
  const Tensor big = softmax(random_tensor({5, 7}, rng, -30.0, 30.0), 1);
  for (int r = 0; r < 5; ++r) {
    double s = 0.0;
    for (int c = 0; c < 7; ++c) {
      CHECK(big.at(r, c) >= 0.0);
      s += big.at(r, c);
    }
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax shift invariance") {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor v = random_tensor({1, 6}, rng, -4.0, 4.0);
    const double c = rng.uniform(-100.0, 100.0);
    std::vector<double> shifted = v.data();
    for (double& x : shifted) {
      x += c;
    }
    const Tensor a = softmax(v, 1);
    const Tensor b = softmax(Tensor::from_data({1, 6}, std::move(shifted)), 1);
    for (int j = 0; j < 6; ++j) {
      CHECK(std::abs(a.at(0, j) - b.at(0, j)) < 1e-12);
    }
  }
}

TEST_CASE("softmax axis 0 matches transposed axis 1") {
  Rng rng(6);
  const Tensor x = random_tensor({3, 4}, rng);
  const Tensor by_cols = softmax(x, 0);
  const Tensor ref = transpose(softmax(transpose(x), 1));
  for (std::size_t i = 0; i < by_cols.data().size(); ++i) {
    CHECK(by_cols.data()[i] == ref.data()[i]);
  }
}

TEST_CASE("softmax rejects non-finite input") {
  const Tensor bad =
      Tensor::from_data({1, 2}, {std::numeric_limits<double>::infinity(), 0.0});
  CHECK_THROWS_AS(softmax(bad, 1), NumericError);
}

TEST_CASE("non-finite op results surface as numeric errors") {
  const Tensor x = Tensor::from_data({1, 1}, {1000.0});
  CHECK_THROWS_AS(exp_e(x), NumericError);
  CHECK_THROWS_AS(log_e(Tensor::from_data({1}, {0.0})), NumericError);
}

TEST_CASE("backward on linear and quadratic forms") {
  Tensor x = Tensor::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  x.set_requires_grad();
  const GradMap g1 = backward(sum(x));
  for (double v : g1.grad_of(x).data()) {
    CHECK(v == 1.0);
  }

  Tensor y = Tensor::from_data({2}, {1, 2});
  y.set_requires_grad();
  const GradMap g2 = backward(sum(mul(y, y)));
  CHECK(g2.grad_of(y).data() == std::vector<double>{2, 4});
}

TEST_CASE("backward requires a scalar loss") {
  Tensor x = Tensor::from_data({2}, {1, 2});
  x.set_requires_grad();
  CHECK_THROWS_AS(backward(mul(x, x)), std::invalid_argument);
}

TEST_CASE("untouched leaves report zero gradients") {
  Tensor used = Tensor::from_data({2}, {1, 2});
  Tensor unused = Tensor::from_data({3}, {1, 2, 3});
  used.set_requires_grad();
  unused.set_requires_grad();
  const GradMap g = backward(sum(used));
  CHECK_FALSE(g.contains(unused));
  CHECK(g.grad_of(unused).data() == std::vector<double>{0, 0, 0});
}

TEST_CASE("two-layer network gradients match finite differences") {
  Rng rng(17);
  const Tensor w1_0 = random_tensor({5, 3}, rng);
  const Tensor b1_0 = random_tensor({5}, rng);
  const Tensor w2_0 = random_tensor({2, 5}, rng);
  const Tensor b2_0 = random_tensor({2}, rng);
  const Tensor x_0 = random_tensor({4, 3}, rng);
  std::vector<double> w(8);
  for (double& v : w) {
    v = rng.uniform(-1.0, 1.0);
  }

  const auto net = [&](const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                       const Tensor& b2) {
    const Tensor h = tanh_act(add_bias_row(matmul(x, transpose(w1)), b1));
    return add_bias_row(matmul(h, transpose(w2)), b2);
  };

  Tensor x = x_0.detach(), w1 = w1_0.detach(), b1 = b1_0.detach(), w2 = w2_0.detach(),
         b2 = b2_0.detach();
  for (Tensor* t : {&x, &w1, &b1, &w2, &b2}) {
    t->set_requires_grad();
  }
  const GradMap grads = backward(weighted_loss_node(net(x, w1, b1, w2, b2), w));

  const auto check_against = [&](const Tensor& leaf, const Tensor& base,
                                 const std::function<double(const std::vector<double>&)>& f) {
    CHECK(oracle::grad_close(grads.grad_of(leaf).data(), oracle::fd_gradient(f, base.data()),
                             1e-4));
  };
  check_against(x, x_0, [&](const std::vector<double>& raw) {
    return weighted_loss(net(Tensor::from_data({4, 3}, std::vector<double>(raw)), w1_0, b1_0,
                             w2_0, b2_0),
                         w);
  });
  check_against(w1, w1_0, [&](const std::vector<double>& raw) {
    return weighted_loss(net(x_0, Tensor::from_data({5, 3}, std::vector<double>(raw)), b1_0,
                             w2_0, b2_0),
                         w);
  });
  check_against(b1, b1_0, [&](const std::vector<double>& raw) {
    return weighted_loss(net(x_0, w1_0, Tensor::from_data({5}, std::vector<double>(raw)), w2_0,
                             b2_0),
                         w);
  });
  check_against(w2, w2_0, [&](const std::vector<double>& raw) {
    return weighted_loss(net(x_0, w1_0, b1_0, Tensor::from_data({2, 5}, std::vector<double>(raw)),
                             b2_0),
                         w);
  });
  check_against(b2, b2_0, [&](const std::vector<double>& raw) {
    return weighted_loss(net(x_0, w1_0, b1_0, w2_0,
                             Tensor::from_data({2}, std::vector<double>(raw))),
                         w);
  });
}

TEST_CASE("every primitive passes finite-difference spot checks") {
  Rng rng(23);
  for (int trial = 0; trial < 6; ++trial) {
    check_unary_gradient([](const Tensor& t) { return relu(t); }, {3, 4}, rng, 0.1, 2.0);
    check_unary_gradient([](const Tensor& t) { return scale(relu(scale(t, -1.0)), -1.0); },
                         {3, 4}, rng, 0.1, 2.0);  // negative branch
    check_unary_gradient([](const Tensor& t) { return tanh_act(t); }, {2, 5}, rng, -2.0, 2.0);
    check_unary_gradient([](const Tensor& t) { return log_e(t); }, {2, 3}, rng, 0.5, 3.0);
    check_unary_gradient([](const Tensor& t) { return exp_e(t); }, {2, 3}, rng, -2.0, 2.0);
    check_unary_gradient([](const Tensor& t) { return clamp_min(t, 0.25); }, {2, 3}, rng, 0.5,
                         3.0);
    check_unary_gradient([](const Tensor& t) { return softmax(t, 1); }, {3, 5}, rng, -3.0, 3.0);
    check_unary_gradient([](const Tensor& t) { return sum(t); }, {4, 2}, rng, -2.0, 2.0);
    check_unary_gradient([](const Tensor& t) { return mean(t); }, {4, 2}, rng, -2.0, 2.0);
    check_unary_gradient([](const Tensor& t) { return transpose(t); }, {3, 4}, rng, -2.0, 2.0);
    check_unary_gradient([](const Tensor& t) { return reshape(t, {2, 6}); }, {3, 4}, rng, -2.0,
                         2.0);
    check_unary_gradient([](const Tensor& t) { return gather_rows(t, {2, 0, 2, 1}); }, {3, 4},
                         rng, -2.0, 2.0);
    check_unary_gradient([](const Tensor& t) { return take_per_row(t, {1, 3, 0}); }, {3, 4},
                         rng, -2.0, 2.0);
    check_unary_gradient(
        [](const Tensor& t) {
          return concat_cols({t, mul(t, t)});
        },
        {3, 2}, rng, 0.5, 2.0);
    check_unary_gradient(
        [](const Tensor& t) {
          const Tensor other = Tensor::full({3, 3}, 0.7);
          return mul(add(sub(t, other), other), t);
        },
        {3, 3}, rng, -2.0, 2.0);
    const Tensor bias = random_tensor({4}, rng);
    check_unary_gradient(
        [&bias](const Tensor& t) { return add_bias_row(t, bias); }, {3, 4}, rng, -2.0, 2.0);
  }
}

TEST_CASE("identical op sequences are bit-identical") {
  const auto run = [] {
    Rng rng(99);
    Tensor x = random_tensor({4, 6}, rng);
    x.set_requires_grad();
    const Tensor h = tanh_act(matmul(x, random_tensor({6, 3}, rng)));
    const Tensor loss = sum(mul(h, h));
    const GradMap g = backward(loss);
    return std::make_pair(loss.value(), g.grad_of(x).data());
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("distinct gradient records run safely in parallel") {
  const auto one_run = [](std::uint64_t seed) {
    Rng rng(seed);
    Tensor x = random_tensor({6, 4}, rng);
    x.set_requires_grad();
    const Tensor w = random_tensor({4, 3}, rng);
    const Tensor h = tanh_act(matmul(x, w));
    return backward(sum(mul(h, h))).grad_of(x).data();
  };
  const auto expected_a = one_run(1);
  const auto expected_b = one_run(2);

  std::vector<double> got_a, got_b;
  std::thread ta([&] {
    for (int i = 0; i < 50; ++i) {
      got_a = one_run(1);
    }
  });
  std::thread tb([&] {
    for (int i = 0; i < 50; ++i) {
      got_b = one_run(2);
    }
  });
  ta.join();
  tb.join();
  CHECK(got_a == expected_a);
  CHECK(got_b == expected_b);
}

TEST_CASE("no-grad sections keep values but drop the record") {
  Tensor x = Tensor::from_data({2}, {1.0, 2.0});
  x.set_requires_grad();
  Tensor inside;
  {
    NoGradGuard guard;
    inside = mul(x, x);
  }
  CHECK(inside.data() == std::vector<double>{1.0, 4.0});
  const Tensor outside = mul(x, x);
  const GradMap g = backward(sum(outside));
  CHECK(g.grad_of(x).data() == std::vector<double>{2.0, 4.0});
  // the guarded product is a constant: backward through it sees no leaves
  CHECK_FALSE(backward(sum(inside)).contains(x));
}

TEST_CASE("shape violations raise dimension errors") {
  CHECK_THROWS_AS(add(Tensor::zeros({2, 2}), Tensor::zeros({2, 3})), ShapeError);
  CHECK_THROWS_AS(add_bias_row(Tensor::zeros({2, 3}), Tensor::zeros({2})), ShapeError);
  CHECK_THROWS_AS(gather_rows(Tensor::zeros({2, 2}), {2}), ShapeError);
  CHECK_THROWS_AS(take_per_row(Tensor::zeros({2, 2}), {0, 2}), ShapeError);
  CHECK_THROWS_AS(reshape(Tensor::zeros({2, 2}), {3, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor::from_data({2, 2}, {1.0}), ShapeError);
}
