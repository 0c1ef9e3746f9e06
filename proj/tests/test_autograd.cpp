#include "cahqp/autograd.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace cahqp;
using cahqp::testing::numeric_gradient;
using cahqp::testing::random_matrix;
using cahqp::testing::relative_error;

namespace {

// Contracts an op's output with a fixed random weight matrix so every output
// entry contributes to a scalar loss.
struct OpCase {
  const char* name;
  std::function<ag::Var(const ag::Var&)> op;
  int rows, cols;
  double lo = -1.0, hi = 1.0;
};

void check_unary(const OpCase& c) {
  std::mt19937_64 rng(7);
  ag::Var x(random_matrix(c.rows, c.cols, rng, c.lo, c.hi), true);
  const ag::Var probe = c.op(x);
  const ag::Var w(random_matrix(static_cast<int>(probe.rows()), static_cast<int>(probe.cols()), rng));
  auto loss = [&] { return ag::sum(ag::mul(c.op(x), w)); };
  x.zero_grad();
  ag::backward(loss());
  const ag::Matrix numeric = numeric_gradient([&] { return loss().item(); }, x);
  INFO(c.name);
  CHECK(relative_error(x.grad(), numeric) < 1e-6);
}

}  // namespace

TEST_SUITE("autograd") {
  TEST_CASE("unary ops match central finite differences") {
    std::mt19937_64 rng(3);
    const ag::Var other(random_matrix(3, 4, rng));
    const ag::Var right(random_matrix(4, 2, rng));
    const ag::Var row(random_matrix(1, 4, rng));
    const ag::Var col(random_matrix(3, 1, rng));
    const ag::Var gamma(random_matrix(1, 4, rng));
    const ag::Var beta(random_matrix(1, 4, rng));
    const ag::Matrix c = random_matrix(3, 4, rng);
    const std::vector<OpCase> cases{
        {"matmul", [&](const ag::Var& x) { return ag::matmul(x, right); }, 3, 4},
        {"matmul_nt", [&](const ag::Var& x) { return ag::matmul_nt(x, other); }, 3, 4},
        {"add", [&](const ag::Var& x) { return ag::add(x, other); }, 3, 4},
        {"sub", [&](const ag::Var& x) { return ag::sub(other, x); }, 3, 4},
        {"mul", [&](const ag::Var& x) { return ag::mul(x, x); }, 3, 4},
        {"div", [&](const ag::Var& x) { return ag::div(other, x); }, 3, 4, 0.5, 2.0},
        {"add_row", [&](const ag::Var& x) { return ag::add_row(other, ag::slice_rows(x, 0, 1)); }, 3, 4},
        {"mul_row", [&](const ag::Var& x) { return ag::mul_row(x, row); }, 3, 4},
        {"mul_col", [&](const ag::Var& x) { return ag::mul_col(x, col); }, 3, 4},
        {"mul_col rhs", [&](const ag::Var& x) { return ag::mul_col(other, ag::slice_cols(x, 0, 1)); }, 3, 4},
        {"add_const", [&](const ag::Var& x) { return ag::add_const(x, c); }, 3, 4},
        {"scale", [&](const ag::Var& x) { return ag::scale(x, -2.5); }, 3, 4},
        {"minimum", [&](const ag::Var& x) { return ag::minimum(x, other); }, 3, 4},
        {"maximum", [&](const ag::Var& x) { return ag::maximum(x, other); }, 3, 4},
        {"transpose", [&](const ag::Var& x) { return ag::transpose(x); }, 3, 4},
        {"relu", [&](const ag::Var& x) { return ag::relu(x); }, 3, 4},
        {"sigmoid", [&](const ag::Var& x) { return ag::sigmoid(x); }, 3, 4},
        {"abs", [&](const ag::Var& x) { return ag::abs(x); }, 3, 4},
        {"log", [&](const ag::Var& x) { return ag::log(x); }, 3, 4, 0.2, 2.0},
        {"softmax_rows", [&](const ag::Var& x) { return ag::softmax_rows(x); }, 3, 4},
        {"log_softmax_rows", [&](const ag::Var& x) { return ag::log_softmax_rows(x); }, 3, 4},
        {"layer_norm", [&](const ag::Var& x) { return ag::layer_norm(x, gamma, beta); }, 3, 4},
        {"layer_norm gamma", [&](const ag::Var& x) { return ag::layer_norm(other, ag::slice_rows(x, 0, 1), beta); }, 3, 4},
        {"l2_normalize_rows", [&](const ag::Var& x) { return ag::l2_normalize_rows(x); }, 3, 4},
        {"mean", [&](const ag::Var& x) { return ag::mean(x); }, 3, 4},
        {"mean_rows", [&](const ag::Var& x) { return ag::mean_rows(x); }, 3, 4},
        {"max_rows", [&](const ag::Var& x) { return ag::max_rows(x); }, 3, 4},
        {"mean_cols", [&](const ag::Var& x) { return ag::mean_cols(x); }, 3, 4},
        {"max_cols", [&](const ag::Var& x) { return ag::max_cols(x); }, 3, 4},
        {"concat_rows", [&](const ag::Var& x) { const std::vector<ag::Var> p{x, other, x}; return ag::concat_rows(p); }, 3, 4},
        {"concat_cols", [&](const ag::Var& x) { const std::vector<ag::Var> p{other, x}; return ag::concat_cols(p); }, 3, 4},
        {"slice_rows", [&](const ag::Var& x) { return ag::slice_rows(x, 1, 2); }, 3, 4},
        {"slice_cols", [&](const ag::Var& x) { return ag::slice_cols(x, 1, 2); }, 3, 4},
        {"gather_rows", [&](const ag::Var& x) { const std::vector<int> idx{2, 0, 2}; return ag::gather_rows(x, idx); }, 3, 4},
        {"binary_cross_entropy", [&](const ag::Var& x) { return ag::binary_cross_entropy(x, 1.0); }, 3, 4, 0.1, 0.9},
        {"binary_cross_entropy label 0", [&](const ag::Var& x) { return ag::binary_cross_entropy(x, 0.0); }, 3, 4, 0.1, 0.9},
    };
    for (const auto& oc : cases) check_unary(oc);
  }

  TEST_CASE("weighted cross-entropy gradient and value") {
    std::mt19937_64 rng(11);
    ag::Var logits(random_matrix(5, 4, rng, -2.0, 2.0), true);
    const std::vector<int> targets{0, 3, 3, 1, 2};
    const std::vector<double> weights{1.0, 0.1, 0.1, 1.0, 1.0};
    auto loss = [&] { return ag::cross_entropy(logits, targets, weights); };
    ag::backward(loss());
    CHECK(relative_error(logits.grad(), numeric_gradient([&] { return loss().item(); }, logits)) < 1e-6);

    // Independent value: explicit log-sum-exp per row.
    double num = 0.0, den = 0.0;
    for (int i = 0; i < 5; ++i) {
      const auto r = logits.value().row(i);
      const double lse = std::log(r.array().exp().sum());
      num += weights[static_cast<size_t>(i)] * (lse - r(targets[static_cast<size_t>(i)]));
      den += weights[static_cast<size_t>(i)];
    }
    CHECK(loss().item() == doctest::Approx(num / den).epsilon(1e-12));
  }

  TEST_CASE("conv2d gradient w.r.t. input and weight, stride and padding") {
    std::mt19937_64 rng(5);
    for (auto [stride, pad] : {std::pair{1, 0}, std::pair{2, 1}, std::pair{1, 1}}) {
      ag::Var x(random_matrix(5 * 5, 2, rng), true);
      ag::Var w(random_matrix(3 * 3 * 2, 3, rng), true);
      const int out = ag::conv_output_extent(5, 3, stride, pad);
      const ag::Var r(random_matrix(out * out, 3, rng));
      auto loss = [&] { return ag::sum(ag::mul(ag::conv2d(x, 5, 5, w, 3, stride, pad), r)); };
      ag::backward(loss());
      CHECK(relative_error(x.grad(), numeric_gradient([&] { return loss().item(); }, x)) < 1e-6);
      CHECK(relative_error(w.grad(), numeric_gradient([&] { return loss().item(); }, w)) < 1e-6);
    }
  }

  TEST_CASE("conv2d matches a direct convolution sum") {
    std::mt19937_64 rng(9);
    const int h = 4, c_in = 2, c_out = 2, k = 3;
    const ag::Matrix x = random_matrix(h * h, c_in, rng);
    const ag::Matrix w = random_matrix(k * k * c_in, c_out, rng);
    const ag::Matrix y = ag::conv2d(ag::Var(x), h, h, ag::Var(w), k, 1, 1).value();
    for (int oy = 0; oy < h; ++oy) {
      for (int ox = 0; ox < h; ++ox) {
        for (int o = 0; o < c_out; ++o) {
          double s = 0.0;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || ix < 0 || iy >= h || ix >= h) continue;
              for (int c = 0; c < c_in; ++c) s += x(iy * h + ix, c) * w((ky * k + kx) * c_in + c, o);
            }
          }
          CHECK(y(oy * h + ox, o) == doctest::Approx(s).epsilon(1e-12));
        }
      }
    }
  }

  TEST_CASE("gradient reversal: identity forward, scaled sign flip backward") {
    ag::Var x(ag::Matrix{{1.5, -2.0}}, true);
    const ag::Var y = ag::gradient_reversal(x, 1.0);
    CHECK(y.value() == x.value());
    const ag::Var up(ag::Matrix{{1.0, 2.0}});
    ag::backward(ag::sum(ag::mul(y, up)));
    CHECK(x.grad() == ag::Matrix{{-1.0, -2.0}});

    ag::Var z(ag::Matrix{{0.3, 0.7}}, true);
    ag::backward(ag::sum(ag::mul(ag::gradient_reversal(z, 0.0), up)));
    CHECK(z.grad().isZero(0.0));
  }

  TEST_CASE("detach blocks gradients; NoGradGuard records no graph") {
    ag::Var x(ag::Matrix{{2.0}}, true);
    ag::backward(ag::add(ag::mul(x, x), ag::detach(ag::mul(x, x))));
    CHECK(x.grad()(0, 0) == doctest::Approx(4.0));
    ag::Var y(ag::Matrix{{1.0}}, true);
    {
      const ag::NoGradGuard guard;
      CHECK_FALSE(ag::grad_enabled());
      const ag::Var z = ag::mul(y, y);
      CHECK_FALSE(z.requires_grad());
    }
    CHECK(ag::grad_enabled());
  }

  TEST_CASE("gradients accumulate across backward calls until zero_grad") {
    ag::Var x(ag::Matrix{{3.0}}, true);
    ag::backward(ag::scale(x, 2.0));
    ag::backward(ag::scale(x, 2.0));
    CHECK(x.grad()(0, 0) == 4.0);
    x.zero_grad();
    CHECK_FALSE(x.has_grad());
  }

  TEST_CASE("shared subexpressions receive the sum of all paths") {
    ag::Var x(ag::Matrix{{0.7, -0.2}}, true);
    const ag::Var h = ag::sigmoid(x);
    auto loss = [&] {
      const ag::Var hh = ag::sigmoid(x);
      return ag::sum(ag::add(ag::mul(hh, hh), hh));
    };
    ag::backward(ag::sum(ag::add(ag::mul(h, h), h)));
    CHECK(relative_error(x.grad(), numeric_gradient([&] { return loss().item(); }, x)) < 1e-7);
  }
}
