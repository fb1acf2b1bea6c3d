#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/autodiff.hpp"
#include "core/rng.hpp"

using namespace fmpl;

namespace {

Tensor randu(std::vector<int> shape, Rng& rng, double lo, double hi) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (int64_t i = 0; i < t.size(); ++i) t.mut()[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("elementwise forward examples") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({2}, {3, 4});
  Tensor c = add(a, b);
  CHECK(c.at(0) == 4.0);
  CHECK(c.at(1) == 6.0);

  Tensor i3 = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) i3.mut()[i * 3 + i] = 1.0;
  Rng rng = Rng::stream(0, 9);
  Tensor m = randu({3, 3}, rng, -2, 2);
  Tensor mm = matmul(i3, m);
  for (int64_t i = 0; i < 9; ++i) CHECK(mm.at(i) == doctest::Approx(m.at(i)).epsilon(1e-15));

  CHECK(sigmoid(Tensor::from({1}, {0.0})).scalar() == 0.5);
}

TEST_CASE("backward basics") {
  {
    Tensor x = Tensor::from({1}, {2.0}).with_grad();
    Tensor y = Tensor::from({1}, {3.0}).with_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor z = mul(x, y);
    GradMap g = tape.backward(z);
    CHECK(g.grad(x).scalar() == 3.0);
    CHECK(g.grad(y).scalar() == 2.0);
  }
  {
    Tensor x = Tensor::from({2}, {-1.0, 2.0}).with_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor z = sum_all(abs_t(x));
    GradMap g = tape.backward(z);
    CHECK(g.grad(x).at(0) == -1.0);
    CHECK(g.grad(x).at(1) == 1.0);
  }
  {
    // subgradient convention at zero
    Tensor x = Tensor::from({1}, {0.0}).with_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor z = sum_all(abs_t(x));
    GradMap g = tape.backward(z);
    CHECK(g.grad(x).scalar() == 0.0);
  }
  {
    Tensor x = Tensor::from({1}, {0.0}).with_grad();
    Tape tape;
    TapeScope scope(tape);
    Tensor z = sum_all(sigmoid(x));
    GradMap g = tape.backward(z);
    CHECK(g.grad(x).scalar() == 0.25);
  }
}

TEST_CASE("backward requires scalar root; disconnected leaf is zero") {
  Tensor x = Tensor::from({2}, {1.0, 2.0}).with_grad();
  Tensor y = Tensor::from({2}, {1.0, 5.0}).with_grad();
  Tape tape;
  TapeScope scope(tape);
  Tensor z = add(x, x);
  CHECK_THROWS_AS((void)tape.backward(z), ShapeError);
  Tensor s = sum_all(z);
  GradMap g = tape.backward(s);
  CHECK(g.grad(y).at(0) == 0.0);
  CHECK(g.grad(y).at(1) == 0.0);
}

TEST_CASE("shared subexpression equals expanded graph") {
  Tensor x = Tensor::from({3}, {0.5, -1.25, 2.0}).with_grad();
  Tensor g_shared, g_expanded;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor u = mul(x, x);
    Tensor y = sum_all(add(u, u));  // u used twice
    g_shared = tape.backward(y).grad(x);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor u1 = mul(x, x);
    Tensor u2 = mul(x, x);
    Tensor y = sum_all(add(u1, u2));
    g_expanded = tape.backward(y).grad(x);
  }
  for (int64_t i = 0; i < x.size(); ++i) CHECK(g_shared.at(i) == g_expanded.at(i));
}

TEST_CASE("forward determinism is bit-exact") {
  Rng rng = Rng::stream(7, 9);
  Tensor x = randu({4, 6}, rng, -2, 2);
  Tensor w = randu({6, 3}, rng, -1, 1);
  Tensor a = matmul(silu(x), w);
  Tensor b = matmul(silu(x), w);
  for (int64_t i = 0; i < a.size(); ++i) CHECK(a.at(i) == b.at(i));
}

TEST_CASE("finite differences across smooth op kinds") {
  Rng rng = Rng::stream(21, 9);

  SUBCASE("sum of squares oracle") {
    Tensor x = Tensor::from({2}, {1.0, 2.0});
    double err = finite_difference_check(
        [](const Tensor& t) { return sum_all(mul(t, t)); }, x, 1e-5);
    CHECK(err < 1e-6);
  }

  SUBCASE("elementwise chain") {
    Tensor x = randu({25}, rng, 0.2, 1.8);  // positive, away from kinks
    auto f = [](const Tensor& t) {
      Tensor a = exp_t(mul_scalar(t, 0.3));
      Tensor b = log_t(add_scalar(t, 0.5));
      Tensor c = divide(sigmoid(t), add_scalar(sqrt_t(t), 1.0));
      Tensor d = mul(tanh_t(t), softplus(t));
      Tensor e = add(add(a, b), add(c, d));
      return mean_all(add(e, silu(rsub_scalar(1.0, t))));
    };
    CHECK(finite_difference_check(f, x, 1e-5) < 1e-4);
  }

  SUBCASE("abs and relu away from kinks") {
    Tensor x = randu({30}, rng, 0.3, 2.0);
    for (int64_t i = 0; i < x.size(); i += 2) x.mut()[i] *= -1.0;
    auto f = [](const Tensor& t) { return sum_all(add(abs_t(t), relu(t))); };
    CHECK(finite_difference_check(f, x, 1e-6) < 1e-4);
  }

  SUBCASE("matmul / transpose / reshape / concat / slice / broadcast") {
    Tensor x = randu({4, 5}, rng, -1, 1);
    Tensor w = randu({5, 3}, rng, -1, 1);
    auto f = [&](const Tensor& t) {
      Tensor y = matmul(t, w);                       // [4,3]
      Tensor yt = transpose2d(y);                    // [3,4]
      Tensor r = reshape(yt, {12});
      Tensor c = concat({r, mul_scalar(r, 0.5)}, 0); // [24]
      Tensor s = slice(c, 0, 3, 17);
      Tensor b = broadcast_lead(s, 3);               // [3,14]
      return mean_all(mul(b, b));
    };
    CHECK(finite_difference_check(f, x, 1e-5) < 1e-4);
    auto fw = [&](const Tensor& t) {
      return mean_all(abs_t(matmul(x, t)));
    };
    CHECK(finite_difference_check(fw, w, 1e-5) < 1e-4);
  }

  SUBCASE("100 random smooth points, mixed ops") {
    for (int trial = 0; trial < 100; ++trial) {
      Tensor x = randu({6}, rng, 0.25, 1.75);
      auto f = [](const Tensor& t) {
        Tensor a = mul(t, sigmoid(t));
        Tensor b = sub(exp_t(mul_scalar(t, 0.2)), tanh_t(t));
        return sum_all(divide(a, add_scalar(mul(b, b), 1.0)));
      };
      CHECK(finite_difference_check(f, x, 1e-5) < 1e-4);
    }
  }
}

TEST_CASE("conv2d, upsample, bias and lstm gradients") {
  Rng rng = Rng::stream(33, 9);
  Tensor x = randu({2, 3, 6, 8}, rng, -1, 1);
  Tensor w = randu({4, 3, 3, 3}, rng, -0.5, 0.5);
  Tensor b = randu({4}, rng, -0.2, 0.2);

  for (int stride : {1, 2}) {
    auto fx = [&](const Tensor& t) { return mean_all(mul(conv2d(t, w, b, stride), conv2d(t, w, b, stride))); };
    CHECK(finite_difference_check(fx, x, 1e-5) < 1e-4);
    auto fw = [&](const Tensor& t) { return mean_all(abs_t(conv2d(x, t, b, stride))); };
    CHECK(finite_difference_check(fw, w, 1e-5) < 1e-4);
    auto fb = [&](const Tensor& t) { return mean_all(mul(conv2d(x, w, t, stride), conv2d(x, w, t, stride))); };
    CHECK(finite_difference_check(fb, b, 1e-5) < 1e-4);
  }

  auto fu = [&](const Tensor& t) { return mean_all(mul(upsample2x(t), upsample2x(t))); };
  CHECK(finite_difference_check(fu, x, 1e-5) < 1e-4);

  Tensor e = randu({2, 3}, rng, -1, 1);
  auto fe = [&](const Tensor& t) { return mean_all(mul(bias_nchw(x, t), bias_nchw(x, t))); };
  CHECK(finite_difference_check(fe, e, 1e-5) < 1e-4);

  // lstm_cell: all six inputs
  int n = 5, in = 3, H = 4;
  Tensor lx = randu({n, in}, rng, -1, 1);
  Tensor lh = randu({n, H}, rng, -1, 1);
  Tensor lc = randu({n, H}, rng, -1, 1);
  Tensor wih = randu({in, 4 * H}, rng, -0.5, 0.5);
  Tensor whh = randu({H, 4 * H}, rng, -0.5, 0.5);
  Tensor lb = randu({4 * H}, rng, -0.3, 0.3);
  auto cell = [&](const Tensor& a, const Tensor& h, const Tensor& c, const Tensor& q,
                  const Tensor& r, const Tensor& s) {
    return mean_all(mul(lstm_cell(a, h, c, q, r, s), lstm_cell(a, h, c, q, r, s)));
  };
  CHECK(finite_difference_check([&](const Tensor& t) { return cell(t, lh, lc, wih, whh, lb); }, lx, 1e-5) < 1e-4);
  CHECK(finite_difference_check([&](const Tensor& t) { return cell(lx, t, lc, wih, whh, lb); }, lh, 1e-5) < 1e-4);
  CHECK(finite_difference_check([&](const Tensor& t) { return cell(lx, lh, t, wih, whh, lb); }, lc, 1e-5) < 1e-4);
  CHECK(finite_difference_check([&](const Tensor& t) { return cell(lx, lh, lc, t, whh, lb); }, wih, 1e-5) < 1e-4);
  CHECK(finite_difference_check([&](const Tensor& t) { return cell(lx, lh, lc, wih, t, lb); }, whh, 1e-5) < 1e-4);
  CHECK(finite_difference_check([&](const Tensor& t) { return cell(lx, lh, lc, wih, whh, t); }, lb, 1e-5) < 1e-4);
}

TEST_CASE("non-finite outputs raise NumericError") {
  Tensor x = Tensor::from({1}, {-1.0});
  CHECK_THROWS_AS((void)log_t(x), NumericError);
  Tensor a = Tensor::from({1}, {1.0});
  Tensor z = Tensor::from({1}, {0.0});
  CHECK_THROWS_AS((void)divide(a, z), NumericError);
}

TEST_CASE("backward_seeded matches mul-sum surrogate") {
  Rng rng = Rng::stream(5, 9);
  Tensor x = randu({7}, rng, -1, 1);
  x.requires_grad = true;
  Tensor cot = randu({7}, rng, -2, 2);
  Tensor g1, g2;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = silu(x);
    g1 = tape.backward_seeded(y, cot).grad(x);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor y = sum_all(mul(silu(x), cot.detached()));
    g2 = tape.backward(y).grad(x);
  }
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(g1.at(i) == doctest::Approx(g2.at(i)).epsilon(1e-14));
}

TEST_CASE("backward stop set cuts propagation but accumulates") {
  Tensor x = Tensor::from({1}, {1.5}).with_grad();
  Tape tape;
  TapeScope scope(tape);
  Tensor mid = mul(x, x);      // dmid/dx = 3
  Tensor y = sum_all(mul(mid, mid));  // dy/dmid = 2*mid = 4.5
  GradMap g = tape.backward(y, {mid});
  CHECK(g.grad(mid).scalar() == doctest::Approx(4.5));
  CHECK(g.grad(x).scalar() == 0.0);  // not propagated past the stop
}
