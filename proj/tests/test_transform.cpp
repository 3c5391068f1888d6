#include <doctest.h>

#include <cmath>

#include "fd_suite.hpp"
#include "fgq/quant.hpp"
#include "fgq/rng.hpp"
#include "fgq/transform.hpp"

using namespace fgq;

TEST_SUITE_BEGIN("transform");

namespace {
double max_rel_gap(const Tensor& a, const Tensor& b) {
  double worst = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    double d = std::fabs(a.data()[i] - b.data()[i]);
    worst = std::max(worst, d / std::max(1e-12, std::fabs(b.data()[i])));
  }
  return worst;
}
}  // namespace

TEST_CASE("identity init starts exactly at I") {
  AffineTransform t = init_transform(4, AffineTransform::Kind::IdentityInitDense, 0);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) CHECK(t.P.data()[i * 4 + j] == (i == j ? 1.0 : 0.0));
  for (double v : t.diag_scale.data()) CHECK(v == 1.0);
  CHECK(t.learnable());
}

TEST_CASE("hadamard transform is orthonormal and seeded") {
  for (int dim : {4, 32}) {
    AffineTransform t = init_transform(dim, AffineTransform::Kind::FixedHadamard, 77);
    const auto& p = t.P.data();
    for (int i = 0; i < dim; ++i) {
      for (int j = 0; j < dim; ++j) {
        double dot = 0.0;
        for (int k = 0; k < dim; ++k) dot += p[k * dim + i] * p[k * dim + j];
        CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) <= 1e-12);
      }
    }
    CHECK_FALSE(t.learnable());
  }
  AffineTransform a = init_transform(8, AffineTransform::Kind::FixedHadamard, 123);
  AffineTransform b = init_transform(8, AffineTransform::Kind::FixedHadamard, 123);
  for (int64_t i = 0; i < a.P.size(); ++i) CHECK(a.P.data()[i] == b.P.data()[i]);
  CHECK_THROWS_AS(init_transform(6, AffineTransform::Kind::FixedHadamard, 1), std::invalid_argument);
}

TEST_CASE("hadamard preserves Frobenius energy") {
  Rng rng(3);
  AffineTransform t = init_transform(16, AffineTransform::Kind::FixedHadamard, 9);
  Tensor x = fdsuite::rand_tensor(rng, {10, 16});
  Tensor xp = matmul(x, t.P);
  double e0 = 0.0, e1 = 0.0;
  for (double v : x.data()) e0 += v * v;
  for (double v : xp.data()) e1 += v * v;
  CHECK(std::fabs(std::sqrt(e0) - std::sqrt(e1)) <= 1e-10);
}

TEST_CASE("fold: identity is bit-exact, scalar case exact") {
  Rng rng(4);
  Tensor w = fdsuite::rand_tensor(rng, {4, 3});
  AffineTransform id = init_transform(4, AffineTransform::Kind::IdentityInitDense, 0);
  Tensor f = fold_weight(id, w);
  for (int64_t i = 0; i < w.size(); ++i) CHECK(f.data()[i] == w.data()[i]);

  // P = 2I: folded = W/2, and (X 2I)(W/2) == XW exactly
  AffineTransform two = init_transform(4, AffineTransform::Kind::IdentityInitDense, 0);
  for (int i = 0; i < 4; ++i) two.P.data()[i * 4 + i] = 2.0;
  Tensor f2 = fold_weight(two, w);
  for (int64_t i = 0; i < w.size(); ++i) CHECK(f2.data()[i] == w.data()[i] / 2.0);
  Tensor x = fdsuite::rand_tensor(rng, {5, 4});
  Tensor lhs = matmul(apply_transform(two, x), f2);
  Tensor rhs = matmul(x, w);
  for (int64_t i = 0; i < lhs.size(); ++i) CHECK(lhs.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-14));
}

TEST_CASE("fold: random orthogonal P reproduces the plain product to 1e-10") {
  Rng rng(8);
  AffineTransform t = init_transform(8, AffineTransform::Kind::IdentityInitDense, 0);
  Tensor q = random_orthogonal(8, 31);
  t.P.data() = q.data();
  for (int i = 0; i < 8; ++i) t.diag_scale.data()[i] = 0.5 + 0.1 * i;

  Tensor w = fdsuite::rand_tensor(rng, {8, 6});
  Tensor x = fdsuite::rand_tensor(rng, {12, 8});
  Tensor folded = fold_weight(t, w);
  Tensor lhs = matmul(apply_transform(t, x), folded);
  Tensor rhs = matmul(x, w);
  CHECK(max_rel_gap(lhs, rhs) <= 1e-10);
}

TEST_CASE("fold: graph path agrees with the solve path and is differentiable") {
  Rng rng(9);
  AffineTransform t = init_transform(5, AffineTransform::Kind::IdentityInitDense, 0);
  for (int64_t i = 0; i < t.P.size(); ++i) t.P.data()[i] += rng.uniform(-0.1, 0.1);
  for (int i = 0; i < 5; ++i) t.diag_scale.data()[i] = 0.8 + 0.1 * i;
  Tensor w = fdsuite::rand_tensor(rng, {5, 4});

  Tensor a = fold_weight(t, w);
  Tensor b = fold_weight_graph(t, w);
  CHECK(max_rel_gap(b, a) <= 1e-10);

  // gradient of a scalar of the folded weight w.r.t. P against differences
  std::vector<double> wsum(a.size());
  for (double& v : wsum) v = rng.uniform(-1.0, 1.0);
  Tensor ww = Tensor::from_data(a.shape(), wsum);
  Tape tape;
  {
    TapeScope scope(tape);
    tape.backward(sum(mul(fold_weight_graph(t, w), ww)));
  }
  std::vector<double> ad = t.P.grad();
  auto f = [&](const Tensor& p) {
    AffineTransform t2 = t;
    t2.P = p.detach();
    return sum(mul(fold_weight_graph(t2, w), ww)).item();
  };
  Tensor fd = finite_difference_grad(f, t.P, 1e-6);
  for (int64_t i = 0; i < fd.size(); ++i) CHECK(fdsuite::rel_err(ad[i], fd.data()[i]) <= 1e-5);
}

TEST_CASE("fold: singular and ill-conditioned P are rejected") {
  AffineTransform t = init_transform(3, AffineTransform::Kind::IdentityInitDense, 0);
  Tensor w = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
  t.P.data() = {1, 0, 0, 0, 1, 0, 0, 0, 0};  // singular
  CHECK_THROWS_AS(fold_weight(t, w), std::runtime_error);
  t.P.data() = {1, 0, 0, 0, 1, 0, 0, 0, 1e-9};  // cond ~ 1e9
  CHECK_THROWS_AS(fold_weight(t, w), std::runtime_error);
}

TEST_CASE("transformed quantized linear: 16-bit matches the plain linear") {
  Rng rng(10);
  AffineTransform t = init_transform(8, AffineTransform::Kind::IdentityInitDense, 0);
  for (int64_t i = 0; i < t.P.size(); ++i) t.P.data()[i] += rng.uniform(-0.15, 0.15);
  Tensor w = fdsuite::rand_tensor(rng, {8, 8});
  Tensor x = fdsuite::rand_tensor(rng, {6, 8});

  QuantSpec w16{16, Granularity::PerOutputChannel, true};
  QuantSpec a16{16, Granularity::PerToken, true};
  Tensor y = matmul(fake_quant(apply_transform(t, x), a16, 1.0), fake_quant(fold_weight(t, w), w16, 1.0));
  CHECK(max_rel_gap(y, matmul(x, w)) <= 1e-8);
}

TEST_CASE("transformed quantized linear: P = I reduces to the plain fake-quant path") {
  Rng rng(11);
  AffineTransform t = init_transform(8, AffineTransform::Kind::IdentityInitDense, 0);
  Tensor w = fdsuite::rand_tensor(rng, {8, 8});
  Tensor x = fdsuite::rand_tensor(rng, {6, 8});
  QuantSpec w4{4, Granularity::PerOutputChannel, true};
  QuantSpec a4{4, Granularity::PerToken, true};

  Tensor with_tf = matmul(fake_quant(apply_transform(t, x), a4, 1.0), fake_quant(fold_weight(t, w), w4, 1.0));
  Tensor plain = matmul(fake_quant(x, a4, 1.0), fake_quant(w, w4, 1.0));
  for (int64_t i = 0; i < with_tf.size(); ++i) CHECK(with_tf.data()[i] == plain.data()[i]);
}

TEST_SUITE_END();
