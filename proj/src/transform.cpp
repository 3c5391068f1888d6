#include "fgq/transform.hpp"

#include <cmath>
#include <stdexcept>

#include "fgq/linalg.hpp"
#include "fgq/rng.hpp"

namespace fgq {

Tensor hadamard_orthonormal(int dim) {
  if (dim < 1 || (dim & (dim - 1)) != 0) {
    throw std::invalid_argument("hadamard: dim must be a power of two, got " + std::to_string(dim));
  }
  std::vector<double> h(static_cast<size_t>(dim) * dim, 0.0);
  h[0] = 1.0;
  for (int k = 1; k < dim; k <<= 1) {
    // Sylvester doubling: [[H, H], [H, -H]]
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < k; ++j) {
        double v = h[i * dim + j];
        h[i * dim + (j + k)] = v;
        h[(i + k) * dim + j] = v;
        h[(i + k) * dim + (j + k)] = -v;
      }
    }
  }
  double inv = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& v : h) v *= inv;
  return Tensor::from_data({dim, dim}, std::move(h));
}

Tensor random_orthogonal(int dim, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> a(static_cast<size_t>(dim) * dim);
  for (double& v : a) v = rng.normal();
  // modified Gram-Schmidt over columns
  for (int j = 0; j < dim; ++j) {
    for (int p = 0; p < j; ++p) {
      double dot = 0.0;
      for (int i = 0; i < dim; ++i) dot += a[i * dim + p] * a[i * dim + j];
      for (int i = 0; i < dim; ++i) a[i * dim + j] -= dot * a[i * dim + p];
    }
    double nrm = 0.0;
    for (int i = 0; i < dim; ++i) nrm += a[i * dim + j] * a[i * dim + j];
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12) throw std::runtime_error("random_orthogonal: degenerate column");
    for (int i = 0; i < dim; ++i) a[i * dim + j] /= nrm;
  }
  return Tensor::from_data({dim, dim}, std::move(a));
}

AffineTransform init_transform(int dim, AffineTransform::Kind kind, uint64_t seed) {
  AffineTransform t;
  t.kind = kind;
  t.dim = dim;
  if (kind == AffineTransform::Kind::IdentityInitDense) {
    std::vector<double> eye(static_cast<size_t>(dim) * dim, 0.0);
    for (int i = 0; i < dim; ++i) eye[i * dim + i] = 1.0;
    t.P = Tensor::param({dim, dim}, std::move(eye));
    t.diag_scale = Tensor::param({dim}, std::vector<double>(dim, 1.0));
  } else {
    Tensor h = hadamard_orthonormal(dim);
    Rng rng(seed);
    for (int j = 0; j < dim; ++j) {
      if (rng.sign() < 0) {
        for (int i = 0; i < dim; ++i) h.data()[i * dim + j] = -h.data()[i * dim + j];
      }
    }
    t.P = h;  // frozen
    t.diag_scale = Tensor::from_data({dim}, std::vector<double>(dim, 1.0));
  }
  return t;
}

double transform_cond(const AffineTransform& t) {
  return linalg::cond_1norm(t.P.data().data(), t.dim);
}

namespace {
void check_cond(const AffineTransform& t) {
  double c = transform_cond(t);
  if (!(c <= kMaxTransformCond)) {
    throw std::runtime_error("transform: P is singular or ill-conditioned (cond~" + std::to_string(c) + ")");
  }
}
}  // namespace

Tensor fold_weight(const AffineTransform& t, const Tensor& w) {
  if (w.ndim() != 2 || w.dim(0) != t.dim) {
    throw std::invalid_argument("fold_weight: weight shape " + shape_str(w.shape()) +
                                " incompatible with transform dim " + std::to_string(t.dim));
  }
  check_cond(t);
  std::vector<double> solved =
      linalg::lu_solve(t.P.data().data(), t.dim, w.data().data(), static_cast<int>(w.dim(1)));
  const auto& s = t.diag_scale.data();
  int64_t cols = w.dim(1);
  for (int i = 0; i < t.dim; ++i) {
    double inv = 1.0 / s[i];
    for (int64_t j = 0; j < cols; ++j) solved[i * cols + j] *= inv;
  }
  return Tensor::from_data(w.shape(), std::move(solved));
}

Tensor fold_weight_graph(const AffineTransform& t, const Tensor& w) {
  if (w.ndim() != 2 || w.dim(0) != t.dim) {
    throw std::invalid_argument("fold_weight_graph: weight shape " + shape_str(w.shape()) +
                                " incompatible with transform dim " + std::to_string(t.dim));
  }
  check_cond(t);
  Tensor solved = mat_solve(t.P, w);                      // P^-1 W
  Tensor inv_s = recip(t.diag_scale);                     // (dim,)
  // row scale: transpose, broadcast-multiply over columns, transpose back
  return transpose2(mul(transpose2(solved), inv_s));
}

Tensor apply_transform(const AffineTransform& t, const Tensor& x) {
  Tensor xt = matmul(x, t.P);
  return mul(xt, t.diag_scale);
}

}  // namespace fgq
