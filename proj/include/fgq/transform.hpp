#pragma once

#include <cstdint>
#include <string>

#include "fgq/tensor.hpp"

namespace fgq {

/// Invertible per-layer transform: effective matrix T = P * diag(s), applied
/// to activations as X T; the inverse diag(1/s) P^-1 folds into the weight so
/// the full-precision product is unchanged.
struct AffineTransform {
  enum class Kind { IdentityInitDense, FixedHadamard };

  Kind kind = Kind::IdentityInitDense;
  int dim = 0;
  Tensor P;           // (dim, dim); learnable for IdentityInitDense
  Tensor diag_scale;  // (dim,), positive; learnable for IdentityInitDense
  uint64_t version = 0;  // bumped after every parameter mutation

  bool learnable() const { return kind == Kind::IdentityInitDense; }
  void bump() { ++version; }
};

/// IdentityInitDense starts at P = I, s = 1 (calibration starts exactly at
/// the untransformed model). FixedHadamard builds P = H D / sqrt(dim) with H
/// the Sylvester Hadamard matrix and D a seeded random +-1 diagonal; requires
/// dim to be a power of two.
AffineTransform init_transform(int dim, AffineTransform::Kind kind, uint64_t seed);

/// Max condition number accepted for P during calibration and folding.
constexpr double kMaxTransformCond = 1e6;

/// Condition estimate of the current P (1-norm).
double transform_cond(const AffineTransform& t);

/// diag(1/s) P^-1 W via LU solve on a detached snapshot (no graph). Throws
/// on singular or ill-conditioned P.
Tensor fold_weight(const AffineTransform& t, const Tensor& w);

/// Same fold built from differentiable ops (mat_solve et al.) so calibration
/// gradients reach P and diag_scale.
Tensor fold_weight_graph(const AffineTransform& t, const Tensor& w);

/// X -> (X P) * s, graph-aware.
Tensor apply_transform(const AffineTransform& t, const Tensor& x);

/// Sylvester Hadamard scaled to orthonormal columns (H/sqrt(dim)).
Tensor hadamard_orthonormal(int dim);

/// Random orthogonal matrix via modified Gram-Schmidt on a seeded Gaussian.
Tensor random_orthogonal(int dim, uint64_t seed);

}  // namespace fgq
