#include "fgq/linalg.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace fgq::linalg {

Lu lu_factor(const double* a, int n) {
  Lu f;
  f.n = n;
  f.lu.assign(a, a + static_cast<size_t>(n) * n);
  f.piv.resize(n);
  double* m = f.lu.data();
  for (int k = 0; k < n; ++k) {
    int p = k;
    double best = std::fabs(m[k * n + k]);
    for (int i = k + 1; i < n; ++i) {
      double v = std::fabs(m[i * n + k]);
      if (v > best) {
        best = v;
        p = i;
      }
    }
    f.piv[k] = p;
    if (best < 1e-300) throw std::runtime_error("lu_factor: singular matrix");
    if (p != k) {
      for (int j = 0; j < n; ++j) std::swap(m[k * n + j], m[p * n + j]);
    }
    double inv = 1.0 / m[k * n + k];
    for (int i = k + 1; i < n; ++i) {
      double l = m[i * n + k] * inv;
      m[i * n + k] = l;
      for (int j = k + 1; j < n; ++j) m[i * n + j] -= l * m[k * n + j];
    }
  }
  return f;
}

void lu_solve_factored(const Lu& f, const double* b, double* x, int m) {
  int n = f.n;
  const double* lu = f.lu.data();
  for (size_t i = 0; i < static_cast<size_t>(n) * m; ++i) x[i] = b[i];
  // apply pivots
  for (int k = 0; k < n; ++k) {
    int p = f.piv[k];
    if (p != k) {
      for (int j = 0; j < m; ++j) std::swap(x[k * m + j], x[p * m + j]);
    }
  }
  // forward solve (unit lower)
  for (int i = 1; i < n; ++i) {
    for (int k = 0; k < i; ++k) {
      double l = lu[i * n + k];
      if (l == 0.0) continue;
      for (int j = 0; j < m; ++j) x[i * m + j] -= l * x[k * m + j];
    }
  }
  // back substitution
  for (int i = n - 1; i >= 0; --i) {
    for (int k = i + 1; k < n; ++k) {
      double u = lu[i * n + k];
      if (u == 0.0) continue;
      for (int j = 0; j < m; ++j) x[i * m + j] -= u * x[k * m + j];
    }
    double d = 1.0 / lu[i * n + i];
    for (int j = 0; j < m; ++j) x[i * m + j] *= d;
  }
}

std::vector<double> lu_solve(const double* a, int n, const double* b, int m) {
  Lu f = lu_factor(a, n);
  std::vector<double> x(static_cast<size_t>(n) * m);
  lu_solve_factored(f, b, x.data(), m);
  return x;
}

std::vector<double> invert(const double* a, int n) {
  std::vector<double> eye(static_cast<size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) eye[i * n + i] = 1.0;
  return lu_solve(a, n, eye.data(), n);
}

double norm_1(const double* a, int n) {
  double best = 0.0;
  for (int j = 0; j < n; ++j) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += std::fabs(a[i * n + j]);
    if (s > best) best = s;
  }
  return best;
}

double cond_1norm(const double* a, int n) {
  try {
    std::vector<double> inv = invert(a, n);
    return norm_1(a, n) * norm_1(inv.data(), n);
  } catch (const std::runtime_error&) {
    return std::numeric_limits<double>::infinity();
  }
}

}  // namespace fgq::linalg
