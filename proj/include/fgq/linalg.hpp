#pragma once

#include <cstdint>
#include <vector>

namespace fgq::linalg {

/// LU factorization with partial pivoting of a dense row-major n x n matrix.
/// Factors are stored packed in `lu` (unit lower / upper), `piv[k]` is the row
/// swapped into position k at step k. Throws std::runtime_error on a
/// numerically singular pivot.
struct Lu {
  int n = 0;
  std::vector<double> lu;
  std::vector<int> piv;
};

Lu lu_factor(const double* a, int n);

/// Solves A X = B for X given the factorization of A. B is n x m row-major.
void lu_solve_factored(const Lu& f, const double* b, double* x, int m);

/// One-shot solve of A X = B (A: n x n, B: n x m, both row-major).
std::vector<double> lu_solve(const double* a, int n, const double* b, int m);

/// Dense inverse via LU (solve against the identity).
std::vector<double> invert(const double* a, int n);

/// 1-norm condition number ||A||_1 * ||A^-1||_1, computed with an explicit
/// inverse. Returns +inf when the factorization fails. Fine at the matrix
/// sizes used here (<= a few hundred).
double cond_1norm(const double* a, int n);

double norm_1(const double* a, int n);

}  // namespace fgq::linalg
