#pragma once

// Singular values of dense real matrices: one-sided Jacobi for the full
// spectrum, Golub-Kahan-Lanczos for the dominant value alone.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "cst/error.hpp"
#include "cst/raster.hpp"

namespace cst {

namespace detail {

inline void require_finite(const RealRaster& a) {
  for (double x : a.data())
    if (!std::isfinite(x)) throw NumericError("matrix contains non-finite entries");
}

inline double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

}  // namespace detail

/// All singular values of `a` in nonincreasing order (length min(rows, cols)).
///
/// Hestenes one-sided Jacobi: columns of the working matrix are rotated in
/// pairs until every pair is orthogonal to `tolerance` relative to the
/// product of the column norms; the final column norms are the singular
/// values. The narrower orientation of `a` is used so the number of columns
/// equals min(rows, cols).
inline std::vector<double> jacobi_singular_values(const RealRaster& a, double tolerance = 1e-10,
                                                  int max_sweeps = 100) {
  detail::require_finite(a);
  const bool transpose = a.cols() > a.rows();
  const std::size_t m = transpose ? a.cols() : a.rows();  // column length
  const std::size_t n = transpose ? a.rows() : a.cols();  // column count
  if (n == 0) return {};

  // Column-major working copy: column j occupies [j*m, (j+1)*m).
  std::vector<double> w(m * n);
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) {
      const std::size_t row = transpose ? c : r, col = transpose ? r : c;
      w[col * m + row] = a(r, c);
    }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = detail::dot(&w[j * m], &w[j * m], m);

  for (int sweep = 0; sweep < max_sweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* cp = &w[p * m];
        double* cq = &w[q * m];
        const double alpha = norms[p], beta = norms[q];
        const double gamma = detail::dot(cp, cq, m);
        if (gamma == 0.0 || std::abs(gamma) <= tolerance * std::sqrt(alpha * beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = cp[i], y = cq[i];
          cp[i] = c * x - s * y;
          cq[i] = s * x + c * y;
        }
        norms[p] = detail::dot(cp, cp, m);
        norms[q] = detail::dot(cq, cq, m);
      }
    }
    if (!rotated) break;
  }

  std::vector<double> values(n);
  for (std::size_t j = 0; j < n; ++j) values[j] = std::sqrt(norms[j]);
  std::sort(values.begin(), values.end(), std::greater<>());
  return values;
}

/// Largest singular value by Golub-Kahan-Lanczos bidiagonalization with full
/// reorthogonalization. Iterates until the estimate changes by less than
/// `tolerance` (relative) or the Krylov space is exhausted.
inline double top_singular_value(const RealRaster& a, double tolerance = 1e-13,
                                 std::size_t max_steps = 64) {
  detail::require_finite(a);
  const std::size_t m = a.rows(), n = a.cols();
  if (m == 0 || n == 0) return 0.0;
  // A V_k = U_k B_k holds exactly, so the estimate is exact once V_k spans
  // every column. Keep the column count the smaller one.
  if (n > m) {
    RealRaster t(n, m);
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < n; ++c) t(c, r) = a(r, c);
    return top_singular_value(t, tolerance, max_steps);
  }
  const std::size_t steps = std::min({max_steps, m, n});

  auto mul = [&](const std::vector<double>& v, std::vector<double>& out) {  // out = A v
    for (std::size_t r = 0; r < m; ++r) out[r] = detail::dot(&a.data()[r * n], v.data(), n);
  };
  auto mul_t = [&](const std::vector<double>& u, std::vector<double>& out) {  // out = A^T u
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t r = 0; r < m; ++r) {
      const double ur = u[r];
      if (ur == 0.0) continue;
      const double* row = &a.data()[r * n];
      for (std::size_t c = 0; c < n; ++c) out[c] += ur * row[c];
    }
  };
  auto normalize = [](std::vector<double>& x) {
    const double norm = std::sqrt(detail::dot(x.data(), x.data(), x.size()));
    if (norm > 0) for (double& v : x) v /= norm;
    return norm;
  };
  auto orthogonalize = [](std::vector<double>& x, const std::vector<std::vector<double>>& basis) {
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& b : basis) {
        const double proj = detail::dot(x.data(), b.data(), x.size());
        for (std::size_t i = 0; i < x.size(); ++i) x[i] -= proj * b[i];
      }
  };

  // Deterministic start vector with no special alignment to image structure.
  std::vector<double> v(n);
  for (std::size_t c = 0; c < n; ++c) v[c] = 1.0 + 0.5 * std::sin(0.7 * static_cast<double>(c) + 0.3);
  normalize(v);

  std::vector<std::vector<double>> us, vs;
  std::vector<double> alphas, betas;
  std::vector<double> u(m), tmp(n);
  vs.push_back(v);
  mul(v, u);
  double alpha = normalize(u);
  if (alpha == 0.0) {
    // Start vector in the null space; fall back to the exact spectrum.
    return jacobi_singular_values(a).front();
  }
  us.push_back(u);
  alphas.push_back(alpha);

  double estimate = alpha;
  for (std::size_t k = 1; k < steps; ++k) {
    mul_t(us.back(), tmp);
    for (std::size_t i = 0; i < n; ++i) tmp[i] -= alphas.back() * vs.back()[i];
    orthogonalize(tmp, vs);
    const double beta = normalize(tmp);
    if (beta <= 1e-14 * estimate) break;
    vs.push_back(tmp);
    mul(vs.back(), u);
    for (std::size_t i = 0; i < m; ++i) u[i] -= beta * us.back()[i];
    orthogonalize(u, us);
    alpha = normalize(u);
    betas.push_back(beta);
    if (alpha <= 1e-14 * estimate) {
      alphas.push_back(0.0);
    } else {
      us.push_back(u);
      alphas.push_back(alpha);
    }

    const std::size_t dim = alphas.size();
    RealRaster bidiag(dim, dim, 0.0);
    for (std::size_t i = 0; i < dim; ++i) {
      bidiag(i, i) = alphas[i];
      if (i + 1 < dim) bidiag(i, i + 1) = betas[i];
    }
    const double next = jacobi_singular_values(bidiag, 1e-15).front();
    const bool converged = std::abs(next - estimate) <= tolerance * next;
    estimate = next;
    if (converged || alphas.back() == 0.0) break;
  }
  return estimate;
}

}  // namespace cst
