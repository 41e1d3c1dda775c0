#pragma once

// Damped weighted least squares (Levenberg-Marquardt).  Small, dense, and
// deterministic: the fit problems here have <= 4 parameters and a few
// thousand points, so the normal-equation route is both fast and accurate.

#include <emitterlab/errors.hpp>

#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace emitterlab {

struct LmOptions {
  int max_iterations = 200;
  double rel_step_tol = 1e-8;  // convergence: max_j |dp_j| / max(|p_j|, 1e-12)
  double lambda_init = 1e-3;   // Marquardt damping, scaled by diag(J^T J)
  double lambda_up = 8.0;
  double lambda_down = 0.25;
  double lambda_max = 1e14;
  double pivot_tol = 1e-12;    // scaled-pivot threshold for the degenerate flag
};

struct LmFit {
  std::vector<double> params;
  std::vector<double> stderrs;                  // +inf on unconstrained axes
  std::vector<std::vector<double>> covariance;  // (J^T W J)^-1
  double chi2 = 0.0;
  double chi2_reduced = 0.0;
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;
};

namespace detail {

// invert a symmetric matrix in correlation scaling (unit diagonal), so pivot
// magnitudes measure conditioning independent of parameter units.  Dead axes
// (zero diagonal) are excluded and reported as +inf variance.
inline bool invert_normal_matrix(const std::vector<double>& a, std::size_t n,
                                 double pivot_tol, std::vector<std::vector<double>>& cov,
                                 bool& ill_conditioned) {
  const double inf = std::numeric_limits<double>::infinity();
  cov.assign(n, std::vector<double>(n, 0.0));
  ill_conditioned = false;

  std::vector<double> d(n, 0.0);
  std::vector<std::size_t> act;
  for (std::size_t j = 0; j < n; ++j) {
    if (a[j * n + j] > 0.0 && std::isfinite(a[j * n + j])) {
      d[j] = std::sqrt(a[j * n + j]);
      act.push_back(j);
    } else {
      ill_conditioned = true;
      cov[j][j] = inf;
    }
  }
  const std::size_t m = act.size();
  if (m == 0) return false;

  // scaled active block, augmented with the identity
  std::vector<double> s(m * 2 * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j)
      s[i * 2 * m + j] = a[act[i] * n + act[j]] / (d[act[i]] * d[act[j]]);
    s[i * 2 * m + m + i] = 1.0;
  }

  for (std::size_t col = 0; col < m; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < m; ++r)
      if (std::abs(s[r * 2 * m + col]) > std::abs(s[piv * 2 * m + col])) piv = r;
    if (piv != col)
      for (std::size_t k = 0; k < 2 * m; ++k) std::swap(s[col * 2 * m + k], s[piv * 2 * m + k]);
    const double p = s[col * 2 * m + col];
    if (std::abs(p) < pivot_tol) {
      ill_conditioned = true;
      if (p == 0.0) return false;
    }
    const double ip = 1.0 / p;
    for (std::size_t k = 0; k < 2 * m; ++k) s[col * 2 * m + k] *= ip;
    for (std::size_t r = 0; r < m; ++r) {
      if (r == col) continue;
      const double f = s[r * 2 * m + col];
      if (f == 0.0) continue;
      for (std::size_t k = 0; k < 2 * m; ++k) s[r * 2 * m + k] -= f * s[col * 2 * m + k];
    }
  }

  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      cov[act[i]][act[j]] = s[i * 2 * m + m + j] / (d[act[i]] * d[act[j]]);
  for (std::size_t j = 0; j < n; ++j)
    if (d[j] == 0.0) cov[j][j] = inf;
  return true;
}

// solve (A + lambda diag(A)) delta = g; dead axes get delta = 0
inline bool solve_damped(const std::vector<double>& a, const std::vector<double>& g,
                         std::size_t n, double lambda, std::vector<double>& delta) {
  std::vector<std::size_t> act;
  for (std::size_t j = 0; j < n; ++j)
    if (a[j * n + j] > 0.0 && std::isfinite(a[j * n + j])) act.push_back(j);
  delta.assign(n, 0.0);
  const std::size_t m = act.size();
  if (m == 0) return false;

  std::vector<double> mtx(m * (m + 1));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) mtx[i * (m + 1) + j] = a[act[i] * n + act[j]];
    mtx[i * (m + 1) + i] *= 1.0 + lambda;
    mtx[i * (m + 1) + m] = g[act[i]];
  }

  for (std::size_t col = 0; col < m; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < m; ++r)
      if (std::abs(mtx[r * (m + 1) + col]) > std::abs(mtx[piv * (m + 1) + col])) piv = r;
    if (mtx[piv * (m + 1) + col] == 0.0) return false;
    if (piv != col)
      for (std::size_t k = col; k <= m; ++k) std::swap(mtx[col * (m + 1) + k], mtx[piv * (m + 1) + k]);
    for (std::size_t r = col + 1; r < m; ++r) {
      const double f = mtx[r * (m + 1) + col] / mtx[col * (m + 1) + col];
      if (f == 0.0) continue;
      for (std::size_t k = col; k <= m; ++k) mtx[r * (m + 1) + k] -= f * mtx[col * (m + 1) + k];
    }
  }
  for (std::size_t i = m; i-- > 0;) {
    double acc = mtx[i * (m + 1) + m];
    for (std::size_t j = i + 1; j < m; ++j) acc -= mtx[i * (m + 1) + j] * delta[act[j]];
    delta[act[i]] = acc / mtx[i * (m + 1) + i];
    if (!std::isfinite(delta[act[i]])) return false;
  }
  return true;
}

}  // namespace detail

// model(t_i, p) -> predicted value; non-finite output marks the trial point
// invalid and the step is rejected (this doubles as a positivity guard)
template <typename Model>
LmFit levmar(Model&& model, const std::vector<double>& t, const std::vector<double>& y,
             const std::vector<double>& sigma, std::vector<double> p,
             const LmOptions& opt = {}) {
  const std::size_t m = t.size();
  const std::size_t n = p.size();
  if (y.size() != m || sigma.size() != m)
    throw ConfigError("levmar: t/y/sigma size mismatch");
  if (n == 0) throw ConfigError("levmar: no parameters");
  if (m < n + 1) throw ConfigError("levmar: fewer points than parameters allow");
  for (double s : sigma)
    if (!(s > 0.0) || !std::isfinite(s)) throw ConfigError("levmar: weights must be positive");

  auto cost_of = [&](const std::vector<double>& q, std::vector<double>& r) -> double {
    double c = 0.0;
    r.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double f = model(t[i], q.data());
      if (!std::isfinite(f)) return std::numeric_limits<double>::quiet_NaN();
      r[i] = (y[i] - f) / sigma[i];
      c += r[i] * r[i];
    }
    return c;
  };

  std::vector<double> resid;
  double cost = cost_of(p, resid);
  if (!std::isfinite(cost)) throw NumericError("levmar: model invalid at the initial guess");

  std::vector<double> jac(m * n);  // J_ij = (df_i/dp_j) / sigma_i
  std::vector<double> a(n * n), grad(n), delta, p_try, r_try;

  LmFit out;
  double lambda = opt.lambda_init;
  int iter = 0;
  for (; iter < opt.max_iterations; ++iter) {
    // central differences; fall back to one-sided at a validity boundary
    for (std::size_t j = 0; j < n; ++j) {
      const double h = 6e-6 * (std::abs(p[j]) + 1e-6);
      std::vector<double> qp = p, qm = p;
      qp[j] += h;
      qm[j] -= h;
      for (std::size_t i = 0; i < m; ++i) {
        const double fp = model(t[i], qp.data());
        const double fm = model(t[i], qm.data());
        double der;
        if (std::isfinite(fp) && std::isfinite(fm)) {
          der = (fp - fm) / (2.0 * h);
        } else {
          const double f0 = model(t[i], p.data());
          if (std::isfinite(fp))
            der = (fp - f0) / h;
          else if (std::isfinite(fm))
            der = (f0 - fm) / h;
          else
            der = 0.0;
        }
        jac[i * n + j] = der / sigma[i];
      }
    }
    for (std::size_t j = 0; j < n; ++j) {
      grad[j] = 0.0;
      for (std::size_t k = j; k < n; ++k) a[j * n + k] = 0.0;
    }
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        grad[j] += jac[i * n + j] * resid[i];
        for (std::size_t k = j; k < n; ++k) a[j * n + k] += jac[i * n + j] * jac[i * n + k];
      }
    }
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < j; ++k) a[j * n + k] = a[k * n + j];

    // inner damping loop: only downhill steps are accepted
    bool accepted = false;
    while (lambda <= opt.lambda_max) {
      if (!detail::solve_damped(a, grad, n, lambda, delta)) {
        lambda *= opt.lambda_up;
        continue;
      }
      p_try = p;
      for (std::size_t j = 0; j < n; ++j) p_try[j] += delta[j];
      const double c_try = cost_of(p_try, r_try);
      if (std::isfinite(c_try) && c_try <= cost) {
        p = p_try;
        cost = c_try;
        resid.swap(r_try);
        lambda = std::max(lambda * opt.lambda_down, 1e-12);
        accepted = true;
        break;
      }
      lambda *= opt.lambda_up;
    }

    double rel = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      rel = std::max(rel, std::abs(delta[j]) / std::max(std::abs(p[j]), 1e-12));
    if (rel < opt.rel_step_tol) {
      // either an accepted micro-step or damping pushed the step below
      // resolution with a negligible gradient: both mean a stationary point
      out.converged = true;
      ++iter;
      break;
    }
    if (!accepted) break;  // lambda exhausted with a non-trivial step: stuck
  }

  out.params = p;
  out.chi2 = cost;
  out.chi2_reduced = cost / static_cast<double>(m - n);
  out.iterations = iter;

  bool ill = false;
  detail::invert_normal_matrix(a, n, opt.pivot_tol, out.covariance, ill);
  out.degenerate = ill;
  out.stderrs.assign(n, std::numeric_limits<double>::infinity());
  for (std::size_t j = 0; j < n; ++j) {
    const double v = out.covariance[j][j];
    if (std::isfinite(v) && v >= 0.0) out.stderrs[j] = std::sqrt(v);
    else if (std::isfinite(v) && v < 0.0) out.degenerate = true;
  }
  return out;
}

}  // namespace emitterlab
