#pragma once

// Inverse pipeline: IRF-convolved correlation fits at the two timescales,
// power-series regressions for the microscopic rates, and the saturation fit.

#include <emitterlab/correlator.hpp>
#include <emitterlab/errors.hpp>
#include <emitterlab/levmar.hpp>
#include <emitterlab/mcsim.hpp>
#include <emitterlab/model.hpp>
#include <emitterlab/units.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <string>
#include <string_view>
#include <vector>

namespace emitterlab {

struct Irf {
  double fwhm_ns = 0.0;  // Gaussian FWHM of the pair response
};

inline void validate(const Irf& irf) {
  if (!(irf.fwhm_ns >= 0.0) || !std::isfinite(irf.fwhm_ns))
    throw ConfigError("irf: fwhm must be finite and >= 0");
}

namespace detail {

// scaled complementary error function exp(x^2) erfc(x)
inline double erfcx(double x) {
  if (x < 0.0) {
    // grows like 2 exp(x^2); overflows past x ~ -26.6, which callers avoid
    const double e = 2.0 * std::exp(x * x);
    return e - erfcx(-x);
  }
  if (x < 25.0) return std::exp(x * x) * std::erfc(x);
  // asymptotic series, relative error < 1e-12 for x >= 25
  const double q = 1.0 / (2.0 * x * x);
  const double series = 1.0 + q * (-1.0 + q * (3.0 + q * (-15.0 + q * 105.0)));
  return series / (x * 1.7724538509055160273);  // x sqrt(pi)
}

}  // namespace detail

// exp(-lambda |t|) convolved with a zero-mean Gaussian of width sigma:
//   E(t) = e^{-t^2/2s^2}/2 [erfcx((ls^2-|t|)/s√2) + erfcx((ls^2+|t|)/s√2)]
// with the first term rewritten as 2 e^{l^2 s^2/2 - l|t|} - ... once its
// argument goes negative, which keeps everything bounded at large |t|.
inline double exp_irf_conv(double t_ns, double lambda_per_ns, double sigma_ns) {
  if (!(lambda_per_ns >= 0.0) || !std::isfinite(lambda_per_ns))
    return std::numeric_limits<double>::quiet_NaN();
  const double t = std::abs(t_ns);
  if (sigma_ns <= 0.0) return std::exp(-lambda_per_ns * t);
  if (lambda_per_ns == 0.0) return 1.0;

  const double s = sigma_ns;
  const double ls2 = lambda_per_ns * s * s;
  const double rt2s = s * 1.4142135623730950488;
  const double gauss = std::exp(-t * t / (2.0 * s * s));
  const double u1 = (ls2 - t) / rt2s;
  const double u2 = (ls2 + t) / rt2s;

  double term1;
  if (u1 >= 0.0) {
    term1 = gauss * detail::erfcx(u1);
  } else {
    // exponent is <= 0 here because u1 < 0 implies |t| > lambda sigma^2
    term1 = 2.0 * std::exp(0.5 * ls2 * lambda_per_ns - lambda_per_ns * t) -
            gauss * detail::erfcx(-u1);
  }
  return 0.5 * (term1 + gauss * detail::erfcx(u2));
}

// antibunching dip riding on the shelving pedestal: lambda2 -> 0 limit of the
// full curve, valid for |t| well below 1/lambda2
struct ShortG2Model {
  double lambda1 = 0.0;
  double a = 0.0;
  double operator()(double t_ns) const {
    return 1.0 + a - (1.0 + a) * std::exp(-lambda1 * std::abs(t_ns));
  }
};

// bunching decay with the antibunching part neglected, for |t| past the dip
struct LongG2Model {
  double lambda2 = 0.0;
  double a = 0.0;
  double operator()(double t_ns) const {
    return 1.0 + a * std::exp(-lambda2 * std::abs(t_ns));
  }
};

inline auto convolve_irf(const ShortG2Model& m, const Irf& irf) {
  validate(irf);
  const double s = units::fwhm_to_sigma(irf.fwhm_ns);
  return [m, s](double t_ns) {
    return 1.0 + m.a - (1.0 + m.a) * exp_irf_conv(t_ns, m.lambda1, s);
  };
}

inline auto convolve_irf(const LongG2Model& m, const Irf& irf) {
  validate(irf);
  const double s = units::fwhm_to_sigma(irf.fwhm_ns);
  return [m, s](double t_ns) { return 1.0 + m.a * exp_irf_conv(t_ns, m.lambda2, s); };
}

// named parameter bundle shared by every fit stage
struct FitResult {
  std::vector<std::string> names;
  std::vector<double> values;
  std::vector<double> stderrs;
  std::vector<std::vector<double>> covariance;
  double chi2_reduced = 0.0;
  int iterations = 0;
  bool converged = false;
  bool degenerate = false;

  std::size_t index_of(std::string_view name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return i;
    throw ConfigError("fit result has no parameter named '" + std::string(name) + "'");
  }
  double value(std::string_view name) const { return values[index_of(name)]; }
  double stderr_of(std::string_view name) const { return stderrs[index_of(name)]; }
};

struct PowerPoint {
  double power_mW = 0.0;
  FitResult fit;
};

struct PowerSeries {
  std::vector<PowerPoint> points;
};

inline void validate(const PowerSeries& s) {
  for (const auto& p : s.points) {
    if (!(p.power_mW > 0.0) || !std::isfinite(p.power_mW))
      throw ConfigError("power series: powers must be positive");
    for (const auto& q : s.points)
      if (&p != &q && p.power_mW == q.power_mW)
        throw ConfigError("power series: powers must be distinct");
  }
}

namespace detail {

inline FitResult from_lm(const LmFit& lm, std::vector<std::string> names) {
  FitResult r;
  r.names = std::move(names);
  r.values = lm.params;
  r.stderrs = lm.stderrs;
  r.covariance = lm.covariance;
  r.chi2_reduced = lm.chi2_reduced;
  r.iterations = lm.iterations;
  r.converged = lm.converged;
  r.degenerate = lm.degenerate;
  return r;
}

// per-bin weights: Poisson standard errors, empty bins promoted to the error
// of a single count so nothing gets infinite weight
inline double bin_sigma(const G2Curve& g, std::size_t i) {
  const double s = g.stderr_[i];
  if (s > 0.0 && std::isfinite(s)) return s;
  if (g.norm > 0.0) return 1.0 / g.norm;
  return 1.0;
}

struct FitWindow {
  std::vector<double> t, y, sigma;
};

inline FitWindow select_bins(const G2Curve& g, double lo_ns, double hi_ns) {
  FitWindow w;
  for (std::size_t i = 0; i < g.t_ns.size(); ++i) {
    const double at = std::abs(g.t_ns[i]);
    if (at < lo_ns || at > hi_ns) continue;
    w.t.push_back(g.t_ns[i]);
    w.y.push_back(g.g2[i]);
    w.sigma.push_back(bin_sigma(g, i));
  }
  return w;
}

// bins ordered by |t| for the initial-guess scans
inline std::vector<std::size_t> by_abs_t(const FitWindow& w) {
  std::vector<std::size_t> idx(w.t.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(w.t[a]) < std::abs(w.t[b]);
  });
  return idx;
}

}  // namespace detail

// antibunching fit on |t| <= boundary_ns: recovers (lambda1, a)
inline FitResult fit_short(const G2Curve& g, const Irf& irf, double boundary_ns = 20.0) {
  validate(irf);
  auto w = detail::select_bins(g, 0.0, boundary_ns);
  if (w.t.size() < 5) throw ConfigError("fit_short: not enough bins inside the window");

  double peak = 0.0;
  for (double v : w.y) peak = std::max(peak, v);
  const double a0 = std::clamp(peak - 1.0, 0.0, 5.0);

  // dip recovery point: first |t| at which g2 has climbed to 1-1/e of the
  // plateau gives t* ~ 1/lambda1
  double lambda1_0 = 0.5;
  const double target = (1.0 + a0) * (1.0 - std::exp(-1.0));
  for (std::size_t i : detail::by_abs_t(w)) {
    if (w.y[i] >= target && std::abs(w.t[i]) > 0.0) {
      lambda1_0 = std::clamp(1.0 / std::abs(w.t[i]), 1e-2, 20.0);
      break;
    }
  }

  const double s = units::fwhm_to_sigma(irf.fwhm_ns);
  auto model = [s](double t, const double* p) {
    // decay faster than tens of ps is unresolvable; reject so the optimizer
    // cannot park there fitting noise
    if (!(p[0] > 0.0) || p[0] > 50.0 || p[1] < -0.99 || p[1] > 20.0)
      return std::numeric_limits<double>::quiet_NaN();
    return 1.0 + p[1] - (1.0 + p[1]) * exp_irf_conv(t, p[0], s);
  };
  auto lm = levmar(model, w.t, w.y, w.sigma, {lambda1_0, a0});
  return detail::from_lm(lm, {"lambda1", "a"});
}

// bunching fit on |t| >= boundary_ns: recovers (lambda2, a).  A bunching
// amplitude consistent with zero leaves lambda2 unidentifiable, which is
// reported through the degenerate flag.
inline FitResult fit_long(const G2Curve& g, const Irf& irf, double boundary_ns = 20.0) {
  validate(irf);
  auto w = detail::select_bins(g, boundary_ns, std::numeric_limits<double>::infinity());
  if (w.t.size() < 5) throw ConfigError("fit_long: not enough bins outside the window");

  const auto order = detail::by_abs_t(w);
  double peak = 0.0, t_peak = std::abs(w.t[order.front()]);
  for (std::size_t i : order) {
    if (w.y[i] > peak) {
      peak = w.y[i];
      t_peak = std::abs(w.t[i]);
    }
  }
  const double a0 = std::clamp(peak - 1.0, 1e-3, 5.0);

  // 1/e decay lag of the excess above the Poisson level
  double lambda2_0 = 1e-3;
  for (std::size_t i : order) {
    const double at = std::abs(w.t[i]);
    if (at <= t_peak) continue;
    if (w.y[i] - 1.0 <= a0 * std::exp(-1.0)) {
      lambda2_0 = std::clamp(1.0 / (at - t_peak), 1e-6, 0.2);
      break;
    }
  }

  const double s = units::fwhm_to_sigma(irf.fwhm_ns);
  auto model = [s](double t, const double* p) {
    // a decay dying within a few ns lies entirely inside the excluded core,
    // where this model has no data: reject so noise spikes at the window edge
    // cannot masquerade as bunching
    if (!(p[0] > 0.0) || p[0] > 0.25 || p[1] < -2.0 || p[1] > 20.0)
      return std::numeric_limits<double>::quiet_NaN();
    return 1.0 + p[1] * exp_irf_conv(t, p[0], s);
  };
  auto lm = levmar(model, w.t, w.y, w.sigma, {lambda2_0, a0});
  auto r = detail::from_lm(lm, {"lambda2", "a"});
  const double a_err = r.stderr_of("a");
  if (std::isfinite(a_err) && std::abs(r.value("a")) < 2.0 * a_err) r.degenerate = true;
  return r;
}

// weighted line through lambda1(P): intercept is r21, the slope converts to
// the absorption cross section through the excitation geometry
inline FitResult fit_lambda1_vs_power(const PowerSeries& series, const ExcitationConfig& exc) {
  validate(series);
  const std::size_t n = series.points.size();
  if (n < 2) throw ConfigError("fit_lambda1_vs_power: need at least two powers");

  double S = 0, Sx = 0, Sy = 0, Sxx = 0, Sxy = 0, chi2 = 0;
  std::vector<double> xs(n), ys(n), ws(n);
  for (std::size_t i = 0; i < n; ++i) {
    xs[i] = series.points[i].power_mW;
    ys[i] = series.points[i].fit.value("lambda1");
    double s = series.points[i].fit.stderr_of("lambda1");
    if (!(s > 0.0) || !std::isfinite(s)) s = 1.0;
    ws[i] = 1.0 / (s * s);
    S += ws[i];
    Sx += ws[i] * xs[i];
    Sy += ws[i] * ys[i];
    Sxx += ws[i] * xs[i] * xs[i];
    Sxy += ws[i] * xs[i] * ys[i];
  }
  const double det = S * Sxx - Sx * Sx;
  if (!(det > 0.0)) throw ConfigError("fit_lambda1_vs_power: degenerate design");
  const double intercept = (Sxx * Sy - Sx * Sxy) / det;
  const double slope = (S * Sxy - Sx * Sy) / det;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ys[i] - intercept - slope * xs[i];
    chi2 += ws[i] * r * r;
  }

  // pump rate per unit power for unit cross section
  ExcitationConfig unit = exc;
  unit.sigma_abs_cm2 = 1.0;
  const double kappa = r12_from_power(unit, 1.0);
  if (!(kappa > 0.0)) throw ConfigError("fit_lambda1_vs_power: excitation geometry invalid");

  FitResult r;
  r.names = {"r21", "sigma_abs_cm2"};
  r.values = {intercept, slope / kappa};
  const double var_c = Sxx / det, var_m = S / det, cov_cm = -Sx / det;
  r.stderrs = {std::sqrt(var_c), std::sqrt(var_m) / kappa};
  r.covariance = {{var_c, cov_cm / kappa}, {cov_cm / kappa, var_m / (kappa * kappa)}};
  r.chi2_reduced = n > 2 ? chi2 / static_cast<double>(n - 2) : 0.0;
  r.iterations = 1;
  r.converged = true;
  return r;
}

// nonlinear fit of lambda2(P) = r31_0 (1 + beta P) + r23 r12(P)/(r12(P)+r21);
// r12(P) and r21 come from the short-timescale stage
inline FitResult fit_lambda2_vs_power(const PowerSeries& series,
                                      const std::function<double(double)>& r12_of_power,
                                      double r21_per_ns) {
  validate(series);
  const std::size_t n = series.points.size();
  if (n < 4) throw ConfigError("fit_lambda2_vs_power: need at least four powers");
  if (!(r21_per_ns > 0.0)) throw ConfigError("fit_lambda2_vs_power: r21 must be positive");

  std::vector<double> P(n), y(n), sig(n), rho(n);
  for (std::size_t i = 0; i < n; ++i) {
    P[i] = series.points[i].power_mW;
    y[i] = series.points[i].fit.value("lambda2");
    double s = series.points[i].fit.stderr_of("lambda2");
    if (!(s > 0.0) || !std::isfinite(s)) s = 1.0;
    sig[i] = s;
    const double r12 = r12_of_power(P[i]);
    if (!(r12 > 0.0)) throw ConfigError("fit_lambda2_vs_power: r12(P) must be positive");
    rho[i] = r12 / (r12 + r21_per_ns);
  }

  // linear prefit in rho ignoring beta seeds the full model
  double S = 0, Sx = 0, Sy = 0, Sxx = 0, Sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = 1.0 / (sig[i] * sig[i]);
    S += w;
    Sx += w * rho[i];
    Sy += w * y[i];
    Sxx += w * rho[i] * rho[i];
    Sxy += w * rho[i] * y[i];
  }
  const double det = S * Sxx - Sx * Sx;
  double r23_0 = 2e-3, r31_0 = 1e-3;
  if (det > 0.0) {
    r23_0 = std::clamp((S * Sxy - Sx * Sy) / det, 1e-6, 1.0);
    r31_0 = std::clamp((Sxx * Sy - Sx * Sxy) / det, 1e-7, 0.1);
  }

  auto model = [&](double power, const double* p) {
    const double r12 = r12_of_power(power);
    return p[1] * (1.0 + p[2] * power) + p[0] * r12 / (r12 + r21_per_ns);
  };
  auto lm = levmar(model, P, y, sig, {r23_0, r31_0, 0.05});
  return detail::from_lm(lm, {"r23", "r31_0", "beta"});
}

struct SaturationPoint {
  double power_mW = 0.0;
  double rate_cps = 0.0;
  double sigma_cps = 0.0;  // <= 0 means unweighted
};

struct SaturationModel {
  std::function<double(double)> r12_of_power;  // per ns
  std::function<double(double)> r31_of_power;  // per ns
  double r21_per_ns = 0.0;
  double r23_per_ns = 0.0;
  RateForm form = RateForm::exact;
};

// single free scale: eta = eta_det * eta_Q multiplying the saturation curve
inline FitResult fit_saturation(const std::vector<SaturationPoint>& points,
                                const SaturationModel& model) {
  if (points.size() < 3) throw ConfigError("fit_saturation: need at least three powers");

  double swyf = 0.0, swff = 0.0;
  std::vector<double> f(points.size()), wgt(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& pt = points[i];
    if (!(pt.power_mW > 0.0)) throw ConfigError("fit_saturation: powers must be positive");
    RateParams r{model.r12_of_power(pt.power_mW), model.r21_per_ns, model.r23_per_ns,
                 model.r31_of_power(pt.power_mW)};
    f[i] = detected_rate(r, 1.0, model.form) * 1e9;  // cps at unit efficiency
    double s = pt.sigma_cps;
    if (!(s > 0.0) || !std::isfinite(s)) s = 1.0;
    wgt[i] = 1.0 / (s * s);
    swyf += wgt[i] * pt.rate_cps * f[i];
    swff += wgt[i] * f[i] * f[i];
  }
  if (!(swff > 0.0)) throw ConfigError("fit_saturation: degenerate rate model");

  const double eta = swyf / swff;
  double chi2 = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double r = points[i].rate_cps - eta * f[i];
    chi2 += wgt[i] * r * r;
  }

  FitResult r;
  r.names = {"eta_product"};
  r.values = {eta};
  r.stderrs = {1.0 / std::sqrt(swff)};
  r.covariance = {{1.0 / swff}};
  r.chi2_reduced = chi2 / static_cast<double>(points.size() - 1);
  r.iterations = 1;
  r.converged = true;
  return r;
}

struct QuantumYield {
  double value = 0.0;
  double stderr_ = 0.0;
  bool physical = true;  // false flags an estimate above 1 (warning, not an error)
};

inline QuantumYield quantum_yield_estimate(double eta_product, double eta_stderr,
                                           const EfficiencyBudget& budget) {
  validate(budget);
  const double det = eta_det(budget);
  QuantumYield q;
  q.value = eta_product / det;
  q.stderr_ = eta_stderr / det;
  q.physical = q.value <= 1.0;
  return q;
}

// human-readable report; units run parallel to the parameter list
inline std::string fit_report_text(const FitResult& r, const std::vector<std::string>& units,
                                   std::string_view title) {
  if (units.size() != r.names.size())
    throw ConfigError("fit_report_text: one unit per parameter required");
  std::string out = "# fit: " + std::string(title) + "\n";
  char line[256];
  std::snprintf(line, sizeof line, "# converged: %s  iterations: %d  chi2_reduced: %.6g%s\n",
                r.converged ? "yes" : "no", r.iterations, r.chi2_reduced,
                r.degenerate ? "  degenerate: yes" : "");
  out += line;
  for (std::size_t i = 0; i < r.names.size(); ++i) {
    std::snprintf(line, sizeof line, "%-16s %.12g  %.6g  %s\n", r.names[i].c_str(),
                  r.values[i], r.stderrs[i], units[i].c_str());
    out += line;
  }
  return out;
}

}  // namespace emitterlab
