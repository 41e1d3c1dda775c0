#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "emitterlab/errors.hpp"
#include "emitterlab/ode.hpp"
#include "emitterlab/units.hpp"

// Three-level emitter: ground (1), excited (2), metastable shelf (3).
//   dp1/dt = -r12 p1 + r21 p2 + r31 p3
//   dp2/dt =  r12 p1 - (r21 + r23) p2
//   dp3/dt =  r23 p2 - r31 p3
// Radiative decay 2->1 produces the photons; 2->3->1 is the dark shelving path.
namespace emitterlab {

struct RateParams {
    double r12 = 0.0;  // pump 1->2 (1/ns), proportional to excitation intensity
    double r21 = 0.0;  // radiative decay 2->1 (1/ns)
    double r23 = 0.0;  // shelving 2->3 (1/ns)
    double r31 = 0.0;  // deshelving 3->1 (1/ns)
};

struct Populations {
    double p1 = 1.0, p2 = 0.0, p3 = 0.0;
};

inline void validate(const RateParams& r) {
    auto ok = [](double x) { return std::isfinite(x) && x >= 0.0; };
    if (!ok(r.r12) || !ok(r.r21) || !ok(r.r23) || !ok(r.r31))
        throw RateError(RateError::Reason::negative_or_nonfinite,
                        "rates must be finite and non-negative");
    if (r.r12 == 0.0)
        throw RateError(RateError::Reason::zero_pump, "r12 = 0: nothing is ever excited");
    if (r.r23 > 0.0 && r.r31 == 0.0)
        throw RateError(RateError::Reason::zero_deshelving,
                        "r31 = 0 with r23 > 0: shelf is absorbing, no steady state");
}

// Antibunching rate: lambda1 = r12 + r21
inline double lambda1(const RateParams& r) {
    validate(r);
    return r.r12 + r.r21;
}

// Bunching rate: lambda2 = r31 + r23 r12 / (r12 + r21)
inline double lambda2(const RateParams& r) {
    validate(r);
    return r.r31 + r.r23 * r.r12 / (r.r12 + r.r21);
}

// Bunching amplitude: a = r12 r23 / (r31 (r12 + r21)); 0 in the two-level limit.
inline double bunching_amplitude(const RateParams& r) {
    validate(r);
    if (r.r23 == 0.0) return 0.0;
    return r.r12 * r.r23 / (r.r31 * (r.r12 + r.r21));
}

struct G2Params {
    double lambda1 = 0.0;  // 1/ns
    double lambda2 = 0.0;  // 1/ns
    double a = 0.0;
};

inline G2Params g2_params(const RateParams& r) {
    return {lambda1(r), lambda2(r), bunching_amplitude(r)};
}

// g2(t) = 1 - (1+a) exp(-lambda1 |t|) + a exp(-lambda2 |t|)
inline double g2_analytic(const G2Params& p, double t_ns) {
    double t = std::abs(t_ns);
    return 1.0 - (1.0 + p.a) * std::exp(-p.lambda1 * t) + p.a * std::exp(-p.lambda2 * t);
}

// Short-delay limit (lambda2 |t| << 1): the slow exponential freezes at its
// pedestal, g2 -> 1 + a - (1+a) exp(-lambda1 |t|). Keeping the pedestal is
// what makes this the actual limit of the full form; dropping it would shift
// the whole curve by -a and bias any fit against data normalized to the
// Poissonian level.
inline double g2_short(const G2Params& p, double t_ns) {
    return 1.0 + p.a - (1.0 + p.a) * std::exp(-p.lambda1 * std::abs(t_ns));
}

// Long-delay limit (lambda1 |t| >> 1): 1 + a exp(-lambda2 |t|)
inline double g2_long(const G2Params& p, double t_ns) {
    return 1.0 + p.a * std::exp(-p.lambda2 * std::abs(t_ns));
}

// Closed-form stationary populations.
inline Populations steady_state(const RateParams& r) {
    validate(r);
    double shelf = (r.r23 > 0.0) ? r.r23 / r.r31 : 0.0;
    double p2 = 1.0 / ((r.r21 + r.r23) / r.r12 + shelf + 1.0);
    return {p2 * (r.r21 + r.r23) / r.r12, p2, p2 * shelf};
}

inline std::array<double, 3> rate_matrix_apply(const RateParams& r,
                                               const std::array<double, 3>& p) {
    return {-r.r12 * p[0] + r.r21 * p[1] + r.r31 * p[2],
            r.r12 * p[0] - (r.r21 + r.r23) * p[1],
            r.r23 * p[1] - r.r31 * p[2]};
}

// Propagate populations for t_ns by direct integration (no eigendecomposition).
inline Populations evolve_populations(const RateParams& r, Populations p0, double t_ns,
                                      const OdeOptions& opt = {}) {
    validate(r);
    if (!(t_ns >= 0.0)) throw NumericError("evolve_populations: negative time");
    std::array<double, 3> y{p0.p1, p0.p2, p0.p3};
    ode_step_to<3>([&r](double, const std::array<double, 3>& p) { return rate_matrix_apply(r, p); },
                   y, 0.0, t_ns, opt);
    return {y[0], y[1], y[2]};
}

// Numeric reference for g2: start in the ground state (the state right after a
// detection), integrate the rate equations across the sorted grid, normalize
// p2 by its stationary value solved from the 3x3 linear system (Gaussian
// elimination, deliberately not the closed form above).
inline std::vector<double> g2_ode_oracle(const RateParams& r, const std::vector<double>& t_ns,
                                         const OdeOptions& opt = {}) {
    validate(r);
    for (std::size_t i = 0; i < t_ns.size(); ++i) {
        if (!(t_ns[i] >= 0.0)) throw NumericError("g2_ode_oracle: negative delay");
        if (i > 0 && t_ns[i] < t_ns[i - 1]) throw NumericError("g2_ode_oracle: grid not sorted");
    }

    // stationary p2: rows 1..2 of M, plus normalization row (1 1 1 | 1)
    double m[3][4] = {{-r.r12, r.r21, r.r31, 0.0},
                      {r.r12, -(r.r21 + r.r23), 0.0, 0.0},
                      {1.0, 1.0, 1.0, 1.0}};
    for (int col = 0; col < 3; ++col) {
        int piv = col;
        for (int row = col + 1; row < 3; ++row)
            if (std::abs(m[row][col]) > std::abs(m[piv][col])) piv = row;
        for (int k = 0; k < 4; ++k) std::swap(m[col][k], m[piv][k]);
        if (m[col][col] == 0.0) throw NumericError("g2_ode_oracle: singular rate matrix");
        for (int row = 0; row < 3; ++row) {
            if (row == col) continue;
            double f = m[row][col] / m[col][col];
            for (int k = col; k < 4; ++k) m[row][k] -= f * m[col][k];
        }
    }
    double p2_inf = m[1][3] / m[1][1];
    if (!(p2_inf > 0.0)) throw NumericError("g2_ode_oracle: stationary p2 <= 0");

    auto deriv = [&r](double, const std::array<double, 3>& p) { return rate_matrix_apply(r, p); };
    std::array<double, 3> y{1.0, 0.0, 0.0};
    std::vector<double> out(t_ns.size());
    double t = 0.0;
    OdeOptions running = opt;
    for (std::size_t i = 0; i < t_ns.size(); ++i) {
        running.h_init = ode_step_to<3>(deriv, y, t, t_ns[i], running);
        t = t_ns[i];
        out[i] = y[1] / p2_inf;
    }
    return out;
}

enum class SpotProfile { gaussian_peak, flat_top };

struct ExcitationConfig {
    double wavelength_nm = 687.0;   // pump wavelength
    double sigma_abs_cm2 = 1.7e-16; // absorption cross section
    double spot_fwhm_um = 1.0;      // Gaussian FWHM, or disc diameter for flat_top
    SpotProfile profile = SpotProfile::gaussian_peak;
};

// Pump rate r12 = sigma * I / (h nu), in 1/ns.
inline double r12_from_power(const ExcitationConfig& c, double power_mW) {
    if (!(power_mW >= 0.0) || !std::isfinite(power_mW))
        throw ConfigError("power must be finite and >= 0");
    if (!(c.sigma_abs_cm2 > 0.0) || !(c.spot_fwhm_um > 0.0) || !(c.wavelength_nm > 0.0))
        throw ConfigError("excitation config needs positive wavelength, cross section, spot size");
    double I = (c.profile == SpotProfile::gaussian_peak)
                   ? units::gaussian_peak_intensity_W_m2(power_mW, c.spot_fwhm_um)
                   : units::flat_top_intensity_W_m2(power_mW, c.spot_fwhm_um);
    double per_s = units::cm2_to_m2(c.sigma_abs_cm2) * I / units::photon_energy_J(c.wavelength_nm);
    return per_s / units::ns_per_s;
}

// Power-assisted deshelving: r31(P) = r31_0 * (1 + beta * P)
struct DeshelvingModel {
    double r31_0_per_us = 1.71;  // zero-power deshelving rate (1/us)
    double beta_per_mW = 0.102;  // linear power coefficient (1/mW)
};

inline double r31_of_power(const DeshelvingModel& d, double power_mW) {
    if (!(d.r31_0_per_us > 0.0) || !(d.beta_per_mW >= 0.0))
        throw ConfigError("deshelving model needs r31_0 > 0, beta >= 0");
    if (!(power_mW >= 0.0)) throw ConfigError("power must be >= 0");
    return d.r31_0_per_us * 1e-3 * (1.0 + d.beta_per_mW * power_mW);  // 1/ns
}

// Rates of the full model at a given excitation power.
inline RateParams rates_at_power(const ExcitationConfig& exc, const DeshelvingModel& desh,
                                 double r21_per_ns, double r23_per_ns, double power_mW) {
    return {r12_from_power(exc, power_mW), r21_per_ns, r23_per_ns, r31_of_power(desh, power_mW)};
}

// Detected count rate R = eta * r21 * p2_ss (1/ns). `exact` uses the full
// excited-state balance; `approx` drops r23 next to r21 in the pump bracket,
// which is the form usually quoted for saturation fits.
enum class RateForm { exact, approx };

inline double detected_rate(const RateParams& r, double eta, RateForm form = RateForm::exact) {
    validate(r);
    if (!(eta > 0.0) || eta > 1.0) throw ConfigError("detection efficiency must be in (0, 1]");
    double shelf = (r.r23 > 0.0) ? r.r23 / r.r31 : 0.0;
    double bracket = (form == RateForm::exact) ? (r.r21 + r.r23) / r.r12 : r.r21 / r.r12;
    return eta * r.r21 / (bracket + shelf + 1.0);
}

}  // namespace emitterlab
