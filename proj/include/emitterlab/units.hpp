#pragma once

#include <cmath>

// Unit conventions used throughout:
//   rates      1/ns      times  ns (double) or ps (int64 on-disk / tag streams)
//   power      mW        spot   FWHM in micrometre
//   intensity  W/m^2     cross sections  m^2 (helpers accept cm^2)
namespace emitterlab::units {

inline constexpr double planck_J_s = 6.62607015e-34;   // exact (SI 2019)
inline constexpr double c_m_s = 299792458.0;           // exact

inline constexpr double ns_per_s = 1e9;
inline constexpr double ps_per_ns = 1e3;

// Gaussian FWHM <-> standard deviation
inline double fwhm_to_sigma(double fwhm) { return fwhm / (2.0 * std::sqrt(2.0 * std::log(2.0))); }
inline double sigma_to_fwhm(double sigma) { return sigma * (2.0 * std::sqrt(2.0 * std::log(2.0))); }

inline double photon_energy_J(double wavelength_nm) {
    return planck_J_s * c_m_s / (wavelength_nm * 1e-9);
}

// Peak intensity of a Gaussian spot: I0 = P * 4 ln2 / (pi * FWHM^2)
inline double gaussian_peak_intensity_W_m2(double power_mW, double fwhm_um) {
    double p_W = power_mW * 1e-3;
    double fwhm_m = fwhm_um * 1e-6;
    return p_W * 4.0 * std::log(2.0) / (M_PI * fwhm_m * fwhm_m);
}

// Uniform disc of diameter d: I = P / (pi d^2 / 4)
inline double flat_top_intensity_W_m2(double power_mW, double diameter_um) {
    double p_W = power_mW * 1e-3;
    double d_m = diameter_um * 1e-6;
    return p_W / (M_PI * d_m * d_m / 4.0);
}

inline double cm2_to_m2(double x) { return x * 1e-4; }

}  // namespace emitterlab::units
