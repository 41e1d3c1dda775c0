#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>

#include "emitterlab/errors.hpp"

namespace emitterlab {

struct OdeOptions {
    double rtol = 1e-10;
    double atol = 1e-13;
    double h_init = 0.0;         // 0 -> pick from first derivative
    std::uint64_t max_steps = 500'000'000;
};

// Adaptive Dormand-Prince RK45 for small fixed-size systems. deriv(t, y) -> dy/dt.
// Advances y in place from t0 to t1; returns the step size it ended on so a
// caller sweeping a time grid can hand it back in as h_init.
template <std::size_t N, typename F>
double ode_step_to(F&& deriv, std::array<double, N>& y, double t0, double t1,
                   const OdeOptions& opt = {}) {
    static_assert(N >= 1);
    if (t1 < t0) throw NumericError("ode_step_to: t1 < t0");
    if (t1 == t0) return opt.h_init;

    // Butcher tableau (Dormand & Prince 1980), 5(4) pair.
    constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
    constexpr double a21 = 1.0 / 5;
    constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
    constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
    constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561,
                     a54 = -212.0 / 729;
    constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247,
                     a64 = 49.0 / 176, a65 = -5103.0 / 18656;
    constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192,
                     b5 = -2187.0 / 6784, b6 = 11.0 / 84;
    // 4th-order embedded weights
    constexpr double e1 = 5179.0 / 57600, e3 = 7571.0 / 16695, e4 = 393.0 / 640,
                     e5 = -92097.0 / 339200, e6 = 187.0 / 2100, e7 = 1.0 / 40;

    double t = t0;
    std::array<double, N> k1 = deriv(t, y);

    double h = opt.h_init;
    if (!(h > 0.0)) {
        // crude first guess from |y'| scale
        double dmax = 0.0, ymax = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            dmax = std::max(dmax, std::abs(k1[i]));
            ymax = std::max(ymax, std::abs(y[i]));
        }
        h = (dmax > 0.0) ? 0.01 * (ymax + opt.atol) / dmax : (t1 - t0) * 1e-6;
        h = std::min(h, t1 - t0);
    }

    std::array<double, N> k2, k3, k4, k5, k6, k7, ytmp, y5;
    for (std::uint64_t step = 0; step < opt.max_steps; ++step) {
        if (t >= t1) return h;
        bool clipped = false;
        if (t + h >= t1) {
            h = t1 - t;
            clipped = true;
        }

        for (std::size_t i = 0; i < N; ++i) ytmp[i] = y[i] + h * a21 * k1[i];
        k2 = deriv(t + c2 * h, ytmp);
        for (std::size_t i = 0; i < N; ++i) ytmp[i] = y[i] + h * (a31 * k1[i] + a32 * k2[i]);
        k3 = deriv(t + c3 * h, ytmp);
        for (std::size_t i = 0; i < N; ++i)
            ytmp[i] = y[i] + h * (a41 * k1[i] + a42 * k2[i] + a43 * k3[i]);
        k4 = deriv(t + c4 * h, ytmp);
        for (std::size_t i = 0; i < N; ++i)
            ytmp[i] = y[i] + h * (a51 * k1[i] + a52 * k2[i] + a53 * k3[i] + a54 * k4[i]);
        k5 = deriv(t + c5 * h, ytmp);
        for (std::size_t i = 0; i < N; ++i)
            ytmp[i] = y[i] + h * (a61 * k1[i] + a62 * k2[i] + a63 * k3[i] + a64 * k4[i] +
                                  a65 * k5[i]);
        k6 = deriv(t + h, ytmp);
        for (std::size_t i = 0; i < N; ++i)
            y5[i] = y[i] + h * (b1 * k1[i] + b3 * k3[i] + b4 * k4[i] + b5 * k5[i] + b6 * k6[i]);
        k7 = deriv(t + h, y5);  // FSAL

        double err = 0.0;
        for (std::size_t i = 0; i < N; ++i) {
            double y4i = y[i] + h * (e1 * k1[i] + e3 * k3[i] + e4 * k4[i] + e5 * k5[i] +
                                     e6 * k6[i] + e7 * k7[i]);
            double scale = opt.atol + opt.rtol * std::max(std::abs(y[i]), std::abs(y5[i]));
            double d = (y5[i] - y4i) / scale;
            err += d * d;
        }
        err = std::sqrt(err / N);

        if (err <= 1.0) {
            t += h;
            y = y5;
            k1 = k7;
            double grow = (err > 0.0) ? 0.9 * std::pow(err, -0.2) : 5.0;
            h *= std::clamp(grow, 0.2, 5.0);
            if (clipped && t >= t1) return h;
        } else {
            h *= std::max(0.2, 0.9 * std::pow(err, -0.2));
            if (!(h > 0.0) || t + h == t) throw NumericError("ode_step_to: step underflow");
        }
    }
    throw NumericError("ode_step_to: max step count exceeded");
}

}  // namespace emitterlab
