#include <catch2/catch_amalgamated.hpp>

#include <array>
#include <cmath>
#include <vector>

#include "emitterlab/model.hpp"
#include "emitterlab/ode.hpp"
#include "emitterlab/rng.hpp"
#include "emitterlab/units.hpp"

using namespace emitterlab;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

// Reference rates (1/ns): radiative 0.47/ns, shelving 2.75/us, deshelving
// 1.71/us at zero power with 0.102/mW assist, pump from sigma = 1.7e-16 cm2
// at 687 nm through a 1 um FWHM Gaussian spot.
static RateParams rates_9mW() {
    return {0.4669893918162132, 0.47, 2.75e-3, 3.27978e-3};
}

TEST_CASE("rate validation rejects unphysical parameter sets") {
    CHECK_THROWS_AS(validate(RateParams{-1.0, 0.47, 0.0, 1e-3}), RateError);
    CHECK_THROWS_AS(validate(RateParams{0.1, 0.47, std::nan(""), 1e-3}), RateError);

    try {
        validate(RateParams{0.0, 0.47, 1e-3, 1e-3});
        FAIL("zero pump accepted");
    } catch (const RateError& e) {
        CHECK(e.reason() == RateError::Reason::zero_pump);
        CHECK(e.exit_code() == ExitCode::config);
    }
    try {
        validate(RateParams{0.1, 0.47, 1e-3, 0.0});
        FAIL("absorbing shelf accepted");
    } catch (const RateError& e) {
        CHECK(e.reason() == RateError::Reason::zero_deshelving);
    }
    // two-level limit: r23 = 0 makes r31 irrelevant
    CHECK_NOTHROW(validate(RateParams{0.1, 0.47, 0.0, 0.0}));
}

TEST_CASE("excitation unit chain") {
    CHECK_THAT(units::photon_energy_J(687.0), WithinRel(2.8914786858063007e-19, 1e-14));
    CHECK_THAT(units::gaussian_peak_intensity_W_m2(1.0, 1.0),
               WithinRel(882542400.61060637, 1e-14));
    CHECK_THAT(units::flat_top_intensity_W_m2(3.0, 2.0), WithinRel(954929658.55137201, 1e-14));
    CHECK_THAT(units::fwhm_to_sigma(units::sigma_to_fwhm(0.7)), WithinRel(0.7, 1e-14));

    ExcitationConfig exc;  // defaults: 687 nm, 1.7e-16 cm2, 1 um Gaussian
    CHECK_THAT(r12_from_power(exc, 1.0), WithinRel(0.051887710201801466, 1e-13));
    CHECK_THAT(r12_from_power(exc, 9.0), WithinRel(0.4669893918162132, 1e-13));
    CHECK(r12_from_power(exc, 0.0) == 0.0);

    ExcitationConfig flat = exc;
    flat.profile = SpotProfile::flat_top;
    flat.spot_fwhm_um = 2.0;
    CHECK_THAT(r12_from_power(flat, 3.0), WithinRel(0.056143606643416988, 1e-13));

    CHECK_THROWS_AS(r12_from_power(exc, -1.0), ConfigError);
    ExcitationConfig bad = exc;
    bad.sigma_abs_cm2 = 0.0;
    CHECK_THROWS_AS(r12_from_power(bad, 1.0), ConfigError);
}

TEST_CASE("power-assisted deshelving") {
    DeshelvingModel d{1.71, 0.102};
    CHECK_THAT(r31_of_power(d, 0.0), WithinRel(1.71e-3, 1e-14));
    CHECK_THAT(r31_of_power(d, 9.0), WithinRel(3.27978e-3, 1e-13));
    CHECK_THROWS_AS(r31_of_power(DeshelvingModel{0.0, 0.1}, 1.0), ConfigError);
}

TEST_CASE("correlation parameters at reference rates") {
    auto r = rates_9mW();
    CHECK_THAT(lambda1(r), WithinRel(0.9369893918162132, 1e-13));
    CHECK_THAT(lambda2(r), WithinRel(0.0046503620350914722, 1e-13));
    CHECK_THAT(bunching_amplitude(r), WithinRel(0.41788840565265725, 1e-13));

    // balanced-pump benchmark: a ~ 0.8, 1/lambda2 ~ 324 ns
    RateParams bal{0.47, 0.47, 2.75e-3, 1.71e-3};
    CHECK_THAT(bunching_amplitude(bal), WithinRel(0.80409356725146199, 1e-13));
    CHECK_THAT(1.0 / lambda2(bal), WithinAbs(324.0, 0.5));

    // two-level limit
    RateParams two{0.1, 0.47, 0.0, 0.0};
    CHECK(bunching_amplitude(two) == 0.0);
    CHECK(lambda2(two) == 0.0);
}

TEST_CASE("analytic g2 and its limits") {
    auto p = g2_params(rates_9mW());
    CHECK_THAT(g2_analytic(p, 1.0), WithinRel(0.86041291806520845, 1e-13));
    CHECK_THAT(g2_analytic(p, 5.0), WithinRel(1.3951921565422602, 1e-13));
    CHECK_THAT(g2_analytic(p, 300.0), WithinRel(1.1035553046284991, 1e-13));
    CHECK_THAT(g2_short(p, 5.0), WithinRel(1.4047967239170918, 1e-13));
    CHECK_THAT(g2_long(p, 500.0), WithinRel(1.0408551713615957, 1e-13));

    CHECK_THAT(g2_analytic(p, 0.0), WithinAbs(0.0, 1e-15));         // perfect antibunching
    CHECK_THAT(g2_short(p, 0.0), WithinAbs(0.0, 1e-15));            // limit keeps the dip at 0
    CHECK(g2_analytic(p, -5.0) == g2_analytic(p, 5.0));             // even in delay
    CHECK_THAT(g2_analytic(p, 1e7), WithinAbs(1.0, 1e-12));         // uncorrelated at infinity
    CHECK(g2_analytic(p, 5.0) > 1.0);                               // bunching shoulder

    // limits agree with the full form on their own turf
    CHECK_THAT(g2_short(p, 2.0), WithinAbs(g2_analytic(p, 2.0), 1e-2));
    CHECK_THAT(g2_short(p, 5.0), WithinAbs(g2_analytic(p, 5.0), 1e-2));
    CHECK_THAT(g2_long(p, 400.0), WithinAbs(g2_analytic(p, 400.0), 1e-12));
}

TEST_CASE("steady state: closed form vs linear algebra") {
    RateParams r{4.7, 0.47, 2.75e-3, 1.71e-3};
    auto ss = steady_state(r);
    CHECK_THAT(ss.p1, WithinRel(0.037133098480838836, 1e-12));
    CHECK_THAT(ss.p2, WithinRel(0.36917094206227928, 1e-12));
    CHECK_THAT(ss.p3, WithinRel(0.59369595945688188, 1e-12));
    CHECK_THAT(ss.p1 + ss.p2 + ss.p3, WithinAbs(1.0, 1e-12));

    // detailed balance residual: plugging the closed form back into dp/dt
    auto d = rate_matrix_apply(r, {ss.p1, ss.p2, ss.p3});
    for (double x : d) CHECK_THAT(x, WithinAbs(0.0, 1e-15));
}

TEST_CASE("detected count rate, both normalization forms") {
    auto r = rates_9mW();
    double eta = 4.2e-4;
    CHECK_THAT(detected_rate(r, eta, RateForm::exact), WithinRel(6.9243563115878826e-5, 1e-12));
    CHECK_THAT(detected_rate(r, eta, RateForm::approx),
               WithinRel(6.9386892546678626e-5, 1e-12));
    // the approximate bracket underestimates ground-state trapping -> higher rate
    CHECK(detected_rate(r, eta, RateForm::approx) > detected_rate(r, eta, RateForm::exact));
    CHECK_THROWS_AS(detected_rate(r, 0.0), ConfigError);
    CHECK_THROWS_AS(detected_rate(r, 1.5), ConfigError);
}

TEST_CASE("ODE integrator: scalar decay benchmark") {
    std::array<double, 1> y{1.0};
    ode_step_to<1>([](double, const std::array<double, 1>& v) {
        return std::array<double, 1>{-v[0]};
    }, y, 0.0, 5.0);
    CHECK_THAT(y[0], WithinRel(std::exp(-5.0), 1e-9));
}

TEST_CASE("population evolution conserves probability and relaxes") {
    auto r = rates_9mW();
    auto ss = steady_state(r);
    Populations p{1.0, 0.0, 0.0};
    for (double t : {0.5, 2.0, 10.0, 100.0, 8000.0}) {
        auto pt = evolve_populations(r, p, t);
        CHECK_THAT(pt.p1 + pt.p2 + pt.p3, WithinAbs(1.0, 1e-9));
        if (t == 8000.0) {  // ~37/lambda2: transient fully decayed
            CHECK_THAT(pt.p2, WithinRel(ss.p2, 1e-8));
            CHECK_THAT(pt.p3, WithinRel(ss.p3, 1e-8));
        }
    }
}

TEST_CASE("g2 ODE oracle matches the exact two-eigenvalue solution") {
    // eigendecomposition of the reduced 2x2 system, worked out independently
    auto r = rates_9mW();
    std::vector<double> grid{1.0, 20.0, 800.0};
    auto g = g2_ode_oracle(r, grid);
    CHECK_THAT(g[0], WithinAbs(0.86295039429616746, 1e-9));
    CHECK_THAT(g[1], WithinAbs(1.3834294668797866, 1e-9));
    CHECK_THAT(g[2], WithinAbs(1.010172596745818, 1e-9));

    CHECK_THROWS_AS(g2_ode_oracle(r, {5.0, 1.0}), NumericError);   // unsorted
    CHECK_THROWS_AS(g2_ode_oracle(r, {-1.0, 1.0}), NumericError);  // negative delay
}

TEST_CASE("oracle vs approximate analytic stays close at moderate amplitude") {
    auto r = rates_9mW();  // a ~ 0.42
    auto p = g2_params(r);
    double l2 = p.lambda2;
    std::vector<double> grid;
    for (int i = 0; i < 400; ++i) grid.push_back(20.0 / l2 * i / 399.0);
    auto g = g2_ode_oracle(r, grid);
    double worst = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i)
        worst = std::max(worst, std::abs(g[i] - g2_analytic(p, grid[i])));
    CHECK(worst < 0.02);
    CHECK(worst > 1e-4);  // they are genuinely different functions
}

TEST_CASE("rng: determinism and basic distribution moments") {
    Rng a(12345), b(12345), c(54321);
    bool same = true, diff = false;
    for (int i = 0; i < 1000; ++i) {
        auto x = a.next_u64();
        same = same && (x == b.next_u64());
        diff = diff || (x != c.next_u64());
    }
    CHECK(same);
    CHECK(diff);

    Rng r(99);
    const int n = 200000;
    double s_exp = 0.0, s_norm = 0.0, s_norm2 = 0.0, s_gam = 0.0;
    double s_geo = 0.0;
    double min_u = 1.0;
    for (int i = 0; i < n; ++i) {
        min_u = std::min(min_u, r.uniform());
        s_exp += r.exponential(2.5);
        double z = r.normal();
        s_norm += z;
        s_norm2 += z * z;
        s_gam += r.gamma(7.5);
        s_geo += static_cast<double>(r.geometric(0.25));
    }
    CHECK(min_u > 0.0);  // (0,1]: log() never sees zero
    CHECK_THAT(s_exp / n, WithinAbs(1.0 / 2.5, 5 * 0.4 / std::sqrt(double(n))));
    CHECK_THAT(s_norm / n, WithinAbs(0.0, 5.0 / std::sqrt(double(n))));
    CHECK_THAT(s_norm2 / n, WithinAbs(1.0, 5.0 * std::sqrt(2.0 / n)));
    CHECK_THAT(s_gam / n, WithinAbs(7.5, 5 * std::sqrt(7.5 / n)));
    CHECK_THAT(s_geo / n, WithinAbs(4.0, 5 * std::sqrt(12.0 / n)));

    // erlang(k, rate): mean k/rate
    double s_er = 0.0;
    for (int i = 0; i < n; ++i) s_er += r.erlang(12, 3.0);
    CHECK_THAT(s_er / n, WithinAbs(4.0, 5 * (std::sqrt(12.0) / 3.0) / std::sqrt(double(n))));

    // child seeds decorrelate streams
    Rng c1(child_seed(7, 0)), c2(child_seed(7, 1));
    CHECK(c1.next_u64() != c2.next_u64());
}
