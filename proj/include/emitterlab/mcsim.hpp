#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "emitterlab/errors.hpp"
#include "emitterlab/model.hpp"
#include "emitterlab/rng.hpp"
#include "emitterlab/timetags.hpp"
#include "emitterlab/units.hpp"

// Kinetic Monte Carlo of the three-level emitter plus the HBT detector chain
// (beamsplitter, per-detector efficiency, timing jitter, dark counts, dead
// time). All event times are integer picoseconds.
namespace emitterlab {

struct DetectorConfig {
    double efficiency = 1.0;      // per-photon detection prob. after the beamsplitter
    double split_ratio = 0.5;     // probability a photon exits toward channel 0
    double jitter_fwhm_ns = 0.0;  // per-detector Gaussian jitter; the two-detector
                                  // response then has fwhm*sqrt(2) (a 1.2 ns pair IRF
                                  // needs 1.2/sqrt(2) here)
    double dark_rate_cps = 0.0;   // per channel
    double dead_time_ns = 0.0;    // per channel, non-paralyzable
};

inline void validate(const DetectorConfig& d) {
    auto in01 = [](double x) { return std::isfinite(x) && x >= 0.0 && x <= 1.0; };
    if (!in01(d.efficiency)) throw ConfigError("detector efficiency must be in [0,1]");
    if (!in01(d.split_ratio)) throw ConfigError("split ratio must be in [0,1]");
    if (!(d.jitter_fwhm_ns >= 0.0)) throw ConfigError("jitter fwhm must be >= 0");
    if (!(d.dark_rate_cps >= 0.0)) throw ConfigError("dark rate must be >= 0");
    if (!(d.dead_time_ns >= 0.0)) throw ConfigError("dead time must be >= 0");
}

struct EfficiencyBudget {
    double collection = 0.026;           // objective collection solid angle
    double aberration = 0.20;            // wavefront/aberration losses
    double objective_transmittance = 0.80;
    double optics_transmittance = 0.35;  // relay + filters
    double apd_quantum_efficiency = 0.55;
};

inline void validate(const EfficiencyBudget& b) {
    for (double f : {b.collection, b.aberration, b.objective_transmittance,
                     b.optics_transmittance, b.apd_quantum_efficiency})
        if (!(f > 0.0) || f > 1.0) throw ConfigError("budget factors must be in (0,1]");
}

inline double eta_det(const EfficiencyBudget& b) {
    validate(b);
    return b.collection * b.aberration * b.objective_transmittance * b.optics_transmittance *
           b.apd_quantum_efficiency;
}

struct SimConfig {
    RateParams rates;            // 1/ns
    double quantum_yield = 0.52; // probability a 2->1 decay is radiative
    double duration_s = 0.0;
    std::uint64_t seed = 0;
};

// The simulator is more permissive than the analytic ops: r12 = 0 (never
// excited) is a boring but valid trajectory.
inline void validate_sim_rates(const RateParams& r) {
    auto ok = [](double x) { return std::isfinite(x) && x >= 0.0; };
    if (!ok(r.r12) || !ok(r.r21) || !ok(r.r23) || !ok(r.r31))
        throw RateError(RateError::Reason::negative_or_nonfinite,
                        "rates must be finite and non-negative");
    if (r.r12 > 0.0 && r.r21 + r.r23 == 0.0)
        throw RateError(RateError::Reason::negative_or_nonfinite,
                        "excited level has no exit (r21 + r23 = 0)");
    if (r.r23 > 0.0 && r.r31 == 0.0)
        throw RateError(RateError::Reason::zero_deshelving,
                        "r31 = 0 with r23 > 0: shelf is absorbing");
}

inline void validate(const SimConfig& c) {
    validate_sim_rates(c.rates);
    if (!(c.quantum_yield > 0.0) || c.quantum_yield > 1.0)
        throw ConfigError("quantum yield must be in (0,1]");
    if (!(c.duration_s > 0.0)) throw ConfigError("duration must be > 0");
}

// ---- emission generation ----------------------------------------------------

// Literal Gillespie walk over the three levels. One callback per emitted
// photon (time in ps). This is the definitional reference; it touches every
// excitation cycle, so long high-rate runs belong to simulate_detected below.
template <typename Sink>
void simulate_emissions(const SimConfig& cfg, Sink&& emit) {
    validate(cfg);
    const auto& r = cfg.rates;
    const auto duration_ps =
        static_cast<std::int64_t>(std::llround(cfg.duration_s * 1e12));
    if (r.r12 == 0.0) return;  // stuck in ground level

    Rng rng(cfg.seed);
    const double exit2 = r.r21 + r.r23;
    const double p_decay = r.r21 / exit2;
    std::int64_t t = 0;  // ps
    int level = 1;
    for (;;) {
        switch (level) {
            case 1:
                t += static_cast<std::int64_t>(std::llround(rng.exponential(r.r12) * 1e3));
                if (t > duration_ps) return;
                level = 2;
                break;
            case 2:
                t += static_cast<std::int64_t>(std::llround(rng.exponential(exit2) * 1e3));
                if (t > duration_ps) return;
                if (rng.uniform_co() < p_decay) {
                    if (rng.uniform_co() < cfg.quantum_yield) emit(t);
                    level = 1;
                } else {
                    level = 3;
                }
                break;
            default:  // shelf
                t += static_cast<std::int64_t>(std::llround(rng.exponential(r.r31) * 1e3));
                if (t > duration_ps) return;
                level = 1;
                break;
        }
    }
}

inline std::vector<std::int64_t> collect_emissions(const SimConfig& cfg) {
    std::vector<std::int64_t> out;
    simulate_emissions(cfg, [&out](std::int64_t t) { out.push_back(t); });
    return out;
}

// ---- detector chain ---------------------------------------------------------

// Streaming post-processor: route -> keep -> jitter -> merge dark counts ->
// dead-time filter, per channel, emitting time-sorted tags. Feed emissions in
// non-decreasing order; events are held back until no future emission can
// jitter in front of them (jitter displacements are clamped to +-8 sigma,
// ~1e-15 tail mass, to make that horizon exact).
class DetectorChain {
  public:
    using Sink = std::function<void(std::int64_t)>;

    DetectorChain(const DetectorConfig& det, std::uint64_t duration_ps, std::uint64_t seed,
                  Sink ch0, Sink ch1, bool apply_efficiency = true)
        : det_(det),
          duration_ps_(static_cast<std::int64_t>(duration_ps)),
          apply_efficiency_(apply_efficiency),
          rng_(child_seed(seed, 1)) {
        validate(det);
        sink_[0] = std::move(ch0);
        sink_[1] = std::move(ch1);
        sigma_ps_ = units::fwhm_to_sigma(det.jitter_fwhm_ns) * 1e3;
        margin_ps_ = static_cast<std::int64_t>(std::llround(8.0 * sigma_ps_)) + 1;
        dead_ps_ = static_cast<std::int64_t>(std::llround(det.dead_time_ns * 1e3));
        for (int ch = 0; ch < 2; ++ch) {
            dark_rng_[ch] = Rng(child_seed(seed, 2 + static_cast<std::uint64_t>(ch)));
            next_dark_[ch] = det.dark_rate_cps > 0.0 ? draw_dark(ch, 0) : INT64_MAX;
            last_accept_[ch] = INT64_MIN;
        }
    }

    void feed(std::int64_t t_ps) {
        if (t_ps < last_fed_) throw ConfigError("detector chain: emissions out of order");
        last_fed_ = t_ps;
        bool to_ch0 = rng_.uniform_co() < det_.split_ratio;
        if (apply_efficiency_ && !(rng_.uniform_co() < det_.efficiency)) return;
        std::int64_t jittered = t_ps;
        if (sigma_ps_ > 0.0) {
            double z = std::clamp(rng_.normal(), -8.0, 8.0);
            jittered += static_cast<std::int64_t>(std::llround(z * sigma_ps_));
        }
        // jittered out of the acquisition span: dropped, not wrapped
        if (jittered >= 0 && jittered <= duration_ps_)
            pending_[to_ch0 ? 0 : 1].push_back(jittered);
        if (++since_flush_ >= flush_every_) {
            settle(last_fed_ - margin_ps_);
            since_flush_ = 0;
        }
    }

    void finalize() {
        settle(INT64_MAX);
        done_ = true;
    }

    ~DetectorChain() {
        // deliberately no auto-finalize: an abandoned chain stays incomplete
    }

    bool finalized() const { return done_; }

  private:
    std::int64_t draw_dark(int ch, std::int64_t from) {
        double gap_ns = dark_rng_[ch].exponential(det_.dark_rate_cps * 1e-9);
        return from + static_cast<std::int64_t>(std::llround(gap_ns * 1e3));
    }

    // Emit every settled event with time < horizon, in order.
    void settle(std::int64_t horizon) {
        for (int ch = 0; ch < 2; ++ch) {
            auto& pend = pending_[ch];
            std::vector<std::int64_t> batch;
            std::size_t kept = 0;
            for (std::int64_t t : pend) {
                if (t < horizon) batch.push_back(t);
                else pend[kept++] = t;
            }
            pend.resize(kept);
            while (next_dark_[ch] < horizon && next_dark_[ch] <= duration_ps_) {
                batch.push_back(next_dark_[ch]);
                next_dark_[ch] = draw_dark(ch, next_dark_[ch]);
            }
            std::sort(batch.begin(), batch.end());
            for (std::int64_t t : batch) {
                if (dead_ps_ > 0 && t < last_accept_[ch] + dead_ps_) continue;
                last_accept_[ch] = t;
                sink_[ch](t);
            }
        }
    }

    static constexpr std::size_t flush_every_ = 1 << 15;

    DetectorConfig det_;
    std::int64_t duration_ps_;
    bool apply_efficiency_;
    Rng rng_;
    Rng dark_rng_[2] = {Rng(0), Rng(0)};
    Sink sink_[2];
    double sigma_ps_ = 0.0;
    std::int64_t margin_ps_ = 0, dead_ps_ = 0;
    std::int64_t next_dark_[2] = {INT64_MAX, INT64_MAX};
    std::int64_t last_accept_[2] = {INT64_MIN, INT64_MIN};
    std::int64_t last_fed_ = INT64_MIN;
    std::vector<std::int64_t> pending_[2];
    std::size_t since_flush_ = 0;
    bool done_ = false;
};

// Transform a finite emission list into the two channel streams.
inline std::pair<TimeTagStream, TimeTagStream> detect(const std::vector<std::int64_t>& emissions,
                                                      const DetectorConfig& det,
                                                      double duration_s, std::uint64_t seed) {
    if (!(duration_s > 0.0)) throw ConfigError("detect: duration must be > 0");
    auto duration_ps = static_cast<std::uint64_t>(std::llround(duration_s * 1e12));
    TimeTagStream s0, s1;
    s0.duration_ps = s1.duration_ps = duration_ps;
    s0.meta.seed = s1.meta.seed = seed;
    DetectorChain chain(
        det, duration_ps, seed,
        [&s0](std::int64_t t) { s0.tags.push_back({t, 0}); },
        [&s1](std::int64_t t) { s1.tags.push_back({t, 1}); });
    std::int64_t prev = INT64_MIN;
    for (std::int64_t t : emissions) {
        if (t < prev) throw ConfigError("detect: emissions must be sorted");
        prev = t;
        chain.feed(t);
    }
    chain.finalize();
    return {std::move(s0), std::move(s1)};
}

// ---- fused fast path --------------------------------------------------------

// Draws detected photons directly from the exact inter-detection law instead
// of walking every excitation cycle. One "episode" starting from the ground
// level runs K pump/decay cycles until it either yields a detected photon or
// shelves, with
//   p_shelf = r23/(r21+r23),  q = quantum_yield * efficiency,
//   d = p_shelf + (1-p_shelf) q,   K ~ Geometric(d),
//   elapsed = Erlang(K, r12) + Erlang(K, r21+r23),
// and a shelving episode appends an Exp(r31) dark dwell. This is the same
// process as simulate_emissions + thinning, in distribution, at O(1) cost per
// *detected* photon; the cross-check lives in the tests.
template <typename Tag0Sink, typename Tag1Sink>
void simulate_detected(const SimConfig& cfg, const DetectorConfig& det, Tag0Sink&& ch0,
                       Tag1Sink&& ch1) {
    validate(cfg);
    validate(det);
    const auto& r = cfg.rates;
    const auto duration_ps =
        static_cast<std::uint64_t>(std::llround(cfg.duration_s * 1e12));

    // the chain applies split/jitter/darks/dead time; detection thinning is
    // already folded into the episode law
    DetectorChain chain(det, duration_ps, cfg.seed, std::forward<Tag0Sink>(ch0),
                        std::forward<Tag1Sink>(ch1), /*apply_efficiency=*/false);

    const double q = cfg.quantum_yield * det.efficiency;
    const double exit2 = r.r21 + r.r23;
    if (r.r12 > 0.0 && q > 0.0 && exit2 > 0.0) {
        const double p_shelf = r.r23 / exit2;
        const double d = p_shelf + (1.0 - p_shelf) * q;
        const double p_photon_given_end = (1.0 - p_shelf) * q / d;
        Rng rng(child_seed(cfg.seed, 0));
        std::int64_t t = 0;  // ps
        for (;;) {
            std::uint64_t k = rng.geometric(d);
            double elapsed_ns = rng.erlang(k, r.r12) + rng.erlang(k, exit2);
            t += static_cast<std::int64_t>(std::llround(elapsed_ns * 1e3));
            if (t > static_cast<std::int64_t>(duration_ps)) break;
            if (rng.uniform_co() < p_photon_given_end) {
                chain.feed(t);
            } else {
                t += static_cast<std::int64_t>(std::llround(rng.exponential(r.r31) * 1e3));
                if (t > static_cast<std::int64_t>(duration_ps)) break;
            }
        }
    }
    chain.finalize();
}

// Convenience wrapper returning in-memory streams.
inline std::pair<TimeTagStream, TimeTagStream> simulate_detected_streams(
    const SimConfig& cfg, const DetectorConfig& det) {
    auto duration_ps = static_cast<std::uint64_t>(std::llround(cfg.duration_s * 1e12));
    TimeTagStream s0, s1;
    s0.duration_ps = s1.duration_ps = duration_ps;
    s0.meta.seed = s1.meta.seed = cfg.seed;
    simulate_detected(
        cfg, det, [&s0](std::int64_t t) { s0.tags.push_back({t, 0}); },
        [&s1](std::int64_t t) { s1.tags.push_back({t, 1}); });
    return {std::move(s0), std::move(s1)};
}

}  // namespace emitterlab
