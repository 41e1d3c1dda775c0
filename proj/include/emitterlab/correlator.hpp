#pragma once

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <string>
#include <vector>

#include "emitterlab/errors.hpp"
#include "emitterlab/timetags.hpp"

// Coincidence histograms c(t) and their normalization to g2(t).
//
// Pairing rule (shared with the brute-force oracle in the tests, so exactness
// at window edges is well-defined): a pair with signed delay d = t_b - t_a ps
// lands in bin k = floor(d / w_ps) and is counted iff k in [-n, n-1], with
// n = ceil(window / w). Bin k covers [k w, (k+1) w) ps; zero delay sits on the
// boundary of the two central bins and goes to bin 0 by the floor rule.
namespace emitterlab {

enum class HistMode { full, start_stop };

struct CoincidenceHistogram {
    std::int64_t w_ps = 0;               // bin width, snapped to the ps grid
    std::int64_t half_bins = 0;          // n; counts covers bins -n .. n-1
    std::vector<std::uint64_t> counts;   // size 2n, index k + n
    double T_s = 0.0;                    // acquisition span
    double R1_cps = 0.0, R2_cps = 0.0;   // measured channel rates, counts/s
    HistMode mode = HistMode::full;

    double w_ns() const { return static_cast<double>(w_ps) * 1e-3; }
    double window_ns() const { return static_cast<double>(half_bins) * w_ns(); }
    double bin_center_ns(std::size_t idx) const {
        auto k = static_cast<std::int64_t>(idx) - half_bins;
        return (static_cast<double>(k) + 0.5) * w_ns();
    }
};

struct G2Curve {
    std::vector<double> t_ns;     // bin centers
    std::vector<double> g2;
    std::vector<double> stderr_;  // per-bin Poisson error sqrt(c)/norm
    double norm = 0.0;            // R1 R2 T w, expected coincidences per bin
    double T_s = 0.0, R1_cps = 0.0, R2_cps = 0.0;
    double w_ns = 0.0;
    HistMode mode = HistMode::full;
};

namespace detail {

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    return (a % b != 0 && ((a < 0) != (b < 0))) ? q - 1 : q;
}

inline std::int64_t snap_bin_ps(double w_ns) {
    if (!(w_ns > 0.0)) throw ConfigError("bin width must be > 0");
    auto w = static_cast<std::int64_t>(std::llround(w_ns * 1e3));
    if (w <= 0) throw ConfigError("bin width below 1 ps resolution");
    return w;
}

inline std::int64_t half_bin_count(double window_ns, std::int64_t w_ps) {
    if (!(window_ns > 0.0)) throw ConfigError("window must be > 0");
    auto win = static_cast<std::int64_t>(std::llround(window_ns * 1e3));
    if (win < w_ps) throw ConfigError("window must cover at least one bin");
    return (win + w_ps - 1) / w_ps;  // ceil
}

}  // namespace detail

// Streaming all-pairs correlator. Feed strictly time-ordered chunks of the
// two channels (each channel non-decreasing across calls); the result is
// identical to a single feed of the whole streams. Pair (x, y) is counted by
// whichever feed completes it, so chunk boundaries never drop or double-count
// coincidences.
class CorrelatorAccumulator {
  public:
    CorrelatorAccumulator(double w_ns, double window_ns)
        : w_ps_(detail::snap_bin_ps(w_ns)),
          n_(detail::half_bin_count(window_ns, w_ps_)),
          counts_(static_cast<std::size_t>(2 * n_), 0) {}

    void feed(const std::vector<std::int64_t>& a_new, const std::vector<std::int64_t>& b_new) {
        check_sorted(a_new, last_a_);
        check_sorted(b_new, last_b_);
        if (!a_new.empty()) last_a_ = a_new.back();
        if (!b_new.empty()) last_b_ = b_new.back();
        n1_ += a_new.size();
        n2_ += b_new.size();

        const std::int64_t bound = n_ * w_ps_;

        // new a against carried + new b
        std::vector<std::int64_t> b_all;
        b_all.reserve(carry_b_.size() + b_new.size());
        b_all.insert(b_all.end(), carry_b_.begin(), carry_b_.end());
        b_all.insert(b_all.end(), b_new.begin(), b_new.end());
        sweep(a_new, b_all, bound);

        // carried a against new b only (their pairs with carried b were
        // already counted in an earlier feed)
        sweep(carry_a_, b_new, bound);

        append_carry(carry_a_, a_new);
        append_carry(carry_b_, b_new);
        // keep events that can still pair with anything the slower channel
        // has not delivered yet
        std::int64_t horizon = std::min(last_a_, last_b_) - bound;
        prune(carry_a_, horizon);
        prune(carry_b_, horizon);
    }

    CoincidenceHistogram finalize(std::uint64_t duration_ps) const {
        if (duration_ps == 0) throw ConfigError("correlate: zero duration");
        CoincidenceHistogram h;
        h.w_ps = w_ps_;
        h.half_bins = n_;
        h.counts = counts_;
        h.T_s = static_cast<double>(duration_ps) * 1e-12;
        h.R1_cps = static_cast<double>(n1_) / h.T_s;
        h.R2_cps = static_cast<double>(n2_) / h.T_s;
        h.mode = HistMode::full;
        return h;
    }

  private:
    static void check_sorted(const std::vector<std::int64_t>& v, std::int64_t last) {
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::int64_t prev = (i == 0) ? last : v[i - 1];
            if (v[i] < prev) throw ConfigError("correlate: chunk not time-ordered");
        }
    }

    void sweep(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b,
               std::int64_t bound) {
        std::size_t lo = 0, hi = 0;
        for (std::int64_t x : a) {
            while (lo < b.size() && b[lo] < x - bound) ++lo;
            if (hi < lo) hi = lo;
            while (hi < b.size() && b[hi] < x + bound) ++hi;
            for (std::size_t j = lo; j < hi; ++j) {
                std::int64_t k = detail::floor_div(b[j] - x, w_ps_);
                // k in [-n, n-1] by construction of [x-bound, x+bound)
                ++counts_[static_cast<std::size_t>(k + n_)];
            }
        }
    }

    static void append_carry(std::vector<std::int64_t>& carry,
                             const std::vector<std::int64_t>& fresh) {
        carry.insert(carry.end(), fresh.begin(), fresh.end());
    }

    static void prune(std::vector<std::int64_t>& carry, std::int64_t horizon) {
        auto it = std::lower_bound(carry.begin(), carry.end(), horizon);
        carry.erase(carry.begin(), it);
    }

    std::int64_t w_ps_, n_;
    std::vector<std::uint64_t> counts_;
    std::vector<std::int64_t> carry_a_, carry_b_;
    std::int64_t last_a_ = INT64_MIN, last_b_ = INT64_MIN;
    std::uint64_t n1_ = 0, n2_ = 0;
};

// Start-stop (delay-function) variant: each channel-0 event pairs with the
// next channel-1 event at or after it (positive delays); each channel-1 event
// pairs with the next channel-0 event strictly after it (negative delays, so
// an exact tie is not counted twice). This reproduces what a start-stop TAC
// records and carries the known consecutive-pair bias at large delays.
class StartStopAccumulator {
  public:
    StartStopAccumulator(double w_ns, double window_ns)
        : w_ps_(detail::snap_bin_ps(w_ns)),
          n_(detail::half_bin_count(window_ns, w_ps_)),
          counts_(static_cast<std::size_t>(2 * n_), 0) {}

    // Chunks only need to be time-ordered within each channel; merged
    // processing advances to min(latest a, latest b), holding newer events
    // until the slower channel catches up.
    void feed(const std::vector<std::int64_t>& a_new, const std::vector<std::int64_t>& b_new) {
        enqueue(pending_a_, a_new, last_a_);
        enqueue(pending_b_, b_new, last_b_);
        n1_ += a_new.size();
        n2_ += b_new.size();
        drain(std::min(last_a_, last_b_));
    }

    CoincidenceHistogram finalize(std::uint64_t duration_ps) {
        if (duration_ps == 0) throw ConfigError("correlate: zero duration");
        drain(INT64_MAX);
        CoincidenceHistogram h;
        h.w_ps = w_ps_;
        h.half_bins = n_;
        h.counts = counts_;
        h.T_s = static_cast<double>(duration_ps) * 1e-12;
        h.R1_cps = static_cast<double>(n1_) / h.T_s;
        h.R2_cps = static_cast<double>(n2_) / h.T_s;
        h.mode = HistMode::start_stop;
        return h;
    }

  private:
    static void enqueue(std::deque<std::int64_t>& q, const std::vector<std::int64_t>& v,
                        std::int64_t& last) {
        for (std::int64_t t : v) {
            if (t < last) throw ConfigError("correlate: chunk not time-ordered");
            last = t;
            q.push_back(t);
        }
    }

    // Process merged order strictly below `horizon` (events at or beyond it
    // could still be interleaved by the other channel's future chunks; ties
    // resolve channel 0 first, matching single-shot processing).
    void drain(std::int64_t horizon) {
        for (;;) {
            bool has_a = !pending_a_.empty() && (horizon == INT64_MAX || pending_a_.front() < horizon);
            bool has_b = !pending_b_.empty() && (horizon == INT64_MAX || pending_b_.front() < horizon);
            if (!has_a && !has_b) return;
            bool take_a = has_a && (!has_b || pending_a_.front() <= pending_b_.front());
            if (take_a) {
                std::int64_t x = pending_a_.front();
                pending_a_.pop_front();
                // match stops strictly before x; a stop at exactly x keeps
                // waiting for a strictly later start
                std::size_t kept = 0;
                for (std::int64_t b : waiting_b_) {
                    if (x > b) record(x - b, /*negative=*/true);
                    else waiting_b_[kept++] = b;
                }
                waiting_b_.resize(kept);
                waiting_a_.push_back(x);
            } else {
                std::int64_t y = pending_b_.front();
                pending_b_.pop_front();
                for (std::int64_t a : waiting_a_) record(y - a, /*negative=*/false);
                waiting_a_.clear();
                waiting_b_.push_back(y);
            }
        }
    }

    void record(std::int64_t abs_delay, bool negative) {
        std::int64_t d = negative ? -abs_delay : abs_delay;
        std::int64_t k = detail::floor_div(d, w_ps_);
        if (k >= -n_ && k < n_) ++counts_[static_cast<std::size_t>(k + n_)];
    }

    std::int64_t w_ps_, n_;
    std::vector<std::uint64_t> counts_;
    std::deque<std::int64_t> pending_a_, pending_b_;
    std::vector<std::int64_t> waiting_a_, waiting_b_;
    std::int64_t last_a_ = INT64_MIN, last_b_ = INT64_MIN;
    std::uint64_t n1_ = 0, n2_ = 0;
};

namespace detail {

// Channel rates for normalization are measured from the streams themselves;
// a "channel stream" is one detector's file, whatever its channel bytes say.
inline CoincidenceHistogram correlate_streams(const TimeTagStream& s1, const TimeTagStream& s2,
                                              double w_ns, double window_ns, HistMode mode) {
    std::vector<std::int64_t> a(s1.tags.size()), b(s2.tags.size());
    for (std::size_t i = 0; i < s1.tags.size(); ++i) a[i] = s1.tags[i].time_ps;
    for (std::size_t i = 0; i < s2.tags.size(); ++i) b[i] = s2.tags[i].time_ps;
    std::uint64_t dur = std::max(s1.duration_ps, s2.duration_ps);
    if (mode == HistMode::full) {
        CorrelatorAccumulator acc(w_ns, window_ns);
        acc.feed(a, b);
        return acc.finalize(dur);
    }
    StartStopAccumulator acc(w_ns, window_ns);
    acc.feed(a, b);
    return acc.finalize(dur);
}

}  // namespace detail

inline CoincidenceHistogram full_correlation_histogram(const TimeTagStream& s1,
                                                       const TimeTagStream& s2, double w_ns,
                                                       double window_ns) {
    return detail::correlate_streams(s1, s2, w_ns, window_ns, HistMode::full);
}

inline CoincidenceHistogram start_stop_histogram(const TimeTagStream& s1,
                                                 const TimeTagStream& s2, double w_ns,
                                                 double window_ns) {
    return detail::correlate_streams(s1, s2, w_ns, window_ns, HistMode::start_stop);
}

// g2(t) = c(t) / (R1 R2 T w): per-bin division by the coincidence rate an
// equivalent Poissonian source would give.
inline G2Curve normalize(const CoincidenceHistogram& h) {
    double w_s = static_cast<double>(h.w_ps) * 1e-12;
    double norm = h.R1_cps * h.R2_cps * h.T_s * w_s;
    if (!(norm > 0.0)) throw NumericError("normalize: R1 R2 T w is zero");
    G2Curve c;
    c.norm = norm;
    c.T_s = h.T_s;
    c.R1_cps = h.R1_cps;
    c.R2_cps = h.R2_cps;
    c.w_ns = h.w_ns();
    c.mode = h.mode;
    c.t_ns.resize(h.counts.size());
    c.g2.resize(h.counts.size());
    c.stderr_.resize(h.counts.size());
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        c.t_ns[i] = h.bin_center_ns(i);
        c.g2[i] = static_cast<double>(h.counts[i]) / norm;
        c.stderr_[i] = std::sqrt(static_cast<double>(h.counts[i])) / norm;
    }
    return c;
}

// ---- text export -----------------------------------------------------------
// Header block of key: value lines, then one row per bin:
//   bin_center_ns  counts  g2  g2_stderr

inline const char* mode_name(HistMode m) {
    return m == HistMode::full ? "full" : "start-stop";
}

inline void write_histogram(const CoincidenceHistogram& h, const std::string& path) {
    // an empty acquisition still exports (all-zero g2 column) so that pipelines
    // over dark data don't fail at the I/O stage; fits reject it later
    const double w_s = static_cast<double>(h.w_ps) * 1e-12;
    const double norm = h.R1_cps * h.R2_cps * h.T_s * w_s;
    std::string tmp = path + ".tmp";
    std::FILE* f = std::fopen(tmp.c_str(), "w");
    if (!f) throw IoError("cannot open for writing: " + tmp);
    std::fprintf(f, "# emitterlab histogram v1\n");
    std::fprintf(f, "# mode: %s\n", mode_name(h.mode));
    std::fprintf(f, "# T_s: %.17g\n", h.T_s);
    std::fprintf(f, "# R1_cps: %.17g\n", h.R1_cps);
    std::fprintf(f, "# R2_cps: %.17g\n", h.R2_cps);
    std::fprintf(f, "# w_ns: %.17g\n", h.w_ns());
    std::fprintf(f, "# window_ns: %.17g\n", h.window_ns());
    std::fprintf(f, "# bins: %zu\n", h.counts.size());
    std::fprintf(f, "# columns: bin_center_ns counts g2 g2_stderr\n");
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
        const double cnt = static_cast<double>(h.counts[i]);
        const double g2 = norm > 0.0 ? cnt / norm : 0.0;
        const double se = norm > 0.0 ? std::sqrt(cnt) / norm : 0.0;
        std::fprintf(f, "%.17g %" PRIu64 " %.17g %.17g\n", h.bin_center_ns(i), h.counts[i], g2,
                     se);
    }
    bool ok = std::fflush(f) == 0;
    ok = (std::fclose(f) == 0) && ok;
    if (!ok) {
        std::remove(tmp.c_str());
        throw IoError("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + tmp + " -> " + path + ": " + ec.message());
}

inline CoincidenceHistogram read_histogram(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "r");
    if (!f) throw IoError("cannot open: " + path);
    detail::FileCloser closer;
    CoincidenceHistogram h;
    double w_ns = 0.0, window_ns = 0.0;
    std::size_t bins = 0;
    char line[512];
    std::uint64_t lineno = 0;
    bool saw_magic = false;
    std::size_t row = 0;
    while (std::fgets(line, sizeof line, f)) {
        ++lineno;
        if (line[0] == '#') {
            char strval[128];
            double val = 0.0;
            if (lineno == 1) {
                if (std::string(line).find("emitterlab histogram v1") == std::string::npos) {
                    closer(f);
                    throw FormatError("not an emitterlab histogram: " + path, lineno);
                }
                saw_magic = true;
            } else if (std::sscanf(line, "# mode: %127s", strval) == 1) {
                if (std::string(strval) == "full") h.mode = HistMode::full;
                else if (std::string(strval) == "start-stop") h.mode = HistMode::start_stop;
                else {
                    closer(f);
                    throw FormatError("unknown mode in " + path, lineno);
                }
            } else if (std::sscanf(line, "# T_s: %lf", &val) == 1) h.T_s = val;
            else if (std::sscanf(line, "# R1_cps: %lf", &val) == 1) h.R1_cps = val;
            else if (std::sscanf(line, "# R2_cps: %lf", &val) == 1) h.R2_cps = val;
            else if (std::sscanf(line, "# w_ns: %lf", &val) == 1) w_ns = val;
            else if (std::sscanf(line, "# window_ns: %lf", &val) == 1) window_ns = val;
            else if (std::sscanf(line, "# bins: %zu", &bins) == 1) {
                h.counts.assign(bins, 0);
            }
            continue;
        }
        if (!saw_magic) {
            closer(f);
            throw FormatError("not an emitterlab histogram: " + path, lineno);
        }
        double center, g2v, se;
        std::uint64_t cnt;
        if (std::sscanf(line, "%lf %" SCNu64 " %lf %lf", &center, &cnt, &g2v, &se) != 4) {
            closer(f);
            throw FormatError("malformed histogram row in " + path, lineno);
        }
        if (row >= h.counts.size()) {
            closer(f);
            throw FormatError("more rows than declared bins in " + path, lineno);
        }
        h.counts[row++] = cnt;
    }
    closer(f);
    if (!saw_magic) throw FormatError("empty histogram file: " + path, 0);
    if (row != h.counts.size())
        throw FormatError("fewer rows than declared bins in " + path, lineno);
    if (h.counts.size() % 2 != 0)
        throw FormatError("odd bin count in " + path, lineno);
    h.w_ps = detail::snap_bin_ps(w_ns);
    h.half_bins = static_cast<std::int64_t>(h.counts.size() / 2);
    (void)window_ns;  // implied by bins * w; stored for humans
    return h;
}

}  // namespace emitterlab
