#pragma once

// Batch workflow: one config drives simulate -> correlate -> fit per power,
// then the power-series regressions and the saturation fit, with every
// intermediate written out as a file the standalone commands can consume.

#include <emitterlab/correlator.hpp>
#include <emitterlab/errors.hpp>
#include <emitterlab/inference.hpp>
#include <emitterlab/mcsim.hpp>
#include <emitterlab/model.hpp>
#include <emitterlab/rng.hpp>
#include <emitterlab/timetags.hpp>

#include <json.hpp>

#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace emitterlab {

struct HistSettings {
  double w_ns = 0.0;
  double window_ns = 0.0;
  HistMode mode = HistMode::full;
};

struct RunConfig {
  ExcitationConfig excitation;
  DeshelvingModel deshelving;
  double r21_per_ns = 0.47;
  double r23_per_ns = 2.75e-3;
  // optional pinned rates for fixed-power experiments; the pipeline itself
  // always derives r12 and r31 from the power laws
  std::optional<double> r12_override_per_ns;
  std::optional<double> r31_override_per_ns;
  DetectorConfig detector;
  EfficiencyBudget budget;
  double quantum_yield = 0.52;
  std::vector<double> powers_mW;
  std::vector<double> durations_s;   // one per power
  double default_duration_s = 1.0;   // used when a power has no listed duration
  std::uint64_t seed = 1;
  HistSettings short_hist{0.17, 20.0, HistMode::full};
  HistSettings long_hist{2.3, 2000.0, HistMode::full};
  double fit_boundary_ns = 20.0;
  std::string out_dir = "out";
};

inline void validate(const HistSettings& h) {
  if (!(h.w_ns > 0.0) || !(h.window_ns >= h.w_ns))
    throw ConfigError("histogram settings need 0 < w <= window");
}

inline void validate(const RunConfig& cfg) {
  if (!(cfg.r21_per_ns > 0.0)) throw ConfigError("config: r21 must be positive");
  if (!(cfg.r23_per_ns >= 0.0)) throw ConfigError("config: r23 must be >= 0");
  if (!(cfg.quantum_yield > 0.0) || cfg.quantum_yield > 1.0)
    throw ConfigError("config: quantum_yield must be in (0, 1]");
  validate(cfg.detector);
  validate(cfg.budget);
  validate(cfg.short_hist);
  validate(cfg.long_hist);
  if (!(cfg.fit_boundary_ns > 0.0)) throw ConfigError("config: fit boundary must be positive");
  if (!(cfg.default_duration_s > 0.0)) throw ConfigError("config: duration_s must be positive");
  if (cfg.powers_mW.size() != cfg.durations_s.size())
    throw ConfigError("config: one duration per power required");
  for (std::size_t i = 0; i < cfg.powers_mW.size(); ++i) {
    if (!(cfg.powers_mW[i] > 0.0)) throw ConfigError("config: powers must be positive");
    if (!(cfg.durations_s[i] > 0.0)) throw ConfigError("config: durations must be positive");
    for (std::size_t j = i + 1; j < cfg.powers_mW.size(); ++j)
      if (cfg.powers_mW[i] == cfg.powers_mW[j])
        throw ConfigError("config: powers must be distinct");
  }
  if (cfg.out_dir.empty()) throw ConfigError("config: out_dir must not be empty");
}

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, std::initializer_list<const char*> allowed,
                       const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed)
      if (it.key() == k) ok = true;
    if (!ok) throw ConfigError("config: unknown key '" + it.key() + "' in " + where);
  }
}

inline double get_num(const json& j, const char* key, double fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number()) throw ConfigError(std::string("config: '") + key + "' must be a number");
  return j.at(key).get<double>();
}

inline std::uint64_t get_u64(const json& j, const char* key, std::uint64_t fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_number_unsigned())
    throw ConfigError(std::string("config: '") + key + "' must be a non-negative integer");
  return j.at(key).get<std::uint64_t>();
}

inline std::string get_str(const json& j, const char* key, const std::string& fallback) {
  if (!j.contains(key)) return fallback;
  if (!j.at(key).is_string()) throw ConfigError(std::string("config: '") + key + "' must be a string");
  return j.at(key).get<std::string>();
}

inline HistMode parse_mode(const std::string& s) {
  if (s == "full") return HistMode::full;
  if (s == "start-stop") return HistMode::start_stop;
  throw ConfigError("config: mode must be 'full' or 'start-stop', got '" + s + "'");
}

inline HistSettings parse_hist(const json& j, const HistSettings& defaults,
                               const std::string& where) {
  check_keys(j, {"w_ns", "window_ns", "mode"}, where);
  HistSettings h = defaults;
  h.w_ns = get_num(j, "w_ns", defaults.w_ns);
  h.window_ns = get_num(j, "window_ns", defaults.window_ns);
  h.mode = parse_mode(get_str(j, "mode", mode_name(defaults.mode)));
  return h;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::get_num;
  using detail::get_str;
  using detail::get_u64;

  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  detail::check_keys(j,
                     {"excitation", "deshelving", "rates", "detector", "budget",
                      "quantum_yield", "powers_mW", "duration_s", "durations_s", "seed",
                      "short_hist", "long_hist", "fit_boundary_ns", "out_dir"},
                     "top level");

  RunConfig cfg;
  if (j.contains("excitation")) {
    const auto& e = j.at("excitation");
    detail::check_keys(e, {"wavelength_nm", "sigma_abs_cm2", "spot_fwhm_um", "profile"},
                       "excitation");
    cfg.excitation.wavelength_nm = get_num(e, "wavelength_nm", cfg.excitation.wavelength_nm);
    cfg.excitation.sigma_abs_cm2 = get_num(e, "sigma_abs_cm2", cfg.excitation.sigma_abs_cm2);
    cfg.excitation.spot_fwhm_um = get_num(e, "spot_fwhm_um", cfg.excitation.spot_fwhm_um);
    const std::string prof = get_str(e, "profile", "gaussian_peak");
    if (prof == "gaussian_peak") cfg.excitation.profile = SpotProfile::gaussian_peak;
    else if (prof == "flat_top") cfg.excitation.profile = SpotProfile::flat_top;
    else throw ConfigError("config: profile must be 'gaussian_peak' or 'flat_top'");
  }
  if (j.contains("deshelving")) {
    const auto& d = j.at("deshelving");
    detail::check_keys(d, {"r31_0_per_us", "beta_per_mW"}, "deshelving");
    cfg.deshelving.r31_0_per_us = get_num(d, "r31_0_per_us", cfg.deshelving.r31_0_per_us);
    cfg.deshelving.beta_per_mW = get_num(d, "beta_per_mW", cfg.deshelving.beta_per_mW);
  }
  if (j.contains("rates")) {
    const auto& r = j.at("rates");
    detail::check_keys(r, {"r21_per_ns", "r23_per_ns", "r12_per_ns", "r31_per_ns"}, "rates");
    cfg.r21_per_ns = get_num(r, "r21_per_ns", cfg.r21_per_ns);
    cfg.r23_per_ns = get_num(r, "r23_per_ns", cfg.r23_per_ns);
    if (r.contains("r12_per_ns")) cfg.r12_override_per_ns = get_num(r, "r12_per_ns", 0.0);
    if (r.contains("r31_per_ns")) cfg.r31_override_per_ns = get_num(r, "r31_per_ns", 0.0);
  }
  if (j.contains("detector")) {
    const auto& d = j.at("detector");
    detail::check_keys(
        d, {"efficiency", "split_ratio", "jitter_fwhm_ns", "dark_rate_cps", "dead_time_ns"},
        "detector");
    cfg.detector.efficiency = get_num(d, "efficiency", cfg.detector.efficiency);
    cfg.detector.split_ratio = get_num(d, "split_ratio", cfg.detector.split_ratio);
    cfg.detector.jitter_fwhm_ns = get_num(d, "jitter_fwhm_ns", cfg.detector.jitter_fwhm_ns);
    cfg.detector.dark_rate_cps = get_num(d, "dark_rate_cps", cfg.detector.dark_rate_cps);
    cfg.detector.dead_time_ns = get_num(d, "dead_time_ns", cfg.detector.dead_time_ns);
  }
  if (j.contains("budget")) {
    const auto& b = j.at("budget");
    detail::check_keys(b,
                       {"collection", "aberration", "objective_transmittance",
                        "optics_transmittance", "apd_quantum_efficiency"},
                       "budget");
    cfg.budget.collection = get_num(b, "collection", cfg.budget.collection);
    cfg.budget.aberration = get_num(b, "aberration", cfg.budget.aberration);
    cfg.budget.objective_transmittance =
        get_num(b, "objective_transmittance", cfg.budget.objective_transmittance);
    cfg.budget.optics_transmittance =
        get_num(b, "optics_transmittance", cfg.budget.optics_transmittance);
    cfg.budget.apd_quantum_efficiency =
        get_num(b, "apd_quantum_efficiency", cfg.budget.apd_quantum_efficiency);
  }
  cfg.quantum_yield = get_num(j, "quantum_yield", cfg.quantum_yield);

  if (j.contains("powers_mW")) {
    if (!j.at("powers_mW").is_array()) throw ConfigError("config: powers_mW must be an array");
    for (const auto& v : j.at("powers_mW")) {
      if (!v.is_number()) throw ConfigError("config: powers_mW entries must be numbers");
      cfg.powers_mW.push_back(v.get<double>());
    }
  }
  cfg.default_duration_s = get_num(j, "duration_s", cfg.default_duration_s);
  if (j.contains("durations_s")) {
    if (!j.at("durations_s").is_array())
      throw ConfigError("config: durations_s must be an array");
    for (const auto& v : j.at("durations_s")) {
      if (!v.is_number()) throw ConfigError("config: durations_s entries must be numbers");
      cfg.durations_s.push_back(v.get<double>());
    }
  } else {
    cfg.durations_s.assign(cfg.powers_mW.size(), cfg.default_duration_s);
  }
  cfg.seed = get_u64(j, "seed", cfg.seed);
  if (j.contains("short_hist"))
    cfg.short_hist = detail::parse_hist(j.at("short_hist"), cfg.short_hist, "short_hist");
  if (j.contains("long_hist"))
    cfg.long_hist = detail::parse_hist(j.at("long_hist"), cfg.long_hist, "long_hist");
  cfg.fit_boundary_ns = get_num(j, "fit_boundary_ns", cfg.fit_boundary_ns);
  cfg.out_dir = get_str(j, "out_dir", cfg.out_dir);

  validate(cfg);
  return cfg;
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["excitation"] = {{"wavelength_nm", cfg.excitation.wavelength_nm},
                     {"sigma_abs_cm2", cfg.excitation.sigma_abs_cm2},
                     {"spot_fwhm_um", cfg.excitation.spot_fwhm_um},
                     {"profile", cfg.excitation.profile == SpotProfile::gaussian_peak
                                     ? "gaussian_peak"
                                     : "flat_top"}};
  j["deshelving"] = {{"r31_0_per_us", cfg.deshelving.r31_0_per_us},
                     {"beta_per_mW", cfg.deshelving.beta_per_mW}};
  nlohmann::json rates = {{"r21_per_ns", cfg.r21_per_ns}, {"r23_per_ns", cfg.r23_per_ns}};
  if (cfg.r12_override_per_ns) rates["r12_per_ns"] = *cfg.r12_override_per_ns;
  if (cfg.r31_override_per_ns) rates["r31_per_ns"] = *cfg.r31_override_per_ns;
  j["rates"] = rates;
  j["detector"] = {{"efficiency", cfg.detector.efficiency},
                   {"split_ratio", cfg.detector.split_ratio},
                   {"jitter_fwhm_ns", cfg.detector.jitter_fwhm_ns},
                   {"dark_rate_cps", cfg.detector.dark_rate_cps},
                   {"dead_time_ns", cfg.detector.dead_time_ns}};
  j["budget"] = {{"collection", cfg.budget.collection},
                 {"aberration", cfg.budget.aberration},
                 {"objective_transmittance", cfg.budget.objective_transmittance},
                 {"optics_transmittance", cfg.budget.optics_transmittance},
                 {"apd_quantum_efficiency", cfg.budget.apd_quantum_efficiency}};
  j["quantum_yield"] = cfg.quantum_yield;
  j["powers_mW"] = cfg.powers_mW;
  j["durations_s"] = cfg.durations_s;
  j["duration_s"] = cfg.default_duration_s;
  j["seed"] = cfg.seed;
  j["short_hist"] = {{"w_ns", cfg.short_hist.w_ns},
                     {"window_ns", cfg.short_hist.window_ns},
                     {"mode", mode_name(cfg.short_hist.mode)}};
  j["long_hist"] = {{"w_ns", cfg.long_hist.w_ns},
                    {"window_ns", cfg.long_hist.window_ns},
                    {"mode", mode_name(cfg.long_hist.mode)}};
  j["fit_boundary_ns"] = cfg.fit_boundary_ns;
  j["out_dir"] = cfg.out_dir;
  return j;
}

inline RunConfig load_run_config(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open config file: " + path);
  std::string text;
  char buf[4096];
  std::size_t got;
  while ((got = std::fread(buf, 1, sizeof buf, f)) > 0) text.append(buf, got);
  const bool bad = std::ferror(f) != 0;
  std::fclose(f);
  if (bad) throw IoError("read error on config file: " + path);
  try {
    return run_config_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("config file " + path + ": " + e.what(), e.byte);
  }
}

// stable 64-bit digest of the canonical serialized config
inline std::string config_digest_hex(const RunConfig& cfg) {
  const std::string s = run_config_to_json(cfg).dump();
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

// per-power rates: pump and deshelving follow the power laws unless pinned
inline RateParams rates_for(const RunConfig& cfg, double power_mW) {
  RateParams r;
  r.r12 = cfg.r12_override_per_ns ? *cfg.r12_override_per_ns
                                  : r12_from_power(cfg.excitation, power_mW);
  r.r21 = cfg.r21_per_ns;
  r.r23 = cfg.r23_per_ns;
  r.r31 = cfg.r31_override_per_ns ? *cfg.r31_override_per_ns
                                  : r31_of_power(cfg.deshelving, power_mW);
  return r;
}

// seed for one power, stable under reordering of the power list
inline std::uint64_t power_seed(const RunConfig& cfg, double power_mW) {
  return child_seed(cfg.seed, static_cast<std::uint64_t>(std::llround(power_mW * 1000.0)));
}

// per-detector jitter combines into the pair response
inline Irf pair_irf(const DetectorConfig& det) {
  return Irf{det.jitter_fwhm_ns * std::sqrt(2.0)};
}

inline double duration_for(const RunConfig& cfg, double power_mW) {
  for (std::size_t i = 0; i < cfg.powers_mW.size(); ++i)
    if (cfg.powers_mW[i] == power_mW) return cfg.durations_s[i];
  return cfg.default_duration_s;
}

namespace detail {

inline void write_text_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  FILE* f = std::fopen(tmp.c_str(), "wb");
  if (!f) throw IoError("cannot create " + tmp);
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
  if (std::fclose(f) != 0 || !ok) {
    std::remove(tmp.c_str());
    throw IoError("write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw IoError("cannot move " + tmp + " into place");
  }
}

// short label for directory names: %g is compact and deterministic
inline std::string power_label(double power_mW) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", power_mW);
  return buf;
}

template <typename F>
auto stage(const std::string& name, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.exit_code(), name + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ExitCode::numeric, name + ": " + e.what());
  }
}

// either accumulator behind one interface for streaming correlation
struct AnyAccumulator {
  std::variant<CorrelatorAccumulator, StartStopAccumulator> acc;

  explicit AnyAccumulator(const HistSettings& h)
      : acc(h.mode == HistMode::full
                ? std::variant<CorrelatorAccumulator, StartStopAccumulator>(
                      std::in_place_type<CorrelatorAccumulator>, h.w_ns, h.window_ns)
                : std::variant<CorrelatorAccumulator, StartStopAccumulator>(
                      std::in_place_type<StartStopAccumulator>, h.w_ns, h.window_ns)) {}

  void feed(const std::vector<std::int64_t>& a, const std::vector<std::int64_t>& b) {
    std::visit([&](auto& x) { x.feed(a, b); }, acc);
  }
  CoincidenceHistogram finalize(std::uint64_t duration_ps) {
    return std::visit([&](auto& x) { return x.finalize(duration_ps); }, acc);
  }
};

}  // namespace detail

struct SimArtifacts {
  std::string dir;
  double power_mW = 0.0;
  double duration_s = 0.0;
  std::uint64_t seed = 0;
  std::uint64_t counts0 = 0, counts1 = 0;
  CoincidenceHistogram hist_short, hist_long;
};

// simulate one power, streaming tags to the two channel files and both
// correlation windows in a single pass, and drop a metadata sidecar
inline SimArtifacts simulate_power(const RunConfig& cfg, double power_mW, double duration_s,
                                   const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir);

  SimConfig sim;
  sim.rates = rates_for(cfg, power_mW);
  sim.quantum_yield = cfg.quantum_yield;
  sim.duration_s = duration_s;
  sim.seed = power_seed(cfg, power_mW);
  validate(sim);

  SimArtifacts art;
  art.dir = dir;
  art.power_mW = power_mW;
  art.duration_s = duration_s;
  art.seed = sim.seed;

  const std::uint64_t duration_ps =
      static_cast<std::uint64_t>(std::llround(duration_s * 1e12));

  StreamWriter w0(dir + "/ch0.ptt1");
  StreamWriter w1(dir + "/ch1.ptt1");
  detail::AnyAccumulator acc_s(cfg.short_hist);
  detail::AnyAccumulator acc_l(cfg.long_hist);

  std::vector<std::int64_t> buf0, buf1;
  constexpr std::size_t kFlush = 1u << 16;
  auto flush = [&]() {
    acc_s.feed(buf0, buf1);
    acc_l.feed(buf0, buf1);
    for (std::int64_t t : buf0) w0.append(TimeTag{t, 0});
    for (std::int64_t t : buf1) w1.append(TimeTag{t, 1});
    art.counts0 += buf0.size();
    art.counts1 += buf1.size();
    buf0.clear();
    buf1.clear();
  };
  simulate_detected(
      sim, cfg.detector,
      [&](std::int64_t t) {
        buf0.push_back(t);
        if (buf0.size() + buf1.size() >= kFlush) flush();
      },
      [&](std::int64_t t) {
        buf1.push_back(t);
        if (buf0.size() + buf1.size() >= kFlush) flush();
      });
  flush();

  w0.finalize(duration_ps);
  w1.finalize(duration_ps);
  art.hist_short = acc_s.finalize(duration_ps);
  art.hist_long = acc_l.finalize(duration_ps);

  write_histogram(art.hist_short, dir + "/hist_short.txt");
  write_histogram(art.hist_long, dir + "/hist_long.txt");

  nlohmann::json meta;
  meta["config_digest"] = config_digest_hex(cfg);
  meta["seed"] = art.seed;
  meta["power_mW"] = power_mW;
  meta["duration_s"] = duration_s;
  meta["counts"] = {art.counts0, art.counts1};
  meta["rates_cps"] = {art.hist_short.R1_cps, art.hist_short.R2_cps};
  detail::write_text_atomic(dir + "/meta.json", meta.dump(2) + "\n");
  return art;
}

struct PowerResult {
  SimArtifacts sim;
  FitResult short_fit;
  FitResult long_fit;
};

struct PipelineReport {
  std::vector<PowerResult> per_power;
  std::optional<FitResult> lambda1_fit;    // r21, sigma_abs_cm2
  std::optional<FitResult> lambda2_fit;    // r23, r31_0, beta
  std::optional<FitResult> saturation_fit; // eta_product
  std::optional<QuantumYield> yield;
  std::string digest;
};

namespace detail {

inline nlohmann::json fit_to_json(const FitResult& f) {
  nlohmann::json j;
  for (std::size_t i = 0; i < f.names.size(); ++i) {
    j["parameters"][f.names[i]] = f.values[i];
    j["stderrs"][f.names[i]] =
        std::isfinite(f.stderrs[i]) ? nlohmann::json(f.stderrs[i]) : nlohmann::json();
  }
  j["chi2_reduced"] = f.chi2_reduced;
  j["iterations"] = f.iterations;
  j["converged"] = f.converged;
  j["degenerate"] = f.degenerate;
  return j;
}

}  // namespace detail

inline PipelineReport run_pipeline(const RunConfig& cfg) {
  validate(cfg);
  if (cfg.powers_mW.empty())
    throw ConfigError("pipeline: at least one power is required");

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + cfg.out_dir);

  PipelineReport rep;
  rep.digest = config_digest_hex(cfg);
  detail::write_text_atomic(cfg.out_dir + "/run_config.json",
                            run_config_to_json(cfg).dump(2) + "\n");

  const Irf irf = pair_irf(cfg.detector);
  const std::size_t n = cfg.powers_mW.size();
  rep.per_power.resize(n);

  // per-power stages are independent; EMITTERLAB_THREADS caps the pool
  std::size_t workers = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EMITTERLAB_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw ConfigError("EMITTERLAB_THREADS must be a positive integer");
    workers = static_cast<std::size_t>(v);
  }
  workers = std::min({workers, n, static_cast<std::size_t>(8)});

  std::vector<std::exception_ptr> errors(n);
  auto run_one = [&](std::size_t i) {
    const double P = cfg.powers_mW[i];
    const std::string tag = "power " + detail::power_label(P) + " mW";
    const std::string dir = cfg.out_dir + "/p" + detail::power_label(P);
    PowerResult& out = rep.per_power[i];
    out.sim = detail::stage("simulate [" + tag + "]", [&] {
      return simulate_power(cfg, P, cfg.durations_s[i], dir);
    });
    detail::stage("fit [" + tag + "]", [&] {
      const G2Curve gs = normalize(out.sim.hist_short);
      const G2Curve gl = normalize(out.sim.hist_long);
      out.short_fit = fit_short(gs, irf, cfg.fit_boundary_ns);
      out.long_fit = fit_long(gl, irf, cfg.fit_boundary_ns);
      detail::write_text_atomic(dir + "/fit_short.txt",
                                fit_report_text(out.short_fit, {"1/ns", "-"},
                                                "antibunching, " + tag));
      detail::write_text_atomic(dir + "/fit_long.txt",
                                fit_report_text(out.long_fit, {"1/ns", "-"},
                                                "bunching, " + tag));
      return 0;
    });
  };

  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t k = 0; k < workers; ++k) {
      pool.emplace_back([&] {
        for (;;) {
          const std::size_t i = next.fetch_add(1);
          if (i >= n) return;
          try {
            run_one(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    for (std::size_t i = 0; i < n; ++i)
      if (errors[i]) std::rethrow_exception(errors[i]);
  }

  // power-series stages, each guarded by its own minimum design size
  PowerSeries series_short, series_long;
  for (std::size_t i = 0; i < n; ++i) {
    series_short.points.push_back({cfg.powers_mW[i], rep.per_power[i].short_fit});
    series_long.points.push_back({cfg.powers_mW[i], rep.per_power[i].long_fit});
  }

  if (n >= 2) {
    rep.lambda1_fit = detail::stage("fit lambda1 vs power", [&] {
      auto f = fit_lambda1_vs_power(series_short, cfg.excitation);
      detail::write_text_atomic(cfg.out_dir + "/fit_lambda1_vs_power.txt",
                                fit_report_text(f, {"1/ns", "cm^2"}, "dip rate vs power"));
      return f;
    });
  }
  if (n >= 4 && rep.lambda1_fit) {
    rep.lambda2_fit = detail::stage("fit lambda2 vs power", [&] {
      ExcitationConfig fitted_exc = cfg.excitation;
      fitted_exc.sigma_abs_cm2 = rep.lambda1_fit->value("sigma_abs_cm2");
      const double r21_hat = rep.lambda1_fit->value("r21");
      auto f = fit_lambda2_vs_power(
          series_long, [fitted_exc](double P) { return r12_from_power(fitted_exc, P); },
          r21_hat);
      detail::write_text_atomic(
          cfg.out_dir + "/fit_lambda2_vs_power.txt",
          fit_report_text(f, {"1/ns", "1/ns", "1/mW"}, "bunching rate vs power"));
      return f;
    });
  }
  if (rep.lambda1_fit && rep.lambda2_fit && n >= 3) {
    rep.saturation_fit = detail::stage("fit saturation", [&] {
      ExcitationConfig fitted_exc = cfg.excitation;
      fitted_exc.sigma_abs_cm2 = rep.lambda1_fit->value("sigma_abs_cm2");
      DeshelvingModel fitted_desh;
      fitted_desh.r31_0_per_us = rep.lambda2_fit->value("r31_0") * 1e3;  // per ns -> per us
      fitted_desh.beta_per_mW = std::max(rep.lambda2_fit->value("beta"), 0.0);
      SaturationModel model;
      model.r12_of_power = [fitted_exc](double P) { return r12_from_power(fitted_exc, P); };
      model.r31_of_power = [fitted_desh](double P) { return r31_of_power(fitted_desh, P); };
      model.r21_per_ns = rep.lambda1_fit->value("r21");
      model.r23_per_ns = rep.lambda2_fit->value("r23");

      std::vector<SaturationPoint> pts;
      for (std::size_t i = 0; i < n; ++i) {
        const auto& s = rep.per_power[i].sim;
        const double total = static_cast<double>(s.counts0 + s.counts1);
        pts.push_back({cfg.powers_mW[i], total / s.duration_s,
                       std::sqrt(std::max(total, 1.0)) / s.duration_s});
      }
      auto f = fit_saturation(pts, model);
      detail::write_text_atomic(cfg.out_dir + "/fit_saturation.txt",
                                fit_report_text(f, {"-"}, "detected rate vs power"));
      return f;
    });
    rep.yield = quantum_yield_estimate(rep.saturation_fit->value("eta_product"),
                                       rep.saturation_fit->stderr_of("eta_product"),
                                       cfg.budget);
  }

  // final report, human- and machine-readable
  std::string text = "# pipeline report\n# config digest: " + rep.digest + "\n\n";
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = rep.per_power[i];
    text += fit_report_text(r.short_fit, {"1/ns", "-"},
                            "antibunching, power " + detail::power_label(cfg.powers_mW[i]) +
                                " mW");
    text += fit_report_text(r.long_fit, {"1/ns", "-"},
                            "bunching, power " + detail::power_label(cfg.powers_mW[i]) +
                                " mW");
    text += "\n";
  }
  if (rep.lambda1_fit)
    text += fit_report_text(*rep.lambda1_fit, {"1/ns", "cm^2"}, "dip rate vs power");
  if (rep.lambda2_fit)
    text += fit_report_text(*rep.lambda2_fit, {"1/ns", "1/ns", "1/mW"},
                            "bunching rate vs power");
  if (rep.saturation_fit)
    text += fit_report_text(*rep.saturation_fit, {"-"}, "detected rate vs power");
  if (rep.yield) {
    char line[160];
    std::snprintf(line, sizeof line, "quantum_yield    %.12g  %.6g  -%s\n",
                  rep.yield->value, rep.yield->stderr_,
                  rep.yield->physical ? "" : "  (unphysical: > 1)");
    text += line;
  }
  detail::write_text_atomic(cfg.out_dir + "/report.txt", text);

  nlohmann::json jr;
  jr["config_digest"] = rep.digest;
  for (std::size_t i = 0; i < n; ++i) {
    nlohmann::json row;
    row["power_mW"] = cfg.powers_mW[i];
    row["duration_s"] = rep.per_power[i].sim.duration_s;
    row["counts"] = {rep.per_power[i].sim.counts0, rep.per_power[i].sim.counts1};
    row["short_fit"] = detail::fit_to_json(rep.per_power[i].short_fit);
    row["long_fit"] = detail::fit_to_json(rep.per_power[i].long_fit);
    jr["per_power"].push_back(row);
  }
  if (rep.lambda1_fit) jr["lambda1_vs_power"] = detail::fit_to_json(*rep.lambda1_fit);
  if (rep.lambda2_fit) jr["lambda2_vs_power"] = detail::fit_to_json(*rep.lambda2_fit);
  if (rep.saturation_fit) jr["saturation"] = detail::fit_to_json(*rep.saturation_fit);
  if (rep.yield) {
    jr["quantum_yield"] = {{"value", rep.yield->value},
                           {"stderr", rep.yield->stderr_},
                           {"physical", rep.yield->physical}};
  }
  detail::write_text_atomic(cfg.out_dir + "/report.json", jr.dump(2) + "\n");
  return rep;
}

}  // namespace emitterlab
