// Command-line front end: simulate, correlate, fit-short, fit-long,
// pipeline, budget. Exit codes: 0 ok, 2 config, 3 I/O, 4 numerical.

#include <emitterlab/emitterlab.hpp>

#include <CLI11.hpp>

#include <cstdio>
#include <optional>
#include <string>

namespace el = emitterlab;

namespace {

std::string read_text_file(const std::string& path) {
    FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw el::IoError("cannot open " + path);
    std::string text;
    char buf[4096];
    std::size_t got;
    while ((got = std::fread(buf, 1, sizeof buf, f)) > 0) text.append(buf, got);
    const bool bad = std::ferror(f) != 0;
    std::fclose(f);
    if (bad) throw el::IoError("read error on " + path);
    return text;
}

int cmd_simulate(const std::string& config_path, double power_mW,
                 std::optional<std::uint64_t> seed, std::optional<std::string> out) {
    el::RunConfig cfg = el::load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (!(power_mW > 0.0)) throw el::ConfigError("--power must be positive (mW)");
    const std::string dir =
        out ? *out : cfg.out_dir + "/p" + el::detail::power_label(power_mW);
    const el::SimArtifacts art =
        el::simulate_power(cfg, power_mW, el::duration_for(cfg, power_mW), dir);
    std::printf("simulated %.6g mW for %.6g s (seed %llu): %llu + %llu tags -> %s\n",
                art.power_mW, art.duration_s, static_cast<unsigned long long>(art.seed),
                static_cast<unsigned long long>(art.counts0),
                static_cast<unsigned long long>(art.counts1), dir.c_str());
    std::printf("channel rates: %.6g / %.6g counts/s\n", art.hist_short.R1_cps,
                art.hist_short.R2_cps);
    return 0;
}

int cmd_correlate(const std::string& ch0, const std::string& ch1, double bin_ns,
                  double window_ns, const std::string& mode_str, const std::string& out) {
    const el::HistMode mode = el::detail::parse_mode(mode_str);
    const el::TimeTagStream s0 = el::read_stream(ch0);
    const el::TimeTagStream s1 = el::read_stream(ch1);
    const el::CoincidenceHistogram h =
        mode == el::HistMode::full ? el::full_correlation_histogram(s0, s1, bin_ns, window_ns)
                                   : el::start_stop_histogram(s0, s1, bin_ns, window_ns);
    el::write_histogram(h, out);
    std::uint64_t total = 0;
    for (auto c : h.counts) total += c;
    std::printf("%zu bins, %llu coincidences, mode %s -> %s\n", h.counts.size(),
                static_cast<unsigned long long>(total), el::mode_name(h.mode), out.c_str());
    return 0;
}

int cmd_fit(bool short_scale, const std::string& hist_path, double irf_fwhm_ns,
            double boundary_ns, std::optional<std::string> out) {
    const el::CoincidenceHistogram h = el::read_histogram(hist_path);
    const el::G2Curve g = el::normalize(h);
    const el::Irf irf{irf_fwhm_ns};
    const el::FitResult fit = short_scale ? el::fit_short(g, irf, boundary_ns)
                                          : el::fit_long(g, irf, boundary_ns);
    const std::string text = el::fit_report_text(
        fit, {"1/ns", "-"}, std::string(short_scale ? "antibunching" : "bunching") + " fit of " +
                                hist_path);
    std::fputs(text.c_str(), stdout);
    if (out) el::detail::write_text_atomic(*out, text);
    return 0;
}

int cmd_pipeline(const std::string& config_path, std::optional<std::uint64_t> seed,
                 std::optional<std::string> out) {
    el::RunConfig cfg = el::load_run_config(config_path);
    if (seed) cfg.seed = *seed;
    if (out) cfg.out_dir = *out;
    el::run_pipeline(cfg);
    std::fputs(read_text_file(cfg.out_dir + "/report.txt").c_str(), stdout);
    std::printf("artifacts in %s\n", cfg.out_dir.c_str());
    return 0;
}

int cmd_budget(std::optional<std::string> config_path, std::optional<double> eta_measured) {
    el::EfficiencyBudget b;
    double qy_guess = 0.52;
    if (config_path) {
        const el::RunConfig cfg = el::load_run_config(*config_path);
        b = cfg.budget;
        qy_guess = cfg.quantum_yield;
    }
    const double product = el::eta_det(b);
    std::printf("collection               %.6g\n", b.collection);
    std::printf("aberration               %.6g\n", b.aberration);
    std::printf("objective_transmittance  %.6g\n", b.objective_transmittance);
    std::printf("optics_transmittance     %.6g\n", b.optics_transmittance);
    std::printf("apd_quantum_efficiency   %.6g\n", b.apd_quantum_efficiency);
    std::printf("eta_det product          %.6g\n", product);
    std::printf("predicted eta (x QY %.3g) %.6g\n", qy_guess, qy_guess * product);
    if (eta_measured) {
        const el::QuantumYield q = el::quantum_yield_estimate(*eta_measured, 0.0, b);
        std::printf("quantum yield for eta=%.6g: %.6g%s\n", *eta_measured, q.value,
                    q.physical ? "" : " (unphysical: > 1)");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"three-level emitter photophysics toolkit"};
    app.require_subcommand(1);

    std::string config_path, out_str, mode_str = "full";
    std::string stream0, stream1, hist_path;
    double power_mW = 0.0, bin_ns = 0.17, window_ns = 20.0;
    double irf_fwhm_ns = 0.0, boundary_ns = 20.0;
    std::uint64_t seed_val = 0;
    double eta_val = 0.0;

    auto* sim = app.add_subcommand("simulate", "simulate one power into time-tag files");
    sim->add_option("--config", config_path, "run config (JSON)")->required();
    sim->add_option("--power", power_mW, "excitation power (mW)")->required();
    auto* sim_seed = sim->add_option("--seed", seed_val, "override config seed");
    auto* sim_out = sim->add_option("--out", out_str, "output directory");

    auto* cor = app.add_subcommand("correlate", "histogram coincidences of two tag files");
    cor->add_option("ch0", stream0, "first channel .ptt1 file")->required();
    cor->add_option("ch1", stream1, "second channel .ptt1 file")->required();
    cor->add_option("--bin", bin_ns, "bin width (ns)")->capture_default_str();
    cor->add_option("--window", window_ns, "correlation window, one side (ns)")
        ->capture_default_str();
    cor->add_option("--mode", mode_str, "full | start-stop")->capture_default_str();
    cor->add_option("--out", out_str, "histogram output path")->required();

    auto* fits = app.add_subcommand("fit-short", "fit the antibunching window of a histogram");
    fits->add_option("hist", hist_path, "histogram file")->required();
    fits->add_option("--irf-fwhm", irf_fwhm_ns, "pair IRF FWHM (ns)")->capture_default_str();
    fits->add_option("--boundary", boundary_ns, "short/long boundary (ns)")
        ->capture_default_str();
    auto* fits_out = fits->add_option("--out", out_str, "also write the report here");

    auto* fitl = app.add_subcommand("fit-long", "fit the bunching tail of a histogram");
    fitl->add_option("hist", hist_path, "histogram file")->required();
    fitl->add_option("--irf-fwhm", irf_fwhm_ns, "pair IRF FWHM (ns)")->capture_default_str();
    fitl->add_option("--boundary", boundary_ns, "short/long boundary (ns)")
        ->capture_default_str();
    auto* fitl_out = fitl->add_option("--out", out_str, "also write the report here");

    auto* pipe = app.add_subcommand("pipeline", "simulate, correlate and fit a power series");
    pipe->add_option("--config", config_path, "run config (JSON)")->required();
    auto* pipe_seed = pipe->add_option("--seed", seed_val, "override config seed");
    auto* pipe_out = pipe->add_option("--out", out_str, "override output directory");

    auto* bud = app.add_subcommand("budget", "print the detection efficiency budget");
    auto* bud_cfg = bud->add_option("--config", config_path, "run config (JSON)");
    auto* bud_eta = bud->add_option("--eta", eta_val, "measured total efficiency product");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);  // prints help or the usage error
        return code == 0 ? 0 : static_cast<int>(el::ExitCode::config);
    }

    try {
        if (sim->parsed())
            return cmd_simulate(config_path, power_mW,
                                sim_seed->count() ? std::optional(seed_val) : std::nullopt,
                                sim_out->count() ? std::optional(out_str) : std::nullopt);
        if (cor->parsed())
            return cmd_correlate(stream0, stream1, bin_ns, window_ns, mode_str, out_str);
        if (fits->parsed())
            return cmd_fit(true, hist_path, irf_fwhm_ns, boundary_ns,
                           fits_out->count() ? std::optional(out_str) : std::nullopt);
        if (fitl->parsed())
            return cmd_fit(false, hist_path, irf_fwhm_ns, boundary_ns,
                           fitl_out->count() ? std::optional(out_str) : std::nullopt);
        if (pipe->parsed())
            return cmd_pipeline(config_path,
                                pipe_seed->count() ? std::optional(seed_val) : std::nullopt,
                                pipe_out->count() ? std::optional(out_str) : std::nullopt);
        if (bud->parsed())
            return cmd_budget(bud_cfg->count() ? std::optional(config_path) : std::nullopt,
                              bud_eta->count() ? std::optional(eta_val) : std::nullopt);
    } catch (const el::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(e.exit_code());
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return static_cast<int>(el::ExitCode::numeric);
    }
    return 0;
}
