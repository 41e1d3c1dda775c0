#include <catch2/catch_amalgamated.hpp>

#include <emitterlab/emitterlab.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include <json.hpp>

using namespace emitterlab;
namespace fs = std::filesystem;

#ifndef EMITTERLAB_CLI_PATH
#error "EMITTERLAB_CLI_PATH must point at the CLI binary"
#endif

namespace {

const std::string cli = EMITTERLAB_CLI_PATH;

std::string scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("emitterlab_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// run a shell command, return the process exit code
int run_cli(const std::string& args) {
  const std::string cmd = cli + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

// relative path -> content for every regular file under root
std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file())
      m[fs::relative(e.path(), root).string()] = slurp(e.path());
  return m;
}

std::string base_config_json(const std::string& out_dir) {
  nlohmann::json j;
  j["detector"] = {{"efficiency", 0.004},
                   {"split_ratio", 0.5},
                   {"jitter_fwhm_ns", 0.8485281374238569},
                   {"dark_rate_cps", 0.0},
                   {"dead_time_ns", 0.0}};
  j["powers_mW"] = {9.0};
  j["duration_s"] = 2.0;
  j["seed"] = 91;
  j["long_hist"] = {{"w_ns", 2.3}, {"window_ns", 2000.0}, {"mode", "full"}};
  j["out_dir"] = out_dir;
  return j.dump(2);
}

}  // namespace

TEST_CASE("config loading is strict about keys and types") {
  const std::string dir = scratch_dir("cfg");
  write_file(dir + "/ok.json", base_config_json(dir + "/out"));
  const RunConfig cfg = load_run_config(dir + "/ok.json");
  CHECK(cfg.powers_mW.size() == 1);
  CHECK(cfg.durations_s.size() == 1);
  CHECK(cfg.detector.efficiency == Catch::Approx(0.004));
  CHECK(cfg.r21_per_ns == Catch::Approx(0.47));  // defaults fill the rest

  // round trip through the echo format preserves the digest
  write_file(dir + "/echo.json", run_config_to_json(cfg).dump(2));
  const RunConfig echoed = load_run_config(dir + "/echo.json");
  CHECK(config_digest_hex(echoed) == config_digest_hex(cfg));

  write_file(dir + "/unknown.json", "{\"powres_mW\": [1.0]}");
  CHECK_THROWS_AS(load_run_config(dir + "/unknown.json"), ConfigError);
  write_file(dir + "/type.json", "{\"powers_mW\": 3}");
  CHECK_THROWS_AS(load_run_config(dir + "/type.json"), ConfigError);
  write_file(dir + "/broken.json", "{\"powers_mW\": [1.0,");
  CHECK_THROWS_AS(load_run_config(dir + "/broken.json"), FormatError);
  CHECK_THROWS_AS(load_run_config(dir + "/missing.json"), IoError);

  write_file(dir + "/dup.json", "{\"powers_mW\": [1.0, 1.0]}");
  CHECK_THROWS_AS(load_run_config(dir + "/dup.json"), ConfigError);
}

TEST_CASE("per-power seeds and rates") {
  const std::string dir = scratch_dir("seeds");
  write_file(dir + "/c.json", base_config_json(dir + "/out"));
  RunConfig cfg = load_run_config(dir + "/c.json");

  CHECK(power_seed(cfg, 1.0) != power_seed(cfg, 3.0));
  const std::uint64_t s1 = power_seed(cfg, 1.0);
  cfg.seed += 1;
  CHECK(power_seed(cfg, 1.0) != s1);

  const RateParams r9 = rates_for(cfg, 9.0);
  CHECK(r9.r12 == Catch::Approx(0.4669893918162132).epsilon(1e-12));
  CHECK(r9.r21 == 0.47);
  CHECK(r9.r31 == Catch::Approx(1.71e-3 * (1.0 + 0.102 * 9.0)).epsilon(1e-12));

  cfg.r12_override_per_ns = 0.25;
  CHECK(rates_for(cfg, 9.0).r12 == 0.25);
}

TEST_CASE("cli simulate smoke run: tiny duration gives valid near-empty files") {
  const std::string dir = scratch_dir("smoke");
  nlohmann::json j = nlohmann::json::parse(base_config_json(dir + "/out"));
  j["duration_s"] = 0.001;
  write_file(dir + "/c.json", j.dump());

  REQUIRE(run_cli("simulate --config " + dir + "/c.json --power 9 --out " + dir + "/sim") == 0);
  const TimeTagStream s0 = read_stream(dir + "/sim/ch0.ptt1");
  const TimeTagStream s1 = read_stream(dir + "/sim/ch1.ptt1");
  CHECK(s0.duration_ps == 1'000'000'000ull);  // 1 ms
  CHECK(s1.duration_ps == 1'000'000'000ull);
  CHECK(s0.tags.size() < 20000);  // ~3.4k expected at these settings
  validate(s0);
  validate(s1);

  const auto meta = nlohmann::json::parse(slurp(dir + "/sim/meta.json"));
  CHECK(meta.at("counts").size() == 2);
  CHECK(meta.at("power_mW").get<double>() == 9.0);
}

TEST_CASE("cli exit codes: config, io, numeric") {
  const std::string dir = scratch_dir("exits");
  write_file(dir + "/bad_key.json", "{\"powres_mW\": [1.0]}");
  write_file(dir + "/bad_json.json", "{\"powers_mW\": [1.0,");
  write_file(dir + "/ok.json", base_config_json(dir + "/out"));

  CHECK(run_cli("simulate --config " + dir + "/bad_key.json --power 9") == 2);
  CHECK(run_cli("simulate --config " + dir + "/bad_json.json --power 9") == 3);   // corrupt file
  CHECK(run_cli("simulate --config " + dir + "/nope.json --power 9") == 3);       // missing file
  CHECK(run_cli("simulate --config " + dir + "/ok.json --power -1") == 2);        // bad value
  CHECK(run_cli("correlate " + dir + "/nope0.ptt1 " + dir + "/nope1.ptt1 --out " +
                dir + "/h.txt") == 3);
  CHECK(run_cli("frobnicate") == 2);  // unknown subcommand is a usage error
  CHECK(run_cli("--help") == 0);

  // truncated stream file -> format error
  write_file(dir + "/trunc.ptt1", "PTT1xx");
  CHECK(run_cli("correlate " + dir + "/trunc.ptt1 " + dir + "/trunc.ptt1 --out " +
                dir + "/h.txt") == 3);

  // all-empty histogram cannot be normalized -> numeric failure
  {
    StreamWriter w0(dir + "/e0.ptt1"), w1(dir + "/e1.ptt1");
    w0.finalize(1'000'000);
    w1.finalize(1'000'000);
  }
  REQUIRE(run_cli("correlate " + dir + "/e0.ptt1 " + dir + "/e1.ptt1 --out " + dir +
                  "/empty.txt") == 0);  // empty input is fine for a histogram
  const CoincidenceHistogram h = read_histogram(dir + "/empty.txt");
  std::uint64_t total = 0;
  for (auto c : h.counts) total += c;
  CHECK(total == 0);
  CHECK(run_cli("fit-short " + dir + "/empty.txt") == 4);
}

TEST_CASE("pipeline: single power degrades to per-power fits") {
  const std::string dir = scratch_dir("single");
  write_file(dir + "/c.json", base_config_json(dir + "/out"));

  const RunConfig cfg = load_run_config(dir + "/c.json");
  const PipelineReport rep = run_pipeline(cfg);
  REQUIRE(rep.per_power.size() == 1);
  CHECK(rep.per_power[0].short_fit.converged);
  CHECK(rep.per_power[0].long_fit.converged);
  CHECK_FALSE(rep.lambda1_fit.has_value());
  CHECK_FALSE(rep.lambda2_fit.has_value());
  CHECK_FALSE(rep.saturation_fit.has_value());

  CHECK(fs::exists(dir + "/out/p9/fit_short.txt"));
  CHECK(fs::exists(dir + "/out/report.json"));
  CHECK_FALSE(fs::exists(dir + "/out/fit_lambda1_vs_power.txt"));

  const auto jr = nlohmann::json::parse(slurp(dir + "/out/report.json"));
  CHECK(jr.contains("per_power"));
  CHECK_FALSE(jr.contains("lambda1_vs_power"));
  CHECK(jr.at("config_digest").get<std::string>() == config_digest_hex(cfg));
}

TEST_CASE("pipeline artifacts feed the standalone commands (composability)") {
  const std::string dir = scratch_dir("compose");
  write_file(dir + "/c.json", base_config_json(dir + "/out"));
  REQUIRE(run_cli("pipeline --config " + dir + "/c.json") == 0);

  // re-correlate the emitted tag files with the same settings: byte-identical
  // histogram (modulo nothing: text format is deterministic)
  REQUIRE(run_cli("correlate " + dir + "/out/p9/ch0.ptt1 " + dir + "/out/p9/ch1.ptt1" +
                  " --bin 0.17 --window 20 --out " + dir + "/redo_short.txt") == 0);
  CHECK(slurp(dir + "/redo_short.txt") == slurp(dir + "/out/p9/hist_short.txt"));

  REQUIRE(run_cli("correlate " + dir + "/out/p9/ch0.ptt1 " + dir + "/out/p9/ch1.ptt1" +
                  " --bin 2.3 --window 2000 --out " + dir + "/redo_long.txt") == 0);
  CHECK(slurp(dir + "/redo_long.txt") == slurp(dir + "/out/p9/hist_long.txt"));

  // standalone fit of the emitted histogram reproduces the pipeline's numbers
  // (first line carries the report title, which names its input differently)
  REQUIRE(run_cli("fit-short " + dir + "/out/p9/hist_short.txt --irf-fwhm 1.2 --out " +
                  dir + "/refit.txt") == 0);
  auto after_title = [](const std::string& s) { return s.substr(s.find('\n') + 1); };
  CHECK(after_title(slurp(dir + "/refit.txt")) ==
        after_title(slurp(dir + "/out/p9/fit_short.txt")));
}

TEST_CASE("pipeline determinism: same config and seed give byte-identical trees") {
  const std::string dir = scratch_dir("determ");
  write_file(dir + "/c.json", base_config_json(dir + "/out"));

  REQUIRE(run_cli("pipeline --config " + dir + "/c.json") == 0);
  const auto first = snapshot_tree(dir + "/out");
  REQUIRE(run_cli("pipeline --config " + dir + "/c.json") == 0);
  const auto second = snapshot_tree(dir + "/out");
  REQUIRE(first.size() == second.size());
  CHECK(first == second);

  // a different seed must change the data files
  REQUIRE(run_cli("pipeline --config " + dir + "/c.json --seed 92") == 0);
  const auto reseeded = snapshot_tree(dir + "/out");
  CHECK(reseeded.at("p9/ch0.ptt1") != first.at("p9/ch0.ptt1"));
}

TEST_CASE("pipeline under a thread cap matches the serial run") {
  const std::string dir = scratch_dir("threads");
  nlohmann::json j = nlohmann::json::parse(base_config_json(dir + "/out"));
  j["powers_mW"] = {5.0, 9.0};
  j["duration_s"] = 1.0;
  write_file(dir + "/c.json", j.dump());

  ::setenv("EMITTERLAB_THREADS", "1", 1);
  REQUIRE(run_cli("pipeline --config " + dir + "/c.json") == 0);
  const auto serial = snapshot_tree(dir + "/out");

  ::setenv("EMITTERLAB_THREADS", "2", 1);
  REQUIRE(run_cli("pipeline --config " + dir + "/c.json") == 0);
  const auto threaded = snapshot_tree(dir + "/out");
  ::unsetenv("EMITTERLAB_THREADS");

  CHECK(serial == threaded);

  ::setenv("EMITTERLAB_THREADS", "zero", 1);
  CHECK(run_cli("pipeline --config " + dir + "/c.json") == 2);
  ::unsetenv("EMITTERLAB_THREADS");
}

TEST_CASE("pipeline with beta = 0 recovers a deshelving slope consistent with 0") {
  const std::string dir = scratch_dir("beta0");
  nlohmann::json j = nlohmann::json::parse(base_config_json(dir + "/out"));
  j["deshelving"] = {{"r31_0_per_us", 1.71}, {"beta_per_mW", 0.0}};
  j["detector"]["efficiency"] = 0.012;
  j["powers_mW"] = {1.0, 3.0, 5.0, 7.0, 9.0};
  j["durations_s"] = {30.0, 12.0, 8.0, 6.0, 5.0};
  j["seed"] = 20260819;
  write_file(dir + "/c.json", j.dump());

  const RunConfig cfg = load_run_config(dir + "/c.json");
  const PipelineReport rep = run_pipeline(cfg);
  REQUIRE(rep.lambda2_fit.has_value());
  const double beta = rep.lambda2_fit->value("beta");
  const double beta_err = rep.lambda2_fit->stderr_of("beta");
  INFO("beta = " << beta << " +- " << beta_err);
  CHECK(std::abs(beta) < 3.0 * beta_err);

  // the full report exists and carries every stage
  const auto jr = nlohmann::json::parse(slurp(dir + "/out/report.json"));
  CHECK(jr.contains("lambda1_vs_power"));
  CHECK(jr.contains("lambda2_vs_power"));
  CHECK(jr.contains("saturation"));
  CHECK(jr.contains("quantum_yield"));
}
