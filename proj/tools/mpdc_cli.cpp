// mpdc: run, verify and plot density-control experiments.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mpdc/errors.hpp"
#include "mpdc/experiments.hpp"
#include "mpdc/verification.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kNumerical = 2;
constexpr int kVerifyFailed = 3;

using nlohmann::json;

// "0:1,2:3" -> {(0,1), (2,3)}; the empty string is an empty list.
std::vector<std::pair<int, int>> parse_pairs(const std::string& text) {
  std::vector<std::pair<int, int>> pairs;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find(',', start);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(start, end - start);
    const auto colon = item.find(':');
    try {
      if (colon == std::string::npos) throw std::invalid_argument(item);
      std::size_t used_a = 0;
      std::size_t used_b = 0;
      const int a = std::stoi(item.substr(0, colon), &used_a);
      const int b = std::stoi(item.substr(colon + 1), &used_b);
      if (used_a != colon || used_b != item.size() - colon - 1) throw std::invalid_argument(item);
      pairs.emplace_back(a, b);
    } catch (const std::logic_error&) {
      throw mpdc::ValidationError("--pairs: expected a:b[,c:d...], got '" + item + "'");
    }
    start = end + 1;
  }
  return pairs;
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides, const std::string& out,
            std::optional<std::uint64_t> seed, bool quiet) {
  json user = config_path.empty() ? json::object() : mpdc::read_config_file(config_path);
  mpdc::RunConfig config = mpdc::resolve_config(user, overrides, seed);
  if (!out.empty()) config.output = out;
  config.validate();
  std::cerr << "mpdc run: preset " << config.preset << ", d = " << config.dim << ", seed " << config.seed
            << ", output " << config.output << '\n';
  const mpdc::RunOutcome outcome = mpdc::run_experiment(config, true, quiet ? nullptr : &std::cerr);
  const json& m = outcome.manifest.at("metrics");
  std::cout << m.dump(2) << '\n';
  if (!outcome.state.failure.empty()) {
    std::cerr << "mpdc run: " << outcome.state.failure << '\n';
    return kNumerical;
  }
  return kOk;
}

int cmd_verify(const std::string& suite, const std::vector<std::string>& overrides, const std::string& out,
               std::optional<std::uint64_t> seed) {
  mpdc::VerifyOptions options;
  options.suite = suite;
  const json defaults = {{"seed", options.seed},
                         {"perturbation_cells", options.perturbation_cells},
                         {"hjb_particles", options.hjb_particles},
                         {"derivative_trials", options.derivative_trials}};
  json user = json::object();
  for (const std::string& o : overrides) mpdc::apply_override(user, o);
  const json merged = mpdc::merge_strict(defaults, user);
  for (const char* key : {"seed", "perturbation_cells", "hjb_particles", "derivative_trials"}) {
    if (!merged.at(key).is_number_integer() || merged.at(key).get<std::int64_t>() < 0) {
      throw mpdc::ValidationError(std::string(key) + ": expected a nonnegative integer");
    }
  }
  options.seed = merged.at("seed").get<std::uint64_t>();
  options.perturbation_cells = merged.at("perturbation_cells").get<int>();
  options.hjb_particles = merged.at("hjb_particles").get<int>();
  options.derivative_trials = merged.at("derivative_trials").get<int>();
  if (seed) {
    options.seed = *seed;
  } else if (const char* env = std::getenv("MPDC_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    options.seed = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw mpdc::ValidationError("MPDC_SEED: expected a nonnegative integer");
  }
  const json report = mpdc::run_verification(options);
  const std::string text = report.dump(2) + "\n";
  std::cout << text;
  if (!out.empty()) mpdc::write_atomically(std::filesystem::path(out) / "verify.json", text);
  const bool passed = report.at("passed").get<bool>();
  if (!passed) {
    for (const json& c : report.at("checks")) {
      if (!c.at("passed").get<bool>()) std::cerr << "mpdc verify: FAILED " << c.at("name").get<std::string>() << '\n';
    }
  }
  return passed ? kOk : kVerifyFailed;
}

int cmd_plot(const std::string& run_dir, const std::optional<std::string>& pairs_text) {
  std::vector<std::pair<int, int>> pairs;
  if (pairs_text) {
    pairs = parse_pairs(*pairs_text);
  } else {
    const std::filesystem::path manifest = std::filesystem::path(run_dir) / "manifest.json";
    const json m = mpdc::read_config_file(manifest);
    if (!m.contains("config")) throw mpdc::ValidationError(manifest.string() + ": no config");
    pairs = mpdc::RunConfig::from_json(m.at("config")).plot_pairs;
  }
  for (const auto& p : mpdc::export_plots(run_dir, pairs)) std::cout << p.string() << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimal density control by the maximum principle"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  CLI::App* run = app.add_subcommand("run", "Solve a control problem and write its artifacts");
  run->add_option("--config", config_path, "JSON config file")->check(CLI::ExistingFile);
  run->add_option("--set", overrides, "Override a config key, e.g. --set solver.particles=1024");
  run->add_option("--out", out, "Output directory (overrides the config)");
  run->add_option("--seed", seed, "Master seed (overrides MPDC_SEED and the config)");
  run->add_flag("--quiet", quiet, "Do not print per-iteration progress");

  std::string suite = "all";
  CLI::App* verify = app.add_subcommand("verify", "Run the closed-form verification checks");
  verify->add_option("--suite", suite, "all | lq | perturbation | hjb | initial-deriv")
      ->check(CLI::IsMember({"all", "lq", "perturbation", "hjb", "initial-deriv"}));
  verify->add_option("--set", overrides, "seed, perturbation_cells, hjb_particles or derivative_trials");
  verify->add_option("--out", out, "Also write verify.json into this directory");
  verify->add_option("--seed", seed, "Seed of the random test fields");

  std::string run_dir;
  std::optional<std::string> pairs_text;
  CLI::App* plot = app.add_subcommand("plot", "Write scatter SVGs for a finished run");
  plot->add_option("--run", run_dir, "Run directory")->required();
  plot->add_option("--pairs", pairs_text, "Coordinate pairs a:b[,c:d...]; default from the run config");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*run) return cmd_run(config_path, overrides, out, seed, quiet);
    if (*verify) return cmd_verify(suite, overrides, out, seed);
    return cmd_plot(run_dir, pairs_text);
  } catch (const mpdc::ValidationError& e) {
    std::cerr << "mpdc: " << e.what() << '\n';
    return kInvalid;
  } catch (const mpdc::NumericalError& e) {
    std::cerr << "mpdc: numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "mpdc: " << e.what() << '\n';
    return kInvalid;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "mpdc: " << e.what() << '\n';
    return kInvalid;
  }
}
