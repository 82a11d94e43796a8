#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpdc/hamiltonian_mp.hpp"

namespace mpdc {

/// Everything needed to reproduce one solver run. Presets fill in the test
/// problems; any field can then be overridden.
struct RunConfig {
  /// lq | test1 | test2 | test2_d100 | test3 | custom
  std::string preset = "lq";
  int dim = 2;
  double horizon = 1.0;
  double control_cost = 0.5;

  double gamma = 0.0;
  double interaction_c = 0.1;
  PairScheme pairs = PairScheme::kAllPairs;
  int interaction_subsample = 1024;

  /// none | cylinder | double_wedge
  std::string obstacle = "none";
  double obstacle_radius = 0.5;
  double wedge_scale = 50.0;
  double wedge_slope = 5.0;
  double wedge_offset = 0.1;
  double eps_b = 0.1;

  /// gaussian | trunc_exp
  std::string initial = "gaussian";
  Vector initial_mean;  // gaussian, d entries
  double initial_variance = 1.0;
  double trunc_shift = 0.5;
  Vector tail_mean;  // trunc_exp, d - 1 entries
  double tail_variance = 0.25;

  Vector target;
  double terminal_scale = 0.5;

  SolverConfig solver;
  /// Master seed; training, evaluation and initialization seeds derive from it.
  std::uint64_t seed = 1;
  std::string output = "runs/lq";
  std::vector<std::pair<int, int>> plot_pairs{{0, 1}};

  ControlProblem problem() const;
  /// Copies the seeds into `solver`.
  SolverConfig solver_config() const;
  void validate() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
};

/// Defaults of a preset at dimension `dim` (0 keeps the preset's own).
RunConfig preset_config(const std::string& preset, int dim = 0);

/// Sets a dotted key in a JSON tree from "key=value"; the value is parsed as
/// JSON when possible and kept as a string otherwise.
void apply_override(nlohmann::json& tree, const std::string& assignment);

/// Copies `user` over `defaults`, recursing into objects. Keys absent from
/// the defaults are rejected with their dotted path.
nlohmann::json merge_strict(const nlohmann::json& defaults, const nlohmann::json& user,
                            const std::string& path = "");

/// Parses a JSON config file; syntax errors report line and column.
nlohmann::json read_config_file(const std::filesystem::path& path);

/// Preset defaults for the requested preset and dimension, then the user
/// tree, then the overrides, then the seed (flag before MPDC_SEED).
RunConfig resolve_config(nlohmann::json user, const std::vector<std::string>& overrides,
                         std::optional<std::uint64_t> seed = std::nullopt);

/// Lowercase hex SHA-1 of "blob <size>\0<content>".
std::string git_blob_hash(const std::string& content);

/// Metrics of the final control on the evaluation ensemble.
nlohmann::json evaluate_run(const RunConfig& config, const SolverState& state, const Trajectory& eval);

/// CSV with header t,particle_id,x_0,...,x_{d-1}; one row per particle per
/// checkpoint.
void write_trajectory_csv(const std::filesystem::path& path, const Trajectory& trajectory);

struct CheckpointCloud {
  double t = 0.0;
  Matrix points;  // d x N
};

std::vector<CheckpointCloud> read_trajectory_csv(const std::filesystem::path& path);

/// Scatter of coordinates (a, b) per checkpoint, coloured red, orange,
/// green, blue, purple in order, with the obstacle outline when (a, b) is
/// (0, 1).
std::string scatter_svg(const std::vector<CheckpointCloud>& clouds, std::pair<int, int> pair,
                        const RunConfig& config);

/// One SVG per pair from a finished run directory. Throws ValidationError
/// when the trajectory or a checkpoint listed in the manifest is missing.
std::vector<std::filesystem::path> export_plots(const std::filesystem::path& run_dir,
                                                const std::vector<std::pair<int, int>>& pairs);

struct RunOutcome {
  SolverState state;
  nlohmann::json manifest;
};

/// Runs the solver and, when `write_artifacts` is set, writes trajectory.csv,
/// control.json, plot SVGs and (last, atomically) manifest.json under
/// config.output. Progress lines go to `log` when given.
RunOutcome run_experiment(const RunConfig& config, bool write_artifacts = true, std::ostream* log = nullptr);

/// Writes `content` to a temporary sibling and renames it over `path`.
void write_atomically(const std::filesystem::path& path, const std::string& content);

}  // namespace mpdc
