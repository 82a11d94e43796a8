#include "mpdc/experiments.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include "mpdc/dynamics.hpp"
#include "mpdc/errors.hpp"

namespace mpdc {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json vector_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

// Typed access to a merged config tree with dotted-path diagnostics.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  const json& at(const std::string& key) const {
    if (!j_.is_object() || !j_.contains(key)) throw ValidationError(where(key) + ": missing");
    return j_.at(key);
  }
  Reader sub(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_object()) throw ValidationError(where(key) + ": expected an object");
    return Reader(v, where(key));
  }
  double number(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_number()) throw ValidationError(where(key) + ": expected a number");
    return v.get<double>();
  }
  std::optional<double> optional_number(const std::string& key) const {
    if (at(key).is_null()) return std::nullopt;
    return number(key);
  }
  int integer(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_number_integer()) throw ValidationError(where(key) + ": expected an integer");
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
      throw ValidationError(where(key) + ": out of range");
    }
    return static_cast<int>(x);
  }
  std::uint64_t unsigned_integer(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
      throw ValidationError(where(key) + ": expected a nonnegative integer");
    }
    return v.get<std::uint64_t>();
  }
  bool boolean(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_boolean()) throw ValidationError(where(key) + ": expected true or false");
    return v.get<bool>();
  }
  std::string string(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_string()) throw ValidationError(where(key) + ": expected a string");
    return v.get<std::string>();
  }
  std::vector<double> numbers(const std::string& key) const {
    const json& v = at(key);
    if (!v.is_array()) throw ValidationError(where(key) + ": expected an array of numbers");
    std::vector<double> out;
    for (const json& e : v) {
      if (!e.is_number()) throw ValidationError(where(key) + ": expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }
  Vector vector(const std::string& key) const {
    const std::vector<double> v = numbers(key);
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
};

std::string activation_name(nn::Activation a) {
  switch (a) {
    case nn::Activation::kTanh:
      return "tanh";
    case nn::Activation::kRelu:
      return "relu";
    default:
      return "softplus";
  }
}

nn::Activation parse_activation(const std::string& s, const std::string& where) {
  if (s == "tanh") return nn::Activation::kTanh;
  if (s == "softplus") return nn::Activation::kSoftplus;
  if (s == "relu") return nn::Activation::kRelu;
  throw ValidationError(where + ": unknown activation '" + s + "' (tanh, softplus, relu)");
}

const std::set<std::string> kPresets{"lq", "test1", "test2", "test2_d100", "test3", "custom"};

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// ----------------------------------------------------------------- config

ControlProblem RunConfig::problem() const {
  ControlProblem p;
  p.horizon = horizon;
  p.reward.running.push_back(ControlEnergy{control_cost});
  if (gamma != 0.0) p.reward.running.push_back(Interaction{gamma, interaction_c});
  if (obstacle == "cylinder") {
    p.reward.running.push_back(ObstaclePenalty{ObstacleShape::cylinder(obstacle_radius), eps_b});
  } else if (obstacle == "double_wedge") {
    ObstacleShape s = ObstacleShape::double_wedge();
    s.scale = wedge_scale;
    s.slope = wedge_slope;
    s.offset = wedge_offset;
    p.reward.running.push_back(ObstaclePenalty{s, eps_b});
  }
  p.reward.terminal.target = target;
  p.reward.terminal.scale = terminal_scale;
  p.reward.pairs = pairs;
  p.reward.pair_seed = seed;
  p.reward.interaction_subsample = interaction_subsample;
  if (initial == "trunc_exp") {
    p.initial = TruncExpGaussianDensity{dim, trunc_shift, tail_mean, tail_variance};
  } else {
    p.initial = GaussianDensity{initial_mean, initial_variance};
  }
  return p;
}

SolverConfig RunConfig::solver_config() const {
  SolverConfig s = solver;
  s.train_seed = seed;
  s.eval_seed = seed + 1;
  s.init_seed = seed + 2;
  return s;
}

void RunConfig::validate() const {
  if (!kPresets.contains(preset)) throw ValidationError("preset: unknown preset '" + preset + "'");
  if (dim < 1) throw ValidationError("problem.dim: must be at least 1");
  if (!(control_cost > 0.0)) throw ValidationError("problem.control_cost: must be positive");
  if (!(interaction_c > 0.0)) throw ValidationError("problem.interaction_c: must be positive");
  if (gamma < 0.0) throw ValidationError("problem.gamma: must be nonnegative");
  if (interaction_subsample < 1) throw ValidationError("problem.interaction_subsample: must be positive");
  if (obstacle != "none" && obstacle != "cylinder" && obstacle != "double_wedge") {
    throw ValidationError("problem.obstacle.kind: expected none, cylinder or double_wedge");
  }
  if (obstacle != "none" && dim < 2) throw ValidationError("problem.obstacle.kind: obstacles need d >= 2");
  if (!(eps_b > 0.0)) throw ValidationError("problem.obstacle.eps_b: must be positive");
  if (!(obstacle_radius > 0.0)) throw ValidationError("problem.obstacle.radius: must be positive");
  if (initial == "gaussian") {
    if (initial_mean.size() != dim) throw ValidationError("problem.initial.mean: needs d entries");
    if (!(initial_variance > 0.0)) throw ValidationError("problem.initial.variance: must be positive");
  } else if (initial == "trunc_exp") {
    if (dim < 2) throw ValidationError("problem.initial.kind: trunc_exp needs d >= 2");
    if (tail_mean.size() != dim - 1) throw ValidationError("problem.initial.tail_mean: needs d - 1 entries");
    if (!(tail_variance > 0.0)) throw ValidationError("problem.initial.tail_variance: must be positive");
  } else {
    throw ValidationError("problem.initial.kind: expected gaussian or trunc_exp");
  }
  if (target.size() != dim) throw ValidationError("problem.target: needs d entries");
  if (!(terminal_scale >= 0.0)) throw ValidationError("problem.terminal_scale: must be nonnegative");
  if (output.empty()) throw ValidationError("output: must not be empty");
  for (const auto& [a, b] : plot_pairs) {
    if (a < 0 || b < 0 || a >= dim || b >= dim || a == b) {
      throw ValidationError("plot_pairs: coordinates must be distinct and in [0, d)");
    }
  }
  problem().validate();
  solver_config().validate();
}

json RunConfig::to_json() const {
  const SolverConfig& s = solver;
  json pairs_json = json::array();
  for (const auto& [a, b] : plot_pairs) pairs_json.push_back({a, b});
  return {
      {"preset", preset},
      {"seed", seed},
      {"output", output},
      {"plot_pairs", pairs_json},
      {"problem",
       {{"dim", dim},
        {"horizon", horizon},
        {"control_cost", control_cost},
        {"gamma", gamma},
        {"interaction_c", interaction_c},
        {"pairs", pairs == PairScheme::kAllPairs ? "all" : "shuffle"},
        {"interaction_subsample", interaction_subsample},
        {"obstacle",
         {{"kind", obstacle},
          {"radius", obstacle_radius},
          {"wedge_scale", wedge_scale},
          {"wedge_slope", wedge_slope},
          {"wedge_offset", wedge_offset},
          {"eps_b", eps_b}}},
        {"initial",
         {{"kind", initial},
          {"mean", vector_json(initial_mean)},
          {"variance", initial_variance},
          {"shift", trunc_shift},
          {"tail_mean", vector_json(tail_mean)},
          {"tail_variance", tail_variance}}},
        {"target", vector_json(target)},
        {"terminal_scale", terminal_scale}}},
      {"solver",
       {{"max_iterations", s.max_iterations},
        {"tolerance", s.tolerance},
        {"step_size", s.step_size},
        {"step_schedule", s.step_schedule},
        {"step_min", s.step_min},
        {"step_max", s.step_max},
        {"control_steps", s.control_steps},
        {"control_learning_rate", s.control_learning_rate},
        {"step_reference", s.step_reference},
        {"adam_epsilon", s.adam_epsilon},
        {"persistent_optimizer", s.persistent_optimizer},
        {"control_batch", s.control_batch},
        {"plateau_halvings", s.plateau_halvings},
        {"architecture",
         {{"width", s.control_architecture.width},
          {"hidden_layers", s.control_architecture.hidden_layers},
          {"activation", activation_name(s.control_architecture.activation)},
          {"residual", s.control_architecture.residual}}},
        {"lipschitz_cap", s.lipschitz_cap ? json(*s.lipschitz_cap) : json()},
        {"particles", s.particles},
        {"eval_particles", s.eval_particles},
        {"dt", s.dt},
        {"checkpoints", s.checkpoints},
        {"backend", s.backend == AdjointBackend::kCharacteristics ? "characteristics" : "collocation"},
        {"adjoint_dt", s.adjoint_dt},
        {"collocation",
         {{"width", s.collocation.width},
          {"hidden_layers", s.collocation.hidden_layers},
          {"batch", s.collocation.batch},
          {"steps", s.collocation.steps},
          {"learning_rate", s.collocation.learning_rate},
          {"importance_weights", s.collocation.importance_weights},
          {"residual_threshold", s.collocation.residual_threshold}}},
        {"collocation_first_steps", s.collocation_first_steps},
        {"residual_probes", s.residual_probes}}}};
}

RunConfig RunConfig::from_json(const json& j) {
  const Reader root(j, "");
  RunConfig c;
  c.preset = root.string("preset");
  c.seed = root.unsigned_integer("seed");
  c.output = root.string("output");
  c.plot_pairs.clear();
  const json& pp = root.at("plot_pairs");
  if (!pp.is_array()) throw ValidationError("plot_pairs: expected an array of [a, b] pairs");
  for (const json& p : pp) {
    if (!p.is_array() || p.size() != 2 || !p[0].is_number_integer() || !p[1].is_number_integer()) {
      throw ValidationError("plot_pairs: expected an array of [a, b] integer pairs");
    }
    c.plot_pairs.emplace_back(p[0].get<int>(), p[1].get<int>());
  }

  const Reader p = root.sub("problem");
  c.dim = p.integer("dim");
  c.horizon = p.number("horizon");
  c.control_cost = p.number("control_cost");
  c.gamma = p.number("gamma");
  c.interaction_c = p.number("interaction_c");
  const std::string scheme = p.string("pairs");
  if (scheme == "all") {
    c.pairs = PairScheme::kAllPairs;
  } else if (scheme == "shuffle") {
    c.pairs = PairScheme::kShuffle;
  } else {
    throw ValidationError("problem.pairs: expected all or shuffle");
  }
  c.interaction_subsample = p.integer("interaction_subsample");
  const Reader o = p.sub("obstacle");
  c.obstacle = o.string("kind");
  c.obstacle_radius = o.number("radius");
  c.wedge_scale = o.number("wedge_scale");
  c.wedge_slope = o.number("wedge_slope");
  c.wedge_offset = o.number("wedge_offset");
  c.eps_b = o.number("eps_b");
  const Reader i = p.sub("initial");
  c.initial = i.string("kind");
  c.initial_mean = i.vector("mean");
  c.initial_variance = i.number("variance");
  c.trunc_shift = i.number("shift");
  c.tail_mean = i.vector("tail_mean");
  c.tail_variance = i.number("tail_variance");
  c.target = p.vector("target");
  c.terminal_scale = p.number("terminal_scale");

  const Reader s = root.sub("solver");
  SolverConfig& sc = c.solver;
  sc.max_iterations = s.integer("max_iterations");
  sc.tolerance = s.number("tolerance");
  sc.step_size = s.number("step_size");
  sc.step_schedule = s.numbers("step_schedule");
  sc.step_min = s.number("step_min");
  sc.step_max = s.number("step_max");
  sc.control_steps = s.integer("control_steps");
  sc.control_learning_rate = s.number("control_learning_rate");
  sc.step_reference = s.number("step_reference");
  sc.adam_epsilon = s.number("adam_epsilon");
  sc.persistent_optimizer = s.boolean("persistent_optimizer");
  sc.control_batch = s.integer("control_batch");
  sc.plateau_halvings = s.integer("plateau_halvings");
  const Reader a = s.sub("architecture");
  sc.control_architecture.width = a.integer("width");
  sc.control_architecture.hidden_layers = a.integer("hidden_layers");
  sc.control_architecture.activation = parse_activation(a.string("activation"), a.where("activation"));
  sc.control_architecture.residual = a.boolean("residual");
  sc.lipschitz_cap = s.optional_number("lipschitz_cap");
  sc.particles = s.integer("particles");
  sc.eval_particles = s.integer("eval_particles");
  sc.dt = s.number("dt");
  sc.checkpoints = s.numbers("checkpoints");
  const std::string backend = s.string("backend");
  if (backend == "characteristics") {
    sc.backend = AdjointBackend::kCharacteristics;
  } else if (backend == "collocation") {
    sc.backend = AdjointBackend::kCollocation;
  } else {
    throw ValidationError("solver.backend: expected characteristics or collocation");
  }
  sc.adjoint_dt = s.number("adjoint_dt");
  const Reader col = s.sub("collocation");
  sc.collocation.width = col.integer("width");
  sc.collocation.hidden_layers = col.integer("hidden_layers");
  sc.collocation.batch = col.integer("batch");
  sc.collocation.steps = col.integer("steps");
  sc.collocation.learning_rate = col.number("learning_rate");
  sc.collocation.importance_weights = col.boolean("importance_weights");
  sc.collocation.residual_threshold = col.number("residual_threshold");
  sc.collocation_first_steps = s.integer("collocation_first_steps");
  sc.residual_probes = s.integer("residual_probes");
  return c;
}

RunConfig preset_config(const std::string& preset, int dim) {
  if (!kPresets.contains(preset)) throw ValidationError("preset: unknown preset '" + preset + "'");
  if (dim < 0) throw ValidationError("problem.dim: must be at least 1");
  RunConfig c;
  c.preset = preset;
  c.output = "runs/" + preset;
  const auto axis = [](int d, double first, double second) {
    Vector v = Vector::Zero(d);
    v[0] = first;
    if (d > 1) v[1] = second;
    return v;
  };

  if (preset == "lq" || preset == "custom") {
    c.dim = dim > 0 ? dim : 2;
    c.initial_mean = Vector::Zero(c.dim);
    c.target = Vector::Zero(c.dim);
    c.terminal_scale = 0.5;
    if (preset == "lq") {
      c.solver.max_iterations = 50;
      c.solver.tolerance = 1e-7;
      c.solver.control_steps = 40;
      c.solver.control_batch = 16384;
    }
  } else if (preset == "test1") {
    c.dim = dim > 0 ? dim : 8;
    c.gamma = 5.0;
    c.initial_mean = Vector::Constant(c.dim, -2.0);
    c.initial_variance = 0.5;
    c.target = Vector::Zero(c.dim);
    c.terminal_scale = 0.5;
    c.plot_pairs.clear();
    for (int k = 0; k + 1 < c.dim && k < 8; k += 2) c.plot_pairs.emplace_back(k, k + 1);
    c.solver.particles = 512;
    c.solver.eval_particles = 512;
    c.solver.max_iterations = 10;
    c.solver.tolerance = 1e-4;
    c.solver.control_steps = 40;
  } else if (preset == "test2" || preset == "test2_d100") {
    c.dim = dim > 0 ? dim : (preset == "test2" ? 30 : 100);
    if (c.dim < 2) throw ValidationError("problem.dim: " + preset + " needs d >= 2");
    c.obstacle = "cylinder";
    c.initial = "trunc_exp";
    c.initial_mean = Vector::Zero(c.dim);
    c.tail_mean = axis(c.dim - 1, 0.5, 0.0);
    c.target = axis(c.dim, 1.0, -0.5);
    c.terminal_scale = 1.0;
    c.solver.control_architecture.width = 64;
    c.solver.control_steps = 40;
    c.solver.control_batch = 8192;
    c.solver.residual_probes = 0;
    c.solver.tolerance = 1e-5;
    if (preset == "test2") {
      c.solver.particles = 2048;
      c.solver.eval_particles = 2048;
      c.solver.max_iterations = 45;
    } else {
      c.solver.particles = 256;
      c.solver.eval_particles = 512;
      c.solver.max_iterations = 5;
      c.solver.control_steps = 20;
      c.solver.control_batch = 4096;
    }
  } else if (preset == "test3") {
    c.dim = dim > 0 ? dim : 30;
    if (c.dim < 2) throw ValidationError("problem.dim: test3 needs d >= 2");
    c.gamma = 1.0;
    c.obstacle = "double_wedge";
    c.initial_mean = axis(c.dim, -2.0, 0.0);
    c.initial_variance = 0.5;
    c.target = axis(c.dim, 2.0, 0.0);
    c.terminal_scale = 1.0;
    c.solver.particles = 1024;
    c.solver.eval_particles = 1024;
    c.solver.max_iterations = 20;
    c.solver.tolerance = 1e-5;
    c.solver.control_architecture.width = 64;
    c.solver.control_steps = 40;
    c.solver.control_batch = 8192;
    c.solver.residual_probes = 0;
  }
  if (c.tail_mean.size() == 0) c.tail_mean = Vector::Zero(std::max(0, c.dim - 1));
  return c;
}

void apply_override(json& tree, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ValidationError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  if (!tree.is_object()) tree = json::object();
  json* node = &tree;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ValidationError("--set: empty path component in '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    json& next = (*node)[part];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ValidationError("--set: '" + key.substr(0, dot) + "' is not an object");
    node = &next;
    start = dot + 1;
  }
}

json merge_strict(const json& defaults, const json& user, const std::string& path) {
  if (!user.is_object()) {
    throw ValidationError((path.empty() ? std::string("config") : path) + ": expected an object");
  }
  json out = defaults;
  for (const auto& [key, value] : user.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    if (!defaults.contains(key)) throw ValidationError(where + ": unknown key");
    if (defaults.at(key).is_object()) {
      out[key] = merge_strict(defaults.at(key), value, where);
    } else {
      out[key] = value;
    }
  }
  return out;
}

json read_config_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1;
    std::size_t col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ValidationError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) +
                          ": invalid JSON");
  }
}

RunConfig resolve_config(json user, const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed) {
  if (user.is_null()) user = json::object();
  if (!user.is_object()) throw ValidationError("config: expected an object at the top level");
  for (const std::string& o : overrides) apply_override(user, o);

  std::string preset = "lq";
  if (user.contains("preset")) {
    if (!user["preset"].is_string()) throw ValidationError("preset: expected a string");
    preset = user["preset"].get<std::string>();
  }
  int dim = 0;
  if (user.contains("problem") && user["problem"].is_object() && user["problem"].contains("dim")) {
    const json& d = user["problem"]["dim"];
    if (!d.is_number_integer() || d.get<int>() < 1) throw ValidationError("problem.dim: expected a positive integer");
    dim = d.get<int>();
  }
  RunConfig c = RunConfig::from_json(merge_strict(preset_config(preset, dim).to_json(), user));
  if (seed) {
    c.seed = *seed;
  } else if (const char* env = std::getenv("MPDC_SEED"); env != nullptr && *env != '\0') {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (*end != '\0' || env[0] == '-') throw ValidationError("MPDC_SEED: expected a nonnegative integer");
    c.seed = v;
  }
  c.validate();
  return c;
}

std::string git_blob_hash(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw NumericalError("SHA-1 digest failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

// ----------------------------------------------------------------- metrics

namespace {

double min_pairwise_distance(const Matrix& x) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < x.cols(); ++i) {
    for (Eigen::Index j = i + 1; j < x.cols(); ++j) best = std::min(best, (x.col(i) - x.col(j)).squaredNorm());
  }
  return std::sqrt(best);
}

bool is_lq(const RunConfig& c) {
  return c.gamma == 0.0 && c.obstacle == "none" && c.initial == "gaussian" && c.control_cost == 0.5 &&
         c.terminal_scale == 0.5 && c.target.isZero(0.0);
}

}  // namespace

json evaluate_run(const RunConfig& config, const SolverState& state, const Trajectory& eval) {
  json m;
  if (!state.rewards.empty()) {
    m["final_reward"] = state.rewards.back();
    m["final_reward_se"] = state.reward_se.back();
  }
  bool monotone = true;
  for (std::size_t k = 1; k < state.rewards.size(); ++k) {
    monotone = monotone && state.rewards[k] >= state.rewards[k - 1] - 2.0 * state.reward_se[k - 1];
  }
  m["monotone_within_2se"] = monotone;
  m["iterations"] = state.k;
  m["converged"] = state.converged;

  const ControlProblem problem = config.problem();
  std::optional<ObstacleShape> shape;
  for (const RunningTerm& t : problem.reward.running) {
    if (const auto* o = std::get_if<ObstaclePenalty>(&t)) shape = o->shape;
  }
  json cps = json::array();
  double max_inside = 0.0;
  const std::vector<double> times = eval.grid.checkpoint_times();
  for (std::size_t c = 0; c < times.size(); ++c) {
    const ParticleEnsemble e = eval.at_checkpoint(static_cast<int>(c));
    json entry = {{"t", times[c]}, {"mean", vector_json(weighted_mean(e))}};
    if (e.size() <= 4096) entry["min_pairwise_distance"] = min_pairwise_distance(e.points);
    if (shape) {
      double inside = 0.0;
      for (int i = 0; i < e.size(); ++i) {
        if (shape->inside(e.points.col(i))) inside += e.weights[i];
      }
      entry["inside_fraction"] = inside;
      if (times[c] > 0.0) max_inside = std::max(max_inside, inside);
    }
    cps.push_back(entry);
  }
  m["checkpoints"] = cps;
  if (shape) m["max_inside_fraction_after_start"] = max_inside;

  const Matrix& xt = eval.final_state();
  double near = 0.0;
  for (Eigen::Index i = 0; i < xt.cols(); ++i) {
    if ((xt.col(i) - config.target).norm() < 0.6) near += eval.weights[i];
  }
  m["near_target_radius"] = 0.6;
  m["near_target_fraction"] = near;

  if (is_lq(config) && !state.rewards.empty()) {
    const double T = config.horizon;
    const double moment = config.dim * config.initial_variance + config.initial_mean.squaredNorm();
    const double exact = moment / (2.0 * (-T - 1.0));
    const ScaledIdentityField optimum(config.dim, [T](double t) { return 1.0 / (t - T - 1.0); });
    const Vector q = eval.grid.trapezoid_weights();
    double err = 0.0;
    double norm = 0.0;
    for (int j = 0; j <= eval.grid.steps(); ++j) {
      const double t = eval.grid.times[static_cast<std::size_t>(j)];
      const Matrix& x = eval.states[static_cast<std::size_t>(j)];
      const Matrix ref = optimum.eval(x, t);
      const Matrix diff = state.control.eval(x, t) - ref;
      err += q[j] * diff.colwise().squaredNorm().dot(eval.weights);
      norm += q[j] * ref.colwise().squaredNorm().dot(eval.weights);
    }
    m["lq"] = {{"analytic_reward", exact},
               {"reward_relative_error", std::abs(state.rewards.back() - exact) / std::abs(exact)},
               {"control_relative_l2_error", std::sqrt(err / norm)}};
  }
  return m;
}

// --------------------------------------------------------------------- CSV

void write_trajectory_csv(const fs::path& path, const Trajectory& trajectory) {
  std::ostringstream out;
  const int d = trajectory.dim();
  out << "t,particle_id";
  for (int k = 0; k < d; ++k) out << ",x_" << k;
  out << '\n';
  const std::vector<double> times = trajectory.grid.checkpoint_times();
  for (std::size_t c = 0; c < times.size(); ++c) {
    const Matrix& x = trajectory.states[static_cast<std::size_t>(trajectory.grid.checkpoint_steps[c])];
    const std::string t = format_double(times[c]);
    for (Eigen::Index i = 0; i < x.cols(); ++i) {
      out << t << ',' << i;
      for (int k = 0; k < d; ++k) out << ',' << format_double(x(k, i));
      out << '\n';
    }
  }
  write_atomically(path, out.str());
}

std::vector<CheckpointCloud> read_trajectory_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("missing trajectory file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(path.string() + ": empty trajectory file");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 3 || header[0] != "t" || header[1] != "particle_id") {
    throw ValidationError(path.string() + ": header must start with t,particle_id");
  }
  const int d = static_cast<int>(header.size()) - 2;
  for (int k = 0; k < d; ++k) {
    if (header[static_cast<std::size_t>(k) + 2] != "x_" + std::to_string(k)) {
      throw ValidationError(path.string() + ": unexpected column " + header[static_cast<std::size_t>(k) + 2]);
    }
  }
  std::vector<double> times;
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      vals.push_back(std::strtod(cell.c_str(), &end));
      if (end == cell.c_str() || *end != '\0') {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
    }
    if (vals.size() != header.size()) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": wrong number of columns");
    }
    rows.push_back(std::move(vals));
  }
  std::vector<CheckpointCloud> clouds;
  std::size_t r = 0;
  while (r < rows.size()) {
    std::size_t e = r;
    while (e < rows.size() && rows[e][0] == rows[r][0]) ++e;
    CheckpointCloud cloud;
    cloud.t = rows[r][0];
    cloud.points.resize(d, static_cast<Eigen::Index>(e - r));
    for (std::size_t i = r; i < e; ++i) {
      for (int k = 0; k < d; ++k) cloud.points(k, static_cast<Eigen::Index>(i - r)) = rows[i][static_cast<std::size_t>(k) + 2];
    }
    clouds.push_back(std::move(cloud));
    r = e;
  }
  return clouds;
}

// --------------------------------------------------------------------- SVG

namespace {

constexpr const char* kPalette[] = {"red", "orange", "green", "blue", "purple"};

struct Frame {
  double x0, x1, y0, y1;
  double size = 480.0;
  double margin = 48.0;
  double px(double x) const { return margin + (x - x0) / (x1 - x0) * (size - 2 * margin); }
  double py(double y) const { return size - margin - (y - y0) / (y1 - y0) * (size - 2 * margin); }
};

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// Polyline segments of the obstacle boundary in the (x_1, x_2) plane.
std::vector<std::vector<std::pair<double, double>>> obstacle_outline(const RunConfig& c, const Frame& f) {
  std::vector<std::vector<std::pair<double, double>>> lines;
  constexpr int kSamples = 200;
  if (c.obstacle == "cylinder") {
    std::vector<std::pair<double, double>> circle;
    for (int k = 0; k <= kSamples; ++k) {
      const double a = 2.0 * 3.14159265358979323846 * k / kSamples;
      circle.emplace_back(c.obstacle_radius * std::cos(a), c.obstacle_radius * std::sin(a));
    }
    lines.push_back(circle);
  } else if (c.obstacle == "double_wedge") {
    // b vanishes where slope x_1^2 - x_2^2 - offset <= 0; its boundary is
    // x_1 = +-sqrt((x_2^2 + offset) / slope).
    for (double sign : {-1.0, 1.0}) {
      std::vector<std::pair<double, double>> branch;
      for (int k = 0; k <= kSamples; ++k) {
        const double y = f.y0 + (f.y1 - f.y0) * k / kSamples;
        branch.emplace_back(sign * std::sqrt((y * y + c.wedge_offset) / c.wedge_slope), y);
      }
      lines.push_back(branch);
    }
  }
  return lines;
}

}  // namespace

std::string scatter_svg(const std::vector<CheckpointCloud>& clouds, std::pair<int, int> pair, const RunConfig& config) {
  const auto [a, b] = pair;
  Frame f{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const CheckpointCloud& c : clouds) {
    if (a >= c.points.rows() || b >= c.points.rows()) throw ValidationError("plot pair outside the dimension");
    if (c.points.cols() == 0) continue;
    f.x0 = std::min(f.x0, c.points.row(a).minCoeff());
    f.x1 = std::max(f.x1, c.points.row(a).maxCoeff());
    f.y0 = std::min(f.y0, c.points.row(b).minCoeff());
    f.y1 = std::max(f.y1, c.points.row(b).maxCoeff());
  }
  if (!std::isfinite(f.x0)) f = Frame{-1, 1, -1, 1};
  const bool outline = a == 0 && b == 1 && config.obstacle != "none";
  if (outline && config.obstacle == "cylinder") {
    f.x0 = std::min(f.x0, -config.obstacle_radius);
    f.x1 = std::max(f.x1, config.obstacle_radius);
    f.y0 = std::min(f.y0, -config.obstacle_radius);
    f.y1 = std::max(f.y1, config.obstacle_radius);
  }
  // Square view with 5% padding.
  const double cx = 0.5 * (f.x0 + f.x1);
  const double cy = 0.5 * (f.y0 + f.y1);
  const double half = 0.55 * std::max({f.x1 - f.x0, f.y1 - f.y0, 1e-6});
  f.x0 = cx - half;
  f.x1 = cx + half;
  f.y0 = cy - half;
  f.y1 = cy + half;

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.size << "\" height=\"" << f.size + 24
    << "\" viewBox=\"0 0 " << f.size << ' ' << f.size + 24 << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<defs><clipPath id=\"plot\"><rect x=\"" << f.margin << "\" y=\"" << f.margin << "\" width=\""
    << f.size - 2 * f.margin << "\" height=\"" << f.size - 2 * f.margin << "\"/></clipPath></defs>\n";
  s << "<rect x=\"" << f.margin << "\" y=\"" << f.margin << "\" width=\"" << f.size - 2 * f.margin
    << "\" height=\"" << f.size - 2 * f.margin << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"" << f.margin << "\" y=\"" << f.size - f.margin + 14 << "\">" << num(f.x0) << "</text>\n";
  s << "<text x=\"" << f.size - f.margin << "\" y=\"" << f.size - f.margin + 14 << "\" text-anchor=\"end\">"
    << num(f.x1) << "</text>\n";
  s << "<text x=\"" << f.margin - 4 << "\" y=\"" << f.size - f.margin << "\" text-anchor=\"end\">" << num(f.y0)
    << "</text>\n";
  s << "<text x=\"" << f.margin - 4 << "\" y=\"" << f.margin + 10 << "\" text-anchor=\"end\">" << num(f.y1)
    << "</text>\n";
  s << "<text x=\"" << f.size / 2 << "\" y=\"" << f.size - f.margin + 30 << "\" text-anchor=\"middle\">x_" << a
    << "</text>\n";
  s << "<text x=\"14\" y=\"" << f.size / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << f.size / 2
    << ")\">x_" << b << "</text>\n";
  s << "<text x=\"" << f.size / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"13\">" << config.preset
    << " (x_" << a << ", x_" << b << ")</text>\n";
  for (std::size_t c = 0; c < clouds.size(); ++c) {
    const double lx = f.margin + 80.0 * static_cast<double>(c);
    s << "<circle cx=\"" << lx + 6 << "\" cy=\"" << f.size + 10 << "\" r=\"4\" fill=\"" << kPalette[c % 5]
      << "\"/><text x=\"" << lx + 14 << "\" y=\"" << f.size + 14 << "\">t = " << clouds[c].t << "</text>\n";
  }
  s << "</g>\n<g clip-path=\"url(#plot)\">\n";
  for (std::size_t c = 0; c < clouds.size(); ++c) {
    s << "<g fill=\"" << kPalette[c % 5] << "\" fill-opacity=\"0.45\">\n";
    const Matrix& x = clouds[c].points;
    for (Eigen::Index i = 0; i < x.cols(); ++i) {
      s << "<circle cx=\"" << num(f.px(x(a, i))) << "\" cy=\"" << num(f.py(x(b, i))) << "\" r=\"1.8\"/>\n";
    }
    s << "</g>\n";
  }
  if (outline) {
    for (const auto& line : obstacle_outline(config, f)) {
      s << "<polyline fill=\"none\" stroke=\"black\" stroke-width=\"1.5\" points=\"";
      for (const auto& [x, y] : line) s << num(f.px(x)) << ',' << num(f.py(y)) << ' ';
      s << "\"/>\n";
    }
  }
  s << "</g>\n</svg>\n";
  return s.str();
}

std::vector<fs::path> export_plots(const fs::path& run_dir, const std::vector<std::pair<int, int>>& pairs) {
  if (pairs.empty()) return {};
  std::ifstream in(run_dir / "manifest.json");
  if (!in) throw ValidationError("no manifest.json in " + run_dir.string());
  json manifest = json::parse(in, nullptr, false);
  if (manifest.is_discarded() || !manifest.contains("config")) {
    throw ValidationError(run_dir.string() + "/manifest.json: unreadable manifest");
  }
  const RunConfig config = RunConfig::from_json(manifest.at("config"));
  const std::vector<CheckpointCloud> clouds = read_trajectory_csv(run_dir / "trajectory.csv");
  for (double t : config.solver.checkpoints) {
    const bool found =
        std::any_of(clouds.begin(), clouds.end(), [t](const CheckpointCloud& c) { return std::abs(c.t - t) <= 1e-12; });
    if (!found) throw ValidationError("trajectory.csv has no checkpoint at t = " + format_double(t));
  }
  std::vector<fs::path> written;
  for (const auto& pair : pairs) {
    const fs::path p = run_dir / ("scatter_x" + std::to_string(pair.first) + "_x" + std::to_string(pair.second) + ".svg");
    write_atomically(p, scatter_svg(clouds, pair, config));
    written.push_back(p);
  }
  return written;
}

void write_atomically(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw ValidationError("failed writing " + tmp.string());
  }
  fs::rename(tmp, path);
}

// --------------------------------------------------------------------- run

RunOutcome run_experiment(const RunConfig& config, bool write_artifacts, std::ostream* log) {
  config.validate();
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  const ControlProblem problem = config.problem();
  const SolverConfig solver = config.solver_config();
  const json resolved = config.to_json();

  RunOutcome out;
  out.state = run(problem, solver, std::nullopt, [&](const SolverState& s) {
    if (log == nullptr) return;
    const IterationRecord& r = s.records.back();
    *log << "k=" << r.k << " I=" << r.reward << " se=" << r.reward_se << " delta=" << r.delta
         << " t=" << r.seconds << "s" << std::endl;
  });
  const auto solved = clock::now();
  const SolverState& state = out.state;

  const Trajectory eval = rollout(state.eval_initial, state.control, state.grid);
  json metrics = evaluate_run(config, state, eval);
  json iterations = json::array();
  for (const IterationRecord& r : state.records) iterations.push_back(r.to_json());

  json artifacts = json::object();
  if (write_artifacts) {
    const fs::path dir(config.output);
    fs::create_directories(dir);
    write_trajectory_csv(dir / "trajectory.csv", eval);
    artifacts["trajectory_csv"] = "trajectory.csv";
    json control = {{"architecture", resolved.at("solver").at("architecture")},
                    {"dim", config.dim},
                    {"params", vector_json(state.control.params())}};
    write_atomically(dir / "control.json", control.dump(1) + "\n");
    artifacts["control"] = "control.json";
    json plots = json::array();
    std::vector<CheckpointCloud> clouds;
    const std::vector<double> times = eval.grid.checkpoint_times();
    for (std::size_t c = 0; c < times.size(); ++c) {
      clouds.push_back({times[c], eval.states[static_cast<std::size_t>(eval.grid.checkpoint_steps[c])]});
    }
    for (const auto& pair : config.plot_pairs) {
      const std::string name = "scatter_x" + std::to_string(pair.first) + "_x" + std::to_string(pair.second) + ".svg";
      write_atomically(dir / name, scatter_svg(clouds, pair, config));
      plots.push_back(name);
    }
    artifacts["plots"] = plots;
  }
  const auto done = clock::now();

  out.manifest = {{"config", resolved},
                  {"input_hash", git_blob_hash(resolved.dump())},
                  {"rewards", state.rewards},
                  {"reward_se", state.reward_se},
                  {"deltas", state.deltas},
                  {"iterations", iterations},
                  {"metrics", metrics},
                  {"converged", state.converged},
                  {"failure", state.failure},
                  {"artifacts", artifacts},
                  {"timings",
                   {{"solve_seconds", std::chrono::duration<double>(solved - start).count()},
                    {"total_seconds", std::chrono::duration<double>(done - start).count()}}}};
  if (write_artifacts) write_atomically(fs::path(config.output) / "manifest.json", out.manifest.dump(1) + "\n");
  return out;
}

}  // namespace mpdc
