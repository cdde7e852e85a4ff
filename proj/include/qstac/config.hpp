#pragma once

// Run configuration: JSON documents layered through `extends`, validated
// against the full default document (unknown keys are rejected), then
// overridden by QSTAC_SEED and dotted `key=value` assignments.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "qstac/actor.hpp"
#include "qstac/critic.hpp"
#include "qstac/envs.hpp"
#include "qstac/errors.hpp"
#include "qstac/sac.hpp"

namespace qstac {

using json = nlohmann::json;

enum class Algorithm { qstac, sac };

inline std::string to_string(Algorithm a) { return a == Algorithm::qstac ? "qstac" : "sac"; }

struct AlphaConfig {
  double value = 0.2;
  bool autotune = false;
  std::optional<double> target_entropy;  // default -H * d_u (qstac) or -d_u (sac)
  double lr = 3e-4;
};

struct LoopConfig {
  long total_steps = 20000;
  long warmup_steps = 1000;
  int batch_size = 256;
  long buffer_capacity = 100000;
  int env_steps_per_iter = 1;
  int updates_per_iter = 1;
  long eval_interval = 1000;
  int eval_episodes = 10;
  long checkpoint_interval = 0;  // 0: final checkpoint only
};

struct TrainConfig {
  Algorithm algo = Algorithm::qstac;
  std::uint64_t seed = 0;
  EnvConfig env;
  ActorConfig actor;
  std::optional<double> beta;  // unset: 1 / alpha
  CriticConfig critic;
  SacPolicyConfig sac;
  AlphaConfig alpha;
  LoopConfig loop;

  double effective_beta() const { return beta ? *beta : 1.0 / alpha.value; }
};

inline json default_config_json() {
  const TrainConfig d;
  json j;
  j["algo"] = "qstac";
  j["seed"] = 0;
  j["env"] = {{"id", "pendulum"},
              {"difficulty", "easy"},
              {"max_episode_steps", 0},
              {"obstacles", nullptr},
              {"pendulum",
               {{"mass", d.env.pendulum.mass},
                {"length", d.env.pendulum.length},
                {"gravity", d.env.pendulum.gravity},
                {"dt", d.env.pendulum.dt},
                {"max_torque", d.env.pendulum.max_torque},
                {"max_speed", d.env.pendulum.max_speed}}},
              {"particle",
               {{"mass", d.env.particle.mass},
                {"dt", d.env.particle.dt},
                {"max_force", d.env.particle.max_force},
                {"max_speed", d.env.particle.max_speed},
                {"max_position", d.env.particle.max_position},
                {"goal_radius", d.env.particle.goal_radius},
                {"control_cost", d.env.particle.control_cost},
                {"reward_scale", d.env.particle.reward_scale}}}};
  j["actor"] = {{"horizon", d.actor.horizon},
                {"particles", d.actor.particles},
                {"beta", nullptr},
                {"detach_states", d.actor.detach_states},
                {"detach_svgd", d.actor.detach_svgd},
                {"saturate_critic_input", d.actor.saturate_critic_input},
                {"hidden", d.actor.hidden},
                {"activation", to_string(d.actor.activation)},
                {"lr", d.actor.adam.lr}};
  j["svgd"] = {{"steps", d.actor.svgd.steps},
               {"step_size", d.actor.svgd.step_size},
               {"penalty", d.actor.svgd.penalty},
               {"multiplier_step", d.actor.svgd.multiplier_step},
               {"lambda_max", d.actor.svgd.lambda_max},
               {"tol_g", d.actor.svgd.tol_g},
               {"fixed_bandwidth", d.actor.svgd.fixed_bandwidth},
               {"trace_probes", d.actor.svgd.trace_probes},
               {"exact_trace_max_dim", d.actor.svgd.exact_trace_max_dim}};
  j["critic"] = {{"hidden", d.critic.hidden},   {"activation", to_string(d.critic.activation)},
                 {"lr", d.critic.adam.lr},      {"twin", d.critic.twin},
                 {"gamma", d.critic.gamma},     {"tau", d.critic.tau}};
  j["sac"] = {{"hidden", d.sac.hidden}, {"activation", to_string(d.sac.activation)}, {"lr", d.sac.adam.lr}};
  j["alpha"] = {{"value", d.alpha.value}, {"auto", d.alpha.autotune}, {"target_entropy", nullptr}, {"lr", d.alpha.lr}};
  j["train"] = {{"total_steps", d.loop.total_steps},
                {"warmup_steps", d.loop.warmup_steps},
                {"batch_size", d.loop.batch_size},
                {"buffer_capacity", d.loop.buffer_capacity},
                {"env_steps_per_iter", d.loop.env_steps_per_iter},
                {"updates_per_iter", d.loop.updates_per_iter},
                {"eval_interval", d.loop.eval_interval},
                {"eval_episodes", d.loop.eval_episodes},
                {"checkpoint_interval", d.loop.checkpoint_interval}};
  return j;
}

namespace detail {

// Keys whose values are free-form (lists / null) and not checked recursively.
inline bool opaque_key(const std::string& path) { return path == "env.obstacles"; }

inline void check_keys(const json& doc, const json& schema, const std::string& prefix) {
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!schema.contains(it.key())) throw ConfigError("unknown config key '" + path + "'");
    const json& s = schema.at(it.key());
    if (opaque_key(path)) continue;
    if (s.is_object()) {
      if (!it.value().is_object()) throw ConfigError("config key '" + path + "' must be an object");
      check_keys(it.value(), s, path);
    } else if (it.value().is_object()) {
      throw ConfigError("config key '" + path + "' must not be an object");
    }
  }
}

inline void deep_merge(json& base, const json& patch) {
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      deep_merge(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  try {
    return json::parse(in, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed config file '" + path.string() + "': " + e.what());
  }
}

// File contents with `extends` chains resolved (parents first), relative to each file.
inline json load_layered(const std::filesystem::path& path, std::set<std::string>& seen) {
  const std::string key = std::filesystem::weakly_canonical(path).string();
  if (!seen.insert(key).second) throw ConfigError("config 'extends' cycle through '" + path.string() + "'");
  json doc = read_json_file(path);
  if (!doc.is_object()) throw ConfigError("config file '" + path.string() + "' must hold a JSON object");
  json merged = json::object();
  if (doc.contains("extends")) {
    std::vector<std::string> parents;
    if (doc["extends"].is_string())
      parents.push_back(doc["extends"].get<std::string>());
    else if (doc["extends"].is_array())
      parents = doc["extends"].get<std::vector<std::string>>();
    else
      throw ConfigError("'extends' must be a path or a list of paths");
    for (const auto& p : parents) deep_merge(merged, load_layered(path.parent_path() / p, seen));
    doc.erase("extends");
  }
  deep_merge(merged, doc);
  return merged;
}

template <class T>
T get_as(const json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key '" + path + "' has the wrong type");
  }
}

}  // namespace detail

/// Converts a fully merged document into a validated TrainConfig.
inline TrainConfig config_from_json(const json& doc) {
  detail::check_keys(doc, default_config_json(), "");
  json j = default_config_json();
  detail::deep_merge(j, doc);
  using detail::get_as;

  TrainConfig c;
  const std::string algo = get_as<std::string>(j["algo"], "algo");
  if (algo == "qstac")
    c.algo = Algorithm::qstac;
  else if (algo == "sac")
    c.algo = Algorithm::sac;
  else
    throw ConfigError("config key 'algo' must be 'qstac' or 'sac'");
  if (j["seed"].is_number_integer() && j["seed"].get<long long>() < 0) throw ConfigError("'seed' must be >= 0");
  c.seed = get_as<std::uint64_t>(j["seed"], "seed");

  const json& e = j["env"];
  const std::string id = get_as<std::string>(e["id"], "env.id");
  if (id == "pendulum")
    c.env.kind = EnvKind::pendulum;
  else if (id == "particle2d")
    c.env.kind = EnvKind::particle2d;
  else
    throw ConfigError("config key 'env.id' must be 'pendulum' or 'particle2d'");
  try {
    c.env.difficulty = difficulty_from_string(get_as<std::string>(e["difficulty"], "env.difficulty"));
  } catch (const ConfigError&) {
    throw ConfigError("config key 'env.difficulty' must be easy, medium or hard");
  }
  c.env.max_episode_steps = get_as<int>(e["max_episode_steps"], "env.max_episode_steps");
  const json& p = e["pendulum"];
  c.env.pendulum = {get_as<double>(p["mass"], "env.pendulum.mass"),
                    get_as<double>(p["length"], "env.pendulum.length"),
                    get_as<double>(p["gravity"], "env.pendulum.gravity"),
                    get_as<double>(p["dt"], "env.pendulum.dt"),
                    get_as<double>(p["max_torque"], "env.pendulum.max_torque"),
                    get_as<double>(p["max_speed"], "env.pendulum.max_speed")};
  const json& q = e["particle"];
  c.env.particle = {get_as<double>(q["mass"], "env.particle.mass"),
                    get_as<double>(q["dt"], "env.particle.dt"),
                    get_as<double>(q["max_force"], "env.particle.max_force"),
                    get_as<double>(q["max_speed"], "env.particle.max_speed"),
                    get_as<double>(q["max_position"], "env.particle.max_position"),
                    get_as<double>(q["goal_radius"], "env.particle.goal_radius"),
                    get_as<double>(q["control_cost"], "env.particle.control_cost"),
                    get_as<double>(q["reward_scale"], "env.particle.reward_scale")};
  if (!e["obstacles"].is_null()) {
    if (!e["obstacles"].is_array()) throw ConfigError("config key 'env.obstacles' must be a list");
    std::vector<GaussianObstacle> obs;
    for (const json& o : e["obstacles"]) {
      if (!o.is_object() || !o.contains("center") || !o.contains("amplitude") || !o.contains("width"))
        throw ConfigError("each obstacle needs center, amplitude and width");
      const auto ctr = get_as<std::vector<double>>(o["center"], "env.obstacles.center");
      if (ctr.size() != 2) throw ConfigError("obstacle center must have two coordinates");
      obs.push_back({Eigen::Vector2d(ctr[0], ctr[1]), get_as<double>(o["amplitude"], "env.obstacles.amplitude"),
                     get_as<double>(o["width"], "env.obstacles.width")});
    }
    c.env.obstacles = obs;
  }

  const json& a = j["actor"];
  c.actor.horizon = get_as<int>(a["horizon"], "actor.horizon");
  c.actor.particles = get_as<int>(a["particles"], "actor.particles");
  if (!a["beta"].is_null()) c.beta = get_as<double>(a["beta"], "actor.beta");
  c.actor.detach_states = get_as<bool>(a["detach_states"], "actor.detach_states");
  c.actor.detach_svgd = get_as<bool>(a["detach_svgd"], "actor.detach_svgd");
  c.actor.saturate_critic_input = get_as<bool>(a["saturate_critic_input"], "actor.saturate_critic_input");
  c.actor.hidden = get_as<std::vector<int>>(a["hidden"], "actor.hidden");
  c.actor.activation = activation_from_string(get_as<std::string>(a["activation"], "actor.activation"));
  c.actor.adam.lr = get_as<double>(a["lr"], "actor.lr");

  const json& s = j["svgd"];
  c.actor.svgd.steps = get_as<int>(s["steps"], "svgd.steps");
  c.actor.svgd.step_size = get_as<double>(s["step_size"], "svgd.step_size");
  c.actor.svgd.penalty = get_as<double>(s["penalty"], "svgd.penalty");
  c.actor.svgd.multiplier_step = get_as<double>(s["multiplier_step"], "svgd.multiplier_step");
  c.actor.svgd.lambda_max = get_as<double>(s["lambda_max"], "svgd.lambda_max");
  c.actor.svgd.tol_g = get_as<double>(s["tol_g"], "svgd.tol_g");
  c.actor.svgd.fixed_bandwidth = get_as<double>(s["fixed_bandwidth"], "svgd.fixed_bandwidth");
  c.actor.svgd.trace_probes = get_as<int>(s["trace_probes"], "svgd.trace_probes");
  c.actor.svgd.exact_trace_max_dim = get_as<int>(s["exact_trace_max_dim"], "svgd.exact_trace_max_dim");

  const json& k = j["critic"];
  c.critic.hidden = get_as<std::vector<int>>(k["hidden"], "critic.hidden");
  c.critic.activation = activation_from_string(get_as<std::string>(k["activation"], "critic.activation"));
  c.critic.adam.lr = get_as<double>(k["lr"], "critic.lr");
  c.critic.twin = get_as<bool>(k["twin"], "critic.twin");
  c.critic.gamma = get_as<double>(k["gamma"], "critic.gamma");
  c.critic.tau = get_as<double>(k["tau"], "critic.tau");

  const json& sc = j["sac"];
  c.sac.hidden = get_as<std::vector<int>>(sc["hidden"], "sac.hidden");
  c.sac.activation = activation_from_string(get_as<std::string>(sc["activation"], "sac.activation"));
  c.sac.adam.lr = get_as<double>(sc["lr"], "sac.lr");

  const json& al = j["alpha"];
  c.alpha.value = get_as<double>(al["value"], "alpha.value");
  c.alpha.autotune = get_as<bool>(al["auto"], "alpha.auto");
  if (!al["target_entropy"].is_null()) c.alpha.target_entropy = get_as<double>(al["target_entropy"], "alpha.target_entropy");
  c.alpha.lr = get_as<double>(al["lr"], "alpha.lr");

  const json& t = j["train"];
  c.loop.total_steps = get_as<long>(t["total_steps"], "train.total_steps");
  c.loop.warmup_steps = get_as<long>(t["warmup_steps"], "train.warmup_steps");
  c.loop.batch_size = get_as<int>(t["batch_size"], "train.batch_size");
  c.loop.buffer_capacity = get_as<long>(t["buffer_capacity"], "train.buffer_capacity");
  c.loop.env_steps_per_iter = get_as<int>(t["env_steps_per_iter"], "train.env_steps_per_iter");
  c.loop.updates_per_iter = get_as<int>(t["updates_per_iter"], "train.updates_per_iter");
  c.loop.eval_interval = get_as<long>(t["eval_interval"], "train.eval_interval");
  c.loop.eval_episodes = get_as<int>(t["eval_episodes"], "train.eval_episodes");
  c.loop.checkpoint_interval = get_as<long>(t["checkpoint_interval"], "train.checkpoint_interval");

  // ranges
  if (!(c.alpha.value > 0.0)) throw ConfigError("config key 'alpha.value' must be > 0");
  if (!(c.alpha.lr > 0.0)) throw ConfigError("config key 'alpha.lr' must be > 0");
  if (c.beta && !(*c.beta >= 0.0)) throw ConfigError("config key 'actor.beta' must be >= 0");
  c.actor.beta = c.effective_beta();
  c.actor.validate();
  if (!(c.critic.gamma > 0.0 && c.critic.gamma < 1.0)) throw ConfigError("config key 'critic.gamma' must lie in (0, 1)");
  if (!(c.critic.tau > 0.0 && c.critic.tau <= 1.0)) throw ConfigError("config key 'critic.tau' must lie in (0, 1]");
  for (double lr : {c.actor.adam.lr, c.critic.adam.lr, c.sac.adam.lr})
    if (!(lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (c.loop.total_steps < 0) throw ConfigError("config key 'train.total_steps' must be >= 0");
  if (c.loop.warmup_steps < 0) throw ConfigError("config key 'train.warmup_steps' must be >= 0");
  if (c.loop.batch_size < 1) throw ConfigError("config key 'train.batch_size' must be >= 1");
  if (c.loop.buffer_capacity < 1) throw ConfigError("config key 'train.buffer_capacity' must be >= 1");
  if (c.loop.env_steps_per_iter < 1) throw ConfigError("config key 'train.env_steps_per_iter' must be >= 1");
  if (c.loop.updates_per_iter < 0) throw ConfigError("config key 'train.updates_per_iter' must be >= 0");
  if (c.loop.eval_interval < 0) throw ConfigError("config key 'train.eval_interval' must be >= 0");
  if (c.loop.eval_episodes < 0) throw ConfigError("config key 'train.eval_episodes' must be >= 0");
  if (c.loop.checkpoint_interval < 0) throw ConfigError("config key 'train.checkpoint_interval' must be >= 0");
  const Particle2dPhysics& ph = c.env.particle;
  for (double v : {ph.mass, ph.dt, ph.max_force, ph.max_speed, ph.max_position, ph.goal_radius, ph.reward_scale})
    if (!(v > 0.0)) throw ConfigError("env.particle mass, dt, bounds, goal_radius and reward_scale must be > 0");
  if (!(ph.control_cost >= 0.0)) throw ConfigError("config key 'env.particle.control_cost' must be >= 0");
  if (c.env.max_episode_steps < 0) throw ConfigError("config key 'env.max_episode_steps' must be >= 0");
  return c;
}

/// Parses the value of a `key=value` override: JSON when it parses, else a string.
inline json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  json* node = &doc;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->contains(parts[i])) (*node)[parts[i]] = json::object();
    node = &(*node)[parts[i]];
    if (!node->is_object()) throw ConfigError("override '" + key + "' descends into a non-object");
  }
  (*node)[parts.back()] = parse_override_value(assignment.substr(eq + 1));
}

/// Resolution order: defaults < file chain < QSTAC_SEED < overrides.
inline json resolve_config_json(const std::optional<std::filesystem::path>& file,
                                const std::vector<std::string>& overrides, bool use_env_seed = true) {
  json doc = json::object();
  if (file) {
    std::set<std::string> seen;
    doc = detail::load_layered(*file, seen);
  }
  if (use_env_seed) {
    if (const char* s = std::getenv("QSTAC_SEED"); s && *s) {
      char* end = nullptr;
      const unsigned long long v = std::strtoull(s, &end, 10);
      if (*end != '\0') throw ConfigError("QSTAC_SEED must be a non-negative integer");
      doc["seed"] = v;
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  detail::check_keys(doc, default_config_json(), "");
  json full = default_config_json();
  detail::deep_merge(full, doc);
  config_from_json(full);  // validates
  return full;
}

/// FNV-1a over the canonical (sorted-key, compact) serialization.
inline std::uint64_t config_hash(const json& resolved) {
  const std::string s = resolved.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

inline TrainConfig load_config(const std::optional<std::filesystem::path>& file,
                               const std::vector<std::string>& overrides = {}) {
  return config_from_json(resolve_config_json(file, overrides));
}

}  // namespace qstac
