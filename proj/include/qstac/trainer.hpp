#pragma once

// Off-policy training loop shared by the particle policy and the SAC baseline:
// environment interaction, replay, interleaved critic / actor updates,
// periodic evaluation, metrics and checkpoints.

#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"

#include "qstac/actor.hpp"
#include "qstac/checkpoint.hpp"
#include "qstac/config.hpp"
#include "qstac/critic.hpp"
#include "qstac/csv.hpp"
#include "qstac/dynamics.hpp"
#include "qstac/envs.hpp"
#include "qstac/errors.hpp"
#include "qstac/random.hpp"
#include "qstac/replay_buffer.hpp"
#include "qstac/sac.hpp"

#ifndef QSTAC_GIT_HASH
#define QSTAC_GIT_HASH "unknown"
#endif

namespace qstac {

struct ActInfo {
  double entropy = 0.0;
  double q_max = 0.0;
  double q_mean = 0.0;
  long violations = 0;
  long coordinates = 0;
  Eigen::VectorXd raw_action;
};

struct UpdateStats {
  double critic_loss = 0.0;
  double actor_loss = 0.0;
  double entropy = 0.0;
  double alpha = 0.0;
};

class Agent {
 public:
  virtual ~Agent() = default;
  virtual Eigen::VectorXd act(const Eigen::VectorXd& obs, Rng& rng, bool train, ActInfo* info = nullptr) = 0;
  virtual UpdateStats update(const TransitionBatch& batch, Rng& rng) = 0;
  virtual double alpha() const = 0;
  virtual void save(Checkpoint& ck) const = 0;
  virtual void load(const Checkpoint& ck) = 0;
};

namespace detail {

// Temperature with optional automatic tuning of log(alpha) toward a target entropy.
struct Temperature {
  double log_alpha = std::log(0.2);
  bool autotune = false;
  double target = 0.0;
  AdamState optim;

  Temperature() = default;
  Temperature(const AlphaConfig& c, double default_target)
      : log_alpha(std::log(c.value)),
        autotune(c.autotune),
        target(c.target_entropy ? *c.target_entropy : default_target),
        optim(1, AdamConfig{c.lr, 0.9, 0.999, 1e-8}) {}

  double value() const { return std::exp(log_alpha); }

  void update(double entropy) {
    if (!autotune) return;
    Eigen::VectorXd p = Eigen::VectorXd::Constant(1, log_alpha);
    adam_step(p, Eigen::VectorXd::Constant(1, entropy - target), optim);
    log_alpha = p[0];
  }

  void save(Checkpoint& ck) const {
    ck.add("alpha.log_alpha", Eigen::VectorXd::Constant(1, log_alpha));
    ck.add_adam("alpha.adam", optim);
  }

  void load(const Checkpoint& ck) {
    log_alpha = ck.get("alpha.log_alpha")[0];
    ck.load_adam("alpha.adam", optim);
  }
};

inline void save_critic(Checkpoint& ck, const CriticEnsemble& c) {
  for (int k = 0; k < c.size(); ++k) {
    const std::string n = "critic." + std::to_string(k);
    ck.add_net(n + ".online", c.spec(), c.online(k));
    ck.add_net(n + ".target", c.spec(), c.target(k));
    ck.add_adam(n + ".adam", c.optimizer(k));
  }
}

inline void load_critic(const Checkpoint& ck, CriticEnsemble& c) {
  for (int k = 0; k < c.size(); ++k) {
    const std::string n = "critic." + std::to_string(k);
    ck.load_net(n + ".online", c.spec(), c.online(k));
    ck.load_net(n + ".target", c.spec(), c.target(k));
    ck.load_adam(n + ".adam", c.optimizer(k));
  }
}

}  // namespace detail

class QstacAgent final : public Agent {
 public:
  QstacAgent(const TrainConfig& cfg, const Environment& env, Rng& init_rng)
      : model_(make_model(env)), beta_follows_alpha_(!cfg.beta) {
    ActorConfig ac = cfg.actor;
    ac.beta = cfg.effective_beta();
    actor_ = Actor(env.observation_dim(), env.action_low(), env.action_high(), ac, init_rng);
    critic_ = CriticEnsemble(env.observation_dim(), env.action_dim(), cfg.critic, init_rng);
    temp_ = detail::Temperature(cfg.alpha, -static_cast<double>(actor_.dim()));
  }

  Eigen::VectorXd act(const Eigen::VectorXd& obs, Rng& rng, bool train, ActInfo* info) override {
    const PolicySample s = infer_particles(obs, actor_, critic_, *model_, rng, train);
    if (info) {
      info->entropy = s.entropy;
      info->q_max = s.trajectory_q.maxCoeff();
      info->q_mean = s.trajectory_q.mean();
      info->violations = s.violations;
      info->coordinates = s.particles.size();
      info->raw_action = s.raw_action;
    }
    return s.action;
  }

  UpdateStats update(const TransitionBatch& batch, Rng& rng) override {
    const double alpha = temp_.value();
    InferenceOptions next_opt;
    const InferenceBatch next = infer_batch(actor_, critic_, *model_, batch.next_states, rng, next_opt);
    const CriticLossResult cl = critic_loss(critic_, batch, next.entropy, next.actions, alpha);
    critic_update(critic_, cl);
    const ActorLossResult al = actor_loss(actor_, critic_, *model_, batch.states, alpha, rng);
    actor_update(actor_, al);
    temp_.update(al.mean_entropy);
    if (beta_follows_alpha_) actor_.config().beta = 1.0 / temp_.value();
    target_update(critic_);
    return {cl.loss, al.loss, al.mean_entropy, alpha};
  }

  double alpha() const override { return temp_.value(); }

  void save(Checkpoint& ck) const override {
    ck.add_net("actor", actor_.spec(), actor_.params());
    ck.add_adam("actor.adam", actor_.optimizer());
    detail::save_critic(ck, critic_);
    temp_.save(ck);
  }

  void load(const Checkpoint& ck) override {
    ck.load_net("actor", actor_.spec(), actor_.params());
    ck.load_adam("actor.adam", actor_.optimizer());
    detail::load_critic(ck, critic_);
    temp_.load(ck);
    if (beta_follows_alpha_) actor_.config().beta = 1.0 / temp_.value();
  }

  Actor& actor() { return actor_; }
  CriticEnsemble& critic() { return critic_; }
  const DynamicsModel& model() const { return *model_; }

 private:
  std::unique_ptr<DynamicsModel> model_;
  Actor actor_;
  CriticEnsemble critic_;
  detail::Temperature temp_;
  bool beta_follows_alpha_ = true;
};

class SacAgent final : public Agent {
 public:
  SacAgent(const TrainConfig& cfg, const Environment& env, Rng& init_rng) {
    policy_ = SquashedGaussianPolicy(env.observation_dim(), env.action_low(), env.action_high(), cfg.sac, init_rng);
    critic_ = CriticEnsemble(env.observation_dim(), env.action_dim(), cfg.critic, init_rng);
    temp_ = detail::Temperature(cfg.alpha, -static_cast<double>(env.action_dim()));
  }

  Eigen::VectorXd act(const Eigen::VectorXd& obs, Rng& rng, bool train, ActInfo* info) override {
    const SquashedSample s = sac_sample(policy_, obs, train ? &rng : nullptr);
    if (info) {
      info->entropy = -s.log_prob[0];
      info->raw_action = s.actions.col(0);
    }
    return s.actions.col(0);
  }

  UpdateStats update(const TransitionBatch& batch, Rng& rng) override {
    const double alpha = temp_.value();
    const SquashedSample next = sac_sample(policy_, batch.next_states, &rng);
    const CriticLossResult cl = critic_loss(critic_, batch, -next.log_prob, next.actions, alpha);
    critic_update(critic_, cl);
    const SacActorLoss al = sac_actor_loss(policy_, critic_, batch.states, alpha, rng);
    adam_step(policy_.params(), al.grads, policy_.optimizer());
    temp_.update(-al.mean_log_prob);
    target_update(critic_);
    return {cl.loss, al.loss, -al.mean_log_prob, alpha};
  }

  double alpha() const override { return temp_.value(); }

  void save(Checkpoint& ck) const override {
    ck.add_net("policy", policy_.spec(), policy_.params());
    ck.add_adam("policy.adam", policy_.optimizer());
    detail::save_critic(ck, critic_);
    temp_.save(ck);
  }

  void load(const Checkpoint& ck) override {
    ck.load_net("policy", policy_.spec(), policy_.params());
    ck.load_adam("policy.adam", policy_.optimizer());
    detail::load_critic(ck, critic_);
    temp_.load(ck);
  }

 private:
  SquashedGaussianPolicy policy_;
  CriticEnsemble critic_;
  detail::Temperature temp_;
};

inline std::unique_ptr<Agent> make_agent(const TrainConfig& cfg, const Environment& env, Rng& init_rng) {
  if (cfg.algo == Algorithm::sac) return std::make_unique<SacAgent>(cfg, env, init_rng);
  return std::make_unique<QstacAgent>(cfg, env, init_rng);
}

struct EpisodeResult {
  double ret = 0.0;
  int length = 0;
  bool success = false;  // terminated by reaching the goal
};

/// Eval-mode episodes on fresh environments seeded seed + i.
inline std::vector<EpisodeResult> evaluate(Agent& agent, const EnvConfig& env_cfg, int episodes, std::uint64_t seed) {
  std::vector<EpisodeResult> out;
  auto env = make_environment(env_cfg);
  for (int i = 0; i < episodes; ++i) {
    Rng policy_rng(mix_seed(seed + static_cast<std::uint64_t>(i)));
    Eigen::VectorXd obs = env->reset(seed + static_cast<std::uint64_t>(i));
    EpisodeResult r;
    for (int t = 0; t < env->max_episode_steps(); ++t) {
      const Eigen::VectorXd a = agent.act(obs, policy_rng, false);
      const StepResult s = env->step(a);
      r.ret += s.reward;
      ++r.length;
      obs = s.next_state;
      if (s.done) {
        r.success = true;
        break;
      }
    }
    out.push_back(r);
  }
  return out;
}

struct EvalSummary {
  double mean = 0.0, std = 0.0, min = 0.0, max = 0.0, success_rate = 0.0;
  int episodes = 0;
};

inline EvalSummary summarize(const std::vector<EpisodeResult>& eps) {
  EvalSummary s;
  s.episodes = static_cast<int>(eps.size());
  if (eps.empty()) return s;
  s.min = s.max = eps.front().ret;
  for (const auto& e : eps) {
    s.mean += e.ret;
    s.min = std::min(s.min, e.ret);
    s.max = std::max(s.max, e.ret);
    s.success_rate += e.success ? 1.0 : 0.0;
  }
  s.mean /= s.episodes;
  s.success_rate /= s.episodes;
  for (const auto& e : eps) s.std += (e.ret - s.mean) * (e.ret - s.mean);
  s.std = std::sqrt(s.std / s.episodes);
  return s;
}

inline std::string utc_timestamp() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  os << j.dump(2) << "\n";
}

inline const std::vector<std::string>& metrics_header() {
  static const std::vector<std::string> h = {
      "step",        "episode",    "episode_return", "episode_length", "episode_success", "eval_mean",
      "eval_std",    "eval_min",   "eval_max",       "eval_success",   "critic_loss",     "actor_loss",
      "entropy",     "alpha",      "policy_entropy", "traj_q_max",     "traj_q_mean",     "violation_rate"};
  return h;
}

struct TrainResult {
  std::filesystem::path run_dir;
  std::filesystem::path final_checkpoint;
  std::vector<std::pair<long, EvalSummary>> evals;
  long updates = 0;
  long episodes = 0;
};

namespace detail {

// Keeps freed batch-sized buffers in the heap instead of returning them to the
// kernel on every update (glibc otherwise mmaps/unmaps them each time).
inline void retain_heap() {
#if defined(__GLIBC__)
  static const bool once = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)once;
#endif
}

// Running means between two metrics rows.
struct Accum {
  double sum = 0.0;
  long n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  std::optional<double> mean() const { return n ? std::optional<double>(sum / n) : std::nullopt; }
};

}  // namespace detail

inline Checkpoint make_checkpoint(const Agent& agent, const nlohmann::json& resolved, long step) {
  Checkpoint ck;
  ck.meta = {{"config", resolved}, {"step", step}, {"algo", resolved["algo"]}};
  agent.save(ck);
  return ck;
}

/// Runs training per the resolved config, writing artifacts under `run_dir`.
/// On failure the manifest records the failing step and the error is rethrown.
inline TrainResult train(const nlohmann::json& resolved, const std::filesystem::path& run_dir) {
  const TrainConfig cfg = config_from_json(resolved);
  detail::retain_heap();
  namespace fs = std::filesystem;
  fs::create_directories(run_dir / "checkpoints");

  nlohmann::json cfg_echo = resolved;
  write_json(run_dir / "config.json", cfg_echo);
  nlohmann::json manifest = {{"git_hash", QSTAC_GIT_HASH},
                             {"seed", cfg.seed},
                             {"algo", to_string(cfg.algo)},
                             {"env", cfg.env.id()},
                             {"config_hash", hex64(config_hash(resolved))},
                             {"started_at", utc_timestamp()},
                             {"status", "running"}};
  write_json(run_dir / "manifest.json", manifest);

  TrainResult result;
  result.run_dir = run_dir;
  long step = 0;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    auto env = make_environment(cfg.env);
    Rng init_rng = make_rng(cfg.seed, Stream::init);
    Rng env_rng = make_rng(cfg.seed, Stream::env);
    Rng policy_rng = make_rng(cfg.seed, Stream::policy);
    Rng batch_rng = make_rng(cfg.seed, Stream::batch);
    Rng warmup_rng = make_rng(cfg.seed, Stream::warmup);
    const std::uint64_t eval_seed = derive_seed(cfg.seed, Stream::eval);
    auto agent = make_agent(cfg, *env, init_rng);
    ReplayBuffer buffer(static_cast<std::size_t>(cfg.loop.buffer_capacity));

    CsvWriter metrics(run_dir / "metrics.csv", metrics_header());
    CsvWriter evals(run_dir / "eval.csv", {"step", "mean", "std", "min", "max", "success_rate", "episodes"});
    CsvWriter timing(run_dir / "timing.csv", {"step", "wall_seconds"});

    detail::Accum critic_l, actor_l, ent, pol_ent, qmax, qmean;
    long viol = 0, coords = 0;
    Eigen::VectorXd obs = env->reset(env_rng());
    double ep_return = 0.0;
    int ep_len = 0;
    const Eigen::VectorXd lo = env->action_low(), hi = env->action_high();

    for (step = 1; step <= cfg.loop.total_steps; ++step) {
      Eigen::VectorXd action(env->action_dim());
      if (step <= cfg.loop.warmup_steps) {
        for (Eigen::Index k = 0; k < action.size(); ++k) action[k] = uniform(lo[k], hi[k], warmup_rng);
      } else {
        ActInfo info;
        action = agent->act(obs, policy_rng, true, &info);
        pol_ent.add(info.entropy);
        if (cfg.algo == Algorithm::qstac) {
          qmax.add(info.q_max);
          qmean.add(info.q_mean);
          viol += info.violations;
          coords += info.coordinates;
        }
      }
      const StepResult sr = env->step(action);
      ep_return += sr.reward;
      ++ep_len;
      const bool truncated = !sr.done && ep_len >= env->max_episode_steps();
      buffer.store({obs, action, sr.reward, sr.next_state, sr.done, truncated});
      obs = sr.next_state;

      if (step > cfg.loop.warmup_steps && step % cfg.loop.env_steps_per_iter == 0) {
        for (int u = 0; u < cfg.loop.updates_per_iter; ++u) {
          const TransitionBatch batch = buffer.sample(static_cast<std::size_t>(cfg.loop.batch_size), batch_rng);
          const UpdateStats st = agent->update(batch, batch_rng);
          critic_l.add(st.critic_loss);
          actor_l.add(st.actor_loss);
          ent.add(st.entropy);
          ++result.updates;
        }
      }

      std::vector<std::string> row(metrics_header().size());
      bool emit = false;
      if (sr.done || truncated) {
        ++result.episodes;
        row[1] = std::to_string(result.episodes);
        row[2] = fmt_num(ep_return);
        row[3] = std::to_string(ep_len);
        row[4] = sr.done ? "1" : "0";
        emit = true;
        obs = env->reset(env_rng());
        ep_return = 0.0;
        ep_len = 0;
      }
      if (cfg.loop.eval_interval > 0 && step % cfg.loop.eval_interval == 0) {
        const EvalSummary s = summarize(evaluate(*agent, cfg.env, cfg.loop.eval_episodes, eval_seed));
        result.evals.push_back({step, s});
        evals.row({std::to_string(step), fmt_num(s.mean), fmt_num(s.std), fmt_num(s.min), fmt_num(s.max),
                   fmt_num(s.success_rate), std::to_string(s.episodes)});
        row[5] = fmt_num(s.mean);
        row[6] = fmt_num(s.std);
        row[7] = fmt_num(s.min);
        row[8] = fmt_num(s.max);
        row[9] = fmt_num(s.success_rate);
        emit = true;
      }
      if (emit) {
        row[0] = std::to_string(step);
        row[10] = fmt_opt(critic_l.mean());
        row[11] = fmt_opt(actor_l.mean());
        row[12] = fmt_opt(ent.mean());
        row[13] = fmt_num(agent->alpha());
        row[14] = fmt_opt(pol_ent.mean());
        row[15] = fmt_opt(qmax.mean());
        row[16] = fmt_opt(qmean.mean());
        row[17] = coords ? fmt_num(static_cast<double>(viol) / static_cast<double>(coords)) : std::string();
        metrics.row(row);
        critic_l = actor_l = ent = pol_ent = qmax = qmean = {};
        viol = coords = 0;
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        timing.row({std::to_string(step), fmt_num(secs)});
      }
      if (cfg.loop.checkpoint_interval > 0 && step % cfg.loop.checkpoint_interval == 0 &&
          step != cfg.loop.total_steps)
        save_checkpoint(run_dir / "checkpoints" / ("step_" + std::to_string(step) + ".ckpt"),
                        make_checkpoint(*agent, resolved, step));
    }
    step = cfg.loop.total_steps;
    result.final_checkpoint = run_dir / "checkpoints" / ("step_" + std::to_string(step) + ".ckpt");
    save_checkpoint(result.final_checkpoint, make_checkpoint(*agent, resolved, step));
  } catch (const std::exception& e) {
    manifest["status"] = "failed";
    manifest["failure_step"] = step;
    manifest["error"] = e.what();
    manifest["finished_at"] = utc_timestamp();
    write_json(run_dir / "manifest.json", manifest);
    throw;
  }
  manifest["status"] = "completed";
  manifest["total_steps"] = cfg.loop.total_steps;
  manifest["updates"] = result.updates;
  manifest["episodes"] = result.episodes;
  manifest["final_checkpoint"] = result.final_checkpoint.filename().string();
  manifest["finished_at"] = utc_timestamp();
  write_json(run_dir / "manifest.json", manifest);
  return result;
}

/// Baseline entry point: identical loop with the squashed-Gaussian policy.
inline TrainResult train_sac(nlohmann::json resolved, const std::filesystem::path& run_dir) {
  if (resolved.value("algo", "") != "sac") throw ConfigError("train_sac requires algo = sac");
  return train(resolved, run_dir);
}

struct LoadedAgent {
  TrainConfig config;
  nlohmann::json resolved;
  std::unique_ptr<Agent> agent;
  long step = 0;
};

/// Rebuilds an agent from a checkpoint; `env_override` (if any) must keep the
/// observation and action shapes of the trained environment.
inline LoadedAgent load_agent(const std::filesystem::path& ckpt_path, const std::optional<EnvConfig>& env_override = {}) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  if (!ck.meta.contains("config")) throw FormatError("checkpoint carries no config");
  LoadedAgent la;
  la.resolved = ck.meta["config"];
  la.config = config_from_json(la.resolved);
  la.step = ck.meta.value("step", 0L);
  auto trained_env = make_environment(la.config.env);
  if (env_override) {
    auto env = make_environment(*env_override);
    if (env->observation_dim() != trained_env->observation_dim() || env->action_dim() != trained_env->action_dim())
      throw ConfigError("checkpoint and environment shapes are incompatible");
    la.config.env = *env_override;
  }
  auto env = make_environment(la.config.env);
  Rng init_rng(0);
  la.agent = make_agent(la.config, *env, init_rng);
  la.agent->load(ck);
  return la;
}

}  // namespace qstac
