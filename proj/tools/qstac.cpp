// qstac command line: train, eval, sweep, efficiency, dump-traj.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "qstac/config.hpp"
#include "qstac/csv.hpp"
#include "qstac/curves.hpp"
#include "qstac/trainer.hpp"

namespace fs = std::filesystem;
using qstac::json;

namespace {

std::string default_run_dir(const json& resolved) {
  std::ostringstream os;
  os << "runs/" << resolved["algo"].get<std::string>() << "-" << qstac::config_from_json(resolved).env.id() << "-s"
     << resolved["seed"].get<std::uint64_t>() << "-" << qstac::hex64(qstac::config_hash(resolved)).substr(0, 8);
  return os.str();
}

// Overrides for eval / dump-traj may only touch the environment block.
std::optional<qstac::EnvConfig> env_override(const json& trained, const std::vector<std::string>& sets) {
  if (sets.empty()) return std::nullopt;
  json doc = trained;
  for (const auto& s : sets) {
    if (s.rfind("env.", 0) != 0) throw qstac::ConfigError("only env.* overrides apply to a checkpoint: '" + s + "'");
    qstac::apply_override(doc, s);
  }
  qstac::detail::check_keys(doc, qstac::default_config_json(), "");
  return qstac::config_from_json(doc).env;
}

int cmd_train(const std::optional<std::string>& config, const std::vector<std::string>& sets, std::string out) {
  std::optional<fs::path> file;
  if (config) {
    if (!fs::exists(*config)) throw qstac::ConfigError("config file '" + *config + "' does not exist");
    file = *config;
  }
  const json resolved = qstac::resolve_config_json(file, sets);
  if (out.empty()) out = default_run_dir(resolved);
  const qstac::TrainResult r = qstac::train(resolved, out);
  std::cout << "run directory: " << r.run_dir.string() << "\n";
  if (!r.evals.empty()) {
    const auto& [step, s] = r.evals.back();
    std::printf("final eval (step %ld): %.3f ± %.3f (%.3f, %.3f)\n", step, s.mean, s.std, s.min, s.max);
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::vector<std::string>& sets, int episodes, std::uint64_t seed,
             std::string out) {
  if (episodes < 0) throw qstac::ConfigError("--episodes must be >= 0");
  const qstac::Checkpoint header = qstac::load_checkpoint(ckpt);
  const auto env = env_override(header.meta.value("config", json::object()), sets);
  qstac::LoadedAgent la = qstac::load_agent(ckpt, env);
  const auto eps = qstac::evaluate(*la.agent, la.config.env, episodes, seed);
  if (out.empty()) out = "eval.csv";
  if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
  qstac::CsvWriter w(out, {"episode", "seed", "return", "length", "success"});
  for (std::size_t i = 0; i < eps.size(); ++i)
    w.row({std::to_string(i), std::to_string(seed + i), qstac::fmt_num(eps[i].ret), std::to_string(eps[i].length),
           eps[i].success ? "1" : "0"});
  const qstac::EvalSummary s = qstac::summarize(eps);
  std::printf("%.6g ± %.6g (%.6g, %.6g)\n", s.mean, s.std, s.min, s.max);
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    const auto dash = tok.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto a = std::stoull(tok.substr(0, dash)), b = std::stoull(tok.substr(dash + 1));
        if (b < a) throw qstac::ConfigError("bad seed range '" + tok + "'");
        for (auto s = a; s <= b; ++s) seeds.push_back(s);
      } else {
        seeds.push_back(std::stoull(tok));
      }
    } catch (const std::logic_error&) {
      throw qstac::ConfigError("bad seed '" + tok + "'");
    }
  }
  if (seeds.empty()) throw qstac::ConfigError("--seeds needs at least one seed");
  return seeds;
}

int cmd_sweep(const std::optional<std::string>& config, std::vector<std::string> sets, const std::string& seeds_text,
              std::string out) {
  const auto seeds = parse_seeds(seeds_text);
  std::optional<fs::path> file;
  if (config) {
    if (!fs::exists(*config)) throw qstac::ConfigError("config file '" + *config + "' does not exist");
    file = *config;
  }
  const json base = qstac::resolve_config_json(file, sets, false);
  if (out.empty()) out = "runs/sweep-" + qstac::hex64(qstac::config_hash(base)).substr(0, 8);
  fs::create_directories(out);
  std::vector<qstac::Curve> curves;
  std::vector<std::string> warnings;
  for (std::uint64_t seed : seeds) {
    json cfg = base;
    cfg["seed"] = seed;
    const fs::path dir = fs::path(out) / ("seed_" + std::to_string(seed));
    try {
      qstac::train(cfg, dir);
      curves.push_back(qstac::read_curve(dir / "eval.csv", "seed " + std::to_string(seed)));
      std::cout << "seed " << seed << ": done\n";
    } catch (const std::exception& e) {
      warnings.push_back("seed " + std::to_string(seed) + " failed: " + e.what());
      std::cerr << "warning: " << warnings.back() << "\n";
    }
  }
  qstac::CsvWriter w(fs::path(out) / "curves_agg.csv", {"step", "mean", "min", "max", "n", "note"});
  for (const auto& p : qstac::aggregate_curves(curves))
    w.row({std::to_string(p.step), qstac::fmt_num(p.mean), qstac::fmt_num(p.min), qstac::fmt_num(p.max),
           std::to_string(p.n), ""});
  for (const auto& msg : warnings) w.row({"", "", "", "", "", "warning: " + msg});
  std::cout << "aggregate: " << (fs::path(out) / "curves_agg.csv").string() << "\n";
  return curves.empty() ? 1 : 0;
}

int cmd_efficiency(const std::vector<std::string>& files, double threshold, const std::string& out) {
  std::vector<qstac::Curve> curves;
  for (const auto& f : files) {
    // label=path names a curve; a bare path is its own label
    const auto eq = f.find('=');
    if (eq != std::string::npos && !fs::exists(f))
      curves.push_back(qstac::read_curve(f.substr(eq + 1), f.substr(0, eq)));
    else
      curves.push_back(qstac::read_curve(f));
  }
  const qstac::EfficiencyReport r = qstac::efficiency(curves, threshold);
  std::printf("optimal return = best window-5 smoothed eval mean over all compared curves = %.6g\n", r.best_return);
  std::printf("threshold = min + %.3g * (optimal - min) = %.6g (min %.6g)\n", r.threshold_fraction, r.threshold_value,
              r.min_return);
  std::printf("%-32s %12s %10s\n", "curve", "step", "% budget");
  std::optional<qstac::CsvWriter> w;
  if (!out.empty()) w.emplace(out, std::vector<std::string>{"label", "step", "percent_of_budget", "budget", "reached"});
  for (const auto& row : r.rows) {
    if (row.step)
      std::printf("%-32s %12ld %9.1f%%\n", row.label.c_str(), *row.step, row.percent_of_budget);
    else
      std::printf("%-32s %12s %10s\n", row.label.c_str(), "not reached", "-");
    if (w)
      w->row({row.label, row.step ? std::to_string(*row.step) : "", row.step ? qstac::fmt_num(row.percent_of_budget) : "",
              std::to_string(row.budget), row.step ? "1" : "0"});
  }
  return 0;
}

int cmd_dump_traj(const std::string& ckpt, const std::vector<std::string>& sets, std::uint64_t seed, std::string out) {
  const qstac::Checkpoint header = qstac::load_checkpoint(ckpt);
  const auto envo = env_override(header.meta.value("config", json::object()), sets);
  qstac::LoadedAgent la = qstac::load_agent(ckpt, envo);
  auto env = qstac::make_environment(la.config.env);
  std::vector<std::string> cols = {"t"};
  for (int i = 0; i < env->observation_dim(); ++i) cols.push_back("state_" + std::to_string(i));
  for (int i = 0; i < env->action_dim(); ++i) cols.push_back("action_" + std::to_string(i));
  cols.push_back("reward");
  cols.push_back("done");
  if (out.empty()) out = "traj.csv";
  qstac::CsvWriter w(out, cols);
  qstac::Rng rng(qstac::mix_seed(seed));
  Eigen::VectorXd obs = env->reset(seed);
  for (int t = 0; t < env->max_episode_steps(); ++t) {
    const Eigen::VectorXd a = la.agent->act(obs, rng, false);
    const qstac::StepResult s = env->step(a);
    std::vector<std::string> row = {std::to_string(t)};
    for (Eigen::Index i = 0; i < obs.size(); ++i) row.push_back(qstac::fmt_num(obs[i]));
    for (Eigen::Index i = 0; i < a.size(); ++i) row.push_back(qstac::fmt_num(a[i]));
    row.push_back(qstac::fmt_num(s.reward));
    row.push_back(s.done ? "1" : "0");
    w.row(row);
    obs = s.next_state;
    if (s.done) break;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stein particle actor-critic: training and analysis"};
  app.require_subcommand(1);

  std::optional<std::string> config;
  std::vector<std::string> sets;
  std::string out, checkpoint, seeds = "0,1,2";
  int episodes = 10;
  std::uint64_t seed = 0;
  double threshold = 0.8;
  std::vector<std::string> files;

  auto* train = app.add_subcommand("train", "train one run");
  train->add_option("--config", config, "run config file (JSON)");
  train->add_option("--set", sets, "dotted override key=value (repeatable)");
  train->add_option("--out", out, "run directory");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--set", sets, "env.* override key=value (repeatable)");
  eval->add_option("--episodes", episodes, "episode count");
  eval->add_option("--seed", seed, "first environment seed");
  eval->add_option("--out", out, "per-episode CSV (default eval.csv)");

  auto* sweep = app.add_subcommand("sweep", "train one run per seed and aggregate eval curves");
  sweep->add_option("--config", config, "run config file (JSON)");
  sweep->add_option("--set", sets, "dotted override key=value (repeatable)");
  sweep->add_option("--seeds", seeds, "comma list or ranges, e.g. 0,1,2 or 0-4");
  sweep->add_option("--out", out, "sweep directory");

  auto* eff = app.add_subcommand("efficiency", "steps to reach a fraction of the best return");
  eff->add_option("curves", files, "curve CSVs (eval.csv or curves_agg.csv), optionally label=path")->required();
  eff->add_option("--threshold", threshold, "fraction in (0, 1]");
  eff->add_option("--out", out, "optional summary CSV");

  auto* dump = app.add_subcommand("dump-traj", "write one eval-mode trajectory as CSV");
  dump->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  dump->add_option("--set", sets, "env.* override key=value (repeatable)");
  dump->add_option("--seed", seed, "environment seed");
  dump->add_option("--out", out, "output CSV (default traj.csv)");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return cmd_train(config, sets, out);
    if (*eval) return cmd_eval(checkpoint, sets, episodes, seed, out);
    if (*sweep) return cmd_sweep(config, sets, seeds, out);
    if (*eff) return cmd_efficiency(files, threshold, out);
    if (*dump) return cmd_dump_traj(checkpoint, sets, seed, out);
  } catch (const qstac::ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
