#include "dpo/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "dpo/errors.hpp"
#include "dpo/evaluation.hpp"
#include "dpo/trainer.hpp"

namespace dpo {

namespace fs = std::filesystem;

namespace {

EnvConfig load_env(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read environment file " + path.string());
  const nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw InvalidInput("environment file is not valid JSON: " + path.string());
  return j.get<EnvConfig>();
}

// Checks that an environment matches the networks stored in a checkpoint.
void check_compatible(const Trainer& t, const EnvConfig& env) {
  auto e = make_environment(env);
  const EnvObservation obs = e->reset(env.seed);
  if (obs.local_width != t.q().local_width() || e->action_space().arity != t.q().arity()) {
    throw InvalidInput("environment does not match the checkpoint's action space");
  }
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
}

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out;
  std::string resume;
};

int run_train(const TrainArgs& a, std::ostream& out) {
  std::unique_ptr<Trainer> trainer;
  if (!a.resume.empty()) {
    trainer = std::make_unique<Trainer>(Trainer::from_checkpoint(a.resume));
  } else {
    std::ifstream in(a.config);
    if (!in) throw InvalidInput("cannot read config file " + a.config);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw InvalidInput("config file is not valid JSON: " + a.config);
    for (const auto& o : a.overrides) apply_override(j, o);
    trainer = std::make_unique<Trainer>(j.get<TrainConfig>());
  }
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_text(dir / "config.json", nlohmann::json(trainer->config()).dump(2) + "\n");
  const fs::path metrics_path = dir / "metrics.csv";
  const bool append = !a.resume.empty() && fs::exists(metrics_path);
  std::ofstream metrics(metrics_path, append ? std::ios::app : std::ios::trunc);
  if (!metrics) throw InvalidInput("cannot write " + metrics_path.string());
  if (!append) metrics << kMetricsHeader << '\n' << std::flush;
  trainer->run(&metrics, dir);
  nlohmann::json summary = {{"steps", trainer->global_step()},
                            {"epochs", trainer->epoch()},
                            {"ebm_updates", trainer->counters().ebm_updates},
                            {"gfn_updates", trainer->counters().gfn_updates},
                            {"metrics", metrics_path.string()}};
  out << summary.dump() << '\n';
  return 0;
}

int run_evaluate(const std::string& ckpt, const std::string& env_path, std::size_t episodes, const std::string& out_dir,
                 std::ostream& out) {
  if (episodes == 0) throw InvalidInput("--episodes must be positive");
  Trainer t = Trainer::from_checkpoint(ckpt);
  const EnvConfig env = load_env(env_path);
  check_compatible(t, env);
  auto e = make_environment(env);
  Rng rng(env.seed);
  std::vector<double> returns;
  for (std::size_t i = 0; i < episodes; ++i) {
    EnvObservation obs = e->reset(env.seed + i);
    double total = 0.0;
    while (!e->done()) {
      const BuildTrajectory tau = t.gfn().sample_trajectory(obs, rng, SamplingOptions{});
      const StepResult r = e->step(tau.terminal);
      total += r.reward;
      obs = r.obs;
    }
    returns.push_back(total);
  }
  const double n = static_cast<double>(returns.size());
  const double mean = std::accumulate(returns.begin(), returns.end(), 0.0) / n;
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  const double sd = returns.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  const nlohmann::json report = {{"episodes", episodes}, {"mean_reward", mean}, {"std_reward", sd}, {"returns", returns}};
  out << report.dump() << '\n';
  if (!out_dir.empty()) write_text(fs::path(out_dir) / "evaluate.json", report.dump(2) + "\n");
  return 0;
}

int run_oracle(const std::string& ckpt, const std::string& env_path, double tol, const OracleOptions& base,
               const std::string& out_dir, std::ostream& out) {
  Trainer t = Trainer::from_checkpoint(ckpt);
  const EnvConfig env = load_env(env_path);
  check_compatible(t, env);
  OracleOptions options = base;
  options.tolerance = tol;
  options.limit = t.config().enumeration_limit;
  const auto probes = probe_observations(env);
  const OracleResult result = oracle_check(t.gfn(), t.q(), probes, options);
  nlohmann::json report = {{"tolerance", tol}, {"max_tv", result.max_tv}, {"pass", result.pass}};
  report["probes"] = nlohmann::json::array();
  for (const auto& p : result.probes) report["probes"].push_back(report_json(p));
  out << report.dump() << '\n';
  if (!out_dir.empty()) write_text(fs::path(out_dir) / "oracle_report.json", report.dump(2) + "\n");
  return result.pass ? 0 : 1;
}

int run_enumerate(const std::string& ckpt, const std::string& env_path, std::size_t probe, const std::string& out_dir,
                  std::ostream& out) {
  Trainer t = Trainer::from_checkpoint(ckpt);
  const EnvConfig env = load_env(env_path);
  check_compatible(t, env);
  const auto probes = probe_observations(env, probe + 1);
  OracleOptions options;
  options.sample_count = 0;
  options.limit = t.config().enumeration_limit;
  const DistributionReport r = compare_on_probe(t.gfn(), t.q(), probes[probe], probe, options);
  std::ostringstream csv;
  csv << "action_index,target_prob,learned_prob\n";
  csv.precision(17);
  for (std::size_t i = 0; i < r.target.size(); ++i) csv << i << ',' << r.target[i] << ',' << r.learned[i] << '\n';
  if (out_dir.empty()) {
    out << csv.str();
  } else {
    const fs::path path = fs::path(out_dir) / ("enumerate_probe" + std::to_string(probe) + ".csv");
    write_text(path, csv.str());
    out << path.string() << '\n';
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Structured-action RL with an energy model and a conditional GFlowNet sampler", "dpo"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "Run joint training");
  train->add_option("--config", train_args.config, "JSON run config");
  train->add_option("--set", train_args.overrides, "Override a config field, key=value (repeatable)");
  train->add_option("--out", train_args.out, "Output directory")->required();
  train->add_option("--resume", train_args.resume, "Continue from a checkpoint directory");

  std::string ckpt, env_path, out_dir;
  std::size_t episodes = 0;
  auto* evaluate = app.add_subcommand("evaluate", "Mean episode return of the sampler policy");
  evaluate->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  evaluate->add_option("--env", env_path, "Environment JSON")->required();
  evaluate->add_option("--episodes", episodes, "Number of episodes")->required();
  evaluate->add_option("--out", out_dir, "Output directory");

  double tol = 0.05;
  OracleOptions oracle_options;
  auto* oracle = app.add_subcommand("oracle", "Compare the sampler with the exact Boltzmann target");
  oracle->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  oracle->add_option("--env", env_path, "Environment JSON")->required();
  oracle->add_option("--tol", tol, "Maximum allowed TV distance")->required();
  oracle->add_option("--samples", oracle_options.sample_count, "Samples per probe for mode coverage");
  oracle->add_option("--modes", oracle_options.n_modes, "Top-m modes for coverage");
  oracle->add_option("--out", out_dir, "Output directory");

  std::size_t probe = 0;
  auto* enumerate = app.add_subcommand("enumerate", "Dump target and learned distributions as CSV");
  enumerate->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  enumerate->add_option("--env", env_path, "Environment JSON")->required();
  enumerate->add_option("--probe", probe, "Probe index");
  enumerate->add_option("--out", out_dir, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (*train) {
      if (train_args.config.empty() == train_args.resume.empty()) {
        err << "error: train needs exactly one of --config or --resume\n" << train->help();
        return 2;
      }
      return run_train(train_args, out);
    }
    if (*evaluate) return run_evaluate(ckpt, env_path, episodes, out_dir, out);
    if (*oracle) return run_oracle(ckpt, env_path, tol, oracle_options, out_dir, out);
    if (*enumerate) return run_enumerate(ckpt, env_path, probe, out_dir, out);
  } catch (const InvalidInput& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const EnumerationTooLarge& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "run aborted: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

}  // namespace dpo
