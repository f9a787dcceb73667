#pragma once

// Exact Boltzmann targets, distribution distances and the oracle check that
// compares a sampler's terminating distribution with exp(Q / alpha) / Z.

#include <optional>
#include <span>
#include <vector>

#include "json.hpp"

#include "dpo/ebm.hpp"
#include "dpo/environments.hpp"
#include "dpo/gflownet.hpp"

namespace dpo {

// Probability maps are dense vectors indexed by action_index.
std::vector<double> boltzmann_oracle(const SoftQFunction& q, const EnvObservation& obs, QParams which = QParams::kTarget,
                                     std::size_t limit = kDefaultEnumerationLimit);
// Normalizes exp(log_weights) in the log domain.
std::vector<double> normalize_log_weights(std::span<const double> log_weights);

// Throws InvalidInput when either input is off normalization by > 1e-6.
double tv_distance(std::span<const double> p, std::span<const double> q);
// KL(target || learned) with 0 log 0 = 0; +infinity when learned is zero on
// the target's support.
double kl_divergence(std::span<const double> target, std::span<const double> learned);
// Indices of the m most probable target entries, ties to the lower index.
std::vector<std::size_t> top_modes(std::span<const double> target, std::size_t m);
double mode_coverage(std::span<const double> target, std::span<const StructuredAction> samples, std::size_t m,
                     std::size_t arity);

struct DistributionReport {
  std::size_t probe_id = 0;
  std::vector<double> target;
  std::vector<double> learned;
  double tv = 0.0;
  double kl = 0.0;
  double mode_coverage = 0.0;
  std::size_t n_modes = 0;
  std::size_t sample_count = 0;
};

nlohmann::json report_json(const DistributionReport& report);

// First observation of `count` seeded resets (seeds env.seed, env.seed + 1, ...).
std::vector<EnvObservation> probe_observations(const EnvConfig& env, std::size_t count = 8);

struct OracleOptions {
  double tolerance = 0.05;
  std::size_t n_modes = 2;
  std::size_t sample_count = 1000;
  std::uint64_t seed = 0;
  std::size_t limit = kDefaultEnumerationLimit;
};

struct OracleResult {
  std::vector<DistributionReport> probes;
  double max_tv = 0.0;
  bool pass = false;
};

DistributionReport compare_on_probe(const ConditionalGFlowNet& gfn, const SoftQFunction& q, const EnvObservation& obs,
                                    std::size_t probe_id, const OracleOptions& options);
OracleResult oracle_check(const ConditionalGFlowNet& gfn, const SoftQFunction& q,
                          std::span<const EnvObservation> probes, const OracleOptions& options);

}  // namespace dpo
