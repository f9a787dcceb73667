#include "dpo/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "dpo/errors.hpp"
#include "dpo/kernels.hpp"

namespace dpo {

namespace {

void check_normalized(std::span<const double> p, const char* what) {
  double total = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw InvalidInput(std::string(what) + " has a negative or NaN entry");
    total += v;
  }
  if (std::abs(total - 1.0) > 1e-6) throw InvalidInput(std::string(what) + " is not normalized");
}

}  // namespace

std::vector<double> normalize_log_weights(std::span<const double> log_weights) {
  if (log_weights.empty()) throw InvalidInput("empty weight vector");
  const double lse = logsumexp(log_weights, 1.0);
  std::vector<double> out(log_weights.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(log_weights[i] - lse);
  return out;
}

std::vector<double> boltzmann_oracle(const SoftQFunction& q, const EnvObservation& obs, QParams which,
                                     std::size_t limit) {
  const ActionSpaceSpec spec{obs.n_atomic, q.arity(), {}, false};
  const auto actions = enumerate_actions(spec, limit);
  std::vector<double> values = q.q_values(obs, actions, which);
  for (double& v : values) v /= q.alpha();
  return normalize_log_weights(values);
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidInput("distributions have different supports");
  check_normalized(p, "first distribution");
  check_normalized(q, "second distribution");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += std::abs(p[i] - q[i]);
  return 0.5 * total;
}

double kl_divergence(std::span<const double> target, std::span<const double> learned) {
  if (target.size() != learned.size()) throw InvalidInput("distributions have different supports");
  check_normalized(target, "target distribution");
  check_normalized(learned, "learned distribution");
  double kl = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (target[i] == 0.0) continue;
    if (learned[i] == 0.0) return std::numeric_limits<double>::infinity();
    kl += target[i] * std::log(target[i] / learned[i]);
  }
  return std::max(kl, 0.0);
}

std::vector<std::size_t> top_modes(std::span<const double> target, std::size_t m) {
  if (m == 0 || m > target.size()) throw InvalidInput("mode count must lie in [1, support size]");
  std::vector<std::size_t> order(target.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return target[a] > target[b]; });
  order.resize(m);
  return order;
}

double mode_coverage(std::span<const double> target, std::span<const StructuredAction> samples, std::size_t m,
                     std::size_t arity) {
  if (samples.empty()) throw InvalidInput("mode coverage needs samples");
  std::vector<bool> seen(target.size(), false);
  for (const auto& a : samples) {
    const std::uint64_t idx = action_index(a, arity);
    if (idx >= target.size()) throw InvalidInput("sample outside the target support");
    seen[idx] = true;
  }
  std::size_t hit = 0;
  for (std::size_t idx : top_modes(target, m)) hit += seen[idx] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(m);
}

nlohmann::json report_json(const DistributionReport& r) {
  nlohmann::json j;
  j["probe_id"] = r.probe_id;
  j["tv"] = r.tv;
  if (std::isinf(r.kl)) {
    j["kl"] = "inf";
  } else {
    j["kl"] = r.kl;
  }
  j["mode_coverage"] = r.mode_coverage;
  j["n_modes"] = r.n_modes;
  j["sample_count"] = r.sample_count;
  return j;
}

std::vector<EnvObservation> probe_observations(const EnvConfig& env, std::size_t count) {
  auto environment = make_environment(env);
  std::vector<EnvObservation> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(environment->reset(env.seed + i));
  return out;
}

DistributionReport compare_on_probe(const ConditionalGFlowNet& gfn, const SoftQFunction& q, const EnvObservation& obs,
                                    std::size_t probe_id, const OracleOptions& options) {
  DistributionReport r;
  r.probe_id = probe_id;
  r.target = boltzmann_oracle(q, obs, QParams::kTarget, options.limit);
  r.learned = exact_terminating_distribution(gfn, obs, NetParams::kOnline, std::nullopt, options.limit);
  // Renormalize away floating-point drift from the DAG sum.
  const double total = std::accumulate(r.learned.begin(), r.learned.end(), 0.0);
  for (double& v : r.learned) v /= total;
  r.tv = tv_distance(r.target, r.learned);
  r.kl = kl_divergence(r.target, r.learned);
  r.n_modes = std::min(options.n_modes, r.target.size());
  r.sample_count = options.sample_count;
  if (options.sample_count > 0) {
    Rng rng(options.seed + probe_id);
    SamplingOptions sampling;
    std::vector<StructuredAction> samples;
    for (auto& tau : gfn.sample_trajectories(obs, rng, sampling, options.sample_count)) {
      samples.push_back(std::move(tau.terminal));
    }
    r.mode_coverage = mode_coverage(r.target, samples, r.n_modes, q.arity());
  }
  return r;
}

OracleResult oracle_check(const ConditionalGFlowNet& gfn, const SoftQFunction& q,
                          std::span<const EnvObservation> probes, const OracleOptions& options) {
  if (probes.empty()) throw InvalidInput("oracle check needs at least one probe");
  OracleResult out;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    out.probes.push_back(compare_on_probe(gfn, q, probes[i], i, options));
    out.max_tv = std::max(out.max_tv, out.probes.back().tv);
  }
  out.pass = out.max_tv <= options.tolerance;
  return out;
}

}  // namespace dpo
