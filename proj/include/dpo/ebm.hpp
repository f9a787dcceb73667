#pragma once

// Soft-Q energy model: Q(s_e, a_e) over structured actions, importance
// weighted soft values, soft Bellman targets and the Q regression loss,
// plus a tabular soft Q iteration used as an exact reference.

#include <cstdint>
#include <span>
#include <vector>

#include "dpo/environments.hpp"
#include "dpo/layers.hpp"

namespace dpo {

enum class QParams { kOnline, kTarget };

struct SoftQConfig {
  EncoderConfig encoder;
  double alpha = 1.0;
  double gamma = 0.95;
  // Zero-initialized output layer makes Q identically 0 at construction.
  bool zero_head = true;
  double head_gain = 1.0;
};

struct ProposalSample {
  StructuredAction action;
  double log_q = 0.0;
};

struct SoftValueEstimate {
  double value = 0.0;
  // Effective sample size of the importance weights.
  double ess = 0.0;
};

class SoftQFunction {
 public:
  SoftQFunction(std::size_t local_width, std::size_t arity, SoftQConfig config, Rng& rng);

  double q_value(const EnvObservation& obs, const StructuredAction& action, QParams which = QParams::kOnline) const;
  // One forward pass over a block-diagonal batch of graphs.
  std::vector<double> q_values(const EnvObservation& obs, std::span<const StructuredAction> actions,
                               QParams which = QParams::kOnline) const;

  // Differentiable batch evaluation; returns a B x 1 variable.
  ad::Var q_batch(const Binder& bind, std::span<const EnvObservation* const> obs,
                  std::span<const StructuredAction* const> actions, Rng* dropout_rng = nullptr) const;

  // log R(a_e | s_e) = Q(s_e, a_e) / alpha, the reward the sampler matches.
  double log_reward(const EnvObservation& obs, const StructuredAction& action, QParams which) const;
  std::vector<double> log_rewards(const EnvObservation& obs, std::span<const StructuredAction> actions,
                                  QParams which) const;

  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& target_params() { return target_; }
  const ParameterSet& target_params() const { return target_; }
  const ParameterSet& select(QParams which) const { return which == QParams::kOnline ? params_ : target_; }

  double alpha() const { return config_.alpha; }
  void set_alpha(double alpha);
  double gamma() const { return config_.gamma; }
  const SoftQConfig& config() const { return config_; }
  std::size_t arity() const { return arity_; }
  std::size_t local_width() const { return local_width_; }

  void update_target(double tau);

  // Instrumentation: how often log_reward read each parameter set.
  struct RewardReads {
    std::uint64_t online = 0;
    std::uint64_t target = 0;
  };
  const RewardReads& reward_reads() const { return reads_; }

 private:
  std::size_t local_width_;
  std::size_t arity_;
  SoftQConfig config_;
  ParameterSet params_;
  ParameterSet target_;
  mutable RewardReads reads_;
};

// alpha * log( (1/M) sum_i exp(q_i / alpha) / proposal_i ), max-shifted.
SoftValueEstimate soft_value_from(std::span<const double> q_values, std::span<const double> log_proposals,
                                  double alpha);

SoftValueEstimate soft_value_estimate(const SoftQFunction& q, const EnvObservation& obs,
                                      std::span<const ProposalSample> samples, QParams which = QParams::kOnline);

class ProposalSource {
 public:
  virtual ~ProposalSource() = default;
  virtual std::vector<ProposalSample> draw(const EnvObservation& obs, Rng& rng) const = 0;
};

// Every action exactly once with q = 1/K^N; turns the estimate into the
// exact soft value.
class ExhaustiveUniformProposal final : public ProposalSource {
 public:
  explicit ExhaustiveUniformProposal(std::size_t arity, std::size_t limit = kDefaultEnumerationLimit)
      : arity_(arity), limit_(limit) {}
  std::vector<ProposalSample> draw(const EnvObservation& obs, Rng& rng) const override;

 private:
  std::size_t arity_;
  std::size_t limit_;
};

// r + gamma * V_target(s') unless done; V from target parameters.
double bellman_target(const SoftQFunction& q, double reward, const EnvObservation& next_obs, bool done,
                      const ProposalSource& proposals, Rng& rng, double* ess = nullptr);

struct QLossResult {
  double loss = 0.0;
  double mean_ess = 0.0;
};

// mean 1/2 (target - Q(s, a))^2 with detached targets; accumulates
// gradients into q.params(). Throws TrainingDivergence on a non-finite loss.
QLossResult q_loss(SoftQFunction& q, std::span<const Transition> batch, const ProposalSource& proposals, Rng& rng);
double q_loss_with_targets(SoftQFunction& q, std::span<const Transition> batch, std::span<const double> targets);

struct TabularMdp {
  std::size_t n_states = 0;
  std::size_t n_actions = 0;
  std::vector<double> reward;      // [s * A + a]
  std::vector<double> transition;  // [(s * A + a) * S + s']

  double r(std::size_t s, std::size_t a) const { return reward[s * n_actions + a]; }
  double p(std::size_t s, std::size_t a, std::size_t next) const {
    return transition[(s * n_actions + a) * n_states + next];
  }
  void validate() const;
};

// Q_{t+1}(s,a) = r(s,a) + gamma * E_{s'} [alpha logsumexp_a' Q_t(s',a') / alpha],
// starting from Q_0 = 0. Returns the S x A table row-major.
std::vector<double> tabular_soft_q_iteration(const TabularMdp& mdp, double alpha, double gamma, std::size_t iters);

}  // namespace dpo
