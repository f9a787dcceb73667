#pragma once

// Reward-conditional GFlowNet over the structured-action construction DAG.
//
// The forward policy is a graph pointer network: an environment encoder
// (shared embedding + GNN stack) produces per-atomic embeddings; the
// sampler state is folded in as a value embedding and re-centred on a
// state-determined reference row, re-encoded by the same GNN stack, mixed by
// linearized attention and read out as masked K-way pointer logits per
// position. Termination, when enabled, has its own scalar head. The backward
// policy scores assigned positions from the same trunk. log Z has its own
// encoder so its regression touches only its parameters.

#include <functional>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "dpo/ebm.hpp"
#include "dpo/layers.hpp"

namespace dpo {

enum class NetParams { kOnline, kTarget };

struct GFlowNetConfig {
  EncoderConfig encoder;
  double epsilon_uniform = 0.05;
  double sampling_temperature = 1.0;
  bool termination_enabled = false;

  friend bool operator==(const GFlowNetConfig&, const GFlowNetConfig&) = default;
};

// Log-probabilities over the N*K assignment slots (position-major,
// value-minor) followed by the Terminate slot when enabled. Illegal slots
// hold -infinity.
struct StepDistribution {
  std::size_t n_atomic = 0;
  std::size_t arity = 0;
  bool has_terminate = false;
  std::vector<double> log_probs;

  std::size_t slot_count() const { return log_probs.size(); }
  double log_prob(const BuildStep& step) const { return log_probs[step_slot(step, n_atomic, arity)]; }
  double prob(const BuildStep& step) const;
  BuildStep step_at(std::size_t slot) const;
  bool legal(std::size_t slot) const;
  std::size_t legal_count() const;
};

class ConditionalGFlowNet;

// Differentiable view of one network on one observation. Encodings are
// cached per state on the owning tape, so evaluating many states of the
// same observation shares the environment encoding.
class FlowEvaluation {
 public:
  FlowEvaluation(const ConditionalGFlowNet& net, Binder forward, Binder backward, Binder logz,
                 const EnvObservation& obs, Rng* dropout_rng = nullptr);

  // 1 x slot_count log-probabilities (masked slots at kMaskedLogit).
  ad::Var forward_log_probs(const PartialAction& state);
  // 1 x N log-probabilities of unassigning each position (unassigned
  // positions masked).
  ad::Var backward_log_probs(const PartialAction& state);
  ad::Var log_z();

  StepDistribution forward_distribution(const PartialAction& state);

  // Sum of forward and backward log-probabilities along a trajectory.
  ad::Var trajectory_log_pf(const BuildTrajectory& tau);
  ad::Var trajectory_log_pb(const BuildTrajectory& tau);

  ad::Tape& tape() { return *tape_; }

 private:
  ad::Var trunk(const PartialAction& state);

  const ConditionalGFlowNet* net_;
  ad::Tape* tape_;
  Binder forward_;
  Binder backward_;
  Binder logz_;
  const EnvObservation* obs_;
  Rng* dropout_rng_;
  Adjacency adjacency_;
  std::optional<ad::Var> env_encoding_;
  std::optional<ad::Var> log_z_;
  std::unordered_map<std::uint64_t, ad::Var> trunk_cache_;
  std::unordered_map<std::uint64_t, ad::Var> forward_cache_;
};

struct SamplingOptions {
  bool explore = false;
  // Used to complete VOID positions after Terminate; all zeros when absent.
  std::optional<StructuredAction> warm_start;
  NetParams which = NetParams::kOnline;
};

struct TrajectoryBalanceResult {
  double loss = 0.0;
  double log_z = 0.0;
  double sum_log_pf = 0.0;
  double sum_log_pb = 0.0;
};

class ConditionalGFlowNet {
 public:
  ConditionalGFlowNet(std::size_t local_width, std::size_t arity, GFlowNetConfig config, Rng& rng);

  const GFlowNetConfig& config() const { return config_; }
  GFlowNetConfig& mutable_config() { return config_; }
  std::size_t arity() const { return arity_; }
  std::size_t local_width() const { return local_width_; }

  ParameterSet& forward_params() { return forward_; }
  ParameterSet& backward_params() { return backward_; }
  ParameterSet& logz_params() { return logz_; }
  const ParameterSet& forward_params() const { return forward_; }
  const ParameterSet& backward_params() const { return backward_; }
  const ParameterSet& logz_params() const { return logz_; }
  ParameterSet& target_forward() { return target_forward_; }
  ParameterSet& target_backward() { return target_backward_; }
  ParameterSet& target_logz() { return target_logz_; }
  const ParameterSet& forward_set(NetParams w) const { return w == NetParams::kOnline ? forward_ : target_forward_; }
  const ParameterSet& backward_set(NetParams w) const { return w == NetParams::kOnline ? backward_ : target_backward_; }
  const ParameterSet& logz_set(NetParams w) const { return w == NetParams::kOnline ? logz_ : target_logz_; }

  // Throws IllegalQuery for a complete state.
  StepDistribution forward_step_distribution(const PartialAction& state, const EnvObservation& obs,
                                             NetParams which = NetParams::kOnline) const;
  // Throws InvalidInput when `position` is not assigned in `state`.
  double backward_step_log_prob(const PartialAction& state, std::size_t position, const EnvObservation& obs,
                                NetParams which = NetParams::kOnline) const;
  double log_z(const EnvObservation& obs, NetParams which = NetParams::kOnline) const;

  BuildTrajectory sample_trajectory(const EnvObservation& obs, Rng& rng, const SamplingOptions& options) const;
  // Samples `count` trajectories sharing one evaluation of the observation.
  std::vector<BuildTrajectory> sample_trajectories(const EnvObservation& obs, Rng& rng, const SamplingOptions& options,
                                                   std::size_t count) const;

  // Frozen evaluation of the online or target parameters on `tape`.
  FlowEvaluation evaluate(ad::Tape& tape, const EnvObservation& obs, NetParams which) const;
  // Trainable evaluation; gradients flow into all three online groups.
  FlowEvaluation evaluate_trainable(ad::Tape& tape, const EnvObservation& obs, Rng* dropout_rng);

  void update_targets(double tau);

 private:
  std::size_t local_width_;
  std::size_t arity_;
  GFlowNetConfig config_;
  ParameterSet forward_, backward_, logz_;
  ParameterSet target_forward_, target_backward_, target_logz_;
};

// Draws from an already-computed distribution: tempered by `temperature`
// and mixed with a uniform over legal slots with weight `epsilon`.
std::size_t sample_slot(const StepDistribution& dist, double temperature, double epsilon, Rng& rng);

// (logZ + sum log P_F - log R - sum log P_B)^2, gradients into all three
// parameter groups. Throws TrainingDivergence naming the non-finite factor.
TrajectoryBalanceResult trajectory_balance_loss(ConditionalGFlowNet& net, const BuildTrajectory& tau,
                                                const EnvObservation& obs, double log_reward, double weight = 1.0);

// (logZ - V/alpha)^2, gradients into the log Z parameters only.
double z_regression_loss(ConditionalGFlowNet& net, const EnvObservation& obs, double soft_value, double alpha,
                         double weight = 1.0);

// Proposal q(a) for soft value estimates: trajectories from the forward
// policy, weighted by P_F(tau) / P_B(tau | a), whose importance weights are
// unbiased for the partition function.
class GFlowNetProposal final : public ProposalSource {
 public:
  GFlowNetProposal(const ConditionalGFlowNet& net, NetParams which, std::size_t samples)
      : net_(&net), which_(which), samples_(samples) {}
  std::vector<ProposalSample> draw(const EnvObservation& obs, Rng& rng) const override;

 private:
  const ConditionalGFlowNet* net_;
  NetParams which_;
  std::size_t samples_;
};

using ForwardPolicy = std::function<StepDistribution(const PartialAction&)>;

// Pushes probability mass from s0 through the graded DAG. Returns the
// terminating distribution indexed by action_index. Terminate mass lands on
// the warm-start completion of the state it leaves.
std::vector<double> exact_terminating_distribution(const ActionSpaceSpec& spec, const ForwardPolicy& policy,
                                                   const StructuredAction& warm_start,
                                                   std::size_t limit = kDefaultEnumerationLimit);
std::vector<double> exact_terminating_distribution(const ConditionalGFlowNet& net, const EnvObservation& obs,
                                                   NetParams which = NetParams::kOnline,
                                                   std::optional<StructuredAction> warm_start = std::nullopt,
                                                   std::size_t limit = kDefaultEnumerationLimit);

// Table-parameterized flow over a fixed action space: forward logits per
// (state, slot), backward logits per (state, position) and a scalar log Z.
class TabularFlow {
 public:
  explicit TabularFlow(ActionSpaceSpec spec);

  const ActionSpaceSpec& spec() const { return spec_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  StepDistribution forward(const PartialAction& state) const;
  double log_z() const { return params_.value("logz")[0]; }
  // Accumulates gradients; returns the loss.
  double trajectory_balance(const BuildTrajectory& tau, double log_reward);
  double trajectory_balance_value(const BuildTrajectory& tau, double log_reward) const;

  std::vector<double> terminating_distribution() const;

 private:
  ad::Var forward_log_probs(const Binder& bind, const PartialAction& state) const;
  ad::Var backward_log_probs(const Binder& bind, const PartialAction& state) const;
  ad::Var residual(const Binder& bind, const BuildTrajectory& tau, double log_reward) const;

  ActionSpaceSpec spec_;
  ParameterSet params_;
};

// Every complete trajectory (termination disabled) from s0 to `terminal`.
std::vector<BuildTrajectory> all_trajectories_to(const ActionSpaceSpec& spec, const StructuredAction& terminal);

}  // namespace dpo
