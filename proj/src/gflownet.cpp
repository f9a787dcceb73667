#include "dpo/gflownet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "dpo/errors.hpp"

namespace dpo {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void add_matrix(ParameterSet& params, const std::string& name, std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor w(rows, cols);
  const double scale = 1.0 / std::sqrt(static_cast<double>(rows));
  for (double& v : w.data()) v = scale * rng.normal();
  params.add(name, std::move(w));
}

ad::Var log_z_head(const Binder& bind, const EncoderConfig& cfg, const EnvObservation& obs, Rng* dropout_rng) {
  ad::Tape& tape = bind.tape();
  ad::Var h = layers::graph_encoder(bind, "z.env", tape.constant(node_inputs(obs)), obs.adjacency(), cfg, dropout_rng);
  ad::Var pooled = ad::mean_rows(h);
  ad::Var hidden = ad::relu(layers::linear(bind, "z.hidden", pooled));
  return layers::linear(bind, "z.out", hidden);
}

// Row vector -> row vector with the listed columns replaced by `fill`.
ad::Var mask_cols(ad::Var row_vec, const std::vector<bool>& mask, double fill) {
  return ad::transpose(ad::mask_rows(ad::transpose(row_vec), mask, fill));
}

void check_finite(double v, const char* factor) {
  if (!std::isfinite(v)) throw TrainingDivergence(std::string("non-finite ") + factor + " in trajectory balance");
}

}  // namespace

double StepDistribution::prob(const BuildStep& step) const {
  const double lp = log_prob(step);
  return lp == kNegInf ? 0.0 : std::exp(lp);
}

BuildStep StepDistribution::step_at(std::size_t slot) const {
  if (slot >= log_probs.size()) throw InvalidInput("slot out of range");
  if (has_terminate && slot == n_atomic * arity) return BuildStep::terminate();
  return BuildStep::assign(slot / arity, slot % arity);
}

bool StepDistribution::legal(std::size_t slot) const { return log_probs.at(slot) != kNegInf; }

std::size_t StepDistribution::legal_count() const {
  return static_cast<std::size_t>(std::count_if(log_probs.begin(), log_probs.end(),
                                                [](double v) { return v != kNegInf; }));
}

FlowEvaluation::FlowEvaluation(const ConditionalGFlowNet& net, Binder forward, Binder backward, Binder logz,
                               const EnvObservation& obs, Rng* dropout_rng)
    : net_(&net),
      tape_(&forward.tape()),
      forward_(forward),
      backward_(backward),
      logz_(logz),
      obs_(&obs),
      dropout_rng_(net.config().encoder.dropout > 0.0 ? dropout_rng : nullptr),
      adjacency_(obs.adjacency()) {
  if (obs.local_width != net.local_width()) throw InvalidInput("observation width does not match the sampler");
  if (obs.n_atomic == 0) throw InvalidInput("observation has no atomic actions");
}

ad::Var FlowEvaluation::trunk(const PartialAction& state) {
  const std::size_t n = obs_->n_atomic;
  const std::size_t k = net_->arity();
  if (state.size() != n) throw InvalidInput("state length does not match the observation");
  const std::uint64_t key = state_index(state, k);
  if (auto it = trunk_cache_.find(key); it != trunk_cache_.end()) return it->second;

  const EncoderConfig& cfg = net_->config().encoder;
  if (!env_encoding_) {
    env_encoding_ = layers::graph_encoder(forward_, "f.env", tape_->constant(node_inputs(*obs_)), adjacency_, cfg,
                                          dropout_rng_);
  }
  Tensor onehot(n, k + 1);
  std::vector<std::size_t> codes = state.encode(k);
  for (std::size_t i = 0; i < n; ++i) onehot(i, codes[i]) = 1.0;
  ad::Var u = ad::add(*env_encoding_, layers::linear(forward_, "f.value_embed", tape_->constant(std::move(onehot))));

  ad::Var reference;
  if (state.assigned_count() == 0) {
    reference = forward_("f.reference");
  } else {
    Tensor w(1, n);
    const double share = 1.0 / static_cast<double>(state.assigned_count());
    for (std::size_t i = 0; i < n; ++i) {
      if (!state.is_void(i)) w(0, i) = share;
    }
    reference = ad::matmul(tape_->constant(std::move(w)), u);
  }
  ad::Var s = layers::gnn_stack(forward_, "f.env", ad::sub_row(u, reference), adjacency_, cfg, dropout_rng_);
  s = ad::add(s, linear_attention(s, forward_("f.attn_q"), forward_("f.attn_k"), forward_("f.attn_v")));
  trunk_cache_.emplace(key, s);
  return s;
}

ad::Var FlowEvaluation::forward_log_probs(const PartialAction& state) {
  if (state.complete()) throw IllegalQuery("forward policy queried at a complete state");
  const std::uint64_t key = state_index(state, net_->arity());
  if (auto it = forward_cache_.find(key); it != forward_cache_.end()) return it->second;
  ad::Var h = trunk(state);
  std::vector<bool> assigned(state.size());
  for (std::size_t i = 0; i < state.size(); ++i) assigned[i] = !state.is_void(i);
  ad::Var logits = ad::flatten(masked_pointer_logits(layers::linear(forward_, "f.select", h), assigned));
  if (net_->config().termination_enabled) {
    std::vector<ad::Var> parts{logits, layers::linear(forward_, "f.terminate", ad::mean_rows(h))};
    logits = ad::concat_flat(parts);
  }
  ad::Var out = ad::log_softmax(logits);
  forward_cache_.emplace(key, out);
  return out;
}

ad::Var FlowEvaluation::backward_log_probs(const PartialAction& state) {
  if (state.assigned_count() == 0) throw IllegalQuery("backward policy queried at the initial state");
  ad::Var scores = layers::linear(backward_, "b.head", trunk(state));
  std::vector<bool> unassigned(state.size());
  for (std::size_t i = 0; i < state.size(); ++i) unassigned[i] = state.is_void(i);
  return ad::log_softmax(ad::flatten(ad::mask_rows(scores, unassigned, kMaskedLogit)));
}

ad::Var FlowEvaluation::log_z() {
  if (!log_z_) log_z_ = log_z_head(logz_, net_->config().encoder, *obs_, dropout_rng_);
  return *log_z_;
}

StepDistribution FlowEvaluation::forward_distribution(const PartialAction& state) {
  const Tensor& lp = forward_log_probs(state).value();
  StepDistribution d;
  d.n_atomic = state.size();
  d.arity = net_->arity();
  d.has_terminate = net_->config().termination_enabled;
  d.log_probs.assign(lp.data().begin(), lp.data().end());
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state.is_void(i)) continue;
    for (std::size_t v = 0; v < d.arity; ++v) d.log_probs[i * d.arity + v] = kNegInf;
  }
  return d;
}

ad::Var FlowEvaluation::trajectory_log_pf(const BuildTrajectory& tau) {
  if (tau.steps.empty()) throw InvalidInput("empty trajectory");
  std::vector<ad::Var> terms;
  for (const auto& ts : tau.steps) {
    if (!ts.step.is_terminate()) (void)apply(ts.state, ts.step);
    terms.push_back(ad::pick(forward_log_probs(ts.state), 0, step_slot(ts.step, ts.state.size(), net_->arity())));
  }
  return ad::sum(ad::concat_flat(terms));
}

ad::Var FlowEvaluation::trajectory_log_pb(const BuildTrajectory& tau) {
  std::vector<ad::Var> terms;
  for (const auto& ts : tau.steps) {
    // The sink reached by Terminate has a single parent.
    if (ts.step.is_terminate()) continue;
    const PartialAction next = apply(ts.state, ts.step);
    terms.push_back(ad::pick(backward_log_probs(next), 0, ts.step.position));
  }
  if (terms.empty()) return tape_->scalar(0.0);
  return ad::sum(ad::concat_flat(terms));
}

ConditionalGFlowNet::ConditionalGFlowNet(std::size_t local_width, std::size_t arity, GFlowNetConfig config, Rng& rng)
    : local_width_(local_width), arity_(arity), config_(std::move(config)) {
  if (arity_ < 2) throw InvalidInput("arity must be at least 2");
  if (!(config_.epsilon_uniform >= 0.0 && config_.epsilon_uniform <= 1.0)) {
    throw InvalidInput("exploration weight must lie in [0, 1]");
  }
  if (!(config_.sampling_temperature > 0.0)) throw InvalidInput("sampling temperature must be positive");
  const std::size_t d = config_.encoder.hidden;
  layers::init_graph_encoder(forward_, "f.env", 1 + local_width_, config_.encoder, rng);
  layers::init_linear(forward_, "f.value_embed", arity_ + 1, d, rng);
  forward_.add("f.reference", Tensor(1, d));
  add_matrix(forward_, "f.attn_q", d, d, rng);
  add_matrix(forward_, "f.attn_k", d, d, rng);
  add_matrix(forward_, "f.attn_v", d, d, rng);
  layers::init_linear(forward_, "f.select", d, arity_, rng, layers::Init::kZero);
  if (config_.termination_enabled) layers::init_linear(forward_, "f.terminate", d, 1, rng, layers::Init::kZero);

  layers::init_linear(backward_, "b.head", d, 1, rng, layers::Init::kZero);

  layers::init_graph_encoder(logz_, "z.env", 1 + local_width_, config_.encoder, rng);
  layers::init_linear(logz_, "z.hidden", d, d, rng);
  layers::init_linear(logz_, "z.out", d, 1, rng, layers::Init::kZero);

  target_forward_ = forward_;
  target_backward_ = backward_;
  target_logz_ = logz_;
}

FlowEvaluation ConditionalGFlowNet::evaluate(ad::Tape& tape, const EnvObservation& obs, NetParams which) const {
  return FlowEvaluation(*this, Binder(tape, forward_set(which)), Binder(tape, backward_set(which)),
                        Binder(tape, logz_set(which)), obs);
}

FlowEvaluation ConditionalGFlowNet::evaluate_trainable(ad::Tape& tape, const EnvObservation& obs, Rng* dropout_rng) {
  return FlowEvaluation(*this, Binder(tape, forward_), Binder(tape, backward_), Binder(tape, logz_), obs,
                        dropout_rng);
}

StepDistribution ConditionalGFlowNet::forward_step_distribution(const PartialAction& state, const EnvObservation& obs,
                                                                NetParams which) const {
  ad::Tape tape(false);
  return evaluate(tape, obs, which).forward_distribution(state);
}

double ConditionalGFlowNet::backward_step_log_prob(const PartialAction& state, std::size_t position,
                                                   const EnvObservation& obs, NetParams which) const {
  if (position >= state.size() || state.is_void(position)) {
    throw InvalidInput("backward step must unassign an assigned position");
  }
  ad::Tape tape(false);
  return evaluate(tape, obs, which).backward_log_probs(state).value()(0, position);
}

double ConditionalGFlowNet::log_z(const EnvObservation& obs, NetParams which) const {
  ad::Tape tape(false);
  return evaluate(tape, obs, which).log_z().scalar();
}

std::size_t sample_slot(const StepDistribution& dist, double temperature, double epsilon, Rng& rng) {
  const std::size_t n = dist.slot_count();
  std::vector<double> p(n, 0.0);
  double best = kNegInf;
  for (double lp : dist.log_probs) best = std::max(best, lp);
  if (best == kNegInf) throw InternalInvariant("no legal step to sample");
  double total = 0.0;
  std::size_t legal = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (dist.log_probs[i] == kNegInf) continue;
    p[i] = std::exp((dist.log_probs[i] - best) / temperature);
    total += p[i];
    ++legal;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (dist.log_probs[i] == kNegInf) continue;
    p[i] = (1.0 - epsilon) * p[i] / total + epsilon / static_cast<double>(legal);
  }
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (p[i] <= 0.0) continue;
    acc += p[i];
    last = i;
    if (u < acc) return i;
  }
  return last;
}

namespace {

BuildTrajectory sample_with(FlowEvaluation& eval, std::size_t n, const GFlowNetConfig& cfg, Rng& rng,
                            const SamplingOptions& options) {
  const StructuredAction fallback = options.warm_start ? *options.warm_start
                                                       : StructuredAction(std::vector<std::size_t>(n, 0));
  if (fallback.size() != n) throw InvalidInput("warm-start action has the wrong length");
  const double eps = options.explore ? cfg.epsilon_uniform : 0.0;
  const double temperature = options.explore ? cfg.sampling_temperature : 1.0;
  BuildTrajectory tau;
  PartialAction state(n);
  for (std::size_t guard = 0; guard <= n; ++guard) {
    const StepDistribution dist = eval.forward_distribution(state);
    const std::size_t slot = sample_slot(dist, temperature, eps, rng);
    const BuildStep step = dist.step_at(slot);
    tau.steps.push_back({state, step});
    tau.forward_log_probs.push_back(dist.log_probs[slot]);
    if (step.is_terminate()) {
      tau.terminal = complete_from(state, fallback);
      return tau;
    }
    state = apply(state, step);
    if (state.complete()) {
      tau.terminal = state.to_action();
      return tau;
    }
  }
  throw InternalInvariant("sampler exceeded N + 1 steps");
}

}  // namespace

BuildTrajectory ConditionalGFlowNet::sample_trajectory(const EnvObservation& obs, Rng& rng,
                                                       const SamplingOptions& options) const {
  return sample_trajectories(obs, rng, options, 1).front();
}

std::vector<BuildTrajectory> ConditionalGFlowNet::sample_trajectories(const EnvObservation& obs, Rng& rng,
                                                                      const SamplingOptions& options,
                                                                      std::size_t count) const {
  ad::Tape tape(false);
  FlowEvaluation eval = evaluate(tape, obs, options.which);
  std::vector<BuildTrajectory> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(sample_with(eval, obs.n_atomic, config_, rng, options));
  return out;
}

void ConditionalGFlowNet::update_targets(double tau) {
  soft_update(target_forward_, forward_, tau);
  soft_update(target_backward_, backward_, tau);
  soft_update(target_logz_, logz_, tau);
}

TrajectoryBalanceResult trajectory_balance_loss(ConditionalGFlowNet& net, const BuildTrajectory& tau,
                                                const EnvObservation& obs, double log_reward, double weight) {
  check_finite(log_reward, "log reward");
  ad::Tape tape;
  Rng* dropout = nullptr;
  FlowEvaluation eval = net.evaluate_trainable(tape, obs, dropout);
  ad::Var logz = eval.log_z();
  ad::Var log_pf = eval.trajectory_log_pf(tau);
  ad::Var log_pb = eval.trajectory_log_pb(tau);
  TrajectoryBalanceResult r;
  r.log_z = logz.scalar();
  r.sum_log_pf = log_pf.scalar();
  r.sum_log_pb = log_pb.scalar();
  check_finite(r.log_z, "log Z");
  check_finite(r.sum_log_pf, "forward log-probability");
  check_finite(r.sum_log_pb, "backward log-probability");
  ad::Var residual = ad::add_scalar(ad::sub(ad::add(logz, log_pf), log_pb), -log_reward);
  ad::Var loss = ad::square(residual);
  r.loss = loss.scalar();
  check_finite(r.loss, "loss");
  tape.backward(ad::scale(loss, weight));
  return r;
}

double z_regression_loss(ConditionalGFlowNet& net, const EnvObservation& obs, double soft_value, double alpha,
                         double weight) {
  if (!(alpha > 0.0)) throw InvalidInput("temperature must be positive");
  if (!std::isfinite(soft_value)) throw TrainingDivergence("non-finite soft value in log Z regression");
  ad::Tape tape;
  ad::Var logz = log_z_head(Binder(tape, net.logz_params()), net.config().encoder, obs, nullptr);
  ad::Var loss = ad::square(ad::add_scalar(logz, -soft_value / alpha));
  const double value = loss.scalar();
  if (!std::isfinite(value)) throw TrainingDivergence("non-finite log Z regression loss");
  tape.backward(ad::scale(loss, weight));
  return value;
}

std::vector<ProposalSample> GFlowNetProposal::draw(const EnvObservation& obs, Rng& rng) const {
  ad::Tape tape(false);
  FlowEvaluation eval = net_->evaluate(tape, obs, which_);
  SamplingOptions options;
  options.which = which_;
  std::vector<ProposalSample> out;
  out.reserve(samples_);
  for (std::size_t i = 0; i < samples_; ++i) {
    BuildTrajectory tau = sample_with(eval, obs.n_atomic, net_->config(), rng, options);
    const double log_pf = std::accumulate(tau.forward_log_probs.begin(), tau.forward_log_probs.end(), 0.0);
    const double log_pb = eval.trajectory_log_pb(tau).scalar();
    out.push_back({std::move(tau.terminal), log_pf - log_pb});
  }
  return out;
}

std::vector<double> exact_terminating_distribution(const ActionSpaceSpec& spec, const ForwardPolicy& policy,
                                                   const StructuredAction& warm_start, std::size_t limit) {
  spec.validate();
  const std::size_t n = spec.n_atomic, k = spec.arity;
  double states = 1.0;
  for (std::size_t i = 0; i < n; ++i) states *= static_cast<double>(k + 1);
  if (states > static_cast<double>(limit)) throw EnumerationTooLarge("state space exceeds the enumeration limit");
  if (warm_start.size() != n) throw InvalidInput("warm-start action has the wrong length");
  const auto total = static_cast<std::size_t>(*spec.action_count());
  std::vector<double> out(total, 0.0);

  std::map<std::uint64_t, std::pair<PartialAction, double>> level;
  level.emplace(state_index(PartialAction(n), k), std::make_pair(PartialAction(n), 1.0));
  for (std::size_t depth = 0; depth < n; ++depth) {
    std::map<std::uint64_t, std::pair<PartialAction, double>> next;
    for (const auto& [key, entry] : level) {
      const auto& [state, mass] = entry;
      const StepDistribution dist = policy(state);
      for (std::size_t slot = 0; slot < dist.slot_count(); ++slot) {
        if (!dist.legal(slot)) continue;
        const double p = mass * std::exp(dist.log_probs[slot]);
        const BuildStep step = dist.step_at(slot);
        if (step.is_terminate()) {
          out[action_index(complete_from(state, warm_start), k)] += p;
          continue;
        }
        PartialAction child = apply(state, step);
        if (child.complete()) {
          out[action_index(child.to_action(), k)] += p;
          continue;
        }
        auto [it, inserted] = next.try_emplace(state_index(child, k), child, 0.0);
        it->second.second += p;
      }
    }
    level = std::move(next);
  }
  return out;
}

std::vector<double> exact_terminating_distribution(const ConditionalGFlowNet& net, const EnvObservation& obs,
                                                   NetParams which, std::optional<StructuredAction> warm_start,
                                                   std::size_t limit) {
  const ActionSpaceSpec spec{obs.n_atomic, net.arity(), obs.adjacency(), net.config().termination_enabled};
  double states = 1.0;
  for (std::size_t i = 0; i < obs.n_atomic; ++i) states *= static_cast<double>(net.arity() + 1);
  if (states > static_cast<double>(limit)) throw EnumerationTooLarge("state space exceeds the enumeration limit");
  ad::Tape tape(false);
  FlowEvaluation eval = net.evaluate(tape, obs, which);
  const StructuredAction fallback =
      warm_start ? *warm_start : StructuredAction(std::vector<std::size_t>(obs.n_atomic, 0));
  return exact_terminating_distribution(
      spec, [&](const PartialAction& s) { return eval.forward_distribution(s); }, fallback, limit);
}

TabularFlow::TabularFlow(ActionSpaceSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  const std::size_t n = spec_.n_atomic, k = spec_.arity;
  std::size_t states = 1;
  for (std::size_t i = 0; i < n; ++i) {
    states *= k + 1;
    if (states > 100'000) throw EnumerationTooLarge("tabular flow limited to 1e5 states");
  }
  params_.add("pf", Tensor(states, n * k + (spec_.termination_enabled ? 1 : 0)));
  params_.add("pb", Tensor(states, n));
  params_.add("logz", Tensor(1, 1));
}

ad::Var TabularFlow::forward_log_probs(const Binder& bind, const PartialAction& state) const {
  if (state.complete()) throw IllegalQuery("forward policy queried at a complete state");
  const std::size_t k = spec_.arity;
  ad::Var logits = ad::row(bind("pf"), state_index(state, k));
  std::vector<bool> mask(logits.cols(), false);
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state.is_void(i)) continue;
    for (std::size_t v = 0; v < k; ++v) mask[i * k + v] = true;
  }
  return ad::log_softmax(mask_cols(logits, mask, kMaskedLogit));
}

ad::Var TabularFlow::backward_log_probs(const Binder& bind, const PartialAction& state) const {
  if (state.assigned_count() == 0) throw IllegalQuery("backward policy queried at the initial state");
  ad::Var logits = ad::row(bind("pb"), state_index(state, spec_.arity));
  std::vector<bool> mask(state.size());
  for (std::size_t i = 0; i < state.size(); ++i) mask[i] = state.is_void(i);
  return ad::log_softmax(mask_cols(logits, mask, kMaskedLogit));
}

StepDistribution TabularFlow::forward(const PartialAction& state) const {
  ad::Tape tape(false);
  const Tensor& lp = forward_log_probs(Binder(tape, std::as_const(params_)), state).value();
  StepDistribution d{state.size(), spec_.arity, spec_.termination_enabled, lp.data()};
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state.is_void(i)) continue;
    for (std::size_t v = 0; v < spec_.arity; ++v) d.log_probs[i * spec_.arity + v] = kNegInf;
  }
  return d;
}

ad::Var TabularFlow::residual(const Binder& bind, const BuildTrajectory& tau, double log_reward) const {
  if (tau.steps.empty()) throw InvalidInput("empty trajectory");
  const std::size_t n = spec_.n_atomic, k = spec_.arity;
  std::vector<ad::Var> terms{bind("logz")};
  for (const auto& ts : tau.steps) {
    terms.push_back(ad::pick(forward_log_probs(bind, ts.state), 0, step_slot(ts.step, n, k)));
    if (ts.step.is_terminate()) continue;
    const PartialAction next = apply(ts.state, ts.step);
    terms.push_back(ad::neg(ad::pick(backward_log_probs(bind, next), 0, ts.step.position)));
  }
  return ad::add_scalar(ad::sum(ad::concat_flat(terms)), -log_reward);
}

double TabularFlow::trajectory_balance(const BuildTrajectory& tau, double log_reward) {
  ad::Tape tape;
  ad::Var loss = ad::square(residual(Binder(tape, params_), tau, log_reward));
  const double value = loss.scalar();
  if (!std::isfinite(value)) throw TrainingDivergence("non-finite trajectory balance loss");
  tape.backward(loss);
  return value;
}

double TabularFlow::trajectory_balance_value(const BuildTrajectory& tau, double log_reward) const {
  ad::Tape tape(false);
  return ad::square(residual(Binder(tape, params_), tau, log_reward)).scalar();
}

std::vector<double> TabularFlow::terminating_distribution() const {
  return exact_terminating_distribution(
      spec_, [this](const PartialAction& s) { return forward(s); },
      StructuredAction(std::vector<std::size_t>(spec_.n_atomic, 0)));
}

std::vector<BuildTrajectory> all_trajectories_to(const ActionSpaceSpec& spec, const StructuredAction& terminal) {
  spec.validate();
  if (terminal.size() != spec.n_atomic) throw InvalidInput("terminal has the wrong length");
  if (spec.n_atomic > 8) throw EnumerationTooLarge("too many orderings to enumerate");
  std::vector<std::size_t> order(spec.n_atomic);
  std::iota(order.begin(), order.end(), 0);
  std::vector<BuildTrajectory> out;
  do {
    BuildTrajectory tau;
    PartialAction state(spec.n_atomic);
    for (std::size_t pos : order) {
      const BuildStep step = BuildStep::assign(pos, terminal[pos]);
      tau.steps.push_back({state, step});
      state = apply(state, step);
    }
    tau.terminal = terminal;
    out.push_back(std::move(tau));
  } while (std::next_permutation(order.begin(), order.end()));
  return out;
}

}  // namespace dpo
