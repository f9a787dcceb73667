#include "dpo/ebm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dpo/kernels.hpp"

namespace dpo {

namespace {

constexpr const char* kEncoder = "q.encoder";
constexpr const char* kHidden = "q.head_hidden";
constexpr const char* kOut = "q.head_out";

}  // namespace

SoftQFunction::SoftQFunction(std::size_t local_width, std::size_t arity, SoftQConfig config, Rng& rng)
    : local_width_(local_width), arity_(arity), config_(config) {
  if (!(config_.alpha > 0.0)) throw InvalidInput("soft-Q temperature must be positive");
  if (!(config_.gamma >= 0.0 && config_.gamma < 1.0)) throw InvalidInput("discount must lie in [0, 1)");
  const std::size_t in_width = 1 + local_width + arity;
  layers::init_graph_encoder(params_, kEncoder, in_width, config_.encoder, rng);
  layers::init_linear(params_, kHidden, config_.encoder.hidden, config_.encoder.hidden, rng);
  layers::init_linear(params_, kOut, config_.encoder.hidden, 1, rng,
                      config_.zero_head ? layers::Init::kZero : layers::Init::kScaled, config_.head_gain);
  target_ = params_;
}

void SoftQFunction::set_alpha(double alpha) {
  if (!(alpha > 0.0)) throw InvalidInput("soft-Q temperature must be positive");
  config_.alpha = alpha;
}

void SoftQFunction::update_target(double tau) { soft_update(target_, params_, tau); }

ad::Var SoftQFunction::q_batch(const Binder& bind, std::span<const EnvObservation* const> obs,
                               std::span<const StructuredAction* const> actions, Rng* dropout_rng) const {
  if (obs.size() != actions.size() || obs.empty()) throw InvalidInput("q_batch needs matching non-empty inputs");
  const std::size_t width = 1 + local_width_ + arity_;
  std::size_t total = 0;
  for (std::size_t b = 0; b < obs.size(); ++b) {
    if (obs[b]->local_width != local_width_) throw InvalidInput("observation width does not match the Q model");
    if (actions[b]->size() != obs[b]->n_atomic) throw InvalidInput("action and observation dimensions differ");
    total += obs[b]->n_atomic;
  }
  Tensor x(total, width);
  Tensor pool(obs.size(), total);
  std::vector<Edge> edges;
  std::size_t offset = 0;
  for (std::size_t b = 0; b < obs.size(); ++b) {
    const EnvObservation& o = *obs[b];
    const Tensor inputs = node_inputs(o);
    for (std::size_t i = 0; i < o.n_atomic; ++i) {
      for (std::size_t f = 0; f < inputs.cols(); ++f) x(offset + i, f) = inputs(i, f);
      const std::size_t a = (*actions[b])[i];
      if (a >= arity_) throw InvalidInput("action value out of range");
      x(offset + i, inputs.cols() + a) = 1.0;
      pool(b, offset + i) = 1.0 / static_cast<double>(o.n_atomic);
    }
    const Adjacency adj = o.adjacency();
    for (auto [i, j] : adj.edges()) edges.emplace_back(offset + i, offset + j);
    offset += o.n_atomic;
  }
  ad::Tape& tape = bind.tape();
  ad::Var h = layers::graph_encoder(bind, kEncoder, tape.constant(std::move(x)), Adjacency(total, edges),
                                    config_.encoder, dropout_rng);
  ad::Var pooled = ad::matmul(tape.constant(std::move(pool)), h);
  ad::Var hidden = ad::relu(layers::linear(bind, kHidden, pooled));
  return layers::linear(bind, kOut, hidden);
}

std::vector<double> SoftQFunction::q_values(const EnvObservation& obs, std::span<const StructuredAction> actions,
                                            QParams which) const {
  if (actions.empty()) return {};
  ad::Tape tape(false);
  Binder bind(tape, select(which));
  std::vector<const EnvObservation*> obs_ptrs(actions.size(), &obs);
  std::vector<const StructuredAction*> act_ptrs;
  act_ptrs.reserve(actions.size());
  for (const auto& a : actions) act_ptrs.push_back(&a);
  const Tensor& out = q_batch(bind, obs_ptrs, act_ptrs).value();
  std::vector<double> q(out.data());
  for (double v : q) {
    if (!std::isfinite(v)) throw ModelDivergence("soft-Q model produced a non-finite value");
  }
  return q;
}

double SoftQFunction::q_value(const EnvObservation& obs, const StructuredAction& action, QParams which) const {
  return q_values(obs, std::span<const StructuredAction>(&action, 1), which)[0];
}

double SoftQFunction::log_reward(const EnvObservation& obs, const StructuredAction& action, QParams which) const {
  (which == QParams::kOnline ? reads_.online : reads_.target) += 1;
  return q_value(obs, action, which) / config_.alpha;
}

std::vector<double> SoftQFunction::log_rewards(const EnvObservation& obs, std::span<const StructuredAction> actions,
                                               QParams which) const {
  (which == QParams::kOnline ? reads_.online : reads_.target) += actions.size();
  std::vector<double> out = q_values(obs, actions, which);
  for (double& v : out) v /= config_.alpha;
  return out;
}

SoftValueEstimate soft_value_from(std::span<const double> q_values, std::span<const double> log_proposals,
                                  double alpha) {
  if (q_values.empty()) throw InvalidInput("soft value estimate needs at least one sample");
  if (q_values.size() != log_proposals.size()) throw InvalidInput("sample and proposal counts differ");
  if (!(alpha > 0.0)) throw InvalidInput("temperature must be positive");
  std::vector<double> log_w(q_values.size());
  for (std::size_t i = 0; i < q_values.size(); ++i) {
    if (!std::isfinite(log_proposals[i])) throw InvalidInput("proposal probability must be positive");
    log_w[i] = q_values[i] / alpha - log_proposals[i];
  }
  const double lse = logsumexp(log_w, 1.0);
  const auto m = static_cast<double>(q_values.size());
  double sum_sq = 0.0;
  for (double lw : log_w) sum_sq += std::exp(2.0 * (lw - lse));
  return {alpha * (lse - std::log(m)), 1.0 / sum_sq};
}

SoftValueEstimate soft_value_estimate(const SoftQFunction& q, const EnvObservation& obs,
                                      std::span<const ProposalSample> samples, QParams which) {
  if (samples.empty()) throw InvalidInput("soft value estimate needs at least one sample");
  std::vector<StructuredAction> actions;
  std::vector<double> log_q;
  actions.reserve(samples.size());
  log_q.reserve(samples.size());
  for (const auto& s : samples) {
    if (!std::isfinite(s.log_q)) throw InvalidInput("proposal probability must be positive");
    actions.push_back(s.action);
    log_q.push_back(s.log_q);
  }
  return soft_value_from(q.q_values(obs, actions, which), log_q, q.alpha());
}

std::vector<ProposalSample> ExhaustiveUniformProposal::draw(const EnvObservation& obs, Rng&) const {
  ActionSpaceSpec spec{obs.n_atomic, arity_, {}, false};
  const auto actions = enumerate_actions(spec, limit_);
  const double log_q = -std::log(static_cast<double>(actions.size()));
  std::vector<ProposalSample> out;
  out.reserve(actions.size());
  for (const auto& a : actions) out.push_back({a, log_q});
  return out;
}

double bellman_target(const SoftQFunction& q, double reward, const EnvObservation& next_obs, bool done,
                      const ProposalSource& proposals, Rng& rng, double* ess) {
  if (done || q.gamma() == 0.0) {
    if (ess) *ess = 0.0;
    return reward;
  }
  const auto samples = proposals.draw(next_obs, rng);
  const SoftValueEstimate v = soft_value_estimate(q, next_obs, samples, QParams::kTarget);
  if (ess) *ess = v.ess;
  return reward + q.gamma() * v.value;
}

double q_loss_with_targets(SoftQFunction& q, std::span<const Transition> batch, std::span<const double> targets) {
  if (batch.empty()) throw InvalidInput("q_loss needs a non-empty batch");
  if (targets.size() != batch.size()) throw InvalidInput("one target per transition is required");
  ad::Tape tape;
  Binder bind(tape, q.params());
  std::vector<const EnvObservation*> obs;
  std::vector<const StructuredAction*> actions;
  for (const auto& t : batch) {
    obs.push_back(&t.obs);
    actions.push_back(&t.action);
  }
  ad::Var pred = q.q_batch(bind, obs, actions);
  ad::Var target = tape.constant(Tensor(batch.size(), 1, std::vector<double>(targets.begin(), targets.end())));
  ad::Var loss = ad::scale(ad::mean(ad::square(ad::sub(target, pred))), 0.5);
  const double value = loss.scalar();
  if (!std::isfinite(value)) throw TrainingDivergence("non-finite soft-Q loss");
  tape.backward(loss);
  return value;
}

QLossResult q_loss(SoftQFunction& q, std::span<const Transition> batch, const ProposalSource& proposals, Rng& rng) {
  if (batch.empty()) throw InvalidInput("q_loss needs a non-empty batch");
  std::vector<double> targets;
  targets.reserve(batch.size());
  double ess_sum = 0.0;
  std::size_t ess_count = 0;
  for (const auto& t : batch) {
    double ess = 0.0;
    targets.push_back(bellman_target(q, t.reward, t.next_obs, t.done, proposals, rng, &ess));
    if (!t.done) {
      ess_sum += ess;
      ++ess_count;
    }
  }
  QLossResult out;
  out.loss = q_loss_with_targets(q, batch, targets);
  out.mean_ess = ess_count ? ess_sum / static_cast<double>(ess_count) : 0.0;
  return out;
}

void TabularMdp::validate() const {
  if (n_states == 0 || n_actions == 0) throw InvalidInput("empty MDP");
  if (n_states * n_actions > 100'000) throw InvalidInput("MDP too large for tabular iteration");
  if (reward.size() != n_states * n_actions) throw InvalidInput("reward table has the wrong size");
  if (transition.size() != n_states * n_actions * n_states) throw InvalidInput("transition table has the wrong size");
  for (std::size_t sa = 0; sa < n_states * n_actions; ++sa) {
    double total = 0.0;
    for (std::size_t s2 = 0; s2 < n_states; ++s2) {
      const double p = transition[sa * n_states + s2];
      if (p < 0.0) throw InvalidInput("negative transition probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidInput("transition rows must sum to 1");
  }
}

std::vector<double> tabular_soft_q_iteration(const TabularMdp& mdp, double alpha, double gamma, std::size_t iters) {
  mdp.validate();
  const std::size_t S = mdp.n_states, A = mdp.n_actions;
  std::vector<double> q(S * A, 0.0);
  std::vector<double> v(S);
  for (std::size_t it = 0; it < iters; ++it) {
    for (std::size_t s = 0; s < S; ++s) {
      v[s] = logsumexp(std::span<const double>(q.data() + s * A, A), alpha);
    }
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t a = 0; a < A; ++a) {
        double expected = 0.0;
        for (std::size_t s2 = 0; s2 < S; ++s2) expected += mdp.p(s, a, s2) * v[s2];
        q[s * A + a] = mdp.r(s, a) + gamma * expected;
      }
    }
  }
  return q;
}

}  // namespace dpo
