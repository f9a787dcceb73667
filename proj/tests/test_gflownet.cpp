#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>

#include "dpo/errors.hpp"
#include "dpo/gflownet.hpp"
#include "support.hpp"

using namespace dpo;
using dpo::testing::random_observation;
using dpo::testing::relative_error;

namespace {

constexpr std::size_t V = PartialAction::kVoid;

GFlowNetConfig small_config(bool termination = false) {
  GFlowNetConfig c;
  c.encoder.hidden = 8;
  c.encoder.gnn_layers = 1;
  c.termination_enabled = termination;
  return c;
}

void jitter(ParameterSet& ps, Rng& rng, double scale) {
  for (auto& p : ps.entries()) {
    for (double& v : p.value.data()) v += scale * rng.normal();
  }
}

// A network whose heads are no longer zero, so every policy is non-trivial.
ConditionalGFlowNet random_net(std::size_t width, std::size_t k, std::uint64_t seed, bool termination = false,
                               double scale = 0.5) {
  Rng rng(seed);
  ConditionalGFlowNet net(width, k, small_config(termination), rng);
  jitter(net.forward_params(), rng, scale);
  jitter(net.backward_params(), rng, scale);
  jitter(net.logz_params(), rng, scale);
  return net;
}

ActionSpaceSpec spec_of(const EnvObservation& obs, std::size_t k, bool termination = false) {
  return {obs.n_atomic, k, obs.adjacency(), termination};
}

// P_T by summing the probability of every path, one recursion per step.
void path_sum(const ConditionalGFlowNet& net, const EnvObservation& obs, const PartialAction& s, double mass,
              const StructuredAction& warm, std::vector<double>& out) {
  if (s.complete()) {
    out[action_index(s.to_action(), net.arity())] += mass;
    return;
  }
  const StepDistribution d = net.forward_step_distribution(s, obs);
  for (std::size_t slot = 0; slot < d.slot_count(); ++slot) {
    if (!d.legal(slot)) continue;
    const double p = mass * std::exp(d.log_probs[slot]);
    const BuildStep step = d.step_at(slot);
    if (step.is_terminate()) {
      out[action_index(complete_from(s, warm), net.arity())] += p;
    } else {
      path_sum(net, obs, apply(s, step), p, warm, out);
    }
  }
}

// Trajectory balance residual from the per-step queries alone.
double tb_residual(const ConditionalGFlowNet& net, const EnvObservation& obs, const BuildTrajectory& tau,
                   double log_reward) {
  double r = net.log_z(obs) - log_reward;
  for (const auto& ts : tau.steps) {
    r += net.forward_step_distribution(ts.state, obs).log_prob(ts.step);
    if (!ts.step.is_terminate()) r -= net.backward_step_log_prob(apply(ts.state, ts.step), ts.step.position, obs);
  }
  return r;
}

double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

std::vector<double> normalized(const std::vector<double>& log_r) {
  double mx = *std::max_element(log_r.begin(), log_r.end());
  std::vector<double> p(log_r.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += (p[i] = std::exp(log_r[i] - mx));
  for (double& x : p) x /= total;
  return p;
}

// Full-batch gradient descent on the mean trajectory balance loss over
// every trajectory of every terminal.
double train_tabular(TabularFlow& flow, const std::vector<double>& log_r, std::size_t iters, double lr) {
  const auto actions = enumerate_actions(flow.spec());
  std::vector<std::pair<BuildTrajectory, double>> all;
  for (std::size_t i = 0; i < actions.size(); ++i) {
    for (auto& tau : all_trajectories_to(flow.spec(), actions[i])) all.emplace_back(std::move(tau), log_r[i]);
  }
  double worst = 0.0;
  for (std::size_t it = 0; it < iters; ++it) {
    flow.params().zero_grad();
    for (const auto& [tau, lr_i] : all) flow.trajectory_balance(tau, lr_i);
    for (auto& p : flow.params().entries()) {
      for (std::size_t j = 0; j < p.value.size(); ++j) p.value.data()[j] -= lr / static_cast<double>(all.size()) * p.grad.data()[j];
    }
  }
  for (const auto& [tau, lr_i] : all) worst = std::max(worst, flow.trajectory_balance_value(tau, lr_i));
  return worst;
}

}  // namespace

TEST_CASE("forward distributions are normalized, sized and masked") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (bool term : {false, true}) {
      const ConditionalGFlowNet net = random_net(3, 3, seed, term);
      Rng rng(seed);
      const EnvObservation obs = random_observation(3, 3, rng);
      for (const auto& s : {PartialAction(3), PartialAction::from_values({V, 2, V}), PartialAction::from_values({1, 0, V})}) {
        const StepDistribution d = net.forward_step_distribution(s, obs);
        CHECK(d.slot_count() == 9 + (term ? 1 : 0));
        CHECK(d.legal_count() == 3 * (3 - s.assigned_count()) + (term ? 1 : 0));
        double total = 0.0;
        for (std::size_t slot = 0; slot < d.slot_count(); ++slot) {
          const double p = std::exp(d.log_probs[slot]);
          if (!d.legal(slot)) CHECK(p < 1e-30);
          total += p;
        }
        CHECK(std::abs(total - 1.0) < 1e-9);
      }
      CHECK_THROWS_AS(net.forward_step_distribution(PartialAction::from_values({0, 1, 2}), obs), IllegalQuery);
    }
  }
}

TEST_CASE("a fresh network is uniform over legal steps and parents") {
  Rng rng(1);
  const ConditionalGFlowNet net(3, 2, small_config(), rng);
  const EnvObservation obs = random_observation(3, 3, rng);
  const StepDistribution d = net.forward_step_distribution(PartialAction::from_values({V, 1, V}), obs);
  for (std::size_t slot = 0; slot < d.slot_count(); ++slot) {
    if (d.legal(slot)) CHECK(std::exp(d.log_probs[slot]) == doctest::Approx(0.25).epsilon(1e-12));
  }
  const PartialAction s = PartialAction::from_values({0, 1, V});
  CHECK(net.backward_step_log_prob(s, 0, obs) == doctest::Approx(std::log(0.5)).epsilon(1e-12));
  CHECK(net.backward_step_log_prob(PartialAction::from_values({V, 1, V}), 1, obs) == 0.0);
  CHECK_THROWS_AS(net.backward_step_log_prob(s, 2, obs), InvalidInput);

  Rng rng2(2);
  const ConditionalGFlowNet two(3, 2, small_config(), rng2);
  const EnvObservation obs2 = random_observation(2, 3, rng2);
  for (double p : exact_terminating_distribution(two, obs2)) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward probabilities over parents sum to one") {
  const ConditionalGFlowNet net = random_net(3, 2, 7);
  Rng rng(7);
  const EnvObservation obs = random_observation(4, 3, rng);
  for (const auto& s : {PartialAction::from_values({0, 1, V, 1}), PartialAction::from_values({1, 1, 0, 0})}) {
    double total = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      if (!s.is_void(i)) total += std::exp(net.backward_step_log_prob(s, i, obs));
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("exact terminating distribution matches a path-sum oracle") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (bool term : {false, true}) {
      const ConditionalGFlowNet net = random_net(3, 2, seed + 20, term);
      Rng rng(seed);
      const EnvObservation obs = random_observation(3, 3, rng);
      const StructuredAction warm({1, 0, 1});
      const auto dp = exact_terminating_distribution(net, obs, NetParams::kOnline, warm);
      std::vector<double> oracle(8, 0.0);
      path_sum(net, obs, PartialAction(3), 1.0, warm, oracle);
      double total = 0.0;
      for (std::size_t i = 0; i < 8; ++i) {
        CHECK(std::abs(dp[i] - oracle[i]) < 1e-12);
        total += dp[i];
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("with one atomic action P_T is the single-step distribution") {
  const ConditionalGFlowNet net = random_net(3, 4, 3);
  Rng rng(3);
  const EnvObservation obs = random_observation(1, 3, rng);
  const auto pt = exact_terminating_distribution(net, obs);
  const StepDistribution d = net.forward_step_distribution(PartialAction(1), obs);
  for (std::size_t v = 0; v < 4; ++v) CHECK(std::abs(pt[v] - std::exp(d.log_probs[v])) < 1e-15);
}

TEST_CASE("enumeration limit is enforced") {
  Rng rng(4);
  const ConditionalGFlowNet net(3, 2, small_config(), rng);
  const EnvObservation obs = random_observation(13, 3, rng);
  CHECK_THROWS_AS(exact_terminating_distribution(net, obs), EnumerationTooLarge);
}

TEST_CASE("Monte Carlo terminal frequencies match the DP within 3 sigma") {
  const ConditionalGFlowNet net = random_net(3, 2, 11);
  Rng rng(11);
  const EnvObservation obs = random_observation(3, 3, rng);
  const auto dp = exact_terminating_distribution(net, obs);
  const std::size_t draws = 100000;
  std::vector<double> counts(8, 0.0);
  for (const auto& tau : net.sample_trajectories(obs, rng, SamplingOptions{}, draws)) {
    CHECK(tau.terminal.size() == 3);
    counts[action_index(tau.terminal, 2)] += 1.0;
  }
  for (std::size_t i = 0; i < 8; ++i) {
    const double sigma = std::sqrt(draws * dp[i] * (1.0 - dp[i]));
    CHECK(std::abs(counts[i] - draws * dp[i]) <= 3.0 * sigma);
  }
}

TEST_CASE("full uniform mixing makes every legal step equally likely") {
  ConditionalGFlowNet net = random_net(3, 3, 12, false, 2.0);
  net.mutable_config().epsilon_uniform = 1.0;
  Rng rng(12);
  const EnvObservation obs = random_observation(2, 3, rng);
  SamplingOptions explore;
  explore.explore = true;
  const std::size_t draws = 100000;
  std::vector<double> counts(6, 0.0);
  for (const auto& tau : net.sample_trajectories(obs, rng, explore, draws)) {
    counts[step_slot(tau.steps.front().step, 2, 3)] += 1.0;
  }
  const double p = 1.0 / 6.0, sigma = std::sqrt(draws * p * (1.0 - p));
  for (double c : counts) CHECK(std::abs(c - draws * p) <= 3.0 * sigma);
}

TEST_CASE("sample_slot applies temperature before mixing") {
  StepDistribution d{1, 3, false, {std::log(0.7), std::log(0.2), std::log(0.1)}};
  Rng rng(13);
  const std::size_t draws = 100000;
  std::vector<double> counts(3, 0.0);
  for (std::size_t i = 0; i < draws; ++i) counts[sample_slot(d, 2.0, 0.3, rng)] += 1.0;
  const double z = std::sqrt(0.7) + std::sqrt(0.2) + std::sqrt(0.1);
  for (std::size_t s = 0; s < 3; ++s) {
    const double p = 0.7 * std::sqrt(std::exp(d.log_probs[s])) / z + 0.1;
    CHECK(std::abs(counts[s] - draws * p) <= 3.0 * std::sqrt(draws * p * (1.0 - p)));
  }
}

TEST_CASE("sampling is deterministic under a seed and records untempered log-probs") {
  ConditionalGFlowNet net = random_net(3, 2, 14);
  net.mutable_config().sampling_temperature = 3.0;
  Rng r0(5);
  const EnvObservation obs = random_observation(4, 3, r0);
  SamplingOptions explore;
  explore.explore = true;
  Rng a(99), b(99);
  for (int i = 0; i < 20; ++i) {
    const BuildTrajectory x = net.sample_trajectory(obs, a, explore);
    const BuildTrajectory y = net.sample_trajectory(obs, b, explore);
    CHECK(x.terminal == y.terminal);
    CHECK(x.forward_log_probs == y.forward_log_probs);
    REQUIRE(x.steps.size() == 4);
    CHECK_NOTHROW(x.validate(spec_of(obs, 2), StructuredAction({0, 0, 0, 0})));
    for (std::size_t t = 0; t < x.steps.size(); ++t) {
      const double lp = net.forward_step_distribution(x.steps[t].state, obs).log_prob(x.steps[t].step);
      CHECK(std::abs(x.forward_log_probs[t] - lp) < 1e-12);
    }
  }
}

TEST_CASE("Terminate completes from the warm start") {
  ConditionalGFlowNet net = random_net(3, 3, 15, true);
  // Make early exits common.
  net.forward_params().value("f.terminate.b")[0] = 2.0;
  Rng rng(15);
  const EnvObservation obs = random_observation(4, 3, rng);
  SamplingOptions opts;
  opts.warm_start = StructuredAction({2, 1, 0, 2});
  std::size_t early = 0;
  for (const auto& tau : net.sample_trajectories(obs, rng, opts, 2000)) {
    CHECK(tau.terminal.size() == 4);
    CHECK(tau.steps.size() <= 5);
    CHECK_NOTHROW(tau.validate(spec_of(obs, 3, true), *opts.warm_start));
    if (!tau.steps.empty() && tau.steps.back().step.is_terminate()) {
      ++early;
      CHECK(tau.terminal == complete_from(tau.steps.back().state, *opts.warm_start));
    }
  }
  CHECK(early > 0);
}

TEST_CASE("trajectory balance examples on a tabular flow") {
  // N=1, K=2, log R = (0, ln 3): P_F = (1/4, 3/4), log Z = ln 4 balances.
  TabularFlow flow(ActionSpaceSpec{1, 2, {}, false});
  const std::size_t s0 = state_index(PartialAction(1), 2);
  flow.params().value("pf")(s0, 0) = std::log(0.25);
  flow.params().value("pf")(s0, 1) = std::log(0.75);
  flow.params().value("logz")[0] = std::log(4.0);
  const std::vector<double> log_r{0.0, std::log(3.0)};
  for (std::size_t v = 0; v < 2; ++v) {
    const auto taus = all_trajectories_to(flow.spec(), StructuredAction({v}));
    REQUIRE(taus.size() == 1);
    CHECK(flow.trajectory_balance_value(taus[0], log_r[v]) < 1e-30);
    // log Z off by delta leaves delta^2.
    flow.params().value("logz")[0] = std::log(4.0) + 0.3;
    CHECK(flow.trajectory_balance_value(taus[0], log_r[v]) == doctest::Approx(0.09).epsilon(1e-12));
    flow.params().value("logz")[0] = std::log(4.0);
  }
}

TEST_CASE("a balanced tabular flow samples proportionally to the reward") {
  for (std::size_t n : {2u, 3u}) {
    TabularFlow flow(ActionSpaceSpec{n, 2, {}, false});
    std::vector<double> log_r;
    for (std::size_t i = 0; i < (std::size_t{1} << n); ++i) log_r.push_back(std::log(1.0 + i));
    const double worst = train_tabular(flow, log_r, 4000, 0.5);
    CHECK(worst < 1e-12);
    CHECK(total_variation(flow.terminating_distribution(), normalized(log_r)) < 1e-6);

    double z = 0.0;
    for (double l : log_r) z += std::exp(l);
    CHECK(std::abs(flow.log_z() - std::log(z)) < 1e-6);

    // Scaling all rewards by c shifts the optimal log Z by ln c only.
    TabularFlow scaled(ActionSpaceSpec{n, 2, {}, false});
    std::vector<double> log_rc(log_r);
    for (double& l : log_rc) l += std::log(5.0);
    train_tabular(scaled, log_rc, 4000, 0.5);
    CHECK(std::abs(scaled.log_z() - flow.log_z() - std::log(5.0)) < 1e-6);
    CHECK(total_variation(scaled.terminating_distribution(), flow.terminating_distribution()) < 1e-9);
  }
}

TEST_CASE("trajectory balance loss equals the squared residual of per-step queries") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    ConditionalGFlowNet net = random_net(3, 2, seed + 40);
    Rng rng(seed);
    const EnvObservation obs = random_observation(3, 3, rng);
    const BuildTrajectory tau = net.sample_trajectory(obs, rng, SamplingOptions{});
    const double log_r = rng.normal();
    const double r = tb_residual(net, obs, tau, log_r);
    const TrajectoryBalanceResult res = trajectory_balance_loss(net, tau, obs, log_r);
    CHECK(relative_error(res.loss, r * r) < 1e-10);
    CHECK(std::abs(res.log_z - net.log_z(obs)) < 1e-12);
  }
}

TEST_CASE("trajectory balance gradients match central differences for all three groups") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng build(seed + 60);
    GFlowNetConfig cfg = small_config(seed % 2 == 1);
    cfg.encoder.hidden = 4;
    ConditionalGFlowNet net(2, 2, cfg, build);
    jitter(net.forward_params(), build, 0.3);
    jitter(net.backward_params(), build, 0.3);
    jitter(net.logz_params(), build, 0.3);
    Rng rng(seed);
    const EnvObservation obs = random_observation(3, 2, rng);
    SamplingOptions opts;
    opts.explore = true;
    const BuildTrajectory tau = net.sample_trajectory(obs, rng, opts);
    const double log_r = rng.normal();

    ParameterSet* groups[] = {&net.forward_params(), &net.backward_params(), &net.logz_params()};
    for (ParameterSet* g : groups) g->zero_grad();
    trajectory_balance_loss(net, tau, obs, log_r);
    const double h = 1e-5;
    for (ParameterSet* g : groups) {
      double worst = 0.0;
      for (auto& p : g->entries()) {
        const Tensor analytic = p.grad;
        for (std::size_t i = 0; i < p.value.size(); ++i) {
          const double keep = p.value.data()[i];
          p.value.data()[i] = keep + h;
          const double up = std::pow(tb_residual(net, obs, tau, log_r), 2);
          p.value.data()[i] = keep - h;
          const double down = std::pow(tb_residual(net, obs, tau, log_r), 2);
          p.value.data()[i] = keep;
          worst = std::max(worst, relative_error(analytic.data()[i], (up - down) / (2.0 * h)));
        }
      }
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("trajectory balance names a non-finite reward") {
  ConditionalGFlowNet net = random_net(3, 2, 70);
  Rng rng(70);
  const EnvObservation obs = random_observation(2, 3, rng);
  const BuildTrajectory tau = net.sample_trajectory(obs, rng, SamplingOptions{});
  try {
    trajectory_balance_loss(net, tau, obs, std::nan(""));
    FAIL("expected divergence");
  } catch (const TrainingDivergence& e) {
    CHECK(std::string(e.what()).find("reward") != std::string::npos);
  }
}

TEST_CASE("log Z regression touches only the log Z parameters") {
  Rng rng(16);
  ConditionalGFlowNet net(3, 2, small_config(), rng);
  const EnvObservation obs = random_observation(3, 3, rng);
  net.forward_params().zero_grad();
  net.backward_params().zero_grad();
  net.logz_params().zero_grad();
  // Q = 0, alpha = 1: the target is ln 2^3 and the fresh log Z is 0.
  const double loss = z_regression_loss(net, obs, std::log(8.0), 1.0);
  CHECK(loss == doctest::Approx(std::log(8.0) * std::log(8.0)).epsilon(1e-12));
  CHECK(net.logz_params().grad_norm() > 0.0);
  CHECK(net.forward_params().grad_norm() == 0.0);
  CHECK(net.backward_params().grad_norm() == 0.0);
  CHECK(z_regression_loss(net, obs, 2.0 * net.log_z(obs), 2.0) < 1e-24);
}

TEST_CASE("the sampler proposal weights are P_F / P_B of a real trajectory and unbiased for Z") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ConditionalGFlowNet net = random_net(3, 2, seed + 80, false, 1.0);
    Rng rng(seed);
    SoftQConfig qc;
    qc.encoder.hidden = 8;
    qc.zero_head = false;
    qc.head_gain = 2.0;
    SoftQFunction q(3, 2, qc, rng);
    const EnvObservation obs = random_observation(3, 3, rng);
    const ActionSpaceSpec spec = spec_of(obs, 2);

    // log P_F(tau) - log P_B(tau | x) for every trajectory, from per-step queries.
    std::map<std::size_t, std::vector<std::pair<double, double>>> by_terminal;
    double z = 0.0, expected = 0.0;
    for (const auto& a : enumerate_actions(spec)) {
      const double r = std::exp(q.q_value(obs, a));
      z += r;
      for (const auto& tau : all_trajectories_to(spec, a)) {
        double lpf = 0.0, lpb = 0.0;
        for (const auto& ts : tau.steps) {
          lpf += net.forward_step_distribution(ts.state, obs).log_prob(ts.step);
          lpb += net.backward_step_log_prob(apply(ts.state, ts.step), ts.step.position, obs);
        }
        by_terminal[action_index(a, 2)].emplace_back(lpf - lpb, lpf);
        expected += std::exp(lpf) * r / std::exp(lpf - lpb);
      }
    }
    CHECK(relative_error(expected, z) < 1e-10);

    for (const auto& s : GFlowNetProposal(net, NetParams::kOnline, 200).draw(obs, rng)) {
      bool found = false;
      for (const auto& [log_q, lpf] : by_terminal[action_index(s.action, 2)]) found = found || std::abs(log_q - s.log_q) < 1e-10;
      CHECK(found);
    }
  }

  // Monte Carlo with a mild policy, where the weights have light tails.
  const ConditionalGFlowNet net = random_net(3, 2, 90, false, 0.2);
  Rng rng(90);
  SoftQConfig qc;
  qc.encoder.hidden = 8;
  qc.zero_head = false;
  SoftQFunction q(3, 2, qc, rng);
  const EnvObservation obs = random_observation(3, 3, rng);
  double z = 0.0;
  for (const auto& a : enumerate_actions(spec_of(obs, 2))) z += std::exp(q.q_value(obs, a));
  const std::size_t m = 20000;
  double mean = 0.0, sq = 0.0;
  for (const auto& s : GFlowNetProposal(net, NetParams::kOnline, m).draw(obs, rng)) {
    const double w = std::exp(q.q_value(obs, s.action) - s.log_q);
    mean += w;
    sq += w * w;
  }
  mean /= m;
  CHECK(std::abs(mean - z) <= 4.0 * std::sqrt((sq / m - mean * mean) / m));
}

TEST_CASE("target updates") {
  ConditionalGFlowNet net = random_net(3, 2, 17);
  auto distance = [&] {
    double d = 0.0;
    const ParameterSet* on[] = {&net.forward_params(), &net.backward_params(), &net.logz_params()};
    const ParameterSet* tg[] = {&net.target_forward(), &net.target_backward(), &net.target_logz()};
    for (int g = 0; g < 3; ++g) {
      for (std::size_t i = 0; i < on[g]->size(); ++i) {
        const auto& a = on[g]->entries()[i].value;
        const auto& b = tg[g]->entries()[i].value;
        for (std::size_t j = 0; j < a.size(); ++j) d += (a.data()[j] - b.data()[j]) * (a.data()[j] - b.data()[j]);
      }
    }
    return std::sqrt(d);
  };
  const double d0 = distance();
  CHECK(d0 > 0.0);
  for (int t = 1; t <= 10; ++t) {
    net.update_targets(0.2);
    CHECK(relative_error(distance(), d0 * std::pow(0.8, t)) < 1e-9);
  }
  net.update_targets(1.0);
  CHECK(distance() == 0.0);
  CHECK_THROWS_AS(net.update_targets(0.0), InvalidInput);
}
