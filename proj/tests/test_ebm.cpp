#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "dpo/ebm.hpp"
#include "dpo/errors.hpp"
#include "support.hpp"

using namespace dpo;
using dpo::testing::random_observation;
using dpo::testing::relative_error;

namespace {

SoftQConfig small_config(bool zero_head = false, double alpha = 1.0, double gamma = 0.9) {
  SoftQConfig c;
  c.encoder.hidden = 8;
  c.encoder.gnn_layers = 2;
  c.alpha = alpha;
  c.gamma = gamma;
  c.zero_head = zero_head;
  return c;
}

StructuredAction random_action(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<std::size_t> v(n);
  for (auto& x : v) x = rng.below(k);
  return StructuredAction(v);
}

// Random graph with random local features.
struct GraphCase {
  Adjacency adj;
  std::vector<std::vector<double>> local;
};

GraphCase random_graph(std::size_t n, std::size_t width, Rng& rng) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (rng.uniform() < 0.5) edges.emplace_back(i, j);
    }
  }
  std::vector<std::vector<double>> local(n, std::vector<double>(width));
  for (auto& row : local) {
    for (double& v : row) v = rng.normal();
  }
  return {Adjacency(n, edges), local};
}

double direct_logsumexp(const std::vector<double>& v, double alpha) {
  long double m = *std::max_element(v.begin(), v.end());
  long double s = 0.0L;
  for (double x : v) s += std::exp((static_cast<long double>(x) - m) / alpha);
  return static_cast<double>(m + alpha * std::log(s));
}

TabularMdp random_mdp(std::size_t s, std::size_t a, Rng& rng) {
  TabularMdp m{s, a, std::vector<double>(s * a), std::vector<double>(s * a * s)};
  for (double& r : m.reward) r = rng.normal();
  for (std::size_t sa = 0; sa < s * a; ++sa) {
    double total = 0.0;
    for (std::size_t k = 0; k < s; ++k) total += (m.transition[sa * s + k] = rng.uniform() + 0.01);
    for (std::size_t k = 0; k < s; ++k) m.transition[sa * s + k] /= total;
  }
  return m;
}

// Fixed point of V(s) = alpha log sum_a exp((r + gamma P V)/alpha), by
// value iteration on V alone.
std::vector<double> soft_q_by_value_iteration(const TabularMdp& m, double alpha, double gamma) {
  std::vector<double> v(m.n_states, 0.0);
  std::vector<double> q(m.n_states * m.n_actions);
  for (int it = 0; it < 20000; ++it) {
    for (std::size_t s = 0; s < m.n_states; ++s) {
      for (std::size_t a = 0; a < m.n_actions; ++a) {
        double e = 0.0;
        for (std::size_t k = 0; k < m.n_states; ++k) e += m.p(s, a, k) * v[k];
        q[s * m.n_actions + a] = m.r(s, a) + gamma * e;
      }
    }
    for (std::size_t s = 0; s < m.n_states; ++s) {
      v[s] = direct_logsumexp(std::vector<double>(q.begin() + s * m.n_actions, q.begin() + (s + 1) * m.n_actions),
                              alpha);
    }
  }
  return q;
}

double sup_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
  return d;
}

}  // namespace

TEST_CASE("zero head gives Q = 0 and log R = 0 everywhere") {
  Rng rng(1);
  SoftQFunction q(3, 2, small_config(true), rng);
  for (int t = 0; t < 10; ++t) {
    const EnvObservation obs = random_observation(4, 3, rng);
    const StructuredAction a = random_action(4, 2, rng);
    CHECK(q.q_value(obs, a) == 0.0);
    CHECK(q.log_reward(obs, a, QParams::kTarget) == 0.0);
  }
  CHECK_THROWS_AS(SoftQFunction(3, 2, small_config(true, 0.0), rng), InvalidInput);
  CHECK_THROWS_AS(SoftQFunction(3, 2, small_config(true, 1.0, 1.0), rng), InvalidInput);
}

TEST_CASE("Q is invariant to relabeling atomic actions") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    SoftQFunction q(2, 3, small_config(), rng);
    const std::size_t n = 2 + seed % 5;
    const GraphCase g = random_graph(n, 2, rng);
    const StructuredAction a = random_action(n, 3, rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    // Node i moves to perm[i].
    std::vector<std::vector<double>> local(n);
    std::vector<std::size_t> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      local[perm[i]] = g.local[i];
      values[perm[i]] = a[i];
    }
    std::vector<Edge> edges;
    for (auto [i, j] : g.adj.edges()) edges.emplace_back(perm[i], perm[j]);
    const EnvObservation o1 = make_observation(g.adj, g.local, 0);
    const EnvObservation o2 = make_observation(Adjacency(n, edges), local, 0);
    CHECK(std::abs(q.q_value(o1, a) - q.q_value(o2, StructuredAction(values))) < 1e-9);
  }
}

TEST_CASE("batched Q equals the loop of single evaluations") {
  Rng rng(3);
  SoftQFunction q(3, 2, small_config(), rng);
  const EnvObservation obs = random_observation(5, 3, rng);
  std::vector<StructuredAction> actions;
  for (int i = 0; i < 16; ++i) actions.push_back(random_action(5, 2, rng));
  const auto batch = q.q_values(obs, actions);
  for (std::size_t i = 0; i < actions.size(); ++i) CHECK(std::abs(batch[i] - q.q_value(obs, actions[i])) < 1e-12);

  // Mixed observations and sizes in one block-diagonal batch.
  std::vector<EnvObservation> obs_list;
  std::vector<StructuredAction> acts;
  for (std::size_t i = 0; i < 6; ++i) {
    obs_list.push_back(random_observation(2 + i, 3, rng));
    acts.push_back(random_action(2 + i, 2, rng));
  }
  ad::Tape tape(false);
  Binder bind(tape, std::as_const(q).params());
  std::vector<const EnvObservation*> op;
  std::vector<const StructuredAction*> ap;
  for (std::size_t i = 0; i < 6; ++i) {
    op.push_back(&obs_list[i]);
    ap.push_back(&acts[i]);
  }
  const Tensor out = q.q_batch(bind, op, ap).value();
  for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(out[i] - q.q_value(obs_list[i], acts[i])) < 1e-12);
}

TEST_CASE("log R identities") {
  Rng rng(4);
  SoftQFunction q(3, 2, small_config(true, 0.7), rng);
  const EnvObservation obs = random_observation(3, 3, rng);
  const StructuredAction a({0, 1, 1});
  q.target_params().value("q.head_out.b")[0] = 0.7;
  CHECK(q.log_reward(obs, a, QParams::kTarget) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(q.log_reward(obs, a, QParams::kOnline) == 0.0);
  CHECK(q.reward_reads().target == 1);
  CHECK(q.reward_reads().online == 1);

  SoftQFunction r(3, 2, small_config(false, 0.4), rng);
  for (int t = 0; t < 20; ++t) {
    const StructuredAction x = random_action(3, 2, rng), y = random_action(3, 2, rng);
    const double ratio = std::exp(r.log_reward(obs, x, QParams::kOnline) - r.log_reward(obs, y, QParams::kOnline));
    const double direct = std::exp((r.q_value(obs, x) - r.q_value(obs, y)) / 0.4);
    CHECK(relative_error(ratio, direct) < 1e-12);
  }
}

TEST_CASE("soft value examples") {
  const std::vector<double> constant(8, 1.5);
  const std::vector<double> uniform(8, -std::log(8.0));
  CHECK(soft_value_from(constant, uniform, 0.5).value == doctest::Approx(1.5 + 0.5 * std::log(8.0)).epsilon(1e-14));
  const std::vector<double> one{2.25}, certain{0.0};
  CHECK(soft_value_from(one, certain, 0.3).value == doctest::Approx(2.25).epsilon(1e-15));
  const std::vector<double> bad{-std::numeric_limits<double>::infinity()};
  CHECK_THROWS_AS(soft_value_from(one, bad, 1.0), InvalidInput);
  CHECK_THROWS_AS(soft_value_from(std::vector<double>{}, std::vector<double>{}, 1.0), InvalidInput);
}

TEST_CASE("exhaustive uniform soft value equals logsumexp and respects its bounds") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const double alpha = 0.2 + rng.uniform();
    SoftQConfig cfg = small_config(false, alpha);
    cfg.head_gain = 3.0;
    SoftQFunction q(3, 2, cfg, rng);
    const std::size_t n = 2 + seed % 3;
    const EnvObservation obs = random_observation(n, 3, rng);
    const ExhaustiveUniformProposal proposal(2);
    const auto samples = proposal.draw(obs, rng);
    CHECK(samples.size() == (std::size_t{1} << n));
    const SoftValueEstimate v = soft_value_estimate(q, obs, samples);
    std::vector<double> qs;
    for (const auto& s : samples) qs.push_back(q.q_value(obs, s.action));
    CHECK(std::abs(v.value - direct_logsumexp(qs, alpha)) < 1e-10);
    const double mx = *std::max_element(qs.begin(), qs.end());
    CHECK(v.value >= mx - 1e-12);
    CHECK(v.value <= mx + alpha * std::log(static_cast<double>(qs.size())) + 1e-12);

    // A constant shift moves log R uniformly and leaves the Boltzmann law alone.
    const double c = 2.5;
    std::vector<double> shifted(qs);
    for (double& x : shifted) x += c;
    const double z0 = direct_logsumexp(qs, alpha), z1 = direct_logsumexp(shifted, alpha);
    double tv = 0.0;
    for (std::size_t i = 0; i < qs.size(); ++i) {
      tv += std::abs(std::exp((qs[i] - z0) / alpha) - std::exp((shifted[i] - z1) / alpha));
    }
    CHECK(0.5 * tv < 1e-12);
  }
}

TEST_CASE("Bellman target examples") {
  Rng rng(5);
  SoftQFunction q(3, 2, small_config(), rng);
  const EnvObservation next = random_observation(3, 3, rng);
  const ExhaustiveUniformProposal proposal(2);
  CHECK(bellman_target(q, 1.0, next, true, proposal, rng) == 1.0);
  SoftQFunction myopic(3, 2, small_config(false, 1.0, 0.0), rng);
  CHECK(bellman_target(myopic, -0.3, next, false, proposal, rng) == -0.3);

  // Not done: r + gamma * V computed from the target parameters only.
  q.params().value("q.head_out.b")[0] = 100.0;
  const auto samples = proposal.draw(next, rng);
  std::vector<double> qs;
  for (const auto& s : samples) qs.push_back(q.q_value(next, s.action, QParams::kTarget));
  CHECK(std::abs(bellman_target(q, 0.5, next, false, proposal, rng) - (0.5 + 0.9 * direct_logsumexp(qs, 1.0))) <
        1e-10);
}

TEST_CASE("q loss examples") {
  Rng rng(6);
  SoftQFunction q(3, 2, small_config(true), rng);
  const EnvObservation obs = random_observation(3, 3, rng);
  const std::vector<Transition> one{{obs, StructuredAction({0, 1, 0}), 0.0, obs, true}};
  const std::vector<double> target1{1.0}, target0{0.0};
  CHECK(q_loss_with_targets(q, one, target1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(q_loss_with_targets(q, one, target0) == 0.0);
  CHECK_THROWS_AS(q_loss_with_targets(q, std::vector<Transition>{}, std::vector<double>{}), InvalidInput);
  const std::vector<double> nan{std::nan("")};
  CHECK_THROWS_AS(q_loss_with_targets(q, one, nan), TrainingDivergence);

  const std::vector<Transition> done_batch{{obs, StructuredAction({1, 1, 0}), 0.25, obs, true}};
  const QLossResult r = q_loss(q, done_batch, ExhaustiveUniformProposal(2), rng);
  CHECK(r.loss == doctest::Approx(0.5 * 0.25 * 0.25).epsilon(1e-14));
}

TEST_CASE("q loss gradients match central differences with detached targets") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    SoftQConfig cfg = small_config();
    cfg.encoder.hidden = 4;
    cfg.encoder.gnn_layers = 1;
    SoftQFunction q(2, 2, cfg, rng);
    // Zero biases put ReLUs of dead rows exactly on their kink.
    for (auto& p : q.params().entries()) {
      for (double& v : p.value.data()) v += 0.1 * rng.normal();
    }
    std::vector<Transition> batch;
    std::vector<double> targets;
    for (int b = 0; b < 3; ++b) {
      const EnvObservation obs = random_observation(3, 2, rng);
      batch.push_back({obs, random_action(3, 2, rng), 0.0, obs, false});
      targets.push_back(rng.normal());
    }
    q.params().zero_grad();
    q_loss_with_targets(q, batch, targets);
    std::vector<Tensor> analytic;
    for (const auto& p : q.params().entries()) analytic.push_back(p.grad);
    const double h = 1e-6;
    double worst = 0.0;
    std::size_t idx = 0;
    for (auto& p : q.params().entries()) {
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double keep = p.value.data()[i];
        p.value.data()[i] = keep + h;
        const double up = q_loss_with_targets(q, batch, targets);
        p.value.data()[i] = keep - h;
        const double down = q_loss_with_targets(q, batch, targets);
        p.value.data()[i] = keep;
        worst = std::max(worst, relative_error(analytic[idx].data()[i], (up - down) / (2.0 * h)));
      }
      ++idx;
    }
    CHECK(worst < 1e-4);
    // Target parameters never receive gradient.
    for (const auto& p : q.target_params().entries()) {
      for (double g : p.grad.data()) CHECK(g == 0.0);
    }
  }
}

TEST_CASE("tabular iteration with gamma = 0 returns the reward table") {
  Rng rng(7);
  const TabularMdp m = random_mdp(3, 2, rng);
  CHECK(tabular_soft_q_iteration(m, 1.0, 0.0, 1) == m.reward);
}

TEST_CASE("tabular iteration matches the closed form of a one-state MDP") {
  // V = alpha lse(r/alpha) + gamma V.
  const TabularMdp m{1, 3, {0.5, -1.0, 2.0}, {1.0, 1.0, 1.0}};
  const double alpha = 0.7, gamma = 0.8;
  const double v = direct_logsumexp(m.reward, alpha) / (1.0 - gamma);
  const auto q = tabular_soft_q_iteration(m, alpha, gamma, 400);
  for (std::size_t a = 0; a < 3; ++a) CHECK(std::abs(q[a] - (m.reward[a] + gamma * v)) < 1e-6);
}

TEST_CASE("tabular iteration converges to the soft-optimal Q of a 2-state MDP") {
  Rng rng(8);
  const TabularMdp m = random_mdp(2, 2, rng);
  const auto q = tabular_soft_q_iteration(m, 0.5, 0.9, 1000);
  CHECK(sup_diff(q, soft_q_by_value_iteration(m, 0.5, 0.9)) < 1e-6);
}

TEST_CASE("small temperature approaches hard value iteration") {
  Rng rng(9);
  const TabularMdp m = random_mdp(3, 4, rng);
  const double alpha = 1e-3, gamma = 0.9;
  const auto soft = tabular_soft_q_iteration(m, alpha, gamma, 500);
  std::vector<double> hard(m.reward.size(), 0.0), v(3);
  for (int it = 0; it < 500; ++it) {
    for (std::size_t s = 0; s < 3; ++s) v[s] = *std::max_element(hard.begin() + s * 4, hard.begin() + s * 4 + 4);
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t a = 0; a < 4; ++a) {
        double e = 0.0;
        for (std::size_t k = 0; k < 3; ++k) e += m.p(s, a, k) * v[k];
        hard[s * 4 + a] = m.r(s, a) + gamma * e;
      }
    }
  }
  const double bound = gamma * alpha * std::log(4.0) / (1.0 - gamma);
  for (std::size_t i = 0; i < soft.size(); ++i) {
    CHECK(soft[i] >= hard[i] - 1e-9);
    CHECK(soft[i] <= hard[i] + bound + 1e-9);
  }
  // One-step soft value sits within alpha ln|A| of the hard max.
  const auto immediate = tabular_soft_q_iteration(m, alpha, 0.0, 1);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::vector<double> row(immediate.begin() + s * 4, immediate.begin() + s * 4 + 4);
    const double mx = *std::max_element(row.begin(), row.end());
    CHECK(direct_logsumexp(row, alpha) - mx <= alpha * std::log(4.0) + 1e-12);
  }
}

TEST_CASE("tabular soft iteration contracts by gamma in sup-norm") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const TabularMdp m = random_mdp(3, 2, rng);
    const double gamma = 0.5 + 0.45 * rng.uniform();
    std::vector<double> prev = tabular_soft_q_iteration(m, 1.0, gamma, 1);
    std::vector<double> cur = tabular_soft_q_iteration(m, 1.0, gamma, 2);
    for (std::size_t t = 3; t < 30; ++t) {
      const std::vector<double> next = tabular_soft_q_iteration(m, 1.0, gamma, t);
      CHECK(sup_diff(next, cur) <= gamma * sup_diff(cur, prev) + 1e-12);
      prev = cur;
      cur = next;
    }
  }
}

TEST_CASE("tabular MDP validation") {
  TabularMdp m{2, 1, {0.0, 0.0}, {0.5, 0.6, 1.0, 0.0}};
  CHECK_THROWS_AS(tabular_soft_q_iteration(m, 1.0, 0.5, 1), InvalidInput);
}

TEST_CASE("soft target update") {
  Rng rng(10);
  SoftQFunction q(3, 2, small_config(), rng);
  q.params().value("q.head_out.b")[0] = 4.0;
  q.update_target(0.25);
  CHECK(q.target_params().value("q.head_out.b")[0] == doctest::Approx(1.0));
  q.update_target(1.0);
  CHECK(q.target_params().value("q.head_out.b")[0] == 4.0);
}
