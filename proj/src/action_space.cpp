#include "dpo/action_space.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dpo/errors.hpp"

namespace dpo {

Adjacency::Adjacency(std::size_t n_nodes, std::span<const Edge> edges) : n_nodes_(n_nodes) {
  for (auto [a, b] : edges) {
    if (a >= n_nodes || b >= n_nodes) {
      throw InvalidInput("adjacency index out of range: (" + std::to_string(a) + "," +
                         std::to_string(b) + ") with " + std::to_string(n_nodes) + " nodes");
    }
    if (a == b) throw InvalidInput("adjacency self-pair at " + std::to_string(a));
    edges_.emplace_back(std::min(a, b), std::max(a, b));
  }
  std::sort(edges_.begin(), edges_.end());
  edges_.erase(std::unique(edges_.begin(), edges_.end()), edges_.end());
}

bool Adjacency::linked(std::size_t i, std::size_t j) const {
  const Edge e{std::min(i, j), std::max(i, j)};
  return std::binary_search(edges_.begin(), edges_.end(), e);
}

std::vector<std::size_t> Adjacency::neighbors(std::size_t i) const {
  std::vector<std::size_t> out;
  for (auto [a, b] : edges_) {
    if (a == i) out.push_back(b);
    if (b == i) out.push_back(a);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void ActionSpaceSpec::validate() const {
  if (n_atomic < 1) throw InvalidInput("n_atomic must be >= 1");
  if (arity < 2) throw InvalidInput("arity must be >= 2");
  if (adjacency.n_nodes() != n_atomic && !(adjacency.n_nodes() == 0 && adjacency.edges().empty())) {
    throw InvalidInput("adjacency node count does not match n_atomic");
  }
}

std::optional<std::uint64_t> ActionSpaceSpec::action_count() const {
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < n_atomic; ++i) {
    if (count > UINT64_MAX / arity) return std::nullopt;
    count *= arity;
  }
  return count;
}

void to_json(nlohmann::json& j, const ActionSpaceSpec& spec) {
  auto edges = nlohmann::json::array();
  for (auto [a, b] : spec.adjacency.edges()) edges.push_back({a, b});
  j = {{"n_atomic", spec.n_atomic},
       {"arity", spec.arity},
       {"adjacency", edges},
       {"termination_enabled", spec.termination_enabled}};
}

void from_json(const nlohmann::json& j, ActionSpaceSpec& spec) {
  try {
    spec.n_atomic = j.at("n_atomic").get<std::size_t>();
    spec.arity = j.at("arity").get<std::size_t>();
    std::vector<Edge> edges;
    for (const auto& e : j.value("adjacency", nlohmann::json::array())) {
      if (!e.is_array() || e.size() != 2) throw InvalidInput("adjacency entries must be pairs");
      edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
    }
    spec.adjacency = Adjacency(spec.n_atomic, edges);
    spec.termination_enabled = j.value("termination_enabled", false);
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidInput(std::string("malformed action space spec: ") + ex.what());
  }
  spec.validate();
}

PartialAction PartialAction::from_values(std::vector<std::size_t> values) {
  PartialAction out;
  out.assigned_ = static_cast<std::size_t>(
      std::count_if(values.begin(), values.end(), [](std::size_t v) { return v != kVoid; }));
  out.values_ = std::move(values);
  return out;
}

PartialAction PartialAction::from_action(const StructuredAction& action) {
  return from_values(action.values());
}

StructuredAction PartialAction::to_action() const {
  if (!complete()) throw IllegalQuery("partial action still has VOID positions");
  return StructuredAction(values_);
}

std::vector<std::size_t> PartialAction::encode(std::size_t arity) const {
  std::vector<std::size_t> out(values_);
  for (auto& v : out) {
    if (v == kVoid) v = arity;
  }
  return out;
}

PartialAction PartialAction::decode(std::span<const std::size_t> codes, std::size_t arity) {
  std::vector<std::size_t> values(codes.begin(), codes.end());
  for (auto& v : values) {
    if (v == arity) {
      v = kVoid;
    } else if (v > arity) {
      throw InvalidInput("state code " + std::to_string(v) + " exceeds arity");
    }
  }
  return from_values(std::move(values));
}

namespace {

void check_state(const PartialAction& state, const ActionSpaceSpec& spec) {
  if (state.size() != spec.n_atomic) {
    throw InvalidInput("state length " + std::to_string(state.size()) + " does not match n_atomic " +
                       std::to_string(spec.n_atomic));
  }
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (!state.is_void(i) && state[i] >= spec.arity) {
      throw InvalidInput("state value out of range at position " + std::to_string(i));
    }
  }
}

}  // namespace

void BuildTrajectory::validate(const ActionSpaceSpec& spec, const StructuredAction& warm_start) const {
  if (steps.empty()) throw InternalInvariant("empty trajectory");
  if (steps.size() > spec.n_atomic + 1) throw InternalInvariant("trajectory longer than N+1 steps");
  if (steps.front().state.assigned_count() != 0) throw InternalInvariant("trajectory does not start at s0");
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const auto& [state, step] = steps[t];
    check_state(state, spec);
    if (step.is_terminate()) {
      if (!spec.termination_enabled) throw InternalInvariant("Terminate step with termination disabled");
      if (t + 1 != steps.size()) throw InternalInvariant("Terminate must be the final step");
      if (complete_from(state, warm_start) != terminal) throw InternalInvariant("terminal mismatch after Terminate");
      return;
    }
    const PartialAction next = apply(state, step);
    if (t + 1 < steps.size()) {
      if (!(steps[t + 1].state == next)) throw InternalInvariant("trajectory states do not chain");
    } else if (!next.complete() || next.to_action() != terminal) {
      throw InternalInvariant("trajectory does not end at its terminal");
    }
  }
}

std::vector<BuildStep> children(const PartialAction& state, const ActionSpaceSpec& spec) {
  check_state(state, spec);
  std::vector<BuildStep> out;
  out.reserve(spec.arity * (spec.n_atomic - state.assigned_count()) + 1);
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (!state.is_void(i)) continue;
    for (std::size_t k = 0; k < spec.arity; ++k) out.push_back(BuildStep::assign(i, k));
  }
  if (spec.termination_enabled && !state.complete()) out.push_back(BuildStep::terminate());
  return out;
}

std::vector<std::pair<PartialAction, BuildStep>> parents(const PartialAction& state) {
  std::vector<std::pair<PartialAction, BuildStep>> out;
  out.reserve(state.assigned_count());
  for (std::size_t i = 0; i < state.size(); ++i) {
    if (state.is_void(i)) continue;
    std::vector<std::size_t> values = state.values();
    values[i] = PartialAction::kVoid;
    out.emplace_back(PartialAction::from_values(std::move(values)), BuildStep::assign(i, state[i]));
  }
  return out;
}

PartialAction apply(const PartialAction& state, const BuildStep& step) {
  if (step.is_terminate()) throw IllegalTransition("Terminate has no successor inside the assignment DAG");
  if (step.position >= state.size()) {
    throw IllegalTransition("assign position " + std::to_string(step.position) + " out of range");
  }
  if (!state.is_void(step.position)) {
    throw IllegalTransition("position " + std::to_string(step.position) + " is already assigned");
  }
  std::vector<std::size_t> values = state.values();
  values[step.position] = step.value;
  return PartialAction::from_values(std::move(values));
}

StructuredAction complete_from(const PartialAction& state, const StructuredAction& fallback) {
  if (fallback.size() != state.size()) throw InvalidInput("warm-start action has the wrong length");
  std::vector<std::size_t> values = state.values();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i] == PartialAction::kVoid) values[i] = fallback[i];
  }
  return StructuredAction(std::move(values));
}

std::size_t step_slot(const BuildStep& step, std::size_t n_atomic, std::size_t arity) {
  return step.is_terminate() ? n_atomic * arity : step.position * arity + step.value;
}

namespace {

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InvalidInput("positions have mixed dimensionality");
  double s = 0.0;
  for (std::size_t d = 0; d < a.size(); ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
  return std::sqrt(s);
}

void check_distinct(std::span<const std::vector<double>> positions) {
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      if (positions[i] == positions[j]) {
        throw InvalidInput("positions " + std::to_string(i) + " and " + std::to_string(j) + " coincide");
      }
    }
  }
}

}  // namespace

Adjacency adjacency_from_geometry(std::span<const std::vector<double>> positions, RadiusRule rule) {
  if (!(rule.radius > 0.0)) throw InvalidInput("radius must be positive");
  check_distinct(positions);
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    for (std::size_t j = i + 1; j < positions.size(); ++j) {
      if (distance(positions[i], positions[j]) <= rule.radius) edges.emplace_back(i, j);
    }
  }
  return Adjacency(positions.size(), edges);
}

Adjacency adjacency_from_geometry(std::span<const std::vector<double>> positions, KNearestRule rule) {
  const std::size_t n = positions.size();
  if (rule.k < 1) throw InvalidInput("k must be >= 1");
  if (rule.k >= n) {
    throw InvalidInput("k=" + std::to_string(rule.k) + " must be smaller than the node count " + std::to_string(n));
  }
  check_distinct(positions);
  std::vector<Edge> edges;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    order.erase(order.begin() + static_cast<std::ptrdiff_t>(i));
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return distance(positions[i], positions[a]) < distance(positions[i], positions[b]);
    });
    for (std::size_t r = 0; r < rule.k; ++r) edges.emplace_back(i, order[r]);
    order.resize(n);
  }
  return Adjacency(n, edges);
}

std::uint64_t action_index(const StructuredAction& action, std::size_t arity) {
  std::uint64_t index = 0;
  for (std::size_t v : action.values()) {
    if (v >= arity) throw InvalidInput("action value out of range");
    index = index * arity + v;
  }
  return index;
}

StructuredAction action_from_index(std::uint64_t index, std::size_t n_atomic, std::size_t arity) {
  std::vector<std::size_t> values(n_atomic);
  for (std::size_t i = n_atomic; i-- > 0;) {
    values[i] = static_cast<std::size_t>(index % arity);
    index /= arity;
  }
  return StructuredAction(std::move(values));
}

std::uint64_t state_index(const PartialAction& state, std::size_t arity) {
  std::uint64_t index = 0;
  for (std::size_t i = 0; i < state.size(); ++i) {
    index = index * (arity + 1) + (state.is_void(i) ? arity : state[i]);
  }
  return index;
}

std::vector<StructuredAction> enumerate_actions(const ActionSpaceSpec& spec, std::size_t limit) {
  spec.validate();
  const auto count = spec.action_count();
  if (!count || *count > limit) {
    throw EnumerationTooLarge("K^N exceeds the enumeration limit of " + std::to_string(limit));
  }
  std::vector<StructuredAction> out;
  out.reserve(*count);
  for (std::uint64_t idx = 0; idx < *count; ++idx) out.push_back(action_from_index(idx, spec.n_atomic, spec.arity));
  return out;
}

std::uint64_t count_complete_trajectories(const ActionSpaceSpec& spec, const StructuredAction& terminal) {
  if (terminal.size() != spec.n_atomic) throw InvalidInput("terminal has the wrong length");
  std::uint64_t f = 1;
  for (std::uint64_t i = 2; i <= spec.n_atomic; ++i) f *= i;
  return f;
}

}  // namespace dpo
