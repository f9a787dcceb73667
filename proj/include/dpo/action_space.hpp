#pragma once

// Structured action spaces and the construction DAG the sampler walks:
// partial assignments over {VOID} u [K]^N, the steps between them, and the
// exhaustive enumerations used by the exact oracles.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "json.hpp"

namespace dpo {

using Edge = std::pair<std::size_t, std::size_t>;

inline constexpr std::size_t kDefaultEnumerationLimit = 1'000'000;

// Unordered pairwise dependencies. Stored normalized (first < second),
// sorted, duplicate free.
class Adjacency {
 public:
  Adjacency() = default;
  Adjacency(std::size_t n_nodes, std::span<const Edge> edges);

  std::size_t n_nodes() const { return n_nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  bool linked(std::size_t i, std::size_t j) const;
  std::vector<std::size_t> neighbors(std::size_t i) const;

  friend bool operator==(const Adjacency&, const Adjacency&) = default;

 private:
  std::size_t n_nodes_ = 0;
  std::vector<Edge> edges_;
};

struct ActionSpaceSpec {
  std::size_t n_atomic = 1;
  std::size_t arity = 2;
  Adjacency adjacency;
  bool termination_enabled = false;

  // Throws InvalidInput when the invariants do not hold.
  void validate() const;

  // K^N, or nullopt when it overflows 64 bits.
  std::optional<std::uint64_t> action_count() const;

  friend bool operator==(const ActionSpaceSpec&, const ActionSpaceSpec&) = default;
};

void to_json(nlohmann::json& j, const ActionSpaceSpec& spec);
void from_json(const nlohmann::json& j, ActionSpaceSpec& spec);

class StructuredAction {
 public:
  StructuredAction() = default;
  explicit StructuredAction(std::vector<std::size_t> values) : values_(std::move(values)) {}

  std::size_t size() const { return values_.size(); }
  std::size_t operator[](std::size_t i) const { return values_[i]; }
  const std::vector<std::size_t>& values() const { return values_; }

  friend bool operator==(const StructuredAction&, const StructuredAction&) = default;
  friend auto operator<=>(const StructuredAction&, const StructuredAction&) = default;

 private:
  std::vector<std::size_t> values_;
};

class PartialAction {
 public:
  static constexpr std::size_t kVoid = static_cast<std::size_t>(-1);

  PartialAction() = default;
  // All-VOID state of length n.
  explicit PartialAction(std::size_t n) : values_(n, kVoid) {}
  static PartialAction from_values(std::vector<std::size_t> values);
  static PartialAction from_action(const StructuredAction& action);

  std::size_t size() const { return values_.size(); }
  std::size_t assigned_count() const { return assigned_; }
  bool is_void(std::size_t i) const { return values_[i] == kVoid; }
  bool complete() const { return assigned_ == values_.size(); }
  std::size_t operator[](std::size_t i) const { return values_[i]; }
  const std::vector<std::size_t>& values() const { return values_; }

  // Requires complete().
  StructuredAction to_action() const;

  // Dense integer form with VOID encoded as `arity`.
  std::vector<std::size_t> encode(std::size_t arity) const;
  static PartialAction decode(std::span<const std::size_t> codes, std::size_t arity);

  friend bool operator==(const PartialAction&, const PartialAction&) = default;

 private:
  std::vector<std::size_t> values_;
  std::size_t assigned_ = 0;
};

struct BuildStep {
  enum class Kind { kAssign, kTerminate };

  Kind kind = Kind::kAssign;
  std::size_t position = 0;
  std::size_t value = 0;

  static BuildStep assign(std::size_t position, std::size_t value) {
    return {Kind::kAssign, position, value};
  }
  static BuildStep terminate() { return {Kind::kTerminate, 0, 0}; }
  bool is_terminate() const { return kind == Kind::kTerminate; }

  friend bool operator==(const BuildStep&, const BuildStep&) = default;
};

struct TrajectoryStep {
  PartialAction state;
  BuildStep step;
};

struct BuildTrajectory {
  std::vector<TrajectoryStep> steps;
  StructuredAction terminal;
  // Untempered forward log-probabilities of each chosen step, as sampled.
  std::vector<double> forward_log_probs;

  // Checks the chaining invariant; `warm_start` resolves a Terminate step.
  void validate(const ActionSpaceSpec& spec, const StructuredAction& warm_start) const;
};

// Legal steps out of `state`: Assign steps position-major then value-minor,
// followed by Terminate when the spec enables it and the state is incomplete.
std::vector<BuildStep> children(const PartialAction& state, const ActionSpaceSpec& spec);

// One (parent, restoring step) pair per assigned position, in position order.
std::vector<std::pair<PartialAction, BuildStep>> parents(const PartialAction& state);

// Throws IllegalTransition for Assign onto a non-VOID position, or for
// Terminate (which leaves the assignment DAG; see complete_from).
PartialAction apply(const PartialAction& state, const BuildStep& step);

// Fills the VOID positions of `state` from `fallback`.
StructuredAction complete_from(const PartialAction& state, const StructuredAction& fallback);

// Flat index of a step within the canonical children order of a state of
// length n (Assign: position * K + value; Terminate: N * K).
std::size_t step_slot(const BuildStep& step, std::size_t n_atomic, std::size_t arity);

struct RadiusRule {
  double radius;
};
struct KNearestRule {
  std::size_t k;
};

Adjacency adjacency_from_geometry(std::span<const std::vector<double>> positions, RadiusRule rule);
Adjacency adjacency_from_geometry(std::span<const std::vector<double>> positions, KNearestRule rule);

// Lexicographic index (position 0 most significant) and its inverse.
std::uint64_t action_index(const StructuredAction& action, std::size_t arity);
StructuredAction action_from_index(std::uint64_t index, std::size_t n_atomic, std::size_t arity);

// Mixed-radix code of a partial action over base K+1 (VOID -> K).
std::uint64_t state_index(const PartialAction& state, std::size_t arity);

std::vector<StructuredAction> enumerate_actions(const ActionSpaceSpec& spec,
                                                std::size_t limit = kDefaultEnumerationLimit);

// N! for termination-disabled specs.
std::uint64_t count_complete_trajectories(const ActionSpaceSpec& spec, const StructuredAction& terminal);

}  // namespace dpo
