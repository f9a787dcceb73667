#pragma once

// Deterministic desk-scale environments with structured actions:
// GridSignals (a line of signals with physically coupled queues) and
// PreyCapture (predators on a torus linked to their nearest neighbours).

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpo/action_space.hpp"
#include "dpo/rng.hpp"
#include "dpo/tensor.hpp"

namespace dpo {

// Per atomic action i the row [l_i || o_i]: the adjacency row (length N,
// 0/1) followed by the local features.
struct EnvObservation {
  std::size_t n_atomic = 0;
  std::size_t local_width = 0;
  std::vector<double> rows;
  std::int64_t global_step = 0;

  std::size_t row_width() const { return n_atomic + local_width; }
  double link(std::size_t i, std::size_t j) const { return rows[i * row_width() + j]; }
  double local(std::size_t i, std::size_t f) const { return rows[i * row_width() + n_atomic + f]; }
  Adjacency adjacency() const;

  friend bool operator==(const EnvObservation&, const EnvObservation&) = default;
};

void to_json(nlohmann::json& j, const EnvObservation& obs);
void from_json(const nlohmann::json& j, EnvObservation& obs);

EnvObservation make_observation(const Adjacency& adjacency, const std::vector<std::vector<double>>& local,
                                std::int64_t global_step);

// Network input rows [deg_i || o_i]. The adjacency row enters through its
// degree (one weight tied across all columns) so that relabeling atomic
// actions permutes the rows without changing their content; the full row
// structure enters through neighbor aggregation.
Tensor node_inputs(const EnvObservation& obs);

struct Transition {
  EnvObservation obs;
  StructuredAction action;
  double reward = 0.0;
  EnvObservation next_obs;
  bool done = false;

  friend bool operator==(const Transition&, const Transition&) = default;
};

struct StepResult {
  EnvObservation obs;
  double reward = 0.0;
  bool done = false;
};

class Environment {
 public:
  virtual ~Environment() = default;

  virtual EnvObservation reset(std::uint64_t seed) = 0;
  // Throws InvalidInput for a malformed action and IllegalQuery after done.
  virtual StepResult step(const StructuredAction& action) = 0;
  virtual EnvObservation observe() const = 0;
  virtual ActionSpaceSpec action_space() const = 0;
  virtual std::size_t horizon() const = 0;
  virtual bool done() const = 0;

  virtual nlohmann::json save_state() const = 0;
  virtual void load_state(const nlohmann::json& state) = 0;
};

struct GridSignalsOptions {
  std::size_t n_signals = 3;
  std::size_t horizon = 32;
  std::int64_t service_capacity = 2;
  double arrival_prob = 0.3;
  std::int64_t initial_max_queue = 3;
};

class GridSignals final : public Environment {
 public:
  static constexpr std::size_t kPhases = 2;

  explicit GridSignals(GridSignalsOptions options);

  EnvObservation reset(std::uint64_t seed) override;
  StepResult step(const StructuredAction& action) override;
  EnvObservation observe() const override;
  ActionSpaceSpec action_space() const override;
  std::size_t horizon() const override { return options_.horizon; }
  bool done() const override { return t_ >= options_.horizon; }

  nlohmann::json save_state() const override;
  void load_state(const nlohmann::json& state) override;

  // Test hook: overwrite queues (q_A, q_B per signal).
  void set_queues(const std::vector<std::array<std::int64_t, 2>>& queues);
  const std::vector<std::array<std::int64_t, 2>>& queues() const { return queues_; }
  std::int64_t injected() const { return injected_; }
  std::int64_t exited() const { return exited_; }
  std::int64_t in_queue() const;

 private:
  GridSignalsOptions options_;
  Adjacency adjacency_;
  std::vector<std::array<std::int64_t, 2>> queues_;
  std::vector<std::size_t> last_phase_;
  // arrivals_[t][i][k]
  std::vector<std::vector<std::array<std::int64_t, 2>>> arrivals_;
  std::size_t t_ = 0;
  std::int64_t injected_ = 0;
  std::int64_t exited_ = 0;
};

struct Cell {
  std::int64_t x = 0;
  std::int64_t y = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

struct PreyCaptureLayout {
  std::vector<Cell> predators;
  std::vector<Cell> prey;
  friend bool operator==(const PreyCaptureLayout&, const PreyCaptureLayout&) = default;
};

struct PreyCaptureOptions {
  std::size_t n_predators = 4;
  std::int64_t grid = 7;
  std::size_t n_prey = 2;
  std::size_t horizon = 16;
  // When set, every reset uses this placement instead of a seeded draw.
  std::optional<PreyCaptureLayout> layout;
};

class PreyCapture final : public Environment {
 public:
  enum Move : std::size_t { kStay = 0, kNorth = 1, kSouth = 2, kEast = 3, kWest = 4 };
  static constexpr std::size_t kMoves = 5;
  static constexpr double kStepPenalty = 0.01;

  explicit PreyCapture(PreyCaptureOptions options);

  EnvObservation reset(std::uint64_t seed) override;
  StepResult step(const StructuredAction& action) override;
  EnvObservation observe() const override;
  ActionSpaceSpec action_space() const override;
  std::size_t horizon() const override { return options_.horizon; }
  bool done() const override;

  nlohmann::json save_state() const override;
  void load_state(const nlohmann::json& state) override;

  const std::vector<Cell>& predators() const { return predators_; }
  const std::vector<Cell>& prey() const { return prey_; }
  const std::vector<bool>& prey_alive() const { return alive_; }

 private:
  Cell wrap(Cell c) const;
  void rebuild_adjacency();

  PreyCaptureOptions options_;
  std::vector<Cell> predators_;
  std::vector<Cell> prey_;
  std::vector<bool> alive_;
  Adjacency adjacency_;
  std::size_t t_ = 0;
};

struct EnvConfig {
  std::string kind = "gridsignals";
  std::size_t n_atomic = 3;
  std::uint64_t seed = 0;
  std::optional<std::size_t> horizon;
  // gridsignals
  double arrival_prob = 0.3;
  // preycapture
  std::int64_t grid = 7;
  std::size_t n_prey = 2;
  std::optional<PreyCaptureLayout> layout;

  friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

void to_json(nlohmann::json& j, const EnvConfig& cfg);
void from_json(const nlohmann::json& j, EnvConfig& cfg);

std::unique_ptr<Environment> make_environment(const EnvConfig& cfg);

}  // namespace dpo
