#pragma once

// Joint training loop: GFlowNet rollouts into a replay buffer, one soft-Q
// update per timestep, several GFlowNet updates per timestep, soft target
// updates, per-timestep metrics and per-epoch checkpoints.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dpo/ebm.hpp"
#include "dpo/environments.hpp"
#include "dpo/gflownet.hpp"

namespace dpo {

inline constexpr int kCheckpointVersion = 1;

struct TrainConfig {
  EnvConfig env;
  double gamma = 0.95;
  double alpha = 1.0;
  // Multiplicative per-epoch temperature decay; 1 disables it.
  double alpha_decay = 1.0;
  double alpha_min = 1e-3;
  double lr_q = 1e-3;
  double lr_gfn = 5e-4;
  double lr_z = 1e-2;
  double weight_decay = 0.0;
  double tau = 0.01;
  std::size_t batch_size = 32;
  std::size_t gfn_batch_size = 8;
  std::size_t gfn_update_ratio = 4;
  std::size_t gfn_updates_per_round = 1;
  std::size_t updates_per_env_step = 1;
  double epsilon_uniform = 0.05;
  double sampling_temperature = 1.0;
  double max_grad_norm = 20.0;
  std::size_t epochs = 1;
  std::size_t steps_per_epoch = 100;
  std::uint64_t seed = 0;
  std::size_t enumeration_limit = static_cast<std::size_t>(kDefaultEnumerationLimit);
  double lambda_z = 1.0;
  bool termination_enabled = false;
  std::size_t buffer_capacity = 1'000'000;
  std::size_t replay_start = 32;
  std::size_t soft_value_samples = 64;
  std::size_t hidden = 64;
  std::size_t gnn_layers = 3;
  std::string norm = "layer";
  double dropout = 0.0;
  bool ebm_updates_enabled = true;
  // "zero" starts Q at 0 everywhere; "random" draws the output layer too.
  std::string q_head_init = "zero";
  bool early_stop = false;
  double early_stop_threshold = 1e-3;
  std::size_t early_stop_window = 100;

  // Throws InvalidInput naming the offending field.
  void validate() const;
  EncoderConfig encoder() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
// Missing keys keep their defaults; unknown keys are rejected.
void from_json(const nlohmann::json& j, TrainConfig& cfg);

TrainConfig load_config(const std::filesystem::path& path);
// Applies one `key=value` override; dotted keys reach into `env`.
void apply_override(nlohmann::json& config, const std::string& assignment);

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(Transition t);
  // Uniform with replacement over filled slots; NotReady when empty.
  std::vector<Transition> sample(std::size_t k, Rng& rng) const;
  std::vector<std::size_t> sample_slots(std::size_t k, Rng& rng) const;
  const Transition& at_slot(std::size_t slot) const { return storage_.at(slot); }
  // Oldest first.
  std::vector<Transition> in_order() const;

  std::size_t size() const { return storage_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t cursor() const { return cursor_; }

  nlohmann::json to_json() const;
  static ReplayBuffer from_json(const nlohmann::json& j);

 private:
  std::size_t capacity_;
  std::vector<Transition> storage_;
  std::size_t cursor_ = 0;
};

struct MetricsRow {
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  double env_reward = 0.0;
  double q_loss = 0.0;
  double tb_loss = 0.0;
  double z_loss = 0.0;
  double logz_mean = 0.0;
  std::size_t buffer_size = 0;
  double eps = 0.0;
};

inline constexpr const char* kMetricsHeader = "step,epoch,env_reward,q_loss,tb_loss,z_loss,logz_mean,buffer_size,eps";
std::string format_metrics_row(const MetricsRow& row);

struct UpdateCounters {
  std::uint64_t ebm_updates = 0;
  std::uint64_t gfn_updates = 0;
  std::uint64_t target_updates = 0;
};

struct GfnUpdateResult {
  double tb_loss = 0.0;
  double z_loss = 0.0;
  double logz_mean = 0.0;
};

// One GFlowNet update over `states`: an exploratory trajectory per state,
// trajectory balance against log R = Q_target / alpha, plus lambda_z times
// the log Z regression onto `soft_values` (skipped when empty). Applies
// AdamW to the forward, backward and log Z groups.
GfnUpdateResult gfn_update(ConditionalGFlowNet& gfn, const SoftQFunction& q, std::span<const EnvObservation> states,
                           std::span<const double> soft_values, const TrainConfig& cfg, Rng& rng);

class Trainer {
 public:
  explicit Trainer(TrainConfig config);
  static Trainer from_checkpoint(const std::filesystem::path& dir);

  // One environment timestep with its updates.
  MetricsRow step();
  // Runs the remaining epochs, appending rows to `metrics` and writing
  // ckpt_epoch{n} under `out_dir` when set. On divergence writes
  // ckpt_diverged and rethrows.
  void run(std::ostream* metrics, const std::optional<std::filesystem::path>& out_dir);
  bool finished() const;

  void save_checkpoint(const std::filesystem::path& dir) const;

  const TrainConfig& config() const { return config_; }
  SoftQFunction& q() { return *q_; }
  const SoftQFunction& q() const { return *q_; }
  ConditionalGFlowNet& gfn() { return *gfn_; }
  const ConditionalGFlowNet& gfn() const { return *gfn_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  Environment& env() { return *env_; }
  const UpdateCounters& counters() const { return counters_; }
  std::uint64_t global_step() const { return step_; }
  std::uint64_t epoch() const { return epoch_; }

 private:
  struct ForCheckpoint {};
  Trainer(TrainConfig config, ForCheckpoint);

  void begin_episode();
  double ebm_update();
  GfnUpdateResult gfn_round();

  TrainConfig config_;
  std::unique_ptr<Environment> env_;
  std::unique_ptr<SoftQFunction> q_;
  std::unique_ptr<ConditionalGFlowNet> gfn_;
  ReplayBuffer buffer_;
  Rng rng_;
  EnvObservation obs_;
  StructuredAction last_action_;
  std::uint64_t step_ = 0;
  std::uint64_t epoch_ = 0;
  std::uint64_t episode_ = 0;
  std::vector<double> tb_window_;
  bool stopped_early_ = false;
  UpdateCounters counters_;
};

}  // namespace dpo
