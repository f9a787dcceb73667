#include "dpo/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>

#include "dpo/errors.hpp"

namespace dpo {

// ---------------------------------------------------------------------------
// Config

#define DPO_TRAIN_FIELDS(X)                                                                                   \
  X(gamma) X(alpha) X(alpha_decay) X(alpha_min) X(lr_q) X(lr_gfn) X(lr_z) X(weight_decay) X(tau)              \
  X(batch_size) X(gfn_batch_size) X(gfn_update_ratio) X(gfn_updates_per_round) X(updates_per_env_step)       \
  X(epsilon_uniform) X(sampling_temperature) X(max_grad_norm) X(epochs) X(steps_per_epoch) X(seed)           \
  X(enumeration_limit) X(lambda_z) X(termination_enabled) X(buffer_capacity) X(replay_start)                 \
  X(soft_value_samples) X(hidden) X(gnn_layers) X(norm) X(dropout) X(ebm_updates_enabled) X(q_head_init)    \
  X(early_stop) X(early_stop_threshold) X(early_stop_window)

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* field, const char* what) {
    if (!ok) throw InvalidInput(std::string("config field '") + field + "' " + what);
  };
  require(gamma >= 0.0 && gamma < 1.0, "gamma", "must lie in [0, 1)");
  require(alpha > 0.0, "alpha", "must be positive");
  require(alpha_decay > 0.0 && alpha_decay <= 1.0, "alpha_decay", "must lie in (0, 1]");
  require(alpha_min > 0.0, "alpha_min", "must be positive");
  require(lr_q >= 0.0, "lr_q", "must be non-negative");
  require(lr_gfn >= 0.0, "lr_gfn", "must be non-negative");
  require(lr_z >= 0.0, "lr_z", "must be non-negative");
  require(weight_decay >= 0.0, "weight_decay", "must be non-negative");
  require(tau > 0.0 && tau <= 1.0, "tau", "must lie in (0, 1]");
  require(batch_size >= 1, "batch_size", "must be at least 1");
  require(gfn_batch_size >= 1, "gfn_batch_size", "must be at least 1");
  require(gfn_update_ratio >= 1, "gfn_update_ratio", "must be at least 1");
  require(gfn_updates_per_round >= 1, "gfn_updates_per_round", "must be at least 1");
  require(updates_per_env_step >= 1, "updates_per_env_step", "must be at least 1");
  require(epsilon_uniform >= 0.0 && epsilon_uniform <= 1.0, "epsilon_uniform", "must lie in [0, 1]");
  require(sampling_temperature > 0.0, "sampling_temperature", "must be positive");
  require(max_grad_norm > 0.0, "max_grad_norm", "must be positive");
  require(steps_per_epoch >= 1, "steps_per_epoch", "must be at least 1");
  require(lambda_z >= 0.0, "lambda_z", "must be non-negative");
  require(buffer_capacity >= 1, "buffer_capacity", "must be at least 1");
  require(replay_start >= 1, "replay_start", "must be at least 1");
  require(soft_value_samples >= 1, "soft_value_samples", "must be at least 1");
  require(hidden >= 1, "hidden", "must be at least 1");
  require(dropout >= 0.0 && dropout < 1.0, "dropout", "must lie in [0, 1)");
  require(q_head_init == "zero" || q_head_init == "random", "q_head_init", "must be 'zero' or 'random'");
  require(early_stop_window >= 1, "early_stop_window", "must be at least 1");
  (void)parse_norm(norm);
}

EncoderConfig TrainConfig::encoder() const { return EncoderConfig{hidden, gnn_layers, parse_norm(norm), dropout}; }

void to_json(nlohmann::json& j, const TrainConfig& cfg) {
  j = nlohmann::json::object();
  j["env"] = cfg.env;
#define X(f) j[#f] = cfg.f;
  DPO_TRAIN_FIELDS(X)
#undef X
}

void from_json(const nlohmann::json& j, TrainConfig& cfg) {
  if (!j.is_object()) throw InvalidInput("config must be a JSON object");
  static const std::set<std::string> known = {
      "env",
#define X(f) #f,
      DPO_TRAIN_FIELDS(X)
#undef X
  };
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw InvalidInput("unknown config field '" + key + "'");
  }
  try {
    if (j.contains("env")) cfg.env = j.at("env").get<EnvConfig>();
#define X(f) \
  if (j.contains(#f)) j.at(#f).get_to(cfg.f);
    DPO_TRAIN_FIELDS(X)
#undef X
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidInput(std::string("malformed config: ") + ex.what());
  }
  cfg.validate();
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& ex) {
    throw InvalidInput("config file is not valid JSON: " + std::string(ex.what()));
  }
  return j.get<TrainConfig>();
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw InvalidInput("override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  nlohmann::json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw InvalidInput("malformed override key: " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (!node->is_object() && !node->is_null()) throw InvalidInput("override key does not name an object: " + key);
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Replay buffer

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw InvalidInput("replay buffer capacity must be positive");
}

void ReplayBuffer::push(Transition t) {
  if (storage_.size() < capacity_) {
    storage_.push_back(std::move(t));
  } else {
    storage_[cursor_] = std::move(t);
  }
  cursor_ = (cursor_ + 1) % capacity_;
}

std::vector<std::size_t> ReplayBuffer::sample_slots(std::size_t k, Rng& rng) const {
  if (storage_.empty()) throw NotReady("replay buffer is empty");
  std::vector<std::size_t> out(k);
  for (auto& s : out) s = static_cast<std::size_t>(rng.below(storage_.size()));
  return out;
}

std::vector<Transition> ReplayBuffer::sample(std::size_t k, Rng& rng) const {
  std::vector<Transition> out;
  out.reserve(k);
  for (std::size_t s : sample_slots(k, rng)) out.push_back(storage_[s]);
  return out;
}

std::vector<Transition> ReplayBuffer::in_order() const {
  if (storage_.size() < capacity_) return storage_;
  std::vector<Transition> out;
  out.reserve(storage_.size());
  for (std::size_t i = 0; i < storage_.size(); ++i) out.push_back(storage_[(cursor_ + i) % capacity_]);
  return out;
}

nlohmann::json ReplayBuffer::to_json() const {
  nlohmann::json items = nlohmann::json::array();
  for (const auto& t : storage_) {
    items.push_back({{"obs", t.obs},
                     {"action", t.action.values()},
                     {"reward", t.reward},
                     {"next_obs", t.next_obs},
                     {"done", t.done}});
  }
  return {{"capacity", capacity_}, {"cursor", cursor_}, {"items", items}};
}

ReplayBuffer ReplayBuffer::from_json(const nlohmann::json& j) {
  ReplayBuffer b(j.at("capacity").get<std::size_t>());
  for (const auto& item : j.at("items")) {
    Transition t;
    t.obs = item.at("obs").get<EnvObservation>();
    t.action = StructuredAction(item.at("action").get<std::vector<std::size_t>>());
    t.reward = item.at("reward").get<double>();
    t.next_obs = item.at("next_obs").get<EnvObservation>();
    t.done = item.at("done").get<bool>();
    b.storage_.push_back(std::move(t));
  }
  b.cursor_ = j.at("cursor").get<std::size_t>();
  if (b.storage_.size() > b.capacity_ || b.cursor_ >= b.capacity_) {
    throw CheckpointError("corrupt replay buffer state");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Metrics

std::string format_metrics_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%llu,%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%.17g",
                static_cast<unsigned long long>(r.step), static_cast<unsigned long long>(r.epoch), r.env_reward,
                r.q_loss, r.tb_loss, r.z_loss, r.logz_mean, r.buffer_size, r.eps);
  return buf;
}

// ---------------------------------------------------------------------------
// Updates

namespace {

AdamWConfig adam(double lr, const TrainConfig& cfg) {
  AdamWConfig a;
  a.lr = lr;
  a.weight_decay = cfg.weight_decay;
  a.max_grad_norm = cfg.max_grad_norm;
  return a;
}

}  // namespace

GfnUpdateResult gfn_update(ConditionalGFlowNet& gfn, const SoftQFunction& q, std::span<const EnvObservation> states,
                           std::span<const double> soft_values, const TrainConfig& cfg, Rng& rng) {
  if (states.empty()) throw InvalidInput("GFlowNet update needs at least one state");
  if (!soft_values.empty() && soft_values.size() != states.size()) {
    throw InvalidInput("one soft value per state is required");
  }
  gfn.forward_params().zero_grad();
  gfn.backward_params().zero_grad();
  gfn.logz_params().zero_grad();
  const double w = 1.0 / static_cast<double>(states.size());
  SamplingOptions sampling;
  sampling.explore = true;
  GfnUpdateResult out;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const BuildTrajectory tau = gfn.sample_trajectory(states[i], rng, sampling);
    const double log_r = q.log_reward(states[i], tau.terminal, QParams::kTarget);
    const TrajectoryBalanceResult tb = trajectory_balance_loss(gfn, tau, states[i], log_r, w);
    out.tb_loss += w * tb.loss;
    out.logz_mean += w * tb.log_z;
    if (!soft_values.empty() && cfg.lambda_z > 0.0) {
      out.z_loss += w * z_regression_loss(gfn, states[i], soft_values[i], q.alpha(), cfg.lambda_z * w);
    }
  }
  adamw_step(gfn.forward_params(), adam(cfg.lr_gfn, cfg));
  adamw_step(gfn.backward_params(), adam(cfg.lr_gfn, cfg));
  adamw_step(gfn.logz_params(), adam(cfg.lr_z, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Trainer

namespace {

SoftQConfig q_config(const TrainConfig& cfg) {
  SoftQConfig q;
  q.encoder = cfg.encoder();
  q.alpha = cfg.alpha;
  q.gamma = cfg.gamma;
  q.zero_head = cfg.q_head_init == "zero";
  return q;
}

GFlowNetConfig gfn_config(const TrainConfig& cfg) {
  GFlowNetConfig g;
  g.encoder = cfg.encoder();
  g.epsilon_uniform = cfg.epsilon_uniform;
  g.sampling_temperature = cfg.sampling_temperature;
  g.termination_enabled = cfg.termination_enabled;
  return g;
}

}  // namespace

Trainer::Trainer(TrainConfig config, ForCheckpoint) : config_(std::move(config)), buffer_(1), rng_(config_.seed) {
  config_.validate();
  env_ = make_environment(config_.env);
  const ActionSpaceSpec spec = env_->action_space();
  obs_ = env_->reset(config_.env.seed);
  q_ = std::make_unique<SoftQFunction>(obs_.local_width, spec.arity, q_config(config_), rng_);
  gfn_ = std::make_unique<ConditionalGFlowNet>(obs_.local_width, spec.arity, gfn_config(config_), rng_);
  buffer_ = ReplayBuffer(config_.buffer_capacity);
  last_action_ = StructuredAction(std::vector<std::size_t>(spec.n_atomic, 0));
}

Trainer::Trainer(TrainConfig config) : Trainer(std::move(config), ForCheckpoint{}) { begin_episode(); }

void Trainer::begin_episode() {
  obs_ = env_->reset(config_.env.seed + episode_);
  ++episode_;
  last_action_ = StructuredAction(std::vector<std::size_t>(obs_.n_atomic, 0));
}

double Trainer::ebm_update() {
  const GFlowNetProposal proposals(*gfn_, NetParams::kTarget, config_.soft_value_samples);
  const std::vector<Transition> batch = buffer_.sample(config_.batch_size, rng_);
  q_->params().zero_grad();
  const QLossResult r = q_loss(*q_, batch, proposals, rng_);
  adamw_step(q_->params(), adam(config_.lr_q, config_));
  ++counters_.ebm_updates;
  return r.loss;
}

GfnUpdateResult Trainer::gfn_round() {
  const std::vector<std::size_t> slots = buffer_.sample_slots(config_.gfn_batch_size, rng_);
  std::vector<EnvObservation> states;
  std::vector<double> values;
  const GFlowNetProposal proposals(*gfn_, NetParams::kTarget, config_.soft_value_samples);
  for (std::size_t s : slots) {
    states.push_back(buffer_.at_slot(s).obs);
    if (config_.lambda_z > 0.0) {
      const auto samples = proposals.draw(states.back(), rng_);
      values.push_back(soft_value_estimate(*q_, states.back(), samples, QParams::kTarget).value);
    }
  }
  const GfnUpdateResult r = gfn_update(*gfn_, *q_, states, values, config_, rng_);
  ++counters_.gfn_updates;
  return r;
}

MetricsRow Trainer::step() {
  if (finished()) throw NotReady("training already finished");
  MetricsRow row;
  row.step = step_;
  row.epoch = epoch_;
  row.eps = config_.epsilon_uniform;

  SamplingOptions sampling;
  sampling.explore = true;
  sampling.warm_start = last_action_;
  const BuildTrajectory tau = gfn_->sample_trajectory(obs_, rng_, sampling);
  const StepResult result = env_->step(tau.terminal);
  row.env_reward = result.reward;
  buffer_.push(Transition{obs_, tau.terminal, result.reward, result.obs, result.done});
  last_action_ = tau.terminal;
  obs_ = result.obs;
  if (result.done) begin_episode();

  if (buffer_.size() >= config_.replay_start) {
    double q_sum = 0.0, tb_sum = 0.0, z_sum = 0.0, logz_sum = 0.0;
    std::size_t q_n = 0, g_n = 0;
    for (std::size_t u = 0; u < config_.updates_per_env_step; ++u) {
      if (config_.ebm_updates_enabled) {
        q_sum += ebm_update();
        ++q_n;
      }
      for (std::size_t g = 0; g < config_.gfn_update_ratio * config_.gfn_updates_per_round; ++g) {
        const GfnUpdateResult r = gfn_round();
        tb_sum += r.tb_loss;
        z_sum += r.z_loss;
        logz_sum += r.logz_mean;
        ++g_n;
      }
      q_->update_target(config_.tau);
      gfn_->update_targets(config_.tau);
      ++counters_.target_updates;
    }
    if (q_n) row.q_loss = q_sum / static_cast<double>(q_n);
    if (g_n) {
      row.tb_loss = tb_sum / static_cast<double>(g_n);
      row.z_loss = z_sum / static_cast<double>(g_n);
      row.logz_mean = logz_sum / static_cast<double>(g_n);
    }
    if (config_.early_stop) {
      tb_window_.push_back(row.tb_loss);
      if (tb_window_.size() > config_.early_stop_window) tb_window_.erase(tb_window_.begin());
      if (tb_window_.size() == config_.early_stop_window &&
          std::accumulate(tb_window_.begin(), tb_window_.end(), 0.0) / static_cast<double>(tb_window_.size()) <
              config_.early_stop_threshold) {
        stopped_early_ = true;
      }
    }
  }
  row.buffer_size = buffer_.size();

  ++step_;
  if (step_ % config_.steps_per_epoch == 0) {
    ++epoch_;
    if (config_.alpha_decay < 1.0) q_->set_alpha(std::max(config_.alpha_min, q_->alpha() * config_.alpha_decay));
  }
  return row;
}

bool Trainer::finished() const { return stopped_early_ || epoch_ >= config_.epochs; }

void Trainer::run(std::ostream* metrics, const std::optional<std::filesystem::path>& out_dir) {
  while (!finished()) {
    const std::uint64_t epoch_before = epoch_;
    MetricsRow row;
    try {
      row = step();
    } catch (const TrainingDivergence&) {
      if (out_dir) save_checkpoint(*out_dir / "ckpt_diverged");
      throw;
    } catch (const ModelDivergence&) {
      if (out_dir) save_checkpoint(*out_dir / "ckpt_diverged");
      throw;
    }
    if (metrics) *metrics << format_metrics_row(row) << '\n' << std::flush;
    if (out_dir && (epoch_ != epoch_before || stopped_early_)) {
      save_checkpoint(*out_dir / ("ckpt_epoch" + std::to_string(epoch_)));
    }
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

struct NamedSet {
  const char* name;
  ParameterSet* set;
};

std::vector<NamedSet> named_sets(SoftQFunction& q, ConditionalGFlowNet& g) {
  return {{"q", &q.params()},           {"q_target", &q.target_params()},   {"forward", &g.forward_params()},
          {"backward", &g.backward_params()}, {"logz", &g.logz_params()},      {"forward_target", &g.target_forward()},
          {"backward_target", &g.target_backward()}, {"logz_target", &g.target_logz()}};
}

std::vector<unsigned char> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw CheckpointError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

void Trainer::save_checkpoint(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  auto& self = const_cast<Trainer&>(*this);
  nlohmann::json manifest;
  manifest["version"] = kCheckpointVersion;
  manifest["config"] = config_;
  manifest["step"] = step_;
  manifest["epoch"] = epoch_;
  manifest["episode"] = episode_;
  manifest["alpha"] = q_->alpha();
  manifest["rng"] = rng_.serialize();
  manifest["env_state"] = env_->save_state();
  manifest["obs"] = obs_;
  manifest["last_action"] = last_action_.values();
  manifest["tb_window"] = tb_window_;
  manifest["stopped_early"] = stopped_early_;
  manifest["counters"] = {{"ebm_updates", counters_.ebm_updates},
                          {"gfn_updates", counters_.gfn_updates},
                          {"target_updates", counters_.target_updates}};
  manifest["reward_reads"] = {{"online", q_->reward_reads().online}, {"target", q_->reward_reads().target}};
  std::vector<unsigned char> payload;
  nlohmann::json sets = nlohmann::json::object();
  for (const auto& [name, set] : named_sets(*self.q_, *self.gfn_)) {
    sets[name] = set->manifest();
    set->append_payload(payload);
  }
  manifest["parameter_sets"] = sets;
  const std::vector<std::uint8_t> buffer = nlohmann::json::to_cbor(buffer_.to_json());
  manifest["buffer_bytes"] = buffer.size();
  payload.insert(payload.end(), buffer.begin(), buffer.end());
  manifest["payload_bytes"] = payload.size();

  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  std::ofstream out(dir / "payload.bin", std::ios::binary);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw CheckpointError("failed to write checkpoint payload to " + dir.string());
}

Trainer Trainer::from_checkpoint(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  {
    const auto bytes = read_file(dir / "manifest.json");
    manifest = nlohmann::json::parse(bytes.begin(), bytes.end(), nullptr, false);
    if (manifest.is_discarded()) throw CheckpointError("corrupt manifest in " + dir.string());
  }
  try {
    const int version = manifest.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw CheckpointError("checkpoint version " + std::to_string(version) + " does not match expected " +
                            std::to_string(kCheckpointVersion));
    }
    const std::vector<unsigned char> payload = read_file(dir / "payload.bin");
    if (payload.size() != manifest.at("payload_bytes").get<std::size_t>()) {
      throw CheckpointError("corrupt payload: expected " + manifest.at("payload_bytes").dump() + " bytes, found " +
                            std::to_string(payload.size()));
    }
    TrainConfig cfg = manifest.at("config").get<TrainConfig>();
    Trainer t(cfg, ForCheckpoint{});
    std::size_t offset = 0;
    for (const auto& [name, set] : named_sets(*t.q_, *t.gfn_)) {
      ParameterSet restored = ParameterSet::restore(manifest.at("parameter_sets").at(name), payload, offset);
      if (!restored.shape_matches(*set)) throw CheckpointError(std::string("parameter shapes differ in set ") + name);
      *set = std::move(restored);
    }
    const auto buffer_bytes = manifest.at("buffer_bytes").get<std::size_t>();
    if (offset + buffer_bytes != payload.size()) throw CheckpointError("corrupt payload: replay buffer size mismatch");
    t.buffer_ = ReplayBuffer::from_json(
        nlohmann::json::from_cbor(payload.begin() + static_cast<std::ptrdiff_t>(offset), payload.end()));
    t.step_ = manifest.at("step").get<std::uint64_t>();
    t.epoch_ = manifest.at("epoch").get<std::uint64_t>();
    t.episode_ = manifest.at("episode").get<std::uint64_t>();
    t.q_->set_alpha(manifest.at("alpha").get<double>());
    t.rng_.deserialize(manifest.at("rng").get<std::string>());
    t.env_->load_state(manifest.at("env_state"));
    t.obs_ = manifest.at("obs").get<EnvObservation>();
    t.last_action_ = StructuredAction(manifest.at("last_action").get<std::vector<std::size_t>>());
    t.tb_window_ = manifest.at("tb_window").get<std::vector<double>>();
    t.stopped_early_ = manifest.at("stopped_early").get<bool>();
    const auto& c = manifest.at("counters");
    t.counters_ = {c.at("ebm_updates").get<std::uint64_t>(), c.at("gfn_updates").get<std::uint64_t>(),
                   c.at("target_updates").get<std::uint64_t>()};
    return t;
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError("corrupt checkpoint " + dir.string() + ": " + ex.what());
  } catch (const InvalidInput& ex) {
    throw CheckpointError("corrupt checkpoint " + dir.string() + ": " + ex.what());
  }
}

}  // namespace dpo
