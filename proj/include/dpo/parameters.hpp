#pragma once

#include <cstdint>
#include <deque>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "dpo/tensor.hpp"

namespace dpo {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  // AdamW first and second moments.
  Tensor m;
  Tensor v;
};

// Named parameters with gradient and optimizer buffers. Entries live in a
// deque so references handed to a tape stay valid while more are added.
class ParameterSet {
 public:
  ParameterSet() = default;

  Parameter& add(const std::string& name, Tensor init);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  Tensor& value(const std::string& name) { return at(name).value; }
  const Tensor& value(const std::string& name) const { return at(name).value; }

  std::deque<Parameter>& entries() { return params_; }
  const std::deque<Parameter>& entries() const { return params_; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  double grad_norm() const;
  bool shape_matches(const ParameterSet& other) const;

  std::uint64_t step() const { return step_; }
  void set_step(std::uint64_t s) { step_ = s; }

  // Values, gradients and moments serialized as little-endian float64;
  // the manifest carries names, shapes and the optimizer step.
  nlohmann::json manifest() const;
  void append_payload(std::vector<unsigned char>& out) const;
  // Rebuilds from a manifest and payload; throws CheckpointError on any
  // inconsistency. `offset` advances past the consumed bytes.
  static ParameterSet restore(const nlohmann::json& manifest, const std::vector<unsigned char>& payload,
                              std::size_t& offset);

 private:
  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  std::uint64_t step_ = 0;
};

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  double max_grad_norm = 20.0;
};

// Global-norm clipping followed by a decoupled-weight-decay Adam update.
// Returns the pre-clip gradient norm. Throws TrainingDivergence naming the
// first parameter with a non-finite gradient.
double adamw_step(ParameterSet& params, const AdamWConfig& config);

// Plain gradient descent, used by the tabular flows.
void sgd_step(ParameterSet& params, double lr);

// target <- (1 - tau) * target + tau * online, elementwise.
void soft_update(ParameterSet& target, const ParameterSet& online, double tau);

}  // namespace dpo
