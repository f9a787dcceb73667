#include "dpo/parameters.hpp"

#include <bit>
#include <cstdint>
#include <cmath>
#include <cstring>

#include "dpo/errors.hpp"

namespace dpo {

Parameter& ParameterSet::add(const std::string& name, Tensor init) {
  if (contains(name)) throw InvalidInput("duplicate parameter name: " + name);
  Parameter p;
  p.name = name;
  p.grad = Tensor(init.shape(), 0.0);
  p.m = Tensor(init.shape(), 0.0);
  p.v = Tensor(init.shape(), 0.0);
  p.value = std::move(init);
  index_.emplace(name, params_.size());
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("unknown parameter: " + name);
  return params_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InvalidInput("unknown parameter: " + name);
  return params_[it->second];
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.fill(0.0);
}

double ParameterSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) {
    for (double g : p.grad.data()) s += g * g;
  }
  return std::sqrt(s);
}

bool ParameterSet::shape_matches(const ParameterSet& other) const {
  if (params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name != other.params_[i].name) return false;
    if (params_[i].value.shape() != other.params_[i].value.shape()) return false;
  }
  return true;
}

nlohmann::json ParameterSet::manifest() const {
  auto entries = nlohmann::json::array();
  for (const auto& p : params_) entries.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  return {{"step", step_}, {"parameters", entries}};
}

namespace {


void put_doubles(std::vector<unsigned char>& out, const std::vector<double>& values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFF));
  }
}

void get_doubles(const std::vector<unsigned char>& in, std::size_t& offset, std::vector<double>& values) {
  const std::size_t need = values.size() * 8;
  if (offset + need > in.size()) throw CheckpointError("corrupt payload: truncated parameter data");
  for (double& v : values) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(in[offset + b]) << (8 * b);
    v = std::bit_cast<double>(bits);
    offset += 8;
  }
}

}  // namespace

void ParameterSet::append_payload(std::vector<unsigned char>& out) const {
  for (const auto& p : params_) {
    put_doubles(out, p.value.data());
    put_doubles(out, p.grad.data());
    put_doubles(out, p.m.data());
    put_doubles(out, p.v.data());
  }
}

ParameterSet ParameterSet::restore(const nlohmann::json& manifest, const std::vector<unsigned char>& payload,
                                   std::size_t& offset) {
  ParameterSet out;
  try {
    out.step_ = manifest.at("step").get<std::uint64_t>();
    for (const auto& e : manifest.at("parameters")) {
      auto shape = e.at("shape").get<std::vector<std::size_t>>();
      Parameter& p = out.add(e.at("name").get<std::string>(), Tensor(shape, 0.0));
      get_doubles(payload, offset, p.value.data());
      get_doubles(payload, offset, p.grad.data());
      get_doubles(payload, offset, p.m.data());
      get_doubles(payload, offset, p.v.data());
    }
  } catch (const nlohmann::json::exception& ex) {
    throw CheckpointError(std::string("corrupt manifest: ") + ex.what());
  } catch (const InvalidInput& ex) {
    throw CheckpointError(std::string("corrupt manifest: ") + ex.what());
  }
  return out;
}

double adamw_step(ParameterSet& params, const AdamWConfig& config) {
  for (const auto& p : params.entries()) {
    for (double g : p.grad.data()) {
      if (!std::isfinite(g)) throw TrainingDivergence("non-finite gradient in parameter " + p.name);
    }
  }
  const double norm = params.grad_norm();
  const double clip = (config.max_grad_norm > 0.0 && norm > config.max_grad_norm) ? config.max_grad_norm / norm : 1.0;

  params.set_step(params.step() + 1);
  const auto t = static_cast<double>(params.step());
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  for (auto& p : params.entries()) {
    auto& w = p.value.data();
    const auto& g = p.grad.data();
    auto& m = p.m.data();
    auto& v = p.v.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      w[i] -= config.lr * config.weight_decay * w[i];
      w[i] -= config.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config.eps);
    }
  }
  return norm;
}

void sgd_step(ParameterSet& params, double lr) {
  for (auto& p : params.entries()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      if (!std::isfinite(p.grad[i])) throw TrainingDivergence("non-finite gradient in parameter " + p.name);
      p.value[i] -= lr * p.grad[i];
    }
  }
  params.set_step(params.step() + 1);
}

void soft_update(ParameterSet& target, const ParameterSet& online, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw InvalidInput("soft update coefficient must lie in (0, 1]");
  if (!target.shape_matches(online)) throw InvalidInput("soft update between mismatched parameter sets");
  auto& t = target.entries();
  const auto& o = online.entries();
  for (std::size_t k = 0; k < t.size(); ++k) {
    auto& tv = t[k].value.data();
    const auto& ov = o[k].value.data();
    if (tau == 1.0) {
      tv = ov;
      continue;
    }
    for (std::size_t i = 0; i < tv.size(); ++i) tv[i] += tau * (ov[i] - tv[i]);
  }
}

}  // namespace dpo
