#pragma once

// Parameter initialization and binding for the network building blocks
// shared by the energy model and the sampler.

#include <string>

#include "dpo/autodiff.hpp"
#include "dpo/kernels.hpp"

namespace dpo {

enum class NormKind { kLayer, kNone };

NormKind parse_norm(const std::string& name);
std::string norm_name(NormKind kind);

struct EncoderConfig {
  std::size_t hidden = 32;
  std::size_t gnn_layers = 2;
  NormKind norm = NormKind::kLayer;
  double dropout = 0.0;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Resolves parameter names to tape variables, either trainable (gradients
// flow into the set) or frozen (bound as constants).
class Binder {
 public:
  Binder(ad::Tape& tape, ParameterSet& params) : tape_(&tape), mutable_(&params), params_(&params) {}
  Binder(ad::Tape& tape, const ParameterSet& params) : tape_(&tape), params_(&params) {}

  ad::Var operator()(const std::string& name) const {
    return mutable_ ? tape_->param(*mutable_, name) : tape_->frozen(*params_, name);
  }
  ad::Tape& tape() const { return *tape_; }

 private:
  ad::Tape* tape_;
  ParameterSet* mutable_ = nullptr;
  const ParameterSet* params_;
};

namespace layers {

enum class Init { kScaled, kZero };

void init_linear(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                 Init init = Init::kScaled, double gain = 1.0);
ad::Var linear(const Binder& bind, const std::string& prefix, ad::Var x);

void init_norm(ParameterSet& params, const std::string& prefix, std::size_t width);
ad::Var norm(const Binder& bind, const std::string& prefix, ad::Var x, NormKind kind);

void init_gnn_layer(ParameterSet& params, const std::string& prefix, std::size_t width, Rng& rng);
GnnLayerWeights bind_gnn_layer(const Binder& bind, const std::string& prefix);

// L residual GNN layers: h <- norm(h + gnn(h)).
void init_gnn_stack(ParameterSet& params, const std::string& prefix, const EncoderConfig& cfg, Rng& rng);
ad::Var gnn_stack(const Binder& bind, const std::string& prefix, ad::Var h, const Adjacency& adjacency,
                  const EncoderConfig& cfg, Rng* dropout_rng);

// Shared per-row embedding (linear, ReLU, norm) followed by a GNN stack.
void init_graph_encoder(ParameterSet& params, const std::string& prefix, std::size_t in_width,
                        const EncoderConfig& cfg, Rng& rng);
ad::Var graph_encoder(const Binder& bind, const std::string& prefix, ad::Var x, const Adjacency& adjacency,
                      const EncoderConfig& cfg, Rng* dropout_rng);

}  // namespace layers
}  // namespace dpo
