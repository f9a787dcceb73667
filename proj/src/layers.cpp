#include "dpo/layers.hpp"

#include <cmath>

namespace dpo {

NormKind parse_norm(const std::string& name) {
  if (name == "layer") return NormKind::kLayer;
  if (name == "none") return NormKind::kNone;
  throw InvalidInput("unknown norm layer '" + name + "' (expected 'layer' or 'none')");
}

std::string norm_name(NormKind kind) { return kind == NormKind::kLayer ? "layer" : "none"; }

namespace layers {

void init_linear(ParameterSet& params, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
                 Init init, double gain) {
  Tensor w(in, out);
  if (init == Init::kScaled) {
    const double stddev = gain / std::sqrt(static_cast<double>(in));
    for (double& v : w.data()) v = stddev * rng.normal();
  }
  params.add(prefix + ".w", std::move(w));
  params.add(prefix + ".b", Tensor(1, out));
}

ad::Var linear(const Binder& bind, const std::string& prefix, ad::Var x) {
  return ad::add_row(ad::matmul(x, bind(prefix + ".w")), bind(prefix + ".b"));
}

void init_norm(ParameterSet& params, const std::string& prefix, std::size_t width) {
  params.add(prefix + ".gain", Tensor(1, width, 1.0));
  params.add(prefix + ".bias", Tensor(1, width, 0.0));
}

ad::Var norm(const Binder& bind, const std::string& prefix, ad::Var x, NormKind kind) {
  if (kind == NormKind::kNone) return x;
  return ad::layer_norm(x, bind(prefix + ".gain"), bind(prefix + ".bias"));
}

void init_gnn_layer(ParameterSet& params, const std::string& prefix, std::size_t width, Rng& rng) {
  Tensor theta(width, width);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(width));
  for (double& v : theta.data()) v = stddev * rng.normal();
  params.add(prefix + ".theta", std::move(theta));
  init_linear(params, prefix + ".phi1", width, width, rng);
  init_linear(params, prefix + ".phi2", width, width, rng);
  params.add(prefix + ".gamma_logit", Tensor(1, 1, 0.0));
}

GnnLayerWeights bind_gnn_layer(const Binder& bind, const std::string& prefix) {
  return GnnLayerWeights{
      bind(prefix + ".theta"),
      bind(prefix + ".phi1.w"),
      bind(prefix + ".phi1.b"),
      bind(prefix + ".phi2.w"),
      bind(prefix + ".phi2.b"),
      ad::sigmoid(bind(prefix + ".gamma_logit")),
  };
}

void init_gnn_stack(ParameterSet& params, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
  for (std::size_t l = 0; l < cfg.gnn_layers; ++l) {
    const std::string p = prefix + ".gnn" + std::to_string(l);
    init_gnn_layer(params, p, cfg.hidden, rng);
    if (cfg.norm != NormKind::kNone) init_norm(params, p + ".norm", cfg.hidden);
  }
}

ad::Var gnn_stack(const Binder& bind, const std::string& prefix, ad::Var h, const Adjacency& adjacency,
                  const EncoderConfig& cfg, Rng* dropout_rng) {
  for (std::size_t l = 0; l < cfg.gnn_layers; ++l) {
    const std::string p = prefix + ".gnn" + std::to_string(l);
    ad::Var out = gnn_layer(h, adjacency, bind_gnn_layer(bind, p));
    if (dropout_rng) out = ad::dropout(out, cfg.dropout, *dropout_rng);
    h = norm(bind, p + ".norm", ad::add(h, out), cfg.norm);
  }
  return h;
}

void init_graph_encoder(ParameterSet& params, const std::string& prefix, std::size_t in_width,
                        const EncoderConfig& cfg, Rng& rng) {
  init_linear(params, prefix + ".embed", in_width, cfg.hidden, rng);
  if (cfg.norm != NormKind::kNone) init_norm(params, prefix + ".embed_norm", cfg.hidden);
  init_gnn_stack(params, prefix, cfg, rng);
}

ad::Var graph_encoder(const Binder& bind, const std::string& prefix, ad::Var x, const Adjacency& adjacency,
                      const EncoderConfig& cfg, Rng* dropout_rng) {
  ad::Var h = ad::relu(linear(bind, prefix + ".embed", x));
  h = norm(bind, prefix + ".embed_norm", h, cfg.norm);
  return gnn_stack(bind, prefix, h, adjacency, cfg, dropout_rng);
}

}  // namespace layers
}  // namespace dpo
