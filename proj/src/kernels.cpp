#include "dpo/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace dpo {

Tensor neighbor_mean_operator(const Adjacency& adjacency, std::size_t n_nodes) {
  if (adjacency.n_nodes() != n_nodes && !adjacency.edges().empty()) {
    throw InvalidInput("adjacency has " + std::to_string(adjacency.n_nodes()) + " nodes, features have " +
                       std::to_string(n_nodes) + " rows");
  }
  Tensor op(n_nodes, n_nodes);
  std::vector<std::size_t> degree(n_nodes, 1);
  for (auto [a, b] : adjacency.edges()) {
    if (a >= n_nodes || b >= n_nodes) throw InvalidInput("adjacency index out of range");
    ++degree[a];
    ++degree[b];
  }
  for (std::size_t i = 0; i < n_nodes; ++i) op(i, i) = 1.0 / static_cast<double>(degree[i]);
  for (auto [a, b] : adjacency.edges()) {
    op(a, b) = 1.0 / static_cast<double>(degree[a]);
    op(b, a) = 1.0 / static_cast<double>(degree[b]);
  }
  return op;
}

ad::Var gnn_layer(ad::Var x, const Adjacency& adjacency, const GnnLayerWeights& w) {
  ad::Tape& tape = *x.tape;
  ad::Var agg = tape.constant(neighbor_mean_operator(adjacency, x.rows()));
  ad::Var skip = ad::matmul(x, w.theta);
  ad::Var pooled = ad::matmul(agg, x);
  ad::Var hidden = ad::relu(ad::add_row(ad::matmul(pooled, w.phi_w1), w.phi_b1));
  ad::Var phi = ad::add_row(ad::matmul(hidden, w.phi_w2), w.phi_b2);
  ad::Var one_minus = ad::add_scalar(ad::neg(w.gamma), 1.0);
  return ad::add(ad::scale_by(skip, w.gamma), ad::scale_by(phi, one_minus));
}

double attention_feature(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) + 1e-6;
}

ad::Var attention_feature(ad::Var x) { return ad::add_scalar(ad::softplus(x), 1e-6); }

ad::Var linear_attention(ad::Var x, ad::Var w_query, ad::Var w_key, ad::Var w_value) {
  if (x.rows() < 1) throw InvalidInput("linear_attention needs at least one row");
  if (w_query.rows() != x.cols() || w_key.rows() != x.cols() || w_value.rows() != x.cols() ||
      w_query.cols() != w_key.cols()) {
    throw InvalidInput("linear_attention: projection shapes do not match the features");
  }
  ad::Var q = attention_feature(ad::matmul(x, w_query));
  ad::Var k = attention_feature(ad::matmul(x, w_key));
  ad::Var v = ad::matmul(x, w_value);
  ad::Var kt = ad::transpose(k);
  ad::Var kv = ad::matmul(kt, v);                          // d_k x d_v
  ad::Var k_sum = ad::sum_cols(kt);                        // d_k x 1
  ad::Var numerator = ad::matmul(q, kv);                   // N x d_v
  ad::Var denominator = ad::matmul(q, k_sum);              // N x 1
  return ad::div_rows(numerator, denominator);
}

ad::Var masked_pointer_logits(ad::Var raw_logits, const std::vector<bool>& assigned) {
  return ad::mask_rows(raw_logits, assigned, kMaskedLogit);
}

double logsumexp(std::span<const double> values, double alpha) {
  if (values.empty()) throw InvalidInput("logsumexp of an empty sequence");
  if (!(alpha > 0.0)) throw InvalidInput("logsumexp temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : values) mx = std::max(mx, v / alpha);
  if (!std::isfinite(mx)) return alpha * mx;
  double s = 0.0;
  for (double v : values) s += std::exp(v / alpha - mx);
  return alpha * (mx + std::log(s));
}

}  // namespace dpo
