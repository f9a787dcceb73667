#pragma once

// Differentiable kernels used by the policy and energy networks.

#include <limits>
#include <span>
#include <vector>

#include "dpo/action_space.hpp"
#include "dpo/autodiff.hpp"

namespace dpo {

// Stand-in for -infinity in masked logits.
inline constexpr double kMaskedLogit = std::numeric_limits<double>::lowest();

// Row-stochastic N x N operator averaging each node over its neighbors and
// itself.
Tensor neighbor_mean_operator(const Adjacency& adjacency, std::size_t n_nodes);

struct GnnLayerWeights {
  ad::Var theta;   // d_in x d_out, the skip branch
  ad::Var phi_w1;  // d_in x d_hidden
  ad::Var phi_b1;  // 1 x d_hidden
  ad::Var phi_w2;  // d_hidden x d_out
  ad::Var phi_b2;  // 1 x d_out
  ad::Var gamma;   // 1 x 1 mixing weight in (0, 1)
};

// out_i = gamma * x_i Theta + (1 - gamma) * phi(mean{x_j : j in N(i) u {i}}),
// phi a one-hidden-layer ReLU perceptron.
ad::Var gnn_layer(ad::Var x, const Adjacency& adjacency, const GnnLayerWeights& w);

// Positive feature map of the linearized attention.
double attention_feature(double x);
ad::Var attention_feature(ad::Var x);

// Q = X Wq, K = X Wk, V = X Wv; out_k = sum_j psi(Q_k).psi(K_j) V_j / sum_j psi(Q_k).psi(K_j),
// evaluated in the linear-time order psi(Q) (psi(K)^T V).
ad::Var linear_attention(ad::Var x, ad::Var w_query, ad::Var w_key, ad::Var w_value);

// Rows of already-assigned positions are replaced by kMaskedLogit.
ad::Var masked_pointer_logits(ad::Var raw_logits, const std::vector<bool>& assigned);

// alpha * log sum exp(v / alpha), max-shifted.
double logsumexp(std::span<const double> values, double alpha = 1.0);

}  // namespace dpo
