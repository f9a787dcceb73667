#pragma once

// Shared helpers for the test binaries: finite-difference gradient checks
// and small fixtures.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "dpo/autodiff.hpp"
#include "dpo/environments.hpp"
#include "dpo/rng.hpp"

namespace dpo::testing {

inline Tensor random_tensor(std::size_t rows, std::size_t cols, Rng& rng, double scale = 1.0) {
  Tensor t(rows, cols);
  for (double& v : t.data()) v = scale * rng.normal();
  return t;
}

// |a - n| / max(|a|, |n|, floor), the usual relative error with a floor so
// exact zeros do not blow up.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Compares backward() against central differences for every scalar of
// every parameter in `params`. `loss` builds a 1x1 loss on the given tape.
inline double max_fd_error(ParameterSet& params, const std::function<ad::Var(ad::Tape&)>& loss, double h = 1e-6) {
  params.zero_grad();
  {
    ad::Tape tape;
    tape.backward(loss(tape));
  }
  double worst = 0.0;
  for (auto& p : params.entries()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double keep = p.value.data()[i];
      p.value.data()[i] = keep + h;
      double up, down;
      {
        ad::Tape tape(false);
        up = loss(tape).scalar();
      }
      p.value.data()[i] = keep - h;
      {
        ad::Tape tape(false);
        down = loss(tape).scalar();
      }
      p.value.data()[i] = keep;
      worst = std::max(worst, relative_error(p.grad.data()[i], (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

// Line graph 0-1-...-(n-1) observation with random local features.
inline EnvObservation random_observation(std::size_t n, std::size_t width, Rng& rng) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i + 1 < n; ++i) edges.emplace_back(i, i + 1);
  std::vector<std::vector<double>> local(n, std::vector<double>(width));
  for (auto& row : local) {
    for (double& v : row) v = rng.normal();
  }
  return make_observation(Adjacency(n, edges), local, 0);
}

}  // namespace dpo::testing
