#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "simsearch/error.hpp"

namespace simsearch {

struct TrainerConfig {
  double margin = 1.0;
  double base_lr = 0.05;
  /// Epoch indices (0-based) at which the rate drops by `lr_factor`.
  std::vector<std::size_t> lr_boundaries;
  double lr_factor = 10.0;
  double momentum = 0.9;
  std::size_t batch_size = 32;
  std::size_t max_epochs = 30;
  std::size_t patience = 5;
  std::uint64_t seed = 42;
  double split_fraction = 0.85;
  std::vector<std::size_t> hidden = {64};
  std::size_t out_dim = 32;

  void validate() const {
    if (!(margin > 0)) throw Error(ErrorCode::InvalidArgument, "margin must be positive");
    if (!(base_lr > 0)) throw Error(ErrorCode::InvalidArgument, "base_lr must be positive");
    if (!(lr_factor > 0)) throw Error(ErrorCode::InvalidArgument, "lr_factor must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw Error(ErrorCode::InvalidArgument, "momentum must be in [0,1)");
    if (batch_size < 4) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 4");
    if (max_epochs == 0) throw Error(ErrorCode::InvalidArgument, "max_epochs must be >= 1");
    if (patience == 0) throw Error(ErrorCode::InvalidArgument, "patience must be >= 1");
    if (!(split_fraction > 0 && split_fraction < 1)) {
      throw Error(ErrorCode::InvalidArgument, "split_fraction must be in (0,1)");
    }
    if (out_dim == 0) throw Error(ErrorCode::InvalidArgument, "out_dim must be positive");
    for (std::size_t i = 1; i < lr_boundaries.size(); ++i) {
      if (lr_boundaries[i] <= lr_boundaries[i - 1]) {
        throw Error(ErrorCode::InvalidArgument, "lr_boundaries must be strictly increasing");
      }
    }
  }
};

/// Piecewise-constant schedule: base_lr divided by lr_factor once for every
/// boundary <= epoch.
inline double lr_at(const TrainerConfig& config, std::size_t epoch) {
  const auto drops = std::count_if(config.lr_boundaries.begin(), config.lr_boundaries.end(),
                                   [epoch](std::size_t b) { return b <= epoch; });
  return config.base_lr / std::pow(config.lr_factor, static_cast<double>(drops));
}

/// v ← momentum·v + g;  θ ← θ − lr·v. With momentum 0 this is plain SGD.
inline void sgd_momentum_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity,
                              double lr, double momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size()) {
    throw Error(ErrorCode::ShapeMismatch, "params, grads and velocity must have equal length");
  }
  for (double g : grads) {
    if (!std::isfinite(g)) throw Error(ErrorCode::NonFinite, "gradient contains NaN or Inf");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grads[i];
    params[i] -= lr * velocity[i];
  }
  for (double p : params) {
    if (!std::isfinite(p)) throw Error(ErrorCode::NonFinite, "parameter update diverged");
  }
}

}  // namespace simsearch
