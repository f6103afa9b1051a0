#pragma once

#include <string>

#include "mslae/tensor.hpp"

namespace mslae {

enum class LossKind { ei, dice, bce };

const char* to_string(LossKind kind);
LossKind parse_loss_kind(const std::string& text);

struct LossConfig {
  LossKind kind = LossKind::ei;
  float alpha = 0.50f;  // strength of the prediction field
  float beta = 0.25f;   // Hardtanh half-width of the smoothed Heaviside
  double ei_epsilon = 1e-8;

  void validate() const;
  bool operator==(const LossConfig&) const = default;
};

/// 0.5 * (hardtanh(x / beta) + 1). Slope 1/(2 beta) strictly inside
/// (-beta, beta), zero elsewhere.
Tensor smoothed_heaviside(const Tensor& x, float beta);

/// Frequency-weighted energy of a real field d (N x C x H x W):
///   (1/N) * sum_{n,c} sum_{k != 0} |D(k)|^2 / (2 (|k| + eps))
/// with D the unitary 2-D DFT of each plane and |k| = sqrt(ky^2 + kx^2) over
/// signed integer frequency indices (ky in (-H/2, H/2]).
Tensor spectral_energy(const Tensor& field, double eps);

/// Elastic-interaction loss: field d = alpha * H_s(2p - 1) - g, scored by
/// spectral_energy. `target` must be binary.
Tensor ei_loss(const Tensor& prediction, const Tensor& target, const LossConfig& config);

/// 1 - (2 sum(pg) + 1) / (sum(p) + sum(g) + 1), pooled over the whole batch.
Tensor dice_loss(const Tensor& prediction, const Tensor& target);

/// Mean binary cross-entropy with p clamped to [1e-7, 1 - 1e-7].
Tensor bce_loss(const Tensor& prediction, const Tensor& target);

Tensor compute_loss(const Tensor& prediction, const Tensor& target, const LossConfig& config);

}  // namespace mslae
