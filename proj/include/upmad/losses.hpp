#pragma once

#include "upmad/tensor.hpp"

namespace upmad {

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kBceClip = 1e-7;

/// Soft Dice loss 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), computed
/// per (batch, channel) over all voxels and averaged. Operands share a shape
/// [B, C, ...]; p must lie in [0, 1]. Gradient flows to p only.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& g, double eps = kDiceEps);

/// Mean binary cross-entropy with natural log; p clamped to [clip, 1-clip].
template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& g, double clip = kBceClip);

/// (dice + bce) / 2
template <typename T>
Tensor<T> combined_loss(const Tensor<T>& p, const Tensor<T>& g, double eps = kDiceEps, double clip = kBceClip);

}  // namespace upmad
