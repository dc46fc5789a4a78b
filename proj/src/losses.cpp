#include "upmad/losses.hpp"

#include <algorithm>
#include <cmath>

#include "record.hpp"
#include "upmad/ops.hpp"
#include "upmad/rng.hpp"

namespace upmad {

namespace {

template <typename T>
void require_same(const Tensor<T>& p, const Tensor<T>& g, const char* op) {
  if (p.shape() != g.shape()) {
    throw ShapeError(std::string(op) + ": prediction " + shape_str(p.shape()) + " vs target " + shape_str(g.shape()));
  }
}

// Number of (batch, channel) slices and the voxel count of each.
template <typename T>
std::pair<std::size_t, std::size_t> slices_of(const Tensor<T>& p) {
  if (p.rank() < 2) return {1, p.numel()};
  const std::size_t bc = p.dim(0) * p.dim(1);
  return {bc, p.numel() / bc};
}

}  // namespace

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& g, double eps) {
  require_same(p, g, "dice_loss");
  for (T v : p.data()) {
    if (!(v >= T(0) && v <= T(1))) throw Error("dice_loss: prediction outside [0,1]");
  }
  const auto [slices, n] = slices_of(p);
  std::vector<double> inter(slices), denom(slices);
  const T* pp = p.data().data();
  const T* gp = g.data().data();
  long double total = 0;
  for (std::size_t s = 0; s < slices; ++s) {
    long double i_sum = 0, p_sum = 0, g_sum = 0;
    for (std::size_t i = s * n; i < (s + 1) * n; ++i) {
      i_sum += static_cast<long double>(pp[i]) * gp[i];
      p_sum += pp[i];
      g_sum += gp[i];
    }
    inter[s] = static_cast<double>(i_sum);
    denom[s] = static_cast<double>(p_sum + g_sum + eps);
    total += 1.0L - (2.0L * i_sum + eps) / (p_sum + g_sum + eps);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<long double>(slices)));
  count_flops(3ull * p.numel());
  detail::record("dice_loss", {p, g}, out,
                 [p, g, eps, slices, n, inter = std::move(inter), denom = std::move(denom)](const Tensor<T>& outg) mutable {
                   if (!p.requires_grad()) return;
                   const double up = static_cast<double>(outg.grad()[0]) / static_cast<double>(slices);
                   T* gp_out = p.grad_buffer().data();
                   const T* gv = g.data().data();
                   for (std::size_t s = 0; s < slices; ++s) {
                     const double num = 2.0 * inter[s] + eps, den = denom[s];
                     for (std::size_t i = s * n; i < (s + 1) * n; ++i) {
                       // d/dp_i of -(num/den)
                       const double d = -(2.0 * gv[i] * den - num) / (den * den);
                       gp_out[i] += static_cast<T>(up * d);
                     }
                   }
                 });
  return out;
}

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& g, double clip) {
  require_same(p, g, "bce_loss");
  const std::size_t n = p.numel();
  const T* pp = p.data().data();
  const T* gp = g.data().data();
  const double lo = clip, hi = 1.0 - clip;
  long double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pc = std::clamp(static_cast<double>(pp[i]), lo, hi);
    total += static_cast<long double>(gp[i]) * std::log(pc) + (1.0L - gp[i]) * std::log1p(-pc);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(-total / static_cast<long double>(n)));
  count_flops(3ull * n);
  if (tracking_kinks()) {
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < n; ++i) h = mix64(h ^ (i << 2 | (pp[i] < lo) << 1 | (pp[i] > hi)));
    note_decisions(h);
  }
  detail::record("bce_loss", {p, g}, out, [p, g, lo, hi, n](const Tensor<T>& outg) mutable {
    if (!p.requires_grad()) return;
    const double up = static_cast<double>(outg.grad()[0]) / static_cast<double>(n);
    T* gp_out = p.grad_buffer().data();
    const T* pv = p.data().data();
    const T* gv = g.data().data();
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pv[i];
      if (x < lo || x > hi) continue;  // clamped: flat
      gp_out[i] += static_cast<T>(-up * (gv[i] / x - (1.0 - gv[i]) / (1.0 - x)));
    }
  });
  return out;
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& p, const Tensor<T>& g, double eps, double clip) {
  return scale(add(dice_loss(p, g, eps), bce_loss(p, g, clip)), 0.5);
}

template Tensor<float> dice_loss(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> dice_loss(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> bce_loss(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> bce_loss(const Tensor<double>&, const Tensor<double>&, double);
template Tensor<float> combined_loss(const Tensor<float>&, const Tensor<float>&, double, double);
template Tensor<double> combined_loss(const Tensor<double>&, const Tensor<double>&, double, double);

}  // namespace upmad
