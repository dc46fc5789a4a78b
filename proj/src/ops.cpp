#include "upmad/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "record.hpp"
#include "upmad/parallel.hpp"
#include "upmad/rng.hpp"

namespace upmad {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace {

thread_local std::uint64_t* g_flops = nullptr;

void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(s));
  }
}

// Extent of one output axis, or 0 if the (dilated) kernel does not fit.
std::size_t conv_out_extent(std::size_t in, std::size_t k, const ConvOptions& o) {
  const std::size_t span = o.dilation * (k - 1) + 1;
  if (in + 2 * o.padding < span) return 0;
  return (in + 2 * o.padding - span) / o.stride + 1;
}

// Range [lo, hi) of output positions whose tap lands inside [0, in).
// Tap position = out*stride - pad + offset.
std::pair<std::size_t, std::size_t> valid_range(std::size_t in, std::size_t out_n, std::size_t stride, std::ptrdiff_t shift) {
  // need 0 <= o*s + shift < in
  std::ptrdiff_t lo = 0;
  if (shift < 0) lo = (-shift + static_cast<std::ptrdiff_t>(stride) - 1) / static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t hi_incl = (static_cast<std::ptrdiff_t>(in) - 1 - shift);
  if (hi_incl < 0) return {0, 0};
  hi_incl /= static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t hi = std::min<std::ptrdiff_t>(hi_incl + 1, static_cast<std::ptrdiff_t>(out_n));
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

struct ConvGeom {
  std::size_t B, Cin, D, H, W, Cout, K, Do, Ho, Wo;
  ConvOptions opt;
  std::size_t in_spatial() const { return D * H * W; }
  std::size_t out_spatial() const { return Do * Ho * Wo; }
  std::size_t taps() const { return K * K * K; }
  std::ptrdiff_t shift(std::size_t k) const {
    return static_cast<std::ptrdiff_t>(k * opt.dilation) - static_cast<std::ptrdiff_t>(opt.padding);
  }
};

// Visits every (output row, input row) pair touched by tap (kd, kh, kw),
// calling f(out_row_offset, in_row_offset, ow_lo, ow_hi, iw_of_ow_lo).
template <typename F>
void for_each_tap_row(const ConvGeom& g, std::size_t kd, std::size_t kh, std::size_t kw, F&& f) {
  const auto [dlo, dhi] = valid_range(g.D, g.Do, g.opt.stride, g.shift(kd));
  const auto [hlo, hhi] = valid_range(g.H, g.Ho, g.opt.stride, g.shift(kh));
  const auto [wlo, whi] = valid_range(g.W, g.Wo, g.opt.stride, g.shift(kw));
  if (wlo >= whi) return;
  const std::size_t iw0 = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(wlo * g.opt.stride) + g.shift(kw));
  for (std::size_t od = dlo; od < dhi; ++od) {
    const std::size_t id = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(od * g.opt.stride) + g.shift(kd));
    for (std::size_t oh = hlo; oh < hhi; ++oh) {
      const std::size_t ih = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oh * g.opt.stride) + g.shift(kh));
      f((od * g.Ho + oh) * g.Wo, (id * g.H + ih) * g.W, wlo, whi, iw0);
    }
  }
}

}  // namespace

FlopScope::FlopScope() : prev_(g_flops) { g_flops = &count_; }
FlopScope::~FlopScope() {
  g_flops = prev_;
  if (prev_ != nullptr) *prev_ += count_;
}

void count_flops(std::uint64_t n) {
  if (g_flops != nullptr) *g_flops += n;
}

namespace {
thread_local KinkScope* g_kinks = nullptr;
}  // namespace

KinkScope::KinkScope() : prev_(g_kinks) { g_kinks = this; }
KinkScope::~KinkScope() { g_kinks = prev_; }

bool tracking_kinks() { return g_kinks != nullptr; }

void note_decisions(std::uint64_t digest) {
  if (g_kinks != nullptr) g_kinks->sig_ = mix64(g_kinks->sig_ ^ digest);
}

// ---------------------------------------------------------------------------
// conv3d

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvOptions opt) {
  require_rank(x.shape(), 5, "conv3d input");
  require_rank(weight.shape(), 5, "conv3d weight");
  if (opt.stride == 0 || opt.dilation == 0) throw ShapeError("conv3d: stride and dilation must be positive");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (ws[1] != xs[1]) {
    throw ShapeError("conv3d: weight expects " + std::to_string(ws[1]) + " input channels, input has " + std::to_string(xs[1]));
  }
  if (ws[2] != ws[3] || ws[2] != ws[4]) throw ShapeError("conv3d: kernel must be cubic, got " + shape_str(ws));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != ws[0])) {
    throw ShapeError("conv3d: bias shape " + shape_str(bias.shape()) + " does not match " + std::to_string(ws[0]) + " outputs");
  }
  ConvGeom g{xs[0], xs[1], xs[2], xs[3], xs[4], ws[0], ws[2], 0, 0, 0, opt};
  g.Do = conv_out_extent(g.D, g.K, opt);
  g.Ho = conv_out_extent(g.H, g.K, opt);
  g.Wo = conv_out_extent(g.W, g.K, opt);
  if (g.Do == 0 || g.Ho == 0 || g.Wo == 0) {
    throw ShapeError("conv3d: kernel " + std::to_string(g.K) + " with dilation " + std::to_string(opt.dilation) +
                     " larger than padded input " + shape_str(xs));
  }

  Tensor<T> out(Shape{g.B, g.Cout, g.Do, g.Ho, g.Wo});
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  T* op = out.mutable_data().data();
  const std::size_t S_in = g.in_spatial(), S_out = g.out_spatial(), taps = g.taps(), s = opt.stride;

  parallel_for(
      g.B * g.Cout,
      [&](std::size_t bc) {
        const std::size_t b = bc / g.Cout, co = bc % g.Cout;
        T* o = op + bc * S_out;
        if (bias.defined()) std::fill(o, o + S_out, bias[co]);
        for (std::size_t ci = 0; ci < g.Cin; ++ci) {
          const T* xin = xp + (b * g.Cin + ci) * S_in;
          const T* wk = wp + (co * g.Cin + ci) * taps;
          for (std::size_t kd = 0; kd < g.K; ++kd)
            for (std::size_t kh = 0; kh < g.K; ++kh)
              for (std::size_t kw = 0; kw < g.K; ++kw) {
                const T wv = wk[(kd * g.K + kh) * g.K + kw];
                if (wv == T(0)) continue;
                for_each_tap_row(g, kd, kh, kw, [&](std::size_t orow, std::size_t irow, std::size_t lo, std::size_t hi, std::size_t iw0) {
                  T* orp = o + orow;
                  const T* irp = xin + irow + iw0;
                  if (s == 1) {
                    for (std::size_t ow = lo; ow < hi; ++ow) orp[ow] += wv * irp[ow - lo];
                  } else {
                    for (std::size_t ow = lo; ow < hi; ++ow) orp[ow] += wv * irp[(ow - lo) * s];
                  }
                });
              }
        }
      },
      g.Cin * taps * S_out);
  count_flops(2ull * g.Cin * taps * g.B * g.Cout * S_out);

  detail::record("conv3d", {x, weight, bias}, out, [x, weight, bias, g](const Tensor<T>& outg) mutable {
    const T* go = outg.grad().data();
    const std::size_t S_in = g.in_spatial(), S_out = g.out_spatial(), taps = g.taps(), s = g.opt.stride;
    const T* xp = x.data().data();
    const T* wp = weight.data().data();
    if (x.requires_grad()) {
      T* gx = x.grad_buffer().data();
      parallel_for(
          g.B * g.Cin,
          [&](std::size_t bci) {
            const std::size_t b = bci / g.Cin, ci = bci % g.Cin;
            T* gxc = gx + bci * S_in;
            for (std::size_t co = 0; co < g.Cout; ++co) {
              const T* goc = go + (b * g.Cout + co) * S_out;
              const T* wk = wp + (co * g.Cin + ci) * taps;
              for (std::size_t kd = 0; kd < g.K; ++kd)
                for (std::size_t kh = 0; kh < g.K; ++kh)
                  for (std::size_t kw = 0; kw < g.K; ++kw) {
                    const T wv = wk[(kd * g.K + kh) * g.K + kw];
                    if (wv == T(0)) continue;
                    for_each_tap_row(g, kd, kh, kw, [&](std::size_t orow, std::size_t irow, std::size_t lo, std::size_t hi, std::size_t iw0) {
                      const T* gorp = goc + orow;
                      T* girp = gxc + irow + iw0;
                      for (std::size_t ow = lo; ow < hi; ++ow) girp[(ow - lo) * s] += wv * gorp[ow];
                    });
                  }
            }
          },
          g.Cout * taps * S_out);
    }
    if (weight.requires_grad()) {
      T* gw = weight.grad_buffer().data();
      parallel_for(
          g.Cout,
          [&](std::size_t co) {
            for (std::size_t ci = 0; ci < g.Cin; ++ci) {
              T* gwk = gw + (co * g.Cin + ci) * taps;
              for (std::size_t kd = 0; kd < g.K; ++kd)
                for (std::size_t kh = 0; kh < g.K; ++kh)
                  for (std::size_t kw = 0; kw < g.K; ++kw) {
                    T acc = 0;
                    for (std::size_t b = 0; b < g.B; ++b) {
                      const T* goc = go + (b * g.Cout + co) * S_out;
                      const T* xin = xp + (b * g.Cin + ci) * S_in;
                      for_each_tap_row(g, kd, kh, kw, [&](std::size_t orow, std::size_t irow, std::size_t lo, std::size_t hi, std::size_t iw0) {
                        const T* gorp = goc + orow;
                        const T* irp = xin + irow + iw0;
                        T row = 0;
                        for (std::size_t ow = lo; ow < hi; ++ow) row += gorp[ow] * irp[(ow - lo) * s];
                        acc += row;
                      });
                    }
                    gwk[(kd * g.K + kh) * g.K + kw] += acc;
                  }
            }
          },
          g.B * g.Cin * taps * S_out);
    }
    if (bias.defined() && bias.requires_grad()) {
      T* gb = bias.grad_buffer().data();
      for (std::size_t co = 0; co < g.Cout; ++co) {
        T acc = 0;
        for (std::size_t b = 0; b < g.B; ++b) {
          const T* goc = go + (b * g.Cout + co) * S_out;
          for (std::size_t i = 0; i < S_out; ++i) acc += goc[i];
        }
        gb[co] += acc;
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// conv_transpose3d

template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require_rank(x.shape(), 5, "conv_transpose3d input");
  require_rank(weight.shape(), 5, "conv_transpose3d weight");
  const auto& xs = x.shape();
  const auto& ws = weight.shape();
  if (ws[0] != xs[1]) throw ShapeError("conv_transpose3d: weight expects " + std::to_string(ws[0]) + " input channels");
  if (ws[2] != 2 || ws[3] != 2 || ws[4] != 2) throw ShapeError("conv_transpose3d: kernel must be 2x2x2");
  for (std::size_t a = 2; a < 5; ++a) {
    if (xs[a] == 0) throw ShapeError("conv_transpose3d: non-positive extent");
  }
  const std::size_t B = xs[0], Cin = xs[1], D = xs[2], H = xs[3], W = xs[4], Cout = ws[1];
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != Cout)) throw ShapeError("conv_transpose3d: bias shape mismatch");
  const std::size_t D2 = 2 * D, H2 = 2 * H, W2 = 2 * W, S_in = D * H * W, S_out = 8 * S_in;
  Tensor<T> out(Shape{B, Cout, D2, H2, W2});
  const T* xp = x.data().data();
  const T* wp = weight.data().data();
  T* op = out.mutable_data().data();

  parallel_for(
      B * Cout,
      [&](std::size_t bc) {
        const std::size_t b = bc / Cout, co = bc % Cout;
        T* o = op + bc * S_out;
        if (bias.defined()) std::fill(o, o + S_out, bias[co]);
        for (std::size_t ci = 0; ci < Cin; ++ci) {
          const T* xin = xp + (b * Cin + ci) * S_in;
          const T* wk = wp + (ci * Cout + co) * 8;
          for (std::size_t d = 0; d < D; ++d)
            for (std::size_t a = 0; a < 2; ++a)
              for (std::size_t h = 0; h < H; ++h)
                for (std::size_t c = 0; c < 2; ++c) {
                  const T* xr = xin + (d * H + h) * W;
                  T* orow = o + ((2 * d + a) * H2 + (2 * h + c)) * W2;
                  const T w0 = wk[(a * 2 + c) * 2 + 0], w1 = wk[(a * 2 + c) * 2 + 1];
                  for (std::size_t w = 0; w < W; ++w) {
                    orow[2 * w] += xr[w] * w0;
                    orow[2 * w + 1] += xr[w] * w1;
                  }
                }
        }
      },
      Cin * S_out);
  count_flops(2ull * B * Cin * Cout * S_out);

  detail::record("conv_transpose3d", {x, weight, bias}, out,
                 [x, weight, bias, B, Cin, Cout, D, H, W](const Tensor<T>& outg) mutable {
                   const std::size_t H2 = 2 * H, W2 = 2 * W, S_in = D * H * W, S_out = 8 * S_in;
                   const T* go = outg.grad().data();
                   const T* xp = x.data().data();
                   const T* wp = weight.data().data();
                   auto go_at = [&](std::size_t b, std::size_t co, std::size_t d, std::size_t h, std::size_t w) {
                     return go + (b * Cout + co) * S_out + (d * H2 + h) * W2 + w;
                   };
                   if (x.requires_grad()) {
                     T* gx = x.grad_buffer().data();
                     parallel_for(
                         B * Cin,
                         [&](std::size_t bci) {
                           const std::size_t b = bci / Cin, ci = bci % Cin;
                           T* gxc = gx + bci * S_in;
                           for (std::size_t co = 0; co < Cout; ++co) {
                             const T* wk = wp + (ci * Cout + co) * 8;
                             for (std::size_t d = 0; d < D; ++d)
                               for (std::size_t a = 0; a < 2; ++a)
                                 for (std::size_t h = 0; h < H; ++h)
                                   for (std::size_t c = 0; c < 2; ++c) {
                                     const T* gr = go_at(b, co, 2 * d + a, 2 * h + c, 0);
                                     T* gxr = gxc + (d * H + h) * W;
                                     const T w0 = wk[(a * 2 + c) * 2], w1 = wk[(a * 2 + c) * 2 + 1];
                                     for (std::size_t w = 0; w < W; ++w) gxr[w] += gr[2 * w] * w0 + gr[2 * w + 1] * w1;
                                   }
                           }
                         },
                         Cout * S_out);
                   }
                   if (weight.requires_grad()) {
                     T* gw = weight.grad_buffer().data();
                     parallel_for(
                         Cin,
                         [&](std::size_t ci) {
                           for (std::size_t co = 0; co < Cout; ++co) {
                             T acc[8] = {};
                             for (std::size_t b = 0; b < B; ++b) {
                               const T* xin = xp + (b * Cin + ci) * S_in;
                               for (std::size_t d = 0; d < D; ++d)
                                 for (std::size_t a = 0; a < 2; ++a)
                                   for (std::size_t h = 0; h < H; ++h)
                                     for (std::size_t c = 0; c < 2; ++c) {
                                       const T* gr = go_at(b, co, 2 * d + a, 2 * h + c, 0);
                                       const T* xr = xin + (d * H + h) * W;
                                       T s0 = 0, s1 = 0;
                                       for (std::size_t w = 0; w < W; ++w) {
                                         s0 += gr[2 * w] * xr[w];
                                         s1 += gr[2 * w + 1] * xr[w];
                                       }
                                       acc[(a * 2 + c) * 2] += s0;
                                       acc[(a * 2 + c) * 2 + 1] += s1;
                                     }
                             }
                             T* gwk = gw + (ci * Cout + co) * 8;
                             for (int t = 0; t < 8; ++t) gwk[t] += acc[t];
                           }
                         },
                         B * Cout * S_out);
                   }
                   if (bias.defined() && bias.requires_grad()) {
                     T* gb = bias.grad_buffer().data();
                     for (std::size_t co = 0; co < Cout; ++co) {
                       T acc = 0;
                       for (std::size_t b = 0; b < B; ++b) {
                         const T* goc = go + (b * Cout + co) * S_out;
                         for (std::size_t i = 0; i < S_out; ++i) acc += goc[i];
                       }
                       gb[co] += acc;
                     }
                   }
                 });
  return out;
}

// ---------------------------------------------------------------------------
// maxpool3d

template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x) {
  require_rank(x.shape(), 5, "maxpool3d");
  const auto& xs = x.shape();
  const std::size_t B = xs[0], C = xs[1], D = xs[2], H = xs[3], W = xs[4];
  if (D % 2 || H % 2 || W % 2) throw ShapeError("maxpool3d: odd spatial extent in " + shape_str(xs));
  const std::size_t Do = D / 2, Ho = H / 2, Wo = W / 2;
  Tensor<T> out(Shape{B, C, Do, Ho, Wo});
  std::vector<std::size_t> argmax(out.numel());
  const T* xp = x.data().data();
  T* op = out.mutable_data().data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const std::size_t base = bc * D * H * W;
    for (std::size_t d = 0; d < Do; ++d)
      for (std::size_t h = 0; h < Ho; ++h)
        for (std::size_t w = 0; w < Wo; ++w) {
          std::size_t best = base + ((2 * d) * H + 2 * h) * W + 2 * w;
          for (std::size_t a = 0; a < 2; ++a)
            for (std::size_t c = 0; c < 2; ++c)
              for (std::size_t e = 0; e < 2; ++e) {
                const std::size_t idx = base + ((2 * d + a) * H + (2 * h + c)) * W + (2 * w + e);
                if (xp[idx] > xp[best]) best = idx;
              }
          const std::size_t o = ((bc * Do + d) * Ho + h) * Wo + w;
          op[o] = xp[best];
          argmax[o] = best;
        }
  }
  count_flops(out.numel());
  if (tracking_kinks()) {
    std::uint64_t h = 0;
    for (std::size_t a : argmax) h = mix64(h ^ a);
    note_decisions(h);
  }
  detail::record("maxpool3d", {x}, out, [x, argmax = std::move(argmax)](const Tensor<T>& outg) mutable {
    T* gx = x.grad_buffer().data();
    const auto go = outg.grad();
    for (std::size_t o = 0; o < go.size(); ++o) gx[argmax[o]] += go[o];
  });
  return out;
}

// ---------------------------------------------------------------------------
// group_norm

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta, double eps) {
  if (x.rank() < 2) throw ShapeError("group_norm: input must have a channel axis");
  const std::size_t B = x.dim(0), C = x.dim(1);
  if (groups == 0 || C % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible by " + std::to_string(groups) + " groups");
  }
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("group_norm: gamma/beta must have C elements");
  const std::size_t S = x.numel() / (B * C), cpg = C / groups, M = cpg * S;
  Tensor<T> out(x.shape());
  std::vector<T> mean_v(B * groups), rstd_v(B * groups);
  const T* xp = x.data().data();
  T* op = out.mutable_data().data();
  for (std::size_t bg = 0; bg < B * groups; ++bg) {
    const T* xg = xp + bg * M;
    double s = 0;
    for (std::size_t i = 0; i < M; ++i) s += xg[i];
    const double mu = s / static_cast<double>(M);
    double v = 0;
    for (std::size_t i = 0; i < M; ++i) v += (xg[i] - mu) * (xg[i] - mu);
    v /= static_cast<double>(M);
    const double rstd = 1.0 / std::sqrt(v + eps);
    mean_v[bg] = static_cast<T>(mu);
    rstd_v[bg] = static_cast<T>(rstd);
    const std::size_t g = bg % groups;
    for (std::size_t cc = 0; cc < cpg; ++cc) {
      const std::size_t c = g * cpg + cc;
      const T ga = gamma[c], be = beta[c];
      const T* xc = xg + cc * S;
      T* oc = op + bg * M + cc * S;
      for (std::size_t i = 0; i < S; ++i) oc[i] = static_cast<T>((xc[i] - mu) * rstd) * ga + be;
    }
  }
  count_flops(x.numel());
  detail::record("group_norm", {x, gamma, beta}, out,
                 [x, gamma, beta, B, C, groups, S, cpg, M, mean_v = std::move(mean_v), rstd_v = std::move(rstd_v)](
                     const Tensor<T>& outg) mutable {
                   const T* go = outg.grad().data();
                   const T* xp = x.data().data();
                   T* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
                   T* gg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
                   T* gb = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
                   for (std::size_t bg = 0; bg < B * groups; ++bg) {
                     const std::size_t g = bg % groups;
                     const T mu = mean_v[bg], rstd = rstd_v[bg];
                     double s1 = 0, s2 = 0;
                     for (std::size_t cc = 0; cc < cpg; ++cc) {
                       const std::size_t c = g * cpg + cc;
                       const std::size_t off = bg * M + cc * S;
                       double dgc = 0, dbc = 0;
                       for (std::size_t i = 0; i < S; ++i) {
                         const T xhat = (xp[off + i] - mu) * rstd;
                         const T dxhat = go[off + i] * gamma[c];
                         s1 += dxhat;
                         s2 += dxhat * xhat;
                         dgc += go[off + i] * xhat;
                         dbc += go[off + i];
                       }
                       if (gg) gg[c] += static_cast<T>(dgc);
                       if (gb) gb[c] += static_cast<T>(dbc);
                     }
                     if (!gx) continue;
                     const T m1 = static_cast<T>(s1 / static_cast<double>(M));
                     const T m2 = static_cast<T>(s2 / static_cast<double>(M));
                     for (std::size_t cc = 0; cc < cpg; ++cc) {
                       const std::size_t c = g * cpg + cc;
                       const std::size_t off = bg * M + cc * S;
                       for (std::size_t i = 0; i < S; ++i) {
                         const T xhat = (xp[off + i] - mu) * rstd;
                         gx[off + i] += rstd * (go[off + i] * gamma[c] - m1 - xhat * m2);
                       }
                     }
                   }
                   (void)C;
                 });
  return out;
}

// ---------------------------------------------------------------------------
// dropout

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, DropoutMode mode, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
  if (mode == DropoutMode::Off || rate == 0.0) return x;
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  std::vector<T> mask(x.numel());
  Tensor<T> out(x.shape());
  const T* xp = x.data().data();
  T* op = out.mutable_data().data();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    mask[i] = counter_uniform(seed, i) >= rate ? keep_scale : T(0);
    op[i] = xp[i] * mask[i];
  }
  count_flops(x.numel());
  detail::record("dropout", {x}, out, [x, mask = std::move(mask)](const Tensor<T>& outg) mutable {
    T* gx = x.grad_buffer().data();
    const auto go = outg.grad();
    for (std::size_t i = 0; i < mask.size(); ++i) gx[i] += go[i] * mask[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// activations

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto xp = x.data();
  auto op = out.mutable_data();
  for (std::size_t i = 0; i < xp.size(); ++i) op[i] = xp[i] > T(0) ? xp[i] : T(0);
  count_flops(x.numel());
  if (tracking_kinks()) {
    std::uint64_t h = 0;
    for (std::size_t i = 0; i < xp.size(); ++i) h = mix64(h ^ (i << 1 | (xp[i] > T(0))));
    note_decisions(h);
  }
  detail::record("relu", {x}, out, [x](const Tensor<T>& outg) mutable {
    T* gx = x.grad_buffer().data();
    const auto xp = x.data();
    const auto go = outg.grad();
    for (std::size_t i = 0; i < go.size(); ++i) {
      if (xp[i] > T(0)) gx[i] += go[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto xp = x.data();
  auto op = out.mutable_data();
  for (std::size_t i = 0; i < xp.size(); ++i) {
    const T v = xp[i];
    if (v >= T(0)) {
      op[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      op[i] = e / (T(1) + e);
    }
  }
  count_flops(x.numel());
  detail::record("sigmoid", {x}, out, [x, out_values = out](const Tensor<T>& outg) mutable {
    T* gx = x.grad_buffer().data();
    const auto y = out_values.data();
    const auto go = outg.grad();
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * y[i] * (T(1) - y[i]);
  });
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  const std::size_t n = x.dim(axis);
  for (std::size_t a = 0; a < axis; ++a) outer *= x.dim(a);
  for (std::size_t a = axis + 1; a < x.rank(); ++a) inner *= x.dim(a);
  Tensor<T> out(x.shape());
  const T* xp = x.data().data();
  T* op = out.mutable_data().data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, xp[base + k * inner]);
      T s = 0;
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(xp[base + k * inner] - mx);
        op[base + k * inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < n; ++k) op[base + k * inner] /= s;
    }
  count_flops(x.numel());
  detail::record("softmax", {x}, out, [x, y = out, outer, inner, n](const Tensor<T>& outg) mutable {
    T* gx = x.grad_buffer().data();
    const T* yp = y.data().data();
    const T* go = outg.grad().data();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = 0;
        for (std::size_t k = 0; k < n; ++k) dot += go[base + k * inner] * yp[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += yp[i] * (go[i] - dot);
        }
      }
  });
  return out;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, std::size_t axis) {
  switch (kind) {
    case Activation::Relu:
      return relu(x);
    case Activation::Sigmoid:
      return sigmoid(x);
    case Activation::Softmax:
      return softmax(x, axis);
  }
  throw ConfigError("unknown activation");
}

// ---------------------------------------------------------------------------
// contract

namespace {

// Row-major transpose of a rows x cols block.
template <typename T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[M,N] += op(X)·op(Y), with X stored as [M,K] or [K,M] (tx) and Y as [K,N] or [N,K] (ty).
template <typename T>
void gemm_acc(const T* X, bool tx, const T* Y, bool ty, std::size_t M, std::size_t N, std::size_t K, T* C) {
  std::vector<T> xbuf, ybuf;
  if (tx) {
    xbuf.resize(M * K);
    transpose_into(X, K, M, xbuf.data());
    X = xbuf.data();
  }
  if (ty) {
    // C[i,j] = sum_k X[i,k] Y[j,k]: contiguous dot products.
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        T acc = 0;
        const T* xr = X + i * K;
        const T* yr = Y + j * K;
        for (std::size_t k = 0; k < K; ++k) acc += xr[k] * yr[k];
        C[i * N + j] += acc;
      }
    return;
  }
  for (std::size_t i = 0; i < M; ++i) {
    T* cr = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T xv = X[i * K + k];
      const T* yr = Y + k * N;
      for (std::size_t j = 0; j < N; ++j) cr[j] += xv * yr[j];
    }
  }
}

struct MatDims {
  std::size_t batch, rows, cols;
};

MatDims as_batched(const Shape& s, const char* which) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw ShapeError(std::string("contract: operand ") + which + " must be rank 2 or 3, got " + shape_str(s));
}

}  // namespace

template <typename T>
Tensor<T> contract(const Tensor<T>& a, const Tensor<T>& b, ContractSpec spec) {
  const MatDims da = as_batched(a.shape(), "a"), db = as_batched(b.shape(), "b");
  if (da.batch != db.batch) throw ShapeError("contract: batch extents differ");
  const std::size_t M = spec.transpose_a ? da.cols : da.rows;
  const std::size_t K = spec.transpose_a ? da.rows : da.cols;
  const std::size_t Kb = spec.transpose_b ? db.cols : db.rows;
  const std::size_t N = spec.transpose_b ? db.rows : db.cols;
  if (K != Kb) {
    throw ShapeError("contract: contracted extents differ (" + std::to_string(K) + " vs " + std::to_string(Kb) + ")");
  }
  const std::size_t batch = da.batch;
  Tensor<T> out(a.rank() == 3 ? Shape{batch, M, N} : Shape{M, N});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.mutable_data().data();
  for (std::size_t t = 0; t < batch; ++t) {
    gemm_acc(ap + t * M * K, spec.transpose_a, bp + t * K * N, spec.transpose_b, M, N, K, op + t * M * N);
  }
  count_flops(2ull * batch * M * N * K);
  detail::record("contract", {a, b}, out, [a, b, spec, batch, M, N, K](const Tensor<T>& outg) mutable {
    const T* go = outg.grad().data();
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    if (a.requires_grad()) {
      T* ga = a.grad_buffer().data();
      for (std::size_t t = 0; t < batch; ++t) {
        const T* g = go + t * M * N;
        const T* bb = bp + t * K * N;
        T* gat = ga + t * M * K;
        if (!spec.transpose_a) {
          gemm_acc(g, false, bb, !spec.transpose_b, M, K, N, gat);  // dA = dC·op(B)^T
        } else {
          gemm_acc(bb, spec.transpose_b, g, true, K, M, N, gat);  // dA = op(B)·dC^T
        }
      }
    }
    if (b.requires_grad()) {
      T* gb = b.grad_buffer().data();
      for (std::size_t t = 0; t < batch; ++t) {
        const T* g = go + t * M * N;
        const T* aa = ap + t * M * K;
        T* gbt = gb + t * K * N;
        if (!spec.transpose_b) {
          gemm_acc(aa, !spec.transpose_a, g, false, K, N, M, gbt);  // dB = op(A)^T·dC
        } else {
          gemm_acc(g, true, aa, spec.transpose_a, N, K, M, gbt);  // dB = dC^T·op(A)
        }
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// pooling / reductions / shape ops

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 5, "global_avg_pool");
  if (x.numel() == 0) throw ShapeError("global_avg_pool: empty tensor");
  const std::size_t B = x.dim(0), C = x.dim(1), S = x.numel() / (B * C);
  Tensor<T> out(Shape{B, C, 1, 1, 1});
  const T* xp = x.data().data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    double s = 0;
    for (std::size_t i = 0; i < S; ++i) s += xp[bc * S + i];
    out.mutable_data()[bc] = static_cast<T>(s / static_cast<double>(S));
  }
  count_flops(x.numel());
  detail::record("global_avg_pool", {x}, out, [x, S](const Tensor<T>& outg) mutable {
    T* gx = x.grad_buffer().data();
    const auto go = outg.grad();
    const T inv = T(1) / static_cast<T>(S);
    for (std::size_t bc = 0; bc < go.size(); ++bc) {
      const T g = go[bc] * inv;
      for (std::size_t i = 0; i < S; ++i) gx[bc * S + i] += g;
    }
  });
  return out;
}

namespace {

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // 0 on broadcast axes
};

Broadcast broadcast_plan(const Shape& a, const Shape& b) {
  if (a.size() != b.size()) throw ShapeError("elementwise: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  Broadcast p;
  const std::size_t r = a.size();
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError("elementwise: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    p.out[i] = std::max(a[i], b[i]);
  }
  p.stride_a.assign(r, 0);
  p.stride_b.assign(r, 0);
  std::size_t sa = 1, sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    p.stride_a[i] = a[i] == 1 ? 0 : sa;
    p.stride_b[i] = b[i] == 1 ? 0 : sb;
    sa *= a[i];
    sb *= b[i];
  }
  return p;
}

// Calls f(out_row_offset, a_offset, b_offset) for each output row (last axis).
template <typename F>
void for_each_row(const Broadcast& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t inner = p.out[r - 1];
  const std::size_t rows = shape_numel(p.out) / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t row = 0; row < rows; ++row) {
    f(row * inner, oa, ob);
    for (std::size_t ax = r - 1; ax-- > 0;) {
      ++idx[ax];
      oa += p.stride_a[ax];
      ob += p.stride_b[ax];
      if (idx[ax] < p.out[ax]) break;
      oa -= p.stride_a[ax] * idx[ax];
      ob -= p.stride_b[ax] * idx[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Elementwise kind) {
  const Broadcast p = broadcast_plan(a.shape(), b.shape());
  Tensor<T> out(p.out);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* op = out.mutable_data().data();
  const std::size_t inner = p.out.back(), sa = p.stride_a.back(), sb = p.stride_b.back();
  const bool is_mul = kind == Elementwise::Mul;
  for_each_row(p, [&](std::size_t o, std::size_t oa, std::size_t ob) {
    for (std::size_t j = 0; j < inner; ++j) {
      const T x = ap[oa + j * sa], y = bp[ob + j * sb];
      op[o + j] = is_mul ? x * y : x + y;
    }
  });
  count_flops(out.numel());
  detail::record(is_mul ? "mul" : "add", {a, b}, out, [a, b, p, is_mul](const Tensor<T>& outg) mutable {
    const T* go = outg.grad().data();
    const T* ap = a.data().data();
    const T* bp = b.data().data();
    const std::size_t inner = p.out.back(), sa = p.stride_a.back(), sb = p.stride_b.back();
    T* ga = a.requires_grad() ? a.grad_buffer().data() : nullptr;
    T* gb = b.requires_grad() ? b.grad_buffer().data() : nullptr;
    for_each_row(p, [&](std::size_t o, std::size_t oa, std::size_t ob) {
      for (std::size_t j = 0; j < inner; ++j) {
        const T g = go[o + j];
        if (ga) ga[oa + j * sa] += is_mul ? g * bp[ob + j * sb] : g;
        if (gb) gb[ob + j * sb] += is_mul ? g * ap[oa + j * sa] : g;
      }
    });
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  Tensor<T> out(x.shape());
  const auto xp = x.data();
  auto op = out.mutable_data();
  const T f = static_cast<T>(factor);
  for (std::size_t i = 0; i < xp.size(); ++i) op[i] = xp[i] * f;
  count_flops(x.numel());
  detail::record("scale", {x}, out, [x, f](const Tensor<T>& outg) mutable {
    T* gx = x.grad_buffer().data();
    const auto go = outg.grad();
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * f;
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(s));
  count_flops(x.numel());
  detail::record("sum", {x}, out, [x](const Tensor<T>& outg) mutable {
    const T g = outg.grad()[0];
    for (T& v : x.grad_buffer()) v += g;
  });
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " cannot become " + shape_str(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
  detail::record("reshape", {x}, out, [x](const Tensor<T>& outg) mutable {
    auto gx = x.grad_buffer();
    const auto go = outg.grad();
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || a.rank() != b.rank()) throw ShapeError("concat_channels: rank mismatch");
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != 1 && a.dim(i) != b.dim(i)) {
      throw ShapeError("concat_channels: " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ off the channel axis");
    }
  }
  const std::size_t B = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), S = a.numel() / (B * Ca);
  Shape s = a.shape();
  s[1] = Ca + Cb;
  Tensor<T> out(s);
  T* op = out.mutable_data().data();
  for (std::size_t n = 0; n < B; ++n) {
    std::copy_n(a.data().data() + n * Ca * S, Ca * S, op + n * (Ca + Cb) * S);
    std::copy_n(b.data().data() + n * Cb * S, Cb * S, op + n * (Ca + Cb) * S + Ca * S);
  }
  detail::record("concat_channels", {a, b}, out, [a, b, B, Ca, Cb, S](const Tensor<T>& outg) mutable {
    const T* go = outg.grad().data();
    if (a.requires_grad()) {
      T* ga = a.grad_buffer().data();
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < Ca * S; ++i) ga[n * Ca * S + i] += go[n * (Ca + Cb) * S + i];
    }
    if (b.requires_grad()) {
      T* gb = b.grad_buffer().data();
      for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < Cb * S; ++i) gb[n * Cb * S + i] += go[n * (Ca + Cb) * S + Ca * S + i];
    }
  });
  return out;
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x) {
  std::vector<To> v(x.data().begin(), x.data().end());
  Tensor<To> out(x.shape(), std::move(v));
  // A cast crosses tapes of different precision, so it is only ever a leaf.
  return out;
}

#define UPMAD_INSTANTIATE(T)                                                                             \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, ConvOptions);         \
  template Tensor<T> conv_transpose3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> maxpool3d(const Tensor<T>&);                                                       \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> dropout(const Tensor<T>&, double, DropoutMode, std::uint64_t);                     \
  template Tensor<T> relu(const Tensor<T>&);                                                            \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                         \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                            \
  template Tensor<T> activation(const Tensor<T>&, Activation, std::size_t);                             \
  template Tensor<T> contract(const Tensor<T>&, const Tensor<T>&, ContractSpec);                        \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                                 \
  template Tensor<T> elementwise(const Tensor<T>&, const Tensor<T>&, Elementwise);                      \
  template Tensor<T> scale(const Tensor<T>&, double);                                                   \
  template Tensor<T> sum(const Tensor<T>&);                                                             \
  template Tensor<T> mean(const Tensor<T>&);                                                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                  \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);

UPMAD_INSTANTIATE(float)
UPMAD_INSTANTIATE(double)
#undef UPMAD_INSTANTIATE

template Tensor<double> cast(const Tensor<float>&);
template Tensor<float> cast(const Tensor<double>&);
template Tensor<float> cast(const Tensor<float>&);
template Tensor<double> cast(const Tensor<double>&);

}  // namespace upmad
