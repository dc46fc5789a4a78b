#include "upmad/net.hpp"

#include <cmath>
#include <random>

namespace upmad {

void NetworkConfig::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (out_channels < 1) throw ConfigError("out_channels must be >= 1");
  if (gn_groups < 1) throw ConfigError("gn_groups must be >= 1");
  if (ca_reduction < 1) throw ConfigError("ca_reduction must be >= 1");
  for (std::size_t w : stage_widths) {
    if (w == 0 || w % gn_groups != 0) {
      throw ConfigError("stage width " + std::to_string(w) + " not divisible by gn_groups " + std::to_string(gn_groups));
    }
    if (w % ca_reduction != 0) {
      throw ConfigError("stage width " + std::to_string(w) + " not divisible by ca_reduction " +
                        std::to_string(ca_reduction));
    }
  }
  if (!(dropout_rate >= 0 && dropout_rate < 1)) throw ConfigError("dropout_rate must lie in [0,1)");
  if (msff_kernel < 1 || msff_kernel % 2 == 0) throw ConfigError("msff_kernel must be odd");
  if (msff_dilation < 1) throw ConfigError("msff_dilation must be >= 1");
  if (!(gn_eps > 0)) throw ConfigError("gn_eps must be > 0");
}

template <typename T>
Tensor<T> ParamRegistry<T>::add(std::string name, ParamKind kind, Shape shape, double bound, T fill) {
  Tensor<T> t(std::move(shape), fill);
  if (bound > 0) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (T& v : t.mutable_data()) v = static_cast<T>(u(rng_));
  }
  t.set_requires_grad(true);
  params_.push_back({std::move(name), kind, t});
  return t;
}

template <typename T>
ConvParams<T> make_conv(ParamRegistry<T>& reg, const std::string& name, std::size_t cin, std::size_t cout,
                        std::size_t k, std::size_t dilation) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k * k));
  ConvParams<T> p;
  p.weight = reg.add(name + ".weight", ParamKind::ConvWeight, {cout, cin, k, k, k}, bound);
  p.bias = reg.add(name + ".bias", ParamKind::Bias, {cout}, bound);
  p.dilation = dilation;
  return p;
}

template <typename T>
CaParams<T> make_ca(ParamRegistry<T>& reg, const std::string& name, std::size_t channels, std::size_t reduction) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError("channel attention: width " + std::to_string(channels) + " not divisible by reduction " +
                      std::to_string(reduction));
  }
  const std::size_t mid = channels / reduction;
  return {make_conv(reg, name + ".reduce", channels, mid, 1), make_conv(reg, name + ".expand", mid, channels, 1)};
}

template <typename T>
FcmParams<T> make_fcm(ParamRegistry<T>& reg, const std::string& name, std::size_t channels, const NetworkConfig& cfg,
                      bool with_ca) {
  FcmParams<T> p;
  p.gamma = reg.add(name + ".gn.gamma", ParamKind::NormScale, {channels}, 0, T(1));
  p.beta = reg.add(name + ".gn.beta", ParamKind::NormShift, {channels}, 0, T(0));
  if (with_ca) p.ca = make_ca(reg, name + ".ca", channels, cfg.ca_reduction);
  p.groups = cfg.gn_groups;
  p.rate = cfg.dropout_rate;
  p.eps = cfg.gn_eps;
  return p;
}

template <typename T>
MsffParams<T> make_msff(ParamRegistry<T>& reg, const std::string& name, std::size_t cin, std::size_t cout,
                        const NetworkConfig& cfg) {
  MsffParams<T> p;
  p.point = make_conv(reg, name + ".point", cin, cout, 1);
  p.fcm_point = make_fcm(reg, name + ".point.fcm", cout, cfg, true);
  p.local = make_conv(reg, name + ".local", cin, cout, 3);
  p.fcm_local = make_fcm(reg, name + ".local.fcm", cout, cfg, true);
  p.dilated = make_conv(reg, name + ".dilated", cin, cout, cfg.msff_kernel, cfg.msff_dilation);
  p.fcm_dilated = make_fcm(reg, name + ".dilated.fcm", cout, cfg, true);
  p.fuse = make_conv(reg, name + ".fuse", cout, cout, 1);
  return p;
}

template <typename T>
PlainParams<T> make_plain(ParamRegistry<T>& reg, const std::string& name, std::size_t cin, std::size_t cout,
                          const NetworkConfig& cfg) {
  PlainParams<T> p;
  p.conv = make_conv(reg, name + ".conv", cin, cout, 3);
  p.fcm = make_fcm(reg, name + ".fcm", cout, cfg, false);
  return p;
}

template <typename T>
AamParams<T> make_aam(ParamRegistry<T>& reg, const std::string& name, std::size_t channels, const NetworkConfig& cfg) {
  AamParams<T> p;
  p.key = make_conv(reg, name + ".key", channels, channels, 1);
  p.query = make_conv(reg, name + ".query", channels, channels, 1);
  p.value = make_conv(reg, name + ".value", channels, channels, 1);
  p.gamma = reg.add(name + ".gamma", ParamKind::AttentionScale, {1, channels, 1, 1, 1}, 0, T(0));
  p.mode = cfg.aam_mode;
  p.voxel_cap = cfg.spatial_attention_voxel_cap;
  p.rate = cfg.dropout_rate;
  return p;
}

template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const CaParams<T>& p) {
  if (x.rank() != 5 || p.reduce.weight.dim(1) != x.dim(1)) {
    throw ShapeError("channel attention expects " + std::to_string(p.reduce.weight.dim(1)) + " channels, got " +
                     shape_str(x.shape()));
  }
  const Tensor<T> s = sigmoid(conv(relu(conv(global_avg_pool(x), p.reduce)), p.expand));
  return mul(x, s);
}

template <typename T>
Tensor<T> fcm(const Tensor<T>& x, const FcmParams<T>& p, ForwardContext& ctx) {
  Tensor<T> y = group_norm(relu(x), p.groups, p.gamma, p.beta, p.eps);
  y = dropout(y, p.rate, ctx.mode, ctx.next_seed());
  if (p.ca) y = channel_attention(y, *p.ca);
  return y;
}

template <typename T>
Tensor<T> msff_forward(const Tensor<T>& x, const MsffParams<T>& p, ForwardContext& ctx) {
  const Tensor<T> b1 = fcm(conv(x, p.point), p.fcm_point, ctx);
  const Tensor<T> b2 = fcm(conv(x, p.local), p.fcm_local, ctx);
  const Tensor<T> b3 = fcm(conv(x, p.dilated), p.fcm_dilated, ctx);
  if (b1.shape() != b2.shape() || b2.shape() != b3.shape()) {
    throw ShapeError("msff: branch outputs differ: " + shape_str(b1.shape()) + ", " + shape_str(b2.shape()) + ", " +
                     shape_str(b3.shape()));
  }
  return add(b1, conv(add(b2, b3), p.fuse));
}

template <typename T>
Tensor<T> plain_block_forward(const Tensor<T>& x, const PlainParams<T>& p, ForwardContext& ctx) {
  return fcm(conv(x, p.conv), p.fcm, ctx);
}

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p, ForwardContext& ctx) {
  return std::visit(
      [&](const auto& b) -> Tensor<T> {
        if constexpr (std::is_same_v<std::decay_t<decltype(b)>, MsffParams<T>>) {
          return msff_forward(x, b, ctx);
        } else {
          return plain_block_forward(x, b, ctx);
        }
      },
      p);
}

template <typename T>
Tensor<T> aam_forward(const Tensor<T>& x, const AamParams<T>& p, ForwardContext& ctx) {
  if (x.rank() != 5) throw ShapeError("aam expects rank-5 input, got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), C = x.dim(1), N = x.dim(2) * x.dim(3) * x.dim(4);
  if (p.key.weight.dim(0) != C) throw ShapeError("aam width " + std::to_string(p.key.weight.dim(0)) + " vs input " + shape_str(x.shape()));
  if (p.mode == AamMode::Spatial && N > p.voxel_cap) {
    throw ConfigError("spatial attention over " + std::to_string(N) + " voxels exceeds spatial_attention_voxel_cap=" +
                      std::to_string(p.voxel_cap));
  }
  auto branch = [&](const ConvParams<T>& c) {
    return reshape(dropout(conv(x, c), p.rate, ctx.mode, ctx.next_seed()), {B, C, N});
  };
  const Tensor<T> k = branch(p.key), q = branch(p.query), v = branch(p.value);
  Tensor<T> m;
  if (p.mode == AamMode::Channel) {
    const Tensor<T> a = softmax(scale(contract(k, q, {false, true}), 1.0 / std::sqrt(static_cast<double>(N))), 2);
    m = contract(a, v);
  } else {
    const Tensor<T> a = softmax(scale(contract(k, q, {true, false}), 1.0 / std::sqrt(static_cast<double>(C))), 2);
    m = contract(v, a, {false, true});
  }
  const Tensor<T> awa = mul(x, p.gamma);
  return add(x, mul(awa, reshape(m, x.shape())));
}

template <typename T>
Tensor<T> skip_recalibrate(const Tensor<T>& enc_feat, const ConvParams<T>& p) {
  if (enc_feat.rank() != 5 || enc_feat.dim(1) != p.weight.dim(1)) {
    throw ShapeError("skip recalibration expects " + std::to_string(p.weight.dim(1)) + " channels, got " +
                     shape_str(enc_feat.shape()));
  }
  return conv(enc_feat, p);
}

// ---------------------------------------------------------------------------

std::string LayerInfo::str() const {
  return name + " " + kind + " " + std::to_string(in_channels) + "->" + std::to_string(out_channels);
}

std::vector<LayerInfo> layer_manifest(const NetworkConfig& cfg) {
  cfg.validate();
  const auto& w = cfg.stage_widths;
  const std::string block = cfg.use_msff ? "msff" : "conv3";
  std::vector<LayerInfo> out;
  std::size_t cin = cfg.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    out.push_back({"enc" + std::to_string(i), block, cin, w[i]});
    if (i < 3) out.push_back({"pool" + std::to_string(i), "pool", w[i], w[i]});
    cin = w[i];
  }
  for (std::size_t i = 3; i >= 1; --i) {
    const std::string s = "dec" + std::to_string(i - 1);
    const std::size_t lo = w[i - 1];
    out.push_back({s + ".up", "up", w[i], lo});
    out.push_back({s + ".skip", "skip", lo, lo});
    if (cfg.use_aam && !cfg.aam_after_merge) out.push_back({s + ".aam", "aam", lo, lo});
    out.push_back({s + ".concat", "concat", 2 * lo, 2 * lo});
    if (cfg.use_aam && cfg.aam_after_merge) out.push_back({s + ".aam", "aam", 2 * lo, 2 * lo});
    out.push_back({s + ".block", block, 2 * lo, lo});
  }
  out.push_back({"head", "head", w[0], cfg.out_channels});
  return out;
}

namespace {

struct Counter {
  std::uint64_t params = 0, flops = 0;

  void conv(std::uint64_t cin, std::uint64_t cout, std::uint64_t k, std::uint64_t s_out) {
    params += cout * cin * k * k * k + cout;
    flops += 2 * cin * cout * k * k * k * s_out;
  }
  void fcm(std::uint64_t c, std::uint64_t s, bool with_ca, std::uint64_t reduction) {
    params += 2 * c;
    flops += 2 * c * s;  // relu, group norm
    if (!with_ca) return;
    const std::uint64_t mid = c / reduction;
    flops += c * s;  // pooling
    conv(c, mid, 1, 1);
    flops += mid;  // relu
    conv(mid, c, 1, 1);
    flops += c + c * s;  // sigmoid, rescale
  }
  void block(const NetworkConfig& cfg, std::uint64_t cin, std::uint64_t cout, std::uint64_t s) {
    if (!cfg.use_msff) {
      conv(cin, cout, 3, s);
      fcm(cout, s, false, cfg.ca_reduction);
      return;
    }
    conv(cin, cout, 1, s);
    fcm(cout, s, true, cfg.ca_reduction);
    conv(cin, cout, 3, s);
    fcm(cout, s, true, cfg.ca_reduction);
    conv(cin, cout, cfg.msff_kernel, s);
    fcm(cout, s, true, cfg.ca_reduction);
    flops += cout * s;  // b2 + b3
    conv(cout, cout, 1, s);
    flops += cout * s;  // residual
  }
  void aam(const NetworkConfig& cfg, std::uint64_t c, std::uint64_t n) {
    for (int i = 0; i < 3; ++i) conv(c, c, 1, n);
    if (cfg.aam_mode == AamMode::Channel) {
      flops += 2 * c * c * n + 2 * c * c;  // K·Qᵀ, scale + softmax
      flops += 2 * c * n * c;              // A·V
    } else {
      flops += 2 * n * n * c + 2 * n * n;
      flops += 2 * c * n * n;
    }
    params += c;
    flops += 3 * c * n;  // gamma ⊙ x, ⊙ M, + x
  }
};

}  // namespace

CostReport count_params_flops(const NetworkConfig& cfg, Dims input) {
  cfg.validate();
  const auto& w = cfg.stage_widths;
  Counter c;
  std::array<std::uint64_t, 4> vox{};
  vox[0] = input.count();
  for (std::size_t i = 1; i < 4; ++i) vox[i] = vox[i - 1] / 8;
  std::uint64_t cin = cfg.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    c.block(cfg, cin, w[i], vox[i]);
    if (i < 3) c.flops += w[i] * vox[i + 1];
    cin = w[i];
  }
  for (std::size_t i = 3; i >= 1; --i) {
    const std::uint64_t lo = w[i - 1], s = vox[i - 1];
    c.params += w[i] * lo * 8 + lo;
    c.flops += 2 * w[i] * lo * s;
    c.conv(lo, lo, 1, s);
    if (cfg.use_aam) c.aam(cfg, cfg.aam_after_merge ? 2 * lo : lo, s);
    c.block(cfg, 2 * lo, lo, s);
  }
  c.conv(w[0], cfg.out_channels, 1, vox[0]);
  c.flops += cfg.out_channels * vox[0];
  return {c.params, c.flops};
}

// ---------------------------------------------------------------------------

template <typename T>
Network<T>::Network(NetworkConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)), reg_(init_seed) {
  cfg_.validate();
  const auto& w = cfg_.stage_widths;
  auto make_block = [&](const std::string& name, std::size_t cin, std::size_t cout) -> BlockParams<T> {
    if (cfg_.use_msff) return make_msff(reg_, name, cin, cout, cfg_);
    return make_plain(reg_, name, cin, cout, cfg_);
  };
  std::size_t cin = cfg_.in_channels;
  for (std::size_t i = 0; i < 4; ++i) {
    encoder_.push_back(make_block("enc" + std::to_string(i), cin, w[i]));
    cin = w[i];
  }
  for (std::size_t i = 1; i <= 3; ++i) {
    const std::string s = "dec" + std::to_string(i - 1);
    const std::size_t lo = w[i - 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(w[i] * 8));
    UpParams<T> up{reg_.add(s + ".up.weight", ParamKind::ConvWeight, {w[i], lo, 2, 2, 2}, bound),
                   reg_.add(s + ".up.bias", ParamKind::Bias, {lo}, bound)};
    ConvParams<T> skip = make_conv(reg_, s + ".skip", lo, lo, 1);
    std::optional<AamParams<T>> aam;
    if (cfg_.use_aam) aam = make_aam(reg_, s + ".aam", cfg_.aam_after_merge ? 2 * lo : lo, cfg_);
    decoder_.push_back({up, skip, aam, make_block(s + ".block", 2 * lo, lo)});
  }
  head_ = make_conv(reg_, "head", w[0], cfg_.out_channels, 1);
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& x, DropoutMode mode, std::uint64_t seed) const {
  if (x.rank() != 5) throw ShapeError("network input must be [B,C,D,H,W], got " + shape_str(x.shape()));
  if (x.dim(1) != cfg_.in_channels) {
    throw ShapeError("network expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                     shape_str(x.shape()));
  }
  for (std::size_t a = 2; a < 5; ++a) {
    if (x.dim(a) % 8 != 0 || x.dim(a) == 0) {
      throw ShapeError("spatial dims must be divisible by 8, got " + shape_str(x.shape()));
    }
  }
  ForwardContext ctx{mode, seed, 0};
  std::vector<Tensor<T>> skips;
  Tensor<T> h = x;
  for (std::size_t i = 0; i < 4; ++i) {
    h = block_forward(h, encoder_[i], ctx);
    if (i < 3) {
      skips.push_back(h);
      h = maxpool3d(h);
    }
  }
  for (std::size_t i = 3; i >= 1; --i) {
    const DecoderStage& st = decoder_[i - 1];
    Tensor<T> up = conv_transpose3d(h, st.up.weight, st.up.bias);
    const Tensor<T> skip = skip_recalibrate(skips[i - 1], st.skip);
    Tensor<T> merged;
    if (st.aam && !cfg_.aam_after_merge) up = aam_forward(up, *st.aam, ctx);
    merged = concat_channels(skip, up);
    if (st.aam && cfg_.aam_after_merge) merged = aam_forward(merged, *st.aam, ctx);
    h = block_forward(merged, st.block, ctx);
  }
  return sigmoid(conv(h, head_));
}

template <typename T>
std::size_t Network<T>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params()) n += p.value.numel();
  return n;
}

#define UPMAD_NET_INSTANTIATE(T)                                                                                    \
  template class ParamRegistry<T>;                                                                                 \
  template class Network<T>;                                                                                       \
  template ConvParams<T> make_conv(ParamRegistry<T>&, const std::string&, std::size_t, std::size_t, std::size_t,   \
                                   std::size_t);                                                                   \
  template CaParams<T> make_ca(ParamRegistry<T>&, const std::string&, std::size_t, std::size_t);                   \
  template FcmParams<T> make_fcm(ParamRegistry<T>&, const std::string&, std::size_t, const NetworkConfig&, bool);  \
  template MsffParams<T> make_msff(ParamRegistry<T>&, const std::string&, std::size_t, std::size_t,                \
                                   const NetworkConfig&);                                                          \
  template PlainParams<T> make_plain(ParamRegistry<T>&, const std::string&, std::size_t, std::size_t,              \
                                     const NetworkConfig&);                                                        \
  template AamParams<T> make_aam(ParamRegistry<T>&, const std::string&, std::size_t, const NetworkConfig&);        \
  template Tensor<T> channel_attention(const Tensor<T>&, const CaParams<T>&);                                      \
  template Tensor<T> fcm(const Tensor<T>&, const FcmParams<T>&, ForwardContext&);                                  \
  template Tensor<T> msff_forward(const Tensor<T>&, const MsffParams<T>&, ForwardContext&);                        \
  template Tensor<T> plain_block_forward(const Tensor<T>&, const PlainParams<T>&, ForwardContext&);                \
  template Tensor<T> block_forward(const Tensor<T>&, const BlockParams<T>&, ForwardContext&);                      \
  template Tensor<T> aam_forward(const Tensor<T>&, const AamParams<T>&, ForwardContext&);                          \
  template Tensor<T> skip_recalibrate(const Tensor<T>&, const ConvParams<T>&);

UPMAD_NET_INSTANTIATE(float)
UPMAD_NET_INSTANTIATE(double)

}  // namespace upmad
