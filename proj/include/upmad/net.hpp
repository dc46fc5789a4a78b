#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "upmad/grid.hpp"
#include "upmad/ops.hpp"
#include "upmad/rng.hpp"

namespace upmad {

enum class AamMode { Channel, Spatial };

struct NetworkConfig {
  std::size_t in_channels = 5;
  std::size_t out_channels = 3;
  std::array<std::size_t, 4> stage_widths{8, 16, 32, 64};
  std::size_t gn_groups = 4;
  double dropout_rate = 0.2;
  std::size_t msff_dilation = 2;
  /// Kernel of the dilated branch. The local branch is always 3x3x3.
  std::size_t msff_kernel = 3;
  std::size_t ca_reduction = 2;
  AamMode aam_mode = AamMode::Channel;
  std::size_t spatial_attention_voxel_cap = 32768;
  bool use_msff = true;
  bool use_aam = true;
  /// AAM on the merged (skip ‖ upsampled) features; false puts it on the
  /// upsampled features before the merge.
  bool aam_after_merge = true;
  double gn_eps = 1e-5;

  void validate() const;
};

enum class ParamKind { ConvWeight, Bias, NormScale, NormShift, AttentionScale };

/// Only convolution kernels receive decoupled weight decay.
inline bool decays(ParamKind k) { return k == ParamKind::ConvWeight; }

template <typename T>
struct NamedParam {
  std::string name;
  ParamKind kind;
  Tensor<T> value;
};

/// Owns parameter creation order (and therefore names and init draws).
template <typename T>
class ParamRegistry {
 public:
  explicit ParamRegistry(std::uint64_t seed) : rng_(make_rng(seed)) {}

  /// Uniform(-bound, bound); bound 0 yields a constant `fill`.
  Tensor<T> add(std::string name, ParamKind kind, Shape shape, double bound, T fill = T(0));

  std::vector<NamedParam<T>>& list() { return params_; }
  const std::vector<NamedParam<T>>& list() const { return params_; }

 private:
  Rng rng_;
  std::vector<NamedParam<T>> params_;
};

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // [Cout,Cin,k,k,k]
  Tensor<T> bias;    // [Cout]
  std::size_t dilation = 1;

  std::size_t kernel() const { return weight.dim(2); }
  ConvOptions options() const { return {1, same_padding(kernel(), dilation), dilation}; }
};

template <typename T>
struct UpParams {
  Tensor<T> weight;  // [Cin,Cout,2,2,2]
  Tensor<T> bias;
};

template <typename T>
struct CaParams {
  ConvParams<T> reduce, expand;
};

template <typename T>
struct FcmParams {
  Tensor<T> gamma, beta;
  std::optional<CaParams<T>> ca;
  std::size_t groups = 1;
  double rate = 0.0;
  double eps = 1e-5;
};

template <typename T>
struct MsffParams {
  ConvParams<T> point, local, dilated, fuse;
  FcmParams<T> fcm_point, fcm_local, fcm_dilated;
};

/// Ablated block: 3x3x3 conv followed by FCM without channel attention.
template <typename T>
struct PlainParams {
  ConvParams<T> conv;
  FcmParams<T> fcm;
};

template <typename T>
using BlockParams = std::variant<MsffParams<T>, PlainParams<T>>;

template <typename T>
struct AamParams {
  ConvParams<T> key, query, value;
  Tensor<T> gamma;  // [1,C,1,1,1], zero at init
  AamMode mode = AamMode::Channel;
  std::size_t voxel_cap = 32768;
  double rate = 0.0;
};

/// Hands each dropout site its own seed, in call order, from one pass seed.
struct ForwardContext {
  DropoutMode mode = DropoutMode::Off;
  std::uint64_t seed = 0;
  std::uint64_t sites = 0;

  std::uint64_t next_seed() { return derive_seed(seed, {sites++}); }
};

template <typename T>
ConvParams<T> make_conv(ParamRegistry<T>& reg, const std::string& name, std::size_t cin, std::size_t cout,
                        std::size_t k, std::size_t dilation = 1);
template <typename T>
CaParams<T> make_ca(ParamRegistry<T>& reg, const std::string& name, std::size_t channels, std::size_t reduction);
template <typename T>
FcmParams<T> make_fcm(ParamRegistry<T>& reg, const std::string& name, std::size_t channels, const NetworkConfig& cfg,
                      bool with_ca);
template <typename T>
MsffParams<T> make_msff(ParamRegistry<T>& reg, const std::string& name, std::size_t cin, std::size_t cout,
                        const NetworkConfig& cfg);
template <typename T>
PlainParams<T> make_plain(ParamRegistry<T>& reg, const std::string& name, std::size_t cin, std::size_t cout,
                          const NetworkConfig& cfg);
template <typename T>
AamParams<T> make_aam(ParamRegistry<T>& reg, const std::string& name, std::size_t channels, const NetworkConfig& cfg);

template <typename T>
Tensor<T> conv(const Tensor<T>& x, const ConvParams<T>& p) {
  return conv3d(x, p.weight, p.bias, p.options());
}

/// x ⊙ sigmoid(W2·relu(W1·gap(x))), scale broadcast over space.
template <typename T>
Tensor<T> channel_attention(const Tensor<T>& x, const CaParams<T>& p);

/// relu -> group norm -> dropout -> channel attention (when present).
template <typename T>
Tensor<T> fcm(const Tensor<T>& x, const FcmParams<T>& p, ForwardContext& ctx);

/// b1 + fuse(b2 + b3) with b1/b2/b3 the FCM-calibrated 1x1x1, 3x3x3 and
/// dilated branches.
template <typename T>
Tensor<T> msff_forward(const Tensor<T>& x, const MsffParams<T>& p, ForwardContext& ctx);

template <typename T>
Tensor<T> plain_block_forward(const Tensor<T>& x, const PlainParams<T>& p, ForwardContext& ctx);

template <typename T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p, ForwardContext& ctx);

/// K/Q/V attention with a zero-initialised per-channel modulation:
/// out = x + (gamma ⊙ x) ⊙ M. Identity while gamma is 0.
template <typename T>
Tensor<T> aam_forward(const Tensor<T>& x, const AamParams<T>& p, ForwardContext& ctx);

template <typename T>
Tensor<T> skip_recalibrate(const Tensor<T>& enc_feat, const ConvParams<T>& p);

struct LayerInfo {
  std::string name;
  std::string kind;  // msff, conv3, pool, up, skip, concat, aam, head
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;

  std::string str() const;
};

/// Structural description of the network a config builds, in execution order.
std::vector<LayerInfo> layer_manifest(const NetworkConfig& cfg);

struct CostReport {
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

/// Analytic parameter and FLOP count for a batch-1 forward with dropout Off.
///   conv / 1x1 conv : params Cout*Cin*k^3 + Cout, flops 2*Cin*Cout*k^3*S_out
///   transposed conv : params Cin*Cout*8 + Cout,    flops 2*Cin*Cout*S_out
///   contraction     : 2*M*N*K per batch
///   group norm      : params 2C, flops 1 per output element
///   relu, sigmoid, softmax, pooling, add, mul, scale : 1 per output element
///   global average pool : 1 per input element
///   AAM gamma       : params C
/// Bias additions inside convolutions are not counted as FLOPs.
CostReport count_params_flops(const NetworkConfig& cfg, Dims input);

template <typename T>
class Network {
 public:
  explicit Network(NetworkConfig cfg, std::uint64_t init_seed = 0);

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;

  /// x: [B,in_channels,D,H,W], D/H/W divisible by 8. Returns [B,3,D,H,W] in (0,1).
  Tensor<T> forward(const Tensor<T>& x, DropoutMode mode, std::uint64_t seed = 0) const;

  const NetworkConfig& config() const { return cfg_; }
  std::vector<NamedParam<T>>& params() { return reg_.list(); }
  const std::vector<NamedParam<T>>& params() const { return reg_.list(); }
  std::size_t param_count() const;

  /// Copies parameter values from a network of identical structure.
  template <typename U>
  void copy_values_from(const Network<U>& other);

 private:
  struct DecoderStage {
    UpParams<T> up;
    ConvParams<T> skip;
    std::optional<AamParams<T>> aam;
    BlockParams<T> block;
  };

  NetworkConfig cfg_;
  ParamRegistry<T> reg_;
  std::vector<BlockParams<T>> encoder_;
  std::vector<DecoderStage> decoder_;  // decoder_[i-1] upsamples from stage i
  ConvParams<T> head_;
};

template <typename T>
template <typename U>
void Network<T>::copy_values_from(const Network<U>& other) {
  auto& mine = params();
  const auto& theirs = other.params();
  if (mine.size() != theirs.size()) throw ShapeError("copy_values_from: parameter lists differ in length");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].name != theirs[i].name || mine[i].value.shape() != theirs[i].value.shape()) {
      throw ShapeError("copy_values_from: parameter " + mine[i].name + " does not match " + theirs[i].name);
    }
    auto dst = mine[i].value.mutable_data();
    auto src = theirs[i].value.data();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(src[j]);
  }
}

}  // namespace upmad
