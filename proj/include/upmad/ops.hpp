#pragma once

#include <cstdint>

#include "upmad/tensor.hpp"

namespace upmad {

/// Dropout behaviour. Train and McActive both sample masks; Off is identity.
enum class DropoutMode { Train, McActive, Off };

struct ConvOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
};

/// Padding that keeps spatial extents at stride 1.
inline std::size_t same_padding(std::size_t kernel, std::size_t dilation) { return dilation * (kernel - 1) / 2; }

/// 3D cross-correlation with zero padding.
/// x: [B,Cin,D,H,W], weight: [Cout,Cin,k,k,k], bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, ConvOptions opt = {});

/// Stride-2, 2x2x2 transposed convolution; doubles each spatial extent.
/// weight: [Cin,Cout,2,2,2].
template <typename T>
Tensor<T> conv_transpose3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// 2x2x2 max pooling, stride 2. Ties go to the first voxel in scan order.
template <typename T>
Tensor<T> maxpool3d(const Tensor<T>& x);

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps = 1e-5);

/// Inverted dropout. The keep mask is a pure function of (seed, element index).
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, DropoutMode mode, std::uint64_t seed);

enum class Activation { Relu, Sigmoid, Softmax };

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);
/// Softmax along `axis`, max-subtracted.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind, std::size_t axis = 0);

/// Batched matrix product op(a)·op(b) over rank-3 [batch, rows, cols]
/// operands (rank-2 operands are treated as batch 1).
struct ContractSpec {
  bool transpose_a = false;
  bool transpose_b = false;
};

template <typename T>
Tensor<T> contract(const Tensor<T>& a, const Tensor<T>& b, ContractSpec spec = {});

/// [B,C,D,H,W] -> [B,C,1,1,1]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);

enum class Elementwise { Add, Mul };

/// Same-rank operands; each axis must match or be 1 on one side.
template <typename T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, Elementwise kind);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, Elementwise::Add);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(a, b, Elementwise::Mul);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Concatenation along axis 1.
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Copy into another precision as a fresh leaf (no gradient link).
template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& x);

/// Accumulates the floating-point operation count of ops run on this thread
/// while alive (multiply-accumulate = 2, other ops 1 per output element).
class FlopScope {
 public:
  FlopScope();
  ~FlopScope();
  FlopScope(const FlopScope&) = delete;
  FlopScope& operator=(const FlopScope&) = delete;
  std::uint64_t count() const { return count_; }

 private:
  std::uint64_t count_ = 0;
  std::uint64_t* prev_;
};

void count_flops(std::uint64_t n);

/// Fingerprints the branch decisions (ReLU signs, max-pool winners, loss
/// clamps) taken on this thread while alive. Two evaluations with equal
/// signatures lie on the same smooth piece of a piecewise function.
class KinkScope {
 public:
  KinkScope();
  ~KinkScope();
  KinkScope(const KinkScope&) = delete;
  KinkScope& operator=(const KinkScope&) = delete;
  std::uint64_t signature() const { return sig_; }
  void reset() { sig_ = 0; }

 private:
  friend void note_decisions(std::uint64_t);
  std::uint64_t sig_ = 0;
  KinkScope* prev_;
};

bool tracking_kinks();
void note_decisions(std::uint64_t digest);

}  // namespace upmad
