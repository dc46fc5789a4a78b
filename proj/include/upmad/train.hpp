#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "upmad/checkpoint.hpp"
#include "upmad/metrics.hpp"
#include "upmad/net.hpp"
#include "upmad/prior.hpp"

namespace upmad {

/// The four module-comparison switches.
struct Ablation {
  bool use_prior = true;
  bool use_msff = true;
  bool use_aam = true;
  bool use_mc = true;
};

/// Network config matching the switches (prior adds the fifth input channel).
NetworkConfig network_config_for(const Ablation& ab, NetworkConfig base = {});

struct TrainConfig {
  double lr_init = 1e-4;
  double weight_decay = 1e-5;
  std::size_t cosine_T = 50;
  double lr_min = 0.0;
  /// Restart the cosine cycle every T epochs instead of holding lr_min.
  bool cosine_restarts = false;
  std::size_t max_epochs = 1000;
  std::size_t patience = 150;
  std::size_t batch_size = 1;
  std::uint64_t seed = 0;
  Ablation ablation;
  PriorConfig prior;
  std::size_t mc_passes = 20;

  void validate() const;
};

struct AdamState {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  std::vector<double> m, v;
  std::uint64_t t = 0;
};

/// One decoupled AdamW update of `params` in place.
template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, double weight_decay);

/// Per-parameter AdamW over a network's parameter list; decay applies to
/// convolution kernels only.
template <typename T>
class AdamW {
 public:
  AdamW(std::vector<NamedParam<T>>& params, double weight_decay);
  /// Parameters without a gradient are treated as having zero gradient.
  void step(double lr);
  const std::vector<AdamState>& states() const { return states_; }

 private:
  std::vector<NamedParam<T>>* params_;
  std::vector<AdamState> states_;
  double weight_decay_;
};

/// lr_min + (lr_init - lr_min) * (1 + cos(pi * min(t, T) / T)) / 2
double cosine_lr(std::size_t epoch, const TrainConfig& config);

enum class StopDecision { Continue, Stop, Error };

class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  StopDecision update(double val_loss);
  /// True when the last update set a new best.
  bool improved() const { return improved_; }
  double best_loss() const { return best_; }
  std::size_t best_epoch() const { return best_epoch_; }
  std::size_t epochs_since_best() const { return since_; }

 private:
  std::size_t patience_;
  std::size_t seen_ = 0, best_epoch_ = 0, since_ = 0;
  double best_ = 0;
  bool has_best_ = false, improved_ = false;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0, train_loss = 0, val_loss = 0;
};

std::string format_history(std::span<const EpochRecord> history);
void write_history(const std::filesystem::path& path, std::span<const EpochRecord> history);

/// A case turned into network input and [1,3,D,H,W] region targets (ET, WT, TC).
struct Sample {
  Tensor<float> input;
  Tensor<float> target;
};

Tensor<float> region_targets(const Grid<std::uint8_t>& labels);
Sample prepare_sample(const MultiModalVolume& volume, bool use_prior, const PriorConfig& prior);

/// Prior config with delta resolved from the labelled training cases when
/// not set explicitly.
PriorConfig resolve_prior(const PriorConfig& prior, std::span<const MultiModalVolume> labelled);

enum class StopReason { MaxEpochs, EarlyStop };

struct FitResult {
  std::vector<EpochRecord> history;
  std::vector<NamedArray> best;
  std::size_t best_epoch = 0;
  double best_val_loss = 0;
  StopReason reason = StopReason::MaxEpochs;
  PriorConfig prior;  // as resolved for this run
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Batch-1 training with combined loss, AdamW and cosine lr; validation loss
/// (dropout off) drives early stopping. Leaves `net` holding the best
/// parameters. Throws NumericError when the loss diverges.
FitResult fit(Network<float>& net, std::span<const MultiModalVolume> train, std::span<const MultiModalVolume> val,
              const TrainConfig& config, const EpochCallback& on_epoch = {});

struct McResult {
  Dims dims;
  /// Channel-major [3][D*H*W]: ET, WT, TC.
  std::array<Grid<float>, 3> mean, variance;
  RegionMasks masks;
  std::size_t n_passes = 0;
};

/// n_passes stochastic forwards (McActive, pass p seeded by derive(seed, p)),
/// mean and population variance per voxel, masks from mean >= 0.5.
/// use_mc false runs a single deterministic pass.
McResult mc_infer(const Network<float>& net, const Tensor<float>& input, std::size_t n_passes, std::uint64_t seed,
                  bool use_mc = true);

MetricReport evaluate_case(const McResult& mc, const Grid<std::uint8_t>& gt_labels, Spacing spacing = {});

/// Human-readable description of what the switches build, for audits:
/// input channels, layer manifest, inference policy.
std::vector<std::string> pipeline_manifest(const Ablation& ab, const NetworkConfig& net, std::size_t mc_passes);

}  // namespace upmad
