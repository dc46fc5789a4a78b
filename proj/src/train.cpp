#include "upmad/train.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "upmad/losses.hpp"

namespace upmad {

NetworkConfig network_config_for(const Ablation& ab, NetworkConfig base) {
  base.in_channels = ab.use_prior ? 5 : 4;
  base.use_msff = ab.use_msff;
  base.use_aam = ab.use_aam;
  return base;
}

void TrainConfig::validate() const {
  if (!(lr_init > 0)) throw ConfigError("lr_init must be > 0");
  if (!(lr_min >= 0 && lr_min <= lr_init)) throw ConfigError("lr_min must lie in [0, lr_init]");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be >= 0");
  if (cosine_T == 0) throw ConfigError("cosine_T must be >= 1");
  if (max_epochs == 0) throw ConfigError("max_epochs must be >= 1");
  if (patience > max_epochs) throw ConfigError("patience must not exceed max_epochs");
  if (batch_size != 1) throw ConfigError("batch_size is fixed at 1");
  if (mc_passes == 0) throw ConfigError("mc_passes must be >= 1");
  prior.validate();
}

template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, double lr, double weight_decay) {
  if (params.size() != grads.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " parameters vs " + std::to_string(grads.size()) +
                     " gradients");
  }
  if (state.m.empty() && state.t == 0) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw ShapeError("adamw_step: optimizer state does not match parameter size");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(AdamState::kBeta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(AdamState::kBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    double& m = state.m[i];
    double& v = state.v[i];
    m = AdamState::kBeta1 * m + (1.0 - AdamState::kBeta1) * g;
    v = AdamState::kBeta2 * v + (1.0 - AdamState::kBeta2) * g * g;
    const double theta = params[i];
    const double step = (m / c1) / (std::sqrt(v / c2) + AdamState::kEps);
    params[i] = static_cast<T>(theta - lr * step - lr * weight_decay * theta);
  }
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedParam<T>>& params, double weight_decay)
    : params_(&params), states_(params.size()), weight_decay_(weight_decay) {}

template <typename T>
void AdamW<T>::step(double lr) {
  auto& ps = *params_;
  if (ps.size() != states_.size()) throw ShapeError("AdamW: parameter list changed size");
  std::vector<T> zeros;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Tensor<T>& p = ps[i].value;
    std::span<const T> g = p.grad();
    if (!p.has_grad()) {
      zeros.assign(p.numel(), T(0));
      g = zeros;
    }
    adamw_step<T>(p.mutable_data(), g, states_[i], lr, decays(ps[i].kind) ? weight_decay_ : 0.0);
  }
}

double cosine_lr(std::size_t epoch, const TrainConfig& config) {
  const double T = static_cast<double>(config.cosine_T);
  double t = static_cast<double>(config.cosine_restarts ? epoch % config.cosine_T : std::min(epoch, config.cosine_T));
  return config.lr_min + (config.lr_init - config.lr_min) * (1.0 + std::cos(std::numbers::pi * t / T)) / 2.0;
}

StopDecision EarlyStopping::update(double val_loss) {
  improved_ = false;
  if (!std::isfinite(val_loss)) return StopDecision::Error;
  const std::size_t epoch = seen_++;
  if (!has_best_ || val_loss < best_) {
    has_best_ = true;
    best_ = val_loss;
    best_epoch_ = epoch;
    since_ = 0;
    improved_ = true;
    return StopDecision::Continue;
  }
  ++since_;
  return since_ > patience_ ? StopDecision::Stop : StopDecision::Continue;
}

std::string format_history(std::span<const EpochRecord> history) {
  std::string out;
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g\n", r.epoch, r.lr, r.train_loss, r.val_loss);
    out += buf;
  }
  return out;
}

void write_history(const std::filesystem::path& path, std::span<const EpochRecord> history) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << format_history(history);
}

Tensor<float> region_targets(const Grid<std::uint8_t>& labels) {
  const RegionMasks r = compose_regions(labels);
  const Dims d = labels.dims;
  const std::size_t S = d.count();
  Tensor<float> t(Shape{1, 3, d.d, d.h, d.w});
  auto out = t.mutable_data();
  const std::array<const Mask*, 3> order{&r.et, &r.wt, &r.tc};
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < S; ++i) out[c * S + i] = order[c]->data[i] ? 1.0f : 0.0f;
  return t;
}

Sample prepare_sample(const MultiModalVolume& volume, bool use_prior, const PriorConfig& prior) {
  if (!volume.labels) throw ConfigError("training case has no labels");
  Sample s;
  if (use_prior) {
    const PriorResult pr = generate_prior(volume.flair(), prior);
    s.input = build_input(volume, pr.mask);
  } else {
    s.input = build_input(volume, nullptr);
  }
  s.target = region_targets(*volume.labels);
  return s;
}

PriorConfig resolve_prior(const PriorConfig& prior, std::span<const MultiModalVolume> labelled) {
  PriorConfig out = prior;
  if (out.delta) return out;
  for (const auto& c : labelled) {
    if (!c.labels) return out;
  }
  try {
    out.delta = tumor_std_stats(labelled).median;
    spdlog::info("region-growing delta {:.4g} from training tumour statistics", *out.delta);
  } catch (const Error& e) {
    spdlog::warn("falling back to delta {}: {}", kFallbackDelta, e.what());
  }
  return out;
}

FitResult fit(Network<float>& net, std::span<const MultiModalVolume> train, std::span<const MultiModalVolume> val,
              const TrainConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  if (train.empty() || val.empty()) throw ConfigError("fit needs non-empty training and validation sets");
  const NetworkConfig& nc = net.config();
  const Ablation& ab = config.ablation;
  if (nc.in_channels != (ab.use_prior ? 5u : 4u) || nc.use_msff != ab.use_msff || nc.use_aam != ab.use_aam) {
    throw ConfigError("network was built for a different ablation setting than the training config");
  }
  if (nc.out_channels != 3) throw ConfigError("training targets ET, WT, TC need out_channels = 3");

  FitResult result;
  result.prior = ab.use_prior ? resolve_prior(config.prior, train) : config.prior;
  std::vector<Sample> train_s, val_s;
  for (const auto& c : train) train_s.push_back(prepare_sample(c, ab.use_prior, result.prior));
  for (const auto& c : val) val_s.push_back(prepare_sample(c, ab.use_prior, result.prior));

  AdamW<float> opt(net.params(), config.weight_decay);
  EarlyStopping stopper(config.patience);
  result.best = snapshot(net);
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = cosine_lr(epoch, config);
    try {
      double total = 0;
      for (std::size_t ci = 0; ci < train_s.size(); ++ci) {
        Tape<float> tape(true);
        TapeScope<float> scope(tape);
        for (auto& p : net.params()) p.value.clear_grad();
        const Tensor<float> out = net.forward(train_s[ci].input, DropoutMode::Train, derive_seed(config.seed, {epoch, ci}));
        const Tensor<float> loss = combined_loss(out, train_s[ci].target);
        tape.backward(loss);
        opt.step(rec.lr);
        total += loss.item();
      }
      rec.train_loss = total / static_cast<double>(train_s.size());
      NoGradScope<float> no_grad;
      total = 0;
      for (const auto& s : val_s) total += combined_loss(net.forward(s.input, DropoutMode::Off), s.target).item();
      rec.val_loss = total / static_cast<double>(val_s.size());
    } catch (const NumericError& e) {
      throw NumericError("training diverged at epoch " + std::to_string(epoch) + ": " + e.what());
    }
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
    const StopDecision d = stopper.update(rec.val_loss);
    if (d == StopDecision::Error) {
      throw NumericError("validation loss is not finite at epoch " + std::to_string(epoch));
    }
    if (stopper.improved()) result.best = snapshot(net);
    if (d == StopDecision::Stop) {
      result.reason = StopReason::EarlyStop;
      break;
    }
  }
  for (auto& p : net.params()) p.value.clear_grad();
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  restore(net, result.best);
  return result;
}

McResult mc_infer(const Network<float>& net, const Tensor<float>& input, std::size_t n_passes, std::uint64_t seed,
                  bool use_mc) {
  if (n_passes < 1) throw ConfigError("mc_infer: n_passes must be >= 1");
  if (net.config().out_channels != 3) throw ConfigError("mc_infer expects a 3-channel (ET, WT, TC) network");
  if (input.rank() != 5 || input.dim(0) != 1) throw ShapeError("mc_infer expects a [1,C,D,H,W] input");
  const DropoutMode mode = use_mc ? DropoutMode::McActive : DropoutMode::Off;
  if (!use_mc) n_passes = 1;

  McResult r;
  r.dims = {input.dim(2), input.dim(3), input.dim(4)};
  r.n_passes = n_passes;
  const std::size_t S = r.dims.count();
  std::vector<double> mean(3 * S, 0.0), m2(3 * S, 0.0);
  NoGradScope<float> no_grad;
  for (std::size_t p = 0; p < n_passes; ++p) {
    const Tensor<float> out = net.forward(input, mode, derive_seed(seed, {p}));
    const auto x = out.data();
    const double k = static_cast<double>(p + 1);
    for (std::size_t i = 0; i < 3 * S; ++i) {
      const double d = x[i] - mean[i];
      mean[i] += d / k;
      m2[i] += d * (x[i] - mean[i]);
    }
  }
  const double n = static_cast<double>(n_passes);
  for (std::size_t c = 0; c < 3; ++c) {
    r.mean[c] = Grid<float>(r.dims, 0.f);
    r.variance[c] = Grid<float>(r.dims, 0.f);
    for (std::size_t i = 0; i < S; ++i) {
      r.mean[c].data[i] = static_cast<float>(mean[c * S + i]);
      r.variance[c].data[i] = static_cast<float>(std::max(0.0, m2[c * S + i] / n));
    }
  }
  auto binarize = [&](std::size_t c) {
    Mask m(r.dims, 0);
    for (std::size_t i = 0; i < S; ++i) m.data[i] = r.mean[c].data[i] >= 0.5f;
    return m;
  };
  r.masks = {binarize(0), binarize(1), binarize(2)};
  return r;
}

MetricReport evaluate_case(const McResult& mc, const Grid<std::uint8_t>& gt_labels, Spacing spacing) {
  if (!(gt_labels.dims == mc.dims)) {
    throw ShapeError("evaluate_case: labels " + gt_labels.dims.str() + " vs prediction " + mc.dims.str());
  }
  return evaluate_masks(mc.masks, compose_regions(gt_labels), spacing);
}

std::vector<std::string> pipeline_manifest(const Ablation& ab, const NetworkConfig& net, std::size_t mc_passes) {
  const NetworkConfig cfg = network_config_for(ab, net);
  std::vector<std::string> out;
  out.push_back("input_channels=" + std::to_string(cfg.in_channels) + (ab.use_prior ? " (modalities + prior)" : " (modalities)"));
  for (const auto& l : layer_manifest(cfg)) out.push_back(l.str());
  out.push_back(ab.use_mc ? "inference=mc_dropout passes=" + std::to_string(mc_passes) : "inference=deterministic");
  return out;
}

template void adamw_step(std::span<float>, std::span<const float>, AdamState&, double, double);
template void adamw_step(std::span<double>, std::span<const double>, AdamState&, double, double);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace upmad
