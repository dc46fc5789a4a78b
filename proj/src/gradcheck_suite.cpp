#include "upmad/gradcheck_suite.hpp"

#include <chrono>
#include <functional>
#include <random>

#include "upmad/grad_check.hpp"
#include "upmad/losses.hpp"
#include "upmad/net.hpp"

namespace upmad {

namespace {

using D = Tensor<double>;

class Suite {
 public:
  explicit Suite(std::uint64_t seed) : rng_(make_rng(seed)) {}

  D uniform(Shape s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    D t(std::move(s));
    for (double& v : t.mutable_data()) v = u(rng_);
    return t;
  }

  /// Weighted sum with fixed random weights, so every output element
  /// contributes a distinct gradient.
  std::function<D()> projected(std::function<D()> f) {
    const D probe = [&] {
      NoGradScope<double> ng;
      return f();
    }();
    D w(probe.shape());
    std::uniform_real_distribution<double> mag(0.5, 1.0);
    std::bernoulli_distribution sign(0.5);
    for (double& v : w.mutable_data()) v = sign(rng_) ? mag(rng_) : -mag(rng_);
    return [f = std::move(f), w] { return sum(mul(f(), w)); };
  }

  void check(const std::string& name, std::function<D()> scalar_f, std::vector<D> wrt, double tol) {
    const auto t0 = std::chrono::steady_clock::now();
    const GradCheckReport r = grad_check(scalar_f, std::move(wrt), 1e-5, 1000, rng_());
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    out.push_back({name, r.max_rel_error, tol, r.coords_checked, r.kink_coords, r.max_rel_error_smooth, secs});
  }

  void check_out(const std::string& name, std::function<D()> f, std::vector<D> wrt, double tol = 1e-5) {
    check(name, projected(std::move(f)), std::move(wrt), tol);
  }

  template <typename P>
  std::vector<D> with(const std::vector<NamedParam<double>>& params, P extra) {
    std::vector<D> v{extra};
    for (const auto& p : params) v.push_back(p.value);
    return v;
  }

  /// Non-degenerate values for zero- or one-initialised parameters.
  void randomize(std::vector<NamedParam<double>>& params) {
    std::uniform_real_distribution<double> u(0.5, 1.5), s(-0.5, 0.5);
    for (auto& p : params) {
      for (double& v : p.value.mutable_data()) {
        if (p.kind == ParamKind::NormScale) v = u(rng_);
        else if (p.kind == ParamKind::NormShift || p.kind == ParamKind::AttentionScale) v = s(rng_);
      }
    }
  }

  Rng rng_;
  std::vector<GradCheckEntry> out;
};

NetworkConfig small_config() {
  NetworkConfig c;
  c.stage_widths = {4, 8, 8, 8};
  c.gn_groups = 2;
  c.dropout_rate = 0.0;
  return c;
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  Suite s(seed);

  {
    D x = s.uniform({1, 3, 6, 6, 4}), w = s.uniform({4, 3, 3, 3, 3}), b = s.uniform({4});
    s.check_out("conv3d", [=] { return conv3d(x, w, b, {1, 1, 1}); }, {x, w, b});
    s.check_out("conv3d_dilation2", [=] { return conv3d(x, w, b, {1, 2, 2}); }, {x, w, b});
    D ws = s.uniform({2, 3, 3, 3, 3});
    s.check_out("conv3d_stride2", [=] { return conv3d(x, ws, D(), {2, 1, 1}); }, {x, ws});
  }
  {
    D x = s.uniform({1, 4, 4, 4, 2}), w = s.uniform({4, 3, 2, 2, 2}), b = s.uniform({3});
    s.check_out("conv_transpose3d", [=] { return conv_transpose3d(x, w, b); }, {x, w, b});
  }
  {
    D x = s.uniform({1, 4, 8, 8, 4});
    s.check_out("maxpool3d", [=] { return maxpool3d(x); }, {x});
  }
  {
    D x = s.uniform({1, 4, 8, 8, 4}), g = s.uniform({4}, 0.5, 1.5), b = s.uniform({4});
    s.check_out("group_norm", [=] { return group_norm(x, 2, g, b); }, {x, g, b});
  }
  {
    D x = s.uniform({1, 4, 4, 4, 4}, -3, 3);
    s.check_out("relu", [=] { return relu(x); }, {x});
    s.check_out("sigmoid", [=] { return sigmoid(x); }, {x});
    s.check_out("softmax", [=] { return softmax(x, 1); }, {x});
    s.check_out("global_avg_pool", [=] { return global_avg_pool(x); }, {x});
    D y = s.uniform({1, 4, 1, 1, 1});
    s.check_out("broadcast_mul", [=] { return mul(x, y); }, {x, y});
    s.check_out("broadcast_add", [=] { return add(x, y); }, {x, y});
  }
  {
    D a = s.uniform({2, 3, 5}), b = s.uniform({2, 4, 5});
    s.check_out("contract", [=] { return contract(a, b, {false, true}); }, {a, b});
  }
  {
    D p = s.uniform({1, 3, 4, 4, 4}, 0.05, 0.95), g = s.uniform({1, 3, 4, 4, 4});
    for (double& v : g.mutable_data()) v = v > 0 ? 1.0 : 0.0;
    s.check("dice_loss", [=] { return dice_loss(p, g); }, {p}, 1e-6);
    s.check("bce_loss", [=] { return bce_loss(p, g); }, {p}, 1e-6);
    s.check("combined_loss", [=] { return combined_loss(p, g); }, {p}, 1e-6);
  }

  NetworkConfig cfg = small_config();
  {
    ParamRegistry<double> reg(seed + 1);
    const CaParams<double> ca = make_ca(reg, "ca", 4, 2);
    D x = s.uniform({1, 4, 4, 4, 4});
    s.check_out("channel_attention", [=] { return channel_attention(x, ca); }, s.with(reg.list(), x));
  }
  {
    ParamRegistry<double> reg(seed + 2);
    const FcmParams<double> f = make_fcm(reg, "fcm", 4, cfg, true);
    s.randomize(reg.list());
    D x = s.uniform({1, 4, 4, 4, 4});
    s.check_out("fcm", [=] { ForwardContext ctx; return fcm(x, f, ctx); }, s.with(reg.list(), x));
  }
  {
    ParamRegistry<double> reg(seed + 3);
    const MsffParams<double> m = make_msff(reg, "msff", 5, 4, cfg);
    s.randomize(reg.list());
    D x = s.uniform({1, 5, 8, 8, 4});
    s.check_out("msff", [=] { ForwardContext ctx; return msff_forward(x, m, ctx); }, s.with(reg.list(), x));
  }
  {
    ParamRegistry<double> reg(seed + 4);
    const AamParams<double> a = make_aam(reg, "aam", 4, cfg);
    s.randomize(reg.list());
    D x = s.uniform({1, 4, 4, 4, 2});
    s.check_out("aam_channel", [=] { ForwardContext ctx; return aam_forward(x, a, ctx); }, s.with(reg.list(), x));
    AamParams<double> sp = a;
    sp.mode = AamMode::Spatial;
    s.check_out("aam_spatial", [=] { ForwardContext ctx; return aam_forward(x, sp, ctx); }, s.with(reg.list(), x));
  }
  {
    ParamRegistry<double> reg(seed + 5);
    const ConvParams<double> c = make_conv(reg, "skip", 4, 4, 1);
    D x = s.uniform({1, 4, 4, 4, 4});
    s.check_out("skip_recalibrate", [=] { return skip_recalibrate(x, c); }, s.with(reg.list(), x), 1e-6);
  }
  {
    NetworkConfig full;
    full.dropout_rate = 0.0;
    auto net = std::make_shared<Network<double>>(full, seed + 6);
    s.randomize(net->params());
    D x = s.uniform({1, 5, 8, 8, 8});
    D g = s.uniform({1, 3, 8, 8, 8});
    for (double& v : g.mutable_data()) v = v > 0.3 ? 1.0 : 0.0;
    s.check("network_combined_loss", [=] { return combined_loss(net->forward(x, DropoutMode::Off), g); }, {x}, 1e-5);
  }
  return s.out;
}

}  // namespace upmad
