#include "upmad/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "upmad/ops.hpp"
#include "upmad/rng.hpp"

namespace upmad {

GradCheckReport grad_check(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> wrt, double h,
                           std::size_t max_coords, std::uint64_t seed) {
  std::vector<bool> prev_flags;
  for (auto& t : wrt) {
    prev_flags.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.clear_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = f();
    if (loss.numel() != 1) throw ShapeError("grad_check: function must return a scalar");
    tape.backward(loss);
  }
  for (auto& t : wrt) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
  }

  // (tensor index, element index)
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t ti = 0; ti < wrt.size(); ++ti)
    for (std::size_t i = 0; i < wrt[ti].numel(); ++i) coords.emplace_back(ti, i);
  if (coords.size() > max_coords) {
    Rng rng = make_rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coords);
  }

  GradCheckReport report;
  NoGradScope<double> no_grad;
  KinkScope kinks;
  auto eval = [&](std::uint64_t& sig) {
    kinks.reset();
    const double v = f().item();
    sig = kinks.signature();
    return v;
  };
  std::uint64_t base = 0, up = 0, down = 0;
  (void)eval(base);
  for (const auto& [ti, i] : coords) {
    auto data = wrt[ti].mutable_data();
    const double orig = data[i];
    data[i] = orig + h;
    const double fp = eval(up);
    data[i] = orig - h;
    const double fm = eval(down);
    data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[ti][i];
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    report.max_rel_error = std::max(report.max_rel_error, rel);
    ++report.coords_checked;
    if (up != base || down != base) {
      ++report.kink_coords;
    } else {
      report.max_rel_error_smooth = std::max(report.max_rel_error_smooth, rel);
    }
  }

  for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
    wrt[ti].set_requires_grad(prev_flags[ti]);
    wrt[ti].clear_grad();
  }
  return report;
}

GradCheckReport grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, Tensor<double> x, double h) {
  return grad_check([&] { return f(x); }, {x}, h);
}

}  // namespace upmad
