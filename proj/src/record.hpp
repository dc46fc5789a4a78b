#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "upmad/tensor.hpp"

namespace upmad::detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

/// Registers `out` on the active tape when any input needs a gradient.
template <typename T, typename Backward>
void record(const char* op, std::vector<Tensor<T>> inputs, Tensor<T>& out, Backward&& bw) {
  check_finite(out, op);
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  if (!needs) return;
  out.mark_non_leaf();
  tape->record({op, std::move(inputs), out, std::forward<Backward>(bw)});
}

}  // namespace upmad::detail
