#include "upmad/parallel.hpp"

#include <atomic>

namespace upmad {
namespace {
std::atomic<unsigned> g_threads{0};
std::atomic<bool> g_deterministic{false};
}  // namespace

void set_num_threads(unsigned n) { g_threads = n; }

unsigned num_threads() {
  const unsigned n = g_threads.load();
  if (n != 0) return n;
  return std::max(1u, std::thread::hardware_concurrency());
}

void set_deterministic(bool on) { g_deterministic = on; }
bool deterministic() { return g_deterministic.load(); }

}  // namespace upmad
