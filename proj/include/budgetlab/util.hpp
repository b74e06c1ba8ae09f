#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace budgetlab {

// ---------------------------------------------------------------------------
// Worker pool bound. Set once from the CLI --workers flag; everything that
// fans out (rollouts, eval decodes, per-sequence gradients) respects it.
// Results never depend on the worker count: work items are indexed and all
// reductions fold in item order.
// ---------------------------------------------------------------------------
inline int& max_workers_ref() {
  static int workers = []() {
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
  }();
  return workers;
}

inline void set_max_workers(int n) { max_workers_ref() = n < 1 ? 1 : n; }
inline int max_workers() { return max_workers_ref(); }

inline bool& in_parallel_region() {
  thread_local bool flag = false;
  return flag;
}

// Runs fn(i) for i in [0, n). Items are distributed in contiguous blocks;
// fn must only touch state owned by item i. Nested calls run serially.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers =
      std::min<std::size_t>(static_cast<std::size_t>(max_workers()), n);
  if (workers <= 1 || in_parallel_region()) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([lo, hi, &fn]() {
      in_parallel_region() = true;
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

// ---------------------------------------------------------------------------
// FNV-1a 64-bit. Used for artifact checksums in manifests and for trajectory
// identity accounting; not cryptographic.
// ---------------------------------------------------------------------------
constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

inline std::uint64_t fnv1a64(const void* data, std::size_t len,
                             std::uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvOffset) {
  return fnv1a64(s.data(), s.size(), h);
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return out;
}

}  // namespace budgetlab
