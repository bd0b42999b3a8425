#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace labdyn {

/// Process-wide worker count used by the block-parallel helpers (>= 1).
int num_threads() noexcept;
void set_num_threads(int n);

/// Fixed partition size for per-individual work. Partitions never depend on
/// the thread count, so per-partition results merged in index order are
/// bitwise identical for any number of workers.
inline constexpr std::size_t kPartitionSize = 256;

inline std::size_t num_partitions(std::size_t n, std::size_t part = kPartitionSize) {
  return (n + part - 1) / part;
}

/// Runs fn(i) for i in [0, n) on the worker pool. Exceptions are rethrown on
/// the caller (the first one by index).
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(num_threads()), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  auto work = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  for (std::size_t t = 1; t < workers; ++t) pool.emplace_back(work);
  work();
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Map each partition to a partial result, then fold the partials in order.
template <typename Partial, typename MapFn, typename FoldFn>
Partial map_reduce(std::size_t num_parts, Partial init, MapFn&& map, FoldFn&& fold) {
  std::vector<Partial> partials(num_parts, init);
  parallel_for(num_parts, [&](std::size_t p) { map(p, partials[p]); });
  for (auto& p : partials) fold(init, p);
  return init;
}

}  // namespace labdyn
