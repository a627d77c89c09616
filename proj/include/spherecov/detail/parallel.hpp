#pragma once

#include <atomic>
#include <cstddef>
#include <thread>
#include <vector>

namespace spherecov::detail {

// Runs fn(0..n-1) across the requested worker count. Results must be written
// to per-index slots so the schedule cannot affect the outcome; threads <= 1
// (or tiny n) degrades to a plain loop.
template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
  };
  std::vector<std::thread> pool;
  const std::size_t count = std::min(n, static_cast<std::size_t>(threads));
  pool.reserve(count);
  for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

}  // namespace spherecov::detail
