#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ipwsae::detail {

// Runs job(0..count-1) on up to `workers` threads. Jobs must write only to
// their own slots. The first exception is rethrown after all threads join.
template <class Job>
void parallel_for(int count, int workers, Job job) {
  workers = std::max(1, std::min(workers, count));
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto run = [&] {
    for (int s = next++; s < count; s = next++) {
      try {
        job(s);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    run();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(run);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace ipwsae::detail
