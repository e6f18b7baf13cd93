#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

namespace dra {

// Runs fn(i) for i in [0, n), across OpenMP threads when available. The first
// exception thrown by any iteration is rethrown on the calling thread after
// the loop finishes.
//
// Iterations must be independent: callers give each one its own tape and RNG
// stream keyed by i, so results are the same for every schedule.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  std::exception_ptr error;
  std::mutex error_mutex;
  const auto count = static_cast<long>(n);
#pragma omp parallel for schedule(dynamic)
  for (long i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace dra
