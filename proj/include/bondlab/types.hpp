#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace bondlab {

template <typename F>
using Vx = Eigen::Matrix<F, Eigen::Dynamic, 1>;
template <typename F>
using Mx = Eigen::Matrix<F, Eigen::Dynamic, Eigen::Dynamic>;

using Vec = Vx<double>;
using Mat = Mx<double>;
using Index = Eigen::Index;

/// Input violates a documented precondition (shape, sign, structure).
struct InvalidInput : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Run parameters are inconsistent (step count, stability bound, ...).
struct ConfigurationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A linear solve was requested past the double-precision conditioning limit.
struct IllConditionedError : std::runtime_error {
  IllConditionedError(const std::string& what, double cond)
      : std::runtime_error(what), condition_number(cond) {}
  double condition_number;
};

struct CalibrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Claim references a factor index beyond the configured truncation level.
struct TruncationError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// Run fn(begin, end) over [0, n) split into contiguous chunks, one thread per
/// chunk. Callers own determinism: write results into preassigned slots and
/// reduce in index order afterwards.
inline void parallel_for(Index n, const std::function<void(Index, Index)>& fn,
                         unsigned max_threads = 0) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  if (max_threads != 0 && max_threads < hw) hw = max_threads;
  if (n <= 0) return;
  unsigned workers = static_cast<unsigned>(
      std::min<Index>(static_cast<Index>(hw), n));
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  Index chunk = (n + workers - 1) / workers;
  for (unsigned w = 0; w < workers; ++w) {
    Index begin = static_cast<Index>(w) * chunk;
    Index end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back(fn, begin, end);
  }
  for (auto& t : pool) t.join();
}

}  // namespace bondlab
