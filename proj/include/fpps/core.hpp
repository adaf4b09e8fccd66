#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

namespace fpps {

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using VectorXd = Vector<double>;
using MatrixXd = Matrix<double>;

/// A precondition or shape contract was broken by the caller.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A configuration cannot be honoured (missing Jacobian, bad kernel setup, ...).
class ConfigurationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The ensemble has collapsed so that a required quantity is undefined.
class DegenerateEnsembleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Every kernel value seen from one particle underflowed to zero.
class IsolatedParticleError : public std::runtime_error {
 public:
  IsolatedParticleError(const std::string& what, long index)
      : std::runtime_error(what), index_(index) {}
  long index() const noexcept { return index_; }

 private:
  long index_;
};

/// Non-finite state during time stepping.
class IntegrationFailure : public std::runtime_error {
 public:
  IntegrationFailure(const std::string& what, double last_good_time)
      : std::runtime_error(what), last_good_time_(last_good_time) {}
  double last_good_time() const noexcept { return last_good_time_; }

 private:
  double last_good_time_;
};

class UnsupportedOperation : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool cond, const char* msg) {
  if (!cond) throw ContractViolation(msg);
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

template <typename Derived>
bool is_symmetric(const Eigen::MatrixBase<Derived>& m, typename Derived::Scalar tol) {
  if (m.rows() != m.cols()) return false;
  using std::abs;
  const auto scale = std::max<typename Derived::Scalar>(1, m.cwiseAbs().maxCoeff());
  return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

inline std::atomic<int>& max_threads_slot() {
  static std::atomic<int> slot{1};
  return slot;
}
}  // namespace detail

/// Caps the worker count used for per-particle loops (default 1).
inline void set_max_threads(int n) { detail::max_threads_slot() = std::max(1, n); }
inline int max_threads() { return detail::max_threads_slot(); }

/// Runs body(i) for i in [0, n) on up to max_threads() workers with static
/// chunking. Bodies must write disjoint outputs; the first exception thrown is
/// rethrown on the calling thread.
template <typename Body>
void parallel_for(Eigen::Index n, Body&& body) {
  const int workers = static_cast<int>(std::min<Eigen::Index>(max_threads(), n));
  if (workers <= 1) {
    for (Eigen::Index i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      const Eigen::Index begin = n * w / workers;
      const Eigen::Index end = n * (w + 1) / workers;
      try {
        for (Eigen::Index i = begin; i < end; ++i) body(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace fpps
