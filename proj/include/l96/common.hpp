#ifndef L96_COMMON_HPP_
#define L96_COMMON_HPP_

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>

namespace l96 {

/// Rows are samples (time steps or batch members), columns are components.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Input violates an operation's stated precondition.
class precondition_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// State contains NaN/Inf where finite values are required.
class invalid_state_error : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Integration left the attractor (non-finite or |x| above the blow-up threshold).
class divergence_error : public std::runtime_error {
 public:
  divergence_error(double time, const std::string& what)
      : std::runtime_error(what), time_(time) {}
  double time() const noexcept { return time_; }

 private:
  double time_;
};

/// Least-squares or posterior system without a unique solution.
class rank_deficient_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Generic numerical failure (non-finite network output, degenerate statistics).
class numerical_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Flow training produced a non-finite loss.
class training_diverged_error : public std::runtime_error {
 public:
  training_diverged_error(int epoch, const std::string& what)
      : std::runtime_error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

namespace detail {

template <typename... Args>
std::string concat(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw precondition_error(msg);
}

// Number of fixed steps of size `step` that make up `span`; throws unless exact.
inline long exact_steps(double span, double step, const char* what) {
  const double r = span / step;
  const double n = std::round(r);
  if (!(step > 0.0) || std::abs(r - n) > 1e-6 * std::max(1.0, r)) {
    throw precondition_error(concat(what, ": ", span, " is not a multiple of ", step));
  }
  return static_cast<long>(n);
}

}  // namespace detail

}  // namespace l96

#endif  // L96_COMMON_HPP_
