#ifndef L96_CLOSURE_HPP_
#define L96_CLOSURE_HPP_

#include "l96/common.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>

namespace l96 {

/// Subgrid closure U_p(X) acting on a batch of independent realizations.
///
/// reset() prepares one realization per seed; row r of every subsequent
/// evaluate() call belongs to realization r. Each evaluate() is one reduced-model
/// step: stochastic closures advance their noise state exactly once per call.
/// A realization's output depends only on its own seed and state history, never
/// on the batch it shares, so results are independent of how members are grouped.
class Closure {
 public:
  virtual ~Closure() = default;

  virtual std::string kind() const = 0;
  virtual bool stochastic() const = 0;

  virtual void reset(std::span<const std::uint64_t> seeds) = 0;

  /// x: (batch x K) resolved states; u receives (batch x K) tendencies.
  virtual void evaluate(const Matrix& x, Matrix& u) = 0;

  virtual std::unique_ptr<Closure> clone() const = 0;
};

using ClosurePtr = std::unique_ptr<Closure>;

/// U = const; the default constant 0 gives the unforced reduced model.
class ConstantClosure final : public Closure {
 public:
  explicit ConstantClosure(double value = 0.0) : value_(value) {}

  std::string kind() const override { return "constant"; }
  bool stochastic() const override { return false; }
  void reset(std::span<const std::uint64_t>) override {}
  void evaluate(const Matrix& x, Matrix& u) override {
    u.setConstant(x.rows(), x.cols(), value_);
  }
  std::unique_ptr<Closure> clone() const override {
    return std::make_unique<ConstantClosure>(*this);
  }

 private:
  double value_;
};

}  // namespace l96

#endif  // L96_CLOSURE_HPP_
