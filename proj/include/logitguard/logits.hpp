#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "logitguard/errors.hpp"
#include "logitguard/tensor.hpp"

namespace logitguard {

/// Pre-softmax class scores. Argmax ties break to the lowest index.
class LogitVector {
 public:
  explicit LogitVector(std::vector<double> scores) : scores_(std::move(scores)) {
    if (scores_.size() < 2)
      throw DimensionError("logit vector needs at least 2 classes, got " +
                           std::to_string(scores_.size()));
    argmax_ = 0;
    for (std::size_t i = 1; i < scores_.size(); ++i)
      if (scores_[i] > scores_[argmax_]) argmax_ = i;
  }

  explicit LogitVector(const Tensor& t) : LogitVector(t.values()) {
    if (t.rank() != 1)
      throw DimensionError("logits must be rank-1, got " + t.shape_string());
  }

  std::size_t size() const { return scores_.size(); }
  double operator[](std::size_t i) const { return scores_.at(i); }
  const std::vector<double>& values() const { return scores_; }

  std::size_t argmax() const { return argmax_; }
  double max_value() const { return scores_[argmax_]; }

  /// Largest score among classes other than `excluded`; ties to lowest index.
  std::size_t runner_up(std::size_t excluded) const {
    if (excluded >= scores_.size())
      throw IndexError("class index " + std::to_string(excluded) + " out of range");
    std::size_t best = excluded == 0 ? 1 : 0;
    for (std::size_t i = 0; i < scores_.size(); ++i)
      if (i != excluded && scores_[i] > scores_[best]) best = i;
    return best;
  }

  bool is_finite() const {
    for (double v : scores_)
      if (!std::isfinite(v)) return false;
    return true;
  }

 private:
  std::vector<double> scores_;
  std::size_t argmax_ = 0;
};

/// Normalized exponential with max-subtraction. Outputs in (0,1), sum 1.
inline std::vector<double> softmax(const LogitVector& u) {
  if (!u.is_finite()) throw NumericError("softmax: non-finite logits");
  const double m = u.max_value();
  std::vector<double> p(u.size());
  double z = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    p[i] = std::exp(u[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

/// Probability assigned to the predicted (max) class.
inline double max_softmax(const LogitVector& u) {
  return softmax(u)[u.argmax()];
}

/// -log softmax(u)_c, evaluated as logsumexp(u) - u_c for stability.
inline double cross_entropy(const LogitVector& u, std::size_t c) {
  if (c >= u.size())
    throw IndexError("cross_entropy: class " + std::to_string(c) + " out of range for M=" +
                     std::to_string(u.size()));
  if (!u.is_finite()) throw NumericError("cross_entropy: non-finite logits");
  const double m = u.max_value();
  double z = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) z += std::exp(u[i] - m);
  return m + std::log(z) - u[c];
}

}  // namespace logitguard
