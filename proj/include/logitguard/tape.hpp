#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "logitguard/errors.hpp"
#include "logitguard/logits.hpp"
#include "logitguard/ops.hpp"
#include "logitguard/tensor.hpp"

namespace logitguard {

enum class OpKind {
  kLeaf,
  kDense,
  kConv2d,
  kMaxPool2x2,
  kRelu,
  kFlatten,
  kCrossEntropy,
  kCwMargin,
  kSquaredDistance,
  kAddScaled,
};

struct TapeNode {
  OpKind kind = OpKind::kLeaf;
  std::array<int, 3> in{-1, -1, -1};
  Tensor value;

  // Per-op saved state so backward and replay are pure functions of the tape.
  std::vector<std::size_t> pool_argmax;  // kMaxPool2x2
  std::size_t target = 0;                // kCrossEntropy, kCwMargin
  double confidence_k = 0.0;             // kCwMargin
  int margin_runner = -1;                // kCwMargin: runner-up index, -1 if clamped at -K
  Tensor reference;                      // kSquaredDistance
  double coeff_a = 1.0, coeff_b = 1.0;   // kAddScaled
};

/// Gradients keyed by tape node id. Leaf gradients are always present and
/// shaped like their primals (zeros when the objective does not depend on the
/// leaf); interior nodes the sweep never reached hold an empty tensor.
struct Gradients {
  std::vector<Tensor> by_node;
  std::size_t ops_visited = 0;

  const Tensor& at(int id) const { return by_node.at(static_cast<std::size_t>(id)); }
};

/// Record of one forward evaluation. Replaying it re-executes every recorded
/// operation in order; a single reverse sweep yields exact gradients.
class Tape {
 public:
  int leaf(Tensor v) {
    TapeNode n;
    n.kind = OpKind::kLeaf;
    n.value = std::move(v);
    return push(std::move(n));
  }

  int dense(int x, int w, int b) {
    TapeNode n;
    n.kind = OpKind::kDense;
    n.in = {x, w, b};
    n.value = dense_forward(value(x), value(w), value(b));
    return push(std::move(n));
  }

  int conv2d(int x, int k, int b) {
    TapeNode n;
    n.kind = OpKind::kConv2d;
    n.in = {x, k, b};
    n.value = conv2d_forward(value(x), value(k), value(b));
    return push(std::move(n));
  }

  int maxpool2x2(int x) {
    TapeNode n;
    n.kind = OpKind::kMaxPool2x2;
    n.in = {x, -1, -1};
    n.value = maxpool2x2_forward(value(x), n.pool_argmax);
    return push(std::move(n));
  }

  int relu(int x) {
    TapeNode n;
    n.kind = OpKind::kRelu;
    n.in = {x, -1, -1};
    n.value = relu_forward(value(x));
    return push(std::move(n));
  }

  int flatten(int x) {
    TapeNode n;
    n.kind = OpKind::kFlatten;
    n.in = {x, -1, -1};
    n.value = flatten_forward(value(x));
    return push(std::move(n));
  }

  /// Scalar: -log softmax(logits)_c.
  int cross_entropy(int logits, std::size_t c) {
    TapeNode n;
    n.kind = OpKind::kCrossEntropy;
    n.in = {logits, -1, -1};
    n.target = c;
    n.value = Tensor::scalar(logitguard::cross_entropy(LogitVector(value(logits)), c));
    return push(std::move(n));
  }

  /// Scalar: max(max{u_i : i != c} - u_c, -K). The active branch is fixed at
  /// record time; at the kink (margin == -K exactly) the clamp side wins.
  int cw_margin(int logits, std::size_t c, double confidence_k) {
    const Tensor& u = value(logits);
    if (c >= u.size()) throw IndexError("cw_margin: target class out of range");
    LogitVector lv(u);
    const std::size_t runner = lv.runner_up(c);
    const double margin = u[runner] - u[c];
    TapeNode n;
    n.kind = OpKind::kCwMargin;
    n.in = {logits, -1, -1};
    n.target = c;
    n.confidence_k = confidence_k;
    if (margin > -confidence_k) {
      n.margin_runner = static_cast<int>(runner);
      n.value = Tensor::scalar(margin);
    } else {
      n.margin_runner = -1;
      n.value = Tensor::scalar(-confidence_k);
    }
    return push(std::move(n));
  }

  /// Scalar: sum_i (x_i - ref_i)^2.
  int squared_distance(int x, Tensor reference) {
    const Tensor& xv = value(x);
    if (!xv.same_shape(reference))
      throw DimensionError("squared_distance: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < xv.size(); ++i) {
      const double d = xv[i] - reference[i];
      acc += d * d;
    }
    TapeNode n;
    n.kind = OpKind::kSquaredDistance;
    n.in = {x, -1, -1};
    n.reference = std::move(reference);
    n.value = Tensor::scalar(acc);
    return push(std::move(n));
  }

  /// Scalar: a*x + b*y for scalar nodes x, y.
  int add_scaled(double a, int x, double b, int y) {
    const Tensor& xv = value(x);
    const Tensor& yv = value(y);
    if (xv.size() != 1 || yv.size() != 1)
      throw DimensionError("add_scaled expects scalar nodes");
    TapeNode n;
    n.kind = OpKind::kAddScaled;
    n.in = {x, y, -1};
    n.coeff_a = a;
    n.coeff_b = b;
    n.value = Tensor::scalar(a * xv[0] + b * yv[0]);
    return push(std::move(n));
  }

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(int id) const { return node(id).value; }

  const TapeNode& node(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw GraphError("node id " + std::to_string(id) + " not on tape");
    return nodes_[static_cast<std::size_t>(id)];
  }

  /// Re-execute every recorded operation from the leaves, in recording order.
  /// Returns the recomputed value of each node; deterministic kernels make
  /// this bit-identical to the recorded values.
  std::vector<Tensor> replay() const {
    std::vector<Tensor> out(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const TapeNode& n = nodes_[i];
      switch (n.kind) {
        case OpKind::kLeaf:
          out[i] = n.value;
          break;
        case OpKind::kDense:
          out[i] = dense_forward(out[n.in[0]], out[n.in[1]], out[n.in[2]]);
          break;
        case OpKind::kConv2d:
          out[i] = conv2d_forward(out[n.in[0]], out[n.in[1]], out[n.in[2]]);
          break;
        case OpKind::kMaxPool2x2: {
          std::vector<std::size_t> argmax;
          out[i] = maxpool2x2_forward(out[n.in[0]], argmax);
          break;
        }
        case OpKind::kRelu:
          out[i] = relu_forward(out[n.in[0]]);
          break;
        case OpKind::kFlatten:
          out[i] = flatten_forward(out[n.in[0]]);
          break;
        case OpKind::kCrossEntropy:
          out[i] = Tensor::scalar(
              logitguard::cross_entropy(LogitVector(out[n.in[0]]), n.target));
          break;
        case OpKind::kCwMargin: {
          LogitVector lv(out[n.in[0]]);
          const double margin = lv[lv.runner_up(n.target)] - lv[n.target];
          out[i] = Tensor::scalar(std::max(margin, -n.confidence_k));
          break;
        }
        case OpKind::kSquaredDistance: {
          const Tensor& xv = out[n.in[0]];
          double acc = 0.0;
          for (std::size_t j = 0; j < xv.size(); ++j) {
            const double d = xv[j] - n.reference[j];
            acc += d * d;
          }
          out[i] = Tensor::scalar(acc);
          break;
        }
        case OpKind::kAddScaled:
          out[i] = Tensor::scalar(n.coeff_a * out[n.in[0]][0] + n.coeff_b * out[n.in[1]][0]);
          break;
      }
    }
    return out;
  }

  /// Reverse-mode sweep from a scalar objective node. Each recorded op is
  /// processed at most once; gradients have the shapes of their primals.
  Gradients backward(int objective) const {
    const TapeNode& obj = node(objective);
    if (obj.value.size() != 1)
      throw GraphError("backward objective must be scalar, got shape " +
                       obj.value.shape_string());
    Gradients g;
    g.by_node.resize(nodes_.size());
    grad_for(g, objective) = Tensor({1}, {1.0});

    for (int i = objective; i >= 0; --i) {
      const std::size_t ui = static_cast<std::size_t>(i);
      if (g.by_node[ui].empty()) continue;  // not reachable from the objective
      const TapeNode& n = nodes_[ui];
      const Tensor& gy = g.by_node[ui];
      ++g.ops_visited;
      switch (n.kind) {
        case OpKind::kLeaf:
          break;
        case OpKind::kDense:
          dense_backward(value(n.in[0]), value(n.in[1]), gy, grad_for(g, n.in[0]),
                         grad_for(g, n.in[1]), grad_for(g, n.in[2]));
          break;
        case OpKind::kConv2d:
          conv2d_backward(value(n.in[0]), value(n.in[1]), gy, grad_for(g, n.in[0]),
                          grad_for(g, n.in[1]), grad_for(g, n.in[2]));
          break;
        case OpKind::kMaxPool2x2:
          maxpool2x2_backward(n.pool_argmax, gy, grad_for(g, n.in[0]));
          break;
        case OpKind::kRelu:
          relu_backward(value(n.in[0]), gy, grad_for(g, n.in[0]));
          break;
        case OpKind::kFlatten:
          flatten_backward(gy, grad_for(g, n.in[0]));
          break;
        case OpKind::kCrossEntropy: {
          // d/du (-log softmax_c) = softmax(u) - onehot_c
          const std::vector<double> p = softmax(LogitVector(value(n.in[0])));
          Tensor& gx = grad_for(g, n.in[0]);
          for (std::size_t k = 0; k < p.size(); ++k) gx[k] += gy[0] * p[k];
          gx[n.target] -= gy[0];
          break;
        }
        case OpKind::kCwMargin:
          if (n.margin_runner >= 0) {
            Tensor& gx = grad_for(g, n.in[0]);
            gx[static_cast<std::size_t>(n.margin_runner)] += gy[0];
            gx[n.target] -= gy[0];
          }
          break;
        case OpKind::kSquaredDistance: {
          const Tensor& xv = value(n.in[0]);
          Tensor& gx = grad_for(g, n.in[0]);
          for (std::size_t k = 0; k < xv.size(); ++k)
            gx[k] += gy[0] * 2.0 * (xv[k] - n.reference[k]);
          break;
        }
        case OpKind::kAddScaled:
          grad_for(g, n.in[0])[0] += n.coeff_a * gy[0];
          grad_for(g, n.in[1])[0] += n.coeff_b * gy[0];
          break;
      }
    }
    // A leaf the sweep never wrote is one the objective does not depend on;
    // hand back explicit zeros so callers can read leaf gradients
    // unconditionally.
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].kind == OpKind::kLeaf && g.by_node[i].empty())
        g.by_node[i] = Tensor::zeros(nodes_[i].value.shape());
    return g;
  }

 private:
  int push(TapeNode n) {
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  Tensor& grad_for(Gradients& g, int id) const {
    Tensor& t = g.by_node[static_cast<std::size_t>(id)];
    if (t.empty()) t = Tensor::zeros(nodes_[static_cast<std::size_t>(id)].value.shape());
    return t;
  }

  std::vector<TapeNode> nodes_;
};

}  // namespace logitguard
