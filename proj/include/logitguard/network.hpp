#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "logitguard/errors.hpp"
#include "logitguard/logits.hpp"
#include "logitguard/rng.hpp"
#include "logitguard/tape.hpp"
#include "logitguard/tensor.hpp"

namespace logitguard {

enum class LayerKind { kConv2d, kRelu, kMaxPool2x2, kFlatten, kDense };

inline std::string layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::kConv2d: return "conv2d";
    case LayerKind::kRelu: return "relu";
    case LayerKind::kMaxPool2x2: return "maxpool2x2";
    case LayerKind::kFlatten: return "flatten";
    case LayerKind::kDense: return "dense";
  }
  throw ConfigError("unknown layer kind");
}

inline LayerKind layer_kind_from_name(const std::string& s) {
  if (s == "conv2d") return LayerKind::kConv2d;
  if (s == "relu") return LayerKind::kRelu;
  if (s == "maxpool2x2") return LayerKind::kMaxPool2x2;
  if (s == "flatten") return LayerKind::kFlatten;
  if (s == "dense") return LayerKind::kDense;
  throw FormatError("unknown layer kind \"" + s + "\"");
}

struct LayerSpec {
  LayerKind kind = LayerKind::kRelu;
  std::size_t filters = 0;  // conv2d: output channels
  std::size_t kernel = 0;   // conv2d: square kernel side
  std::size_t units = 0;    // dense: output width

  static LayerSpec conv2d(std::size_t filters, std::size_t kernel) {
    return {LayerKind::kConv2d, filters, kernel, 0};
  }
  static LayerSpec relu() { return {LayerKind::kRelu, 0, 0, 0}; }
  static LayerSpec maxpool2x2() { return {LayerKind::kMaxPool2x2, 0, 0, 0}; }
  static LayerSpec flatten() { return {LayerKind::kFlatten, 0, 0, 0}; }
  static LayerSpec dense(std::size_t units) { return {LayerKind::kDense, 0, 0, units}; }
};

/// Architecture description: input shape (rank 1, or rank 3 as {C,H,W}),
/// ordered layers, and the class count M the final dense layer must emit.
struct NetworkSpec {
  std::vector<std::size_t> input_shape;
  std::vector<LayerSpec> layers;
  std::size_t num_classes = 0;

  /// Shape of each layer's output, in order, starting after the input.
  /// Throws ConfigError wherever the stack is inconsistent.
  std::vector<std::vector<std::size_t>> layer_output_shapes() const {
    if (input_shape.size() != 1 && input_shape.size() != 3)
      throw ConfigError("network input must be rank 1 or rank 3, got rank " +
                        std::to_string(input_shape.size()));
    for (std::size_t e : input_shape)
      if (e == 0) throw ConfigError("network input shape has a zero extent");
    if (layers.empty()) throw ConfigError("network has no layers");

    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> cur = input_shape;
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const LayerSpec& l = layers[li];
      const std::string where = "layer " + std::to_string(li) + " (" + layer_kind_name(l.kind) + ")";
      switch (l.kind) {
        case LayerKind::kConv2d: {
          if (cur.size() != 3) throw ConfigError(where + ": needs rank-3 input");
          if (l.filters == 0 || l.kernel == 0)
            throw ConfigError(where + ": filters and kernel must be >= 1");
          if (cur[1] < l.kernel || cur[2] < l.kernel)
            throw ConfigError(where + ": kernel " + std::to_string(l.kernel) +
                              " exceeds input " + std::to_string(cur[1]) + "x" +
                              std::to_string(cur[2]));
          cur = {l.filters, cur[1] - l.kernel + 1, cur[2] - l.kernel + 1};
          break;
        }
        case LayerKind::kRelu:
          break;
        case LayerKind::kMaxPool2x2:
          if (cur.size() != 3) throw ConfigError(where + ": needs rank-3 input");
          if (cur[1] % 2 != 0 || cur[2] % 2 != 0)
            throw ConfigError(where + ": input " + std::to_string(cur[1]) + "x" +
                              std::to_string(cur[2]) + " not divisible by 2");
          cur = {cur[0], cur[1] / 2, cur[2] / 2};
          break;
        case LayerKind::kFlatten: {
          std::size_t n = 1;
          for (std::size_t e : cur) n *= e;
          cur = {n};
          break;
        }
        case LayerKind::kDense:
          if (cur.size() != 1)
            throw ConfigError(where + ": needs rank-1 input (add a flatten layer)");
          if (l.units == 0) throw ConfigError(where + ": units must be >= 1");
          cur = {l.units};
          break;
      }
      out.push_back(cur);
    }
    return out;
  }

  void validate() const {
    const auto shapes = layer_output_shapes();
    if (num_classes < 2)
      throw ConfigError("num_classes must be >= 2, got " + std::to_string(num_classes));
    if (layers.back().kind != LayerKind::kDense)
      throw ConfigError("final layer must be dense (pre-softmax logits), got " +
                        layer_kind_name(layers.back().kind));
    const auto& last = shapes.back();
    if (last.size() != 1 || last[0] != num_classes)
      throw ConfigError("final layer emits " + std::to_string(last[0]) +
                        " values, expected M=" + std::to_string(num_classes));
  }

  /// Shapes of the parameter tensors, in layer order: conv2d contributes
  /// kernel {F,C,kh,kw} + bias {F}; dense contributes W {out,in} + b {out}.
  std::vector<std::vector<std::size_t>> param_shapes() const {
    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> cur = input_shape;
    const auto shapes = layer_output_shapes();
    for (std::size_t li = 0; li < layers.size(); ++li) {
      const LayerSpec& l = layers[li];
      if (l.kind == LayerKind::kConv2d) {
        out.push_back({l.filters, cur[0], l.kernel, l.kernel});
        out.push_back({l.filters});
      } else if (l.kind == LayerKind::kDense) {
        out.push_back({l.units, cur[0]});
        out.push_back({l.units});
      }
      cur = shapes[li];
    }
    return out;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["input_shape"] = input_shape;
    j["num_classes"] = num_classes;
    j["layers"] = nlohmann::json::array();
    for (const LayerSpec& l : layers) {
      nlohmann::json lj;
      lj["kind"] = layer_kind_name(l.kind);
      if (l.kind == LayerKind::kConv2d) {
        lj["filters"] = l.filters;
        lj["kernel"] = l.kernel;
      } else if (l.kind == LayerKind::kDense) {
        lj["units"] = l.units;
      }
      j["layers"].push_back(lj);
    }
    return j;
  }

  static NetworkSpec from_json(const nlohmann::json& j) {
    NetworkSpec s;
    try {
      s.input_shape = j.at("input_shape").get<std::vector<std::size_t>>();
      s.num_classes = j.at("num_classes").get<std::size_t>();
      for (const auto& lj : j.at("layers")) {
        LayerSpec l;
        l.kind = layer_kind_from_name(lj.at("kind").get<std::string>());
        if (l.kind == LayerKind::kConv2d) {
          l.filters = lj.at("filters").get<std::size_t>();
          l.kernel = lj.at("kernel").get<std::size_t>();
        } else if (l.kind == LayerKind::kDense) {
          l.units = lj.at("units").get<std::size_t>();
        }
        s.layers.push_back(l);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad network spec json: ") + e.what());
    }
    return s;
  }

  /// conv(6@5x5) -> relu -> pool -> conv(16@5x5) -> relu -> pool -> flatten
  /// -> dense(120) -> relu -> dense(84) -> relu -> dense(10), for 1x28x28 input.
  static NetworkSpec lenet5() {
    NetworkSpec s;
    s.input_shape = {1, 28, 28};
    s.num_classes = 10;
    s.layers = {LayerSpec::conv2d(6, 5),  LayerSpec::relu(), LayerSpec::maxpool2x2(),
                LayerSpec::conv2d(16, 5), LayerSpec::relu(), LayerSpec::maxpool2x2(),
                LayerSpec::flatten(),     LayerSpec::dense(120), LayerSpec::relu(),
                LayerSpec::dense(84),     LayerSpec::relu(),     LayerSpec::dense(10)};
    return s;
  }

  /// 2 inputs -> dense(8) -> relu -> dense(2): the planar toy classifier.
  static NetworkSpec toy2d() {
    NetworkSpec s;
    s.input_shape = {2};
    s.num_classes = 2;
    s.layers = {LayerSpec::dense(8), LayerSpec::relu(), LayerSpec::dense(2)};
    return s;
  }
};

/// One forward evaluation: the tape plus the node ids needed to differentiate
/// any scalar objective built on top of the logits.
struct ForwardResult {
  Tape tape;
  int input_id = -1;
  std::vector<int> param_ids;
  int logits_id = -1;

  LogitVector logits() const { return LogitVector(tape.value(logits_id)); }
};

class Network {
 public:
  Network(NetworkSpec spec, std::vector<Tensor> params)
      : spec_(std::move(spec)), params_(std::move(params)) {
    spec_.validate();
    const auto expected = spec_.param_shapes();
    if (params_.size() != expected.size())
      throw DimensionError("network expects " + std::to_string(expected.size()) +
                           " parameter tensors, got " + std::to_string(params_.size()));
    for (std::size_t i = 0; i < expected.size(); ++i)
      if (params_[i].shape() != expected[i])
        throw DimensionError("parameter tensor " + std::to_string(i) + " has shape " +
                             params_[i].shape_string() + ", expected " +
                             Tensor::zeros(expected[i]).shape_string());
  }

  const NetworkSpec& spec() const { return spec_; }
  const std::vector<Tensor>& params() const { return params_; }
  std::vector<Tensor>& params() { return params_; }

  std::size_t num_params() const {
    std::size_t n = 0;
    for (const Tensor& t : params_) n += t.size();
    return n;
  }

  /// Records a fresh tape per call: input leaf, all parameter leaves, then the
  /// layer stack. The final node holds the M pre-softmax logits.
  ForwardResult forward(const Tensor& x) const {
    if (x.shape() != spec_.input_shape)
      throw DimensionError("input shape " + x.shape_string() + " does not match network input");
    ForwardResult r;
    r.input_id = r.tape.leaf(x);
    r.param_ids.reserve(params_.size());
    for (const Tensor& p : params_) r.param_ids.push_back(r.tape.leaf(p));

    int cur = r.input_id;
    std::size_t pi = 0;
    for (const LayerSpec& l : spec_.layers) {
      switch (l.kind) {
        case LayerKind::kConv2d: {
          const int k = r.param_ids[pi++], b = r.param_ids[pi++];
          cur = r.tape.conv2d(cur, k, b);
          break;
        }
        case LayerKind::kRelu:
          cur = r.tape.relu(cur);
          break;
        case LayerKind::kMaxPool2x2:
          cur = r.tape.maxpool2x2(cur);
          break;
        case LayerKind::kFlatten:
          cur = r.tape.flatten(cur);
          break;
        case LayerKind::kDense: {
          const int w = r.param_ids[pi++], b = r.param_ids[pi++];
          cur = r.tape.dense(cur, w, b);
          break;
        }
      }
    }
    r.logits_id = cur;
    return r;
  }

  LogitVector logits(const Tensor& x) const { return forward(x).logits(); }

 private:
  NetworkSpec spec_;
  std::vector<Tensor> params_;
};

/// He-style seeded init: weights uniform in ±sqrt(6 / fan_in), biases zero.
/// fan_in is C·kh·kw for conv kernels and the input width for dense weights.
inline Network build_classifier(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(seed);
  std::vector<Tensor> params;
  for (const auto& shape : spec.param_shapes()) {
    Tensor t = Tensor::zeros(shape);
    if (shape.size() > 1) {  // weight tensor; biases ({F} / {out}) stay zero
      std::size_t fan_in = 1;
      for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (double& v : t.values()) v = rng.uniform(-bound, bound);
    }
    params.push_back(std::move(t));
  }
  return Network(spec, std::move(params));
}

}  // namespace logitguard
