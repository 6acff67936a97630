#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "logitguard/dataset.hpp"
#include "logitguard/errors.hpp"
#include "logitguard/network.hpp"
#include "logitguard/rng.hpp"

namespace logitguard {

enum class OptimizerKind { kSgd, kMomentum };

inline std::string optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::kSgd ? "sgd" : "momentum";
}

inline OptimizerKind optimizer_from_name(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "momentum") return OptimizerKind::kMomentum;
  throw ConfigError("unknown optimizer \"" + s + "\" (want sgd|momentum)");
}

struct TrainConfig {
  double learning_rate = 0.01;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kMomentum;
  double momentum = 0.9;

  void validate() const {
    if (!(learning_rate > 0.0))
      throw ConfigError("learning_rate must be > 0, got " + format_double(learning_rate));
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (optimizer == OptimizerKind::kMomentum && !(momentum >= 0.0 && momentum < 1.0))
      throw ConfigError("momentum must be in [0,1), got " + format_double(momentum));
  }
};

struct TrainReport {
  std::vector<double> epoch_loss;      // mean cross-entropy per epoch
  std::vector<double> epoch_accuracy;  // online train accuracy per epoch
  double final_accuracy = 0.0;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["epoch_loss"] = epoch_loss;
    j["epoch_accuracy"] = epoch_accuracy;
    j["final_accuracy"] = final_accuracy;
    j["seed"] = seed;
    j["epochs"] = epochs;
    return j;
  }
};

/// Fraction of samples whose argmax logit matches the label.
inline double evaluate_accuracy(const Network& net, const LabeledDataset& data) {
  if (data.images.empty()) throw DataError("evaluate_accuracy: dataset is empty");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.images.size(); ++i)
    if (net.logits(data.images[i]).argmax() == data.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(data.images.size());
}

/// Minibatch SGD (optionally with momentum) on mean cross-entropy. The epoch
/// shuffle is driven by cfg.seed, so a fixed seed reproduces the run exactly.
/// Loss going non-finite aborts with the offending epoch in the message.
inline TrainReport train(Network& net, const LabeledDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  data.validate();
  if (data.num_classes != net.spec().num_classes)
    throw DataError("dataset has M=" + std::to_string(data.num_classes) + " but network emits " +
                    std::to_string(net.spec().num_classes) + " logits");
  if (data.images[0].shape() != net.spec().input_shape)
    throw DataError("dataset images are " + data.images[0].shape_string() +
                    ", network expects a different input shape");

  Rng rng(Rng::derive(cfg.seed, fnv1a("train-shuffle")));
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<Tensor>& params = net.params();
  std::vector<Tensor> velocity;
  if (cfg.optimizer == OptimizerKind::kMomentum)
    for (const Tensor& p : params) velocity.push_back(Tensor::zeros(p.shape()));

  TrainReport report;
  report.seed = cfg.seed;
  report.epochs = cfg.epochs;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t hits = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(start + cfg.batch_size, order.size());
      const double inv_batch = 1.0 / static_cast<double>(end - start);

      std::vector<Tensor> grad_sum;
      grad_sum.reserve(params.size());
      for (const Tensor& p : params) grad_sum.push_back(Tensor::zeros(p.shape()));

      try {
        for (std::size_t s = start; s < end; ++s) {
          const std::size_t idx = order[s];
          ForwardResult f = net.forward(data.images[idx]);
          if (LogitVector(f.tape.value(f.logits_id)).argmax() == data.labels[idx]) ++hits;
          const int obj = f.tape.cross_entropy(f.logits_id, data.labels[idx]);
          loss_sum += f.tape.value(obj)[0];
          const Gradients g = f.tape.backward(obj);
          for (std::size_t pi = 0; pi < params.size(); ++pi) {
            const Tensor& gp = g.by_node[static_cast<std::size_t>(f.param_ids[pi])];
            if (gp.empty()) continue;
            for (std::size_t k = 0; k < gp.size(); ++k) grad_sum[pi][k] += gp[k];
          }
        }
      } catch (const NumericError& e) {
        throw TrainingError("loss diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }

      for (std::size_t pi = 0; pi < params.size(); ++pi) {
        if (cfg.optimizer == OptimizerKind::kMomentum) {
          for (std::size_t k = 0; k < params[pi].size(); ++k) {
            velocity[pi][k] = cfg.momentum * velocity[pi][k] -
                              cfg.learning_rate * grad_sum[pi][k] * inv_batch;
            params[pi][k] += velocity[pi][k];
          }
        } else {
          for (std::size_t k = 0; k < params[pi].size(); ++k)
            params[pi][k] -= cfg.learning_rate * grad_sum[pi][k] * inv_batch;
        }
      }
    }

    const double mean_loss = loss_sum / static_cast<double>(data.size());
    if (!std::isfinite(mean_loss))
      throw TrainingError("loss diverged (non-finite) at epoch " + std::to_string(epoch));
    report.epoch_loss.push_back(mean_loss);
    report.epoch_accuracy.push_back(static_cast<double>(hits) /
                                    static_cast<double>(data.size()));
  }

  report.final_accuracy = report.epoch_accuracy.back();
  return report;
}

}  // namespace logitguard
