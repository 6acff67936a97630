#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "logitguard/dataset.hpp"
#include "logitguard/errors.hpp"
#include "logitguard/io.hpp"
#include "logitguard/logits.hpp"
#include "logitguard/network.hpp"
#include "logitguard/tensor.hpp"

namespace logitguard {

enum class AttackMethod { kFgs, kIfgs, kCwL2, kCwL2LogitCapped };

inline std::string attack_method_name(AttackMethod m) {
  switch (m) {
    case AttackMethod::kFgs: return "fgs";
    case AttackMethod::kIfgs: return "ifgs";
    case AttackMethod::kCwL2: return "cw_l2";
    case AttackMethod::kCwL2LogitCapped: return "cw_l2_logit_capped";
  }
  throw ConfigError("unknown attack method");
}

inline AttackMethod attack_method_from_name(const std::string& s) {
  if (s == "fgs") return AttackMethod::kFgs;
  if (s == "ifgs") return AttackMethod::kIfgs;
  if (s == "cw_l2") return AttackMethod::kCwL2;
  if (s == "cw_l2_logit_capped") return AttackMethod::kCwL2LogitCapped;
  throw ConfigError("unknown attack method \"" + s +
                    "\" (want fgs|ifgs|cw_l2|cw_l2_logit_capped)");
}

struct AttackConfig {
  AttackMethod method = AttackMethod::kIfgs;
  std::size_t target = 0;                 // class the attack drives toward
  double alpha_step = 1.0 / 255.0;        // per-iteration step, image-value units
  double epsilon = 0.3;                   // I-FGS per-pixel budget
  std::size_t iterations = 100;           // N
  double confidence_k = 0.0;              // CW confidence K, logit units
  double lambda = 1.0;                    // CW tradeoff on the classification loss
  std::optional<double> logit_cap;        // capped variant only, logit units

  void validate() const {
    if (!(alpha_step > 0.0))
      throw ConfigError("alpha_step must be > 0, got " + format_double(alpha_step));
    if (!(epsilon >= 0.0))
      throw ConfigError("epsilon must be >= 0, got " + format_double(epsilon));
    if (iterations < 1) throw ConfigError("iterations must be >= 1");
    if (!(confidence_k >= 0.0))
      throw ConfigError("confidence_k must be >= 0, got " + format_double(confidence_k));
    if (!(lambda > 0.0))
      throw ConfigError("lambda must be > 0, got " + format_double(lambda));
    if (method == AttackMethod::kCwL2LogitCapped && !logit_cap.has_value())
      throw ConfigError("cw_l2_logit_capped needs logit_cap set");
    if (logit_cap.has_value() && std::isnan(*logit_cap))
      throw ConfigError("logit_cap must not be NaN");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["method"] = attack_method_name(method);
    j["target"] = target;
    j["alpha_step"] = alpha_step;
    j["epsilon"] = epsilon;
    j["iterations"] = iterations;
    j["confidence_k"] = confidence_k;
    j["lambda"] = lambda;
    if (logit_cap.has_value()) {
      if (std::isinf(*logit_cap))
        j["logit_cap"] = *logit_cap > 0 ? "inf" : "-inf";
      else
        j["logit_cap"] = *logit_cap;
    }
    return j;
  }

  static AttackConfig from_json(const nlohmann::json& j) {
    AttackConfig c;
    try {
      c.method = attack_method_from_name(j.at("method").get<std::string>());
      c.target = j.at("target").get<std::size_t>();
      if (j.contains("alpha_step")) c.alpha_step = j.at("alpha_step").get<double>();
      if (j.contains("epsilon")) c.epsilon = j.at("epsilon").get<double>();
      if (j.contains("iterations")) c.iterations = j.at("iterations").get<std::size_t>();
      if (j.contains("confidence_k")) c.confidence_k = j.at("confidence_k").get<double>();
      if (j.contains("lambda")) c.lambda = j.at("lambda").get<double>();
      if (j.contains("logit_cap")) {
        const auto& v = j.at("logit_cap");
        if (v.is_string())
          c.logit_cap = v.get<std::string>() == "-inf"
                            ? -std::numeric_limits<double>::infinity()
                            : std::numeric_limits<double>::infinity();
        else
          c.logit_cap = v.get<double>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad attack config json: ") + e.what());
    }
    return c;
  }
};

/// One row per executed iteration: the state after that iteration's update.
struct TraceRecord {
  std::size_t iter = 0;        // 1-based update index
  double max_logit = 0.0;
  double target_logit = 0.0;
  double confidence = 0.0;     // max softmax, i.e. confidence of the prediction
  double l2 = 0.0;             // distance to the original image
  bool success = false;        // prediction == target at this iterate
};

struct AttackTrace {
  std::vector<TraceRecord> records;

  // Not serialized: raw CW margin loss per iteration, kept for diagnostics.
  std::vector<double> margin_loss;
};

struct AdversarialExample {
  Tensor original;
  Tensor perturbed;
  std::size_t target = 0;
  Tensor final_logits;
  AttackTrace trace;
  bool success = false;
};

// ---------------------------------------------------------------------------

namespace detail {

inline void require_box(const Tensor& x, const char* who) {
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!(x[i] >= 0.0 && x[i] <= 1.0))
      throw DataError(std::string(who) + ": input pixel " + std::to_string(i) + " is " +
                      format_double(x[i]) + ", outside [0,1]");
}

inline void require_target(const Network& net, std::size_t c) {
  if (c >= net.spec().num_classes)
    throw IndexError("target class " + std::to_string(c) + " out of range for M=" +
                     std::to_string(net.spec().num_classes));
}

inline TraceRecord trace_record(std::size_t iter, const LogitVector& u, std::size_t target,
                                const Tensor& cur, const Tensor& original) {
  TraceRecord r;
  r.iter = iter;
  r.max_logit = u.max_value();
  r.target_logit = u[target];
  r.confidence = max_softmax(u);
  r.l2 = l2_distance(cur, original);
  r.success = u.argmax() == target;
  return r;
}

}  // namespace detail

/// Eq.-(1) classification loss: max(max{g_i : i != c} - g_c, -K).
inline double cw_loss(const LogitVector& logits, std::size_t c, double k) {
  if (c >= logits.size())
    throw IndexError("cw_loss: class " + std::to_string(c) + " out of range");
  if (!(k >= 0.0)) throw ConfigError("cw_loss: K must be >= 0");
  return std::max(logits[logits.runner_up(c)] - logits[c], -k);
}

/// One targeted fast-gradient-sign update:
/// clip_{[0,1]}(x - alpha * sign(grad_x CE(g(x), c))), with sign(0) = 0.
inline Tensor fgs_step(const Network& net, const Tensor& x, std::size_t c, double alpha_step) {
  detail::require_box(x, "fgs_step");
  detail::require_target(net, c);
  if (!(alpha_step > 0.0)) throw ConfigError("fgs_step: alpha_step must be > 0");

  ForwardResult f = net.forward(x);
  const int obj = f.tape.cross_entropy(f.logits_id, c);
  const Gradients g = f.tape.backward(obj);
  const Tensor& gx = g.at(f.input_id);
  if (!gx.is_finite()) throw NumericError("fgs_step: non-finite input gradient");

  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double s = gx[i] > 0.0 ? 1.0 : (gx[i] < 0.0 ? -1.0 : 0.0);
    out[i] = std::clamp(out[i] - alpha_step * s, 0.0, 1.0);
  }
  return out;
}

/// Single signed-gradient step packaged as a one-row attack. The epsilon
/// budget is irrelevant here; only alpha_step applies.
inline AdversarialExample fgs_attack(const Network& net, const Tensor& x,
                                     const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.method != AttackMethod::kFgs)
    throw ConfigError("fgs_attack called with method " + attack_method_name(cfg.method));

  AdversarialExample ex;
  ex.original = x;
  ex.target = cfg.target;
  ex.perturbed = fgs_step(net, x, cfg.target, cfg.alpha_step);
  const LogitVector u = net.logits(ex.perturbed);
  if (!u.is_finite()) throw NumericError("fgs_attack: non-finite logits after the step");
  ex.final_logits = Tensor({net.spec().num_classes}, u.values());
  ex.trace.records.push_back(detail::trace_record(1, u, cfg.target, ex.perturbed, x));
  ex.success = ex.trace.records.back().success;
  return ex;
}

/// Iterated FGS under the per-pixel epsilon ball around the original image.
/// Every iterate satisfies both the ball and the [0,1] box.
inline AdversarialExample ifgs_attack(const Network& net, const Tensor& x,
                                      const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.method != AttackMethod::kIfgs)
    throw ConfigError("ifgs_attack called with method " + attack_method_name(cfg.method));
  detail::require_box(x, "ifgs_attack");
  detail::require_target(net, cfg.target);

  AdversarialExample ex;
  ex.original = x;
  ex.target = cfg.target;

  Tensor cur = x;
  ForwardResult f = net.forward(cur);
  for (std::size_t n = 1; n <= cfg.iterations; ++n) {
    const int obj = f.tape.cross_entropy(f.logits_id, cfg.target);
    const Gradients g = f.tape.backward(obj);
    const Tensor& gx = g.at(f.input_id);
    if (!gx.is_finite())
      throw NumericError("ifgs_attack: non-finite gradient at iteration " + std::to_string(n));

    for (std::size_t i = 0; i < cur.size(); ++i) {
      const double s = gx[i] > 0.0 ? 1.0 : (gx[i] < 0.0 ? -1.0 : 0.0);
      double v = cur[i] - cfg.alpha_step * s;
      v = std::clamp(v, x[i] - cfg.epsilon, x[i] + cfg.epsilon);  // Clip_{X,eps}
      cur[i] = std::clamp(v, 0.0, 1.0);
    }

    f = net.forward(cur);
    const LogitVector u = f.logits();
    if (!u.is_finite())
      throw NumericError("ifgs_attack: non-finite logits at iteration " + std::to_string(n));
    ex.trace.records.push_back(detail::trace_record(n, u, cfg.target, cur, x));
  }

  ex.perturbed = cur;
  ex.final_logits = Tensor({net.spec().num_classes}, f.logits().values());
  ex.success = ex.trace.records.back().success;
  return ex;
}

namespace detail {

/// Shared CW-L2 engine: plain gradient descent on ||x'-x||^2 + lambda*cwloss,
/// box projection each step. With a cap, any update whose target logit would
/// exceed it is rejected and the previous iterate is kept.
inline AdversarialExample cw_engine(const Network& net, const Tensor& x,
                                    const AttackConfig& cfg, std::optional<double> cap) {
  require_box(x, "cw_l2_attack");
  require_target(net, cfg.target);

  AdversarialExample ex;
  ex.original = x;
  ex.target = cfg.target;

  Tensor cur = x;  // delta initialized to zero
  ForwardResult f = net.forward(cur);
  if (cap.has_value() && f.logits()[cfg.target] > *cap) {
    // No iterate can ever satisfy the cap: even the unperturbed image is over.
    ex.perturbed = cur;
    ex.final_logits = Tensor({net.spec().num_classes}, f.logits().values());
    ex.success = false;
    TraceRecord frozen = trace_record(0, f.logits(), cfg.target, cur, x);
    for (std::size_t n = 1; n <= cfg.iterations; ++n) {
      frozen.iter = n;
      ex.trace.records.push_back(frozen);
      ex.trace.margin_loss.push_back(cw_loss(f.logits(), cfg.target, cfg.confidence_k));
    }
    return ex;
  }

  // Best iterate: lowest L2 among those achieving loss == -K; ties earliest.
  bool have_best = false;
  double best_l2 = 0.0;
  Tensor best = cur;
  Tensor best_logits;

  for (std::size_t n = 1; n <= cfg.iterations; ++n) {
    const int dist = f.tape.squared_distance(f.input_id, x);
    const int margin = f.tape.cw_margin(f.logits_id, cfg.target, cfg.confidence_k);
    const int obj = f.tape.add_scaled(1.0, dist, cfg.lambda, margin);
    const Gradients g = f.tape.backward(obj);
    const Tensor& gx = g.at(f.input_id);
    if (!gx.is_finite())
      throw NumericError("cw_l2_attack: non-finite gradient at iteration " + std::to_string(n));

    Tensor candidate = cur;
    for (std::size_t i = 0; i < candidate.size(); ++i)
      candidate[i] = std::clamp(candidate[i] - cfg.alpha_step * gx[i], 0.0, 1.0);

    ForwardResult fc = net.forward(candidate);
    const LogitVector uc = fc.logits();
    if (!uc.is_finite())
      throw NumericError("cw_l2_attack: non-finite logits at iteration " + std::to_string(n));

    if (cap.has_value() && uc[cfg.target] > *cap) {
      // Rejected: keep the last iterate under the cap; the trace records the
      // state actually retained at this iteration.
      const LogitVector ukept = f.logits();
      ex.trace.records.push_back(trace_record(n, ukept, cfg.target, cur, x));
      ex.trace.margin_loss.push_back(cw_loss(ukept, cfg.target, cfg.confidence_k));
      continue;
    }

    cur = candidate;
    f = std::move(fc);
    ex.trace.records.push_back(trace_record(n, uc, cfg.target, cur, x));
    const double ml = cw_loss(uc, cfg.target, cfg.confidence_k);
    ex.trace.margin_loss.push_back(ml);

    if (ml == -cfg.confidence_k) {
      const double l2 = ex.trace.records.back().l2;
      if (!have_best || l2 < best_l2) {
        have_best = true;
        best_l2 = l2;
        best = cur;
        best_logits = Tensor({net.spec().num_classes}, uc.values());
      }
    }
  }

  if (have_best) {
    ex.perturbed = std::move(best);
    ex.final_logits = std::move(best_logits);
    ex.success = true;
  } else {
    ex.perturbed = cur;
    ex.final_logits = Tensor({net.spec().num_classes}, f.logits().values());
    ex.success = false;
  }
  return ex;
}

}  // namespace detail

/// CW-style targeted L2 attack (Eq. (1) loss with confidence K). Returns the
/// lowest-L2 iterate that achieved loss == -K, or the final iterate if none did.
inline AdversarialExample cw_l2_attack(const Network& net, const Tensor& x,
                                       const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.method != AttackMethod::kCwL2)
    throw ConfigError("cw_l2_attack called with method " + attack_method_name(cfg.method));
  return detail::cw_engine(net, x, cfg, std::nullopt);
}

/// CW-L2 with a hard ceiling on the target-class logit: updates that would
/// push the target logit over the cap are rejected, so the returned example
/// always satisfies target_logit <= cap. An unreachable cap yields a failed
/// attack, never an error.
inline AdversarialExample logit_capped_attack(const Network& net, const Tensor& x,
                                              const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.method != AttackMethod::kCwL2LogitCapped)
    throw ConfigError("logit_capped_attack called with method " + attack_method_name(cfg.method));
  return detail::cw_engine(net, x, cfg, cfg.logit_cap);
}

// ---------------------------------------------------------------------------
// Trace CSV (the Fig. 2 artifact): iter,max_logit,target_logit,confidence,l2,success

inline std::string attack_trace_csv(const AttackTrace& trace) {
  if (trace.records.empty()) throw DataError("cannot export an empty trace");
  std::string out = "iter,max_logit,target_logit,confidence,l2,success\n";
  for (const TraceRecord& r : trace.records)
    out += std::to_string(r.iter) + "," + format_double(r.max_logit) + "," +
           format_double(r.target_logit) + "," + format_double(r.confidence) + "," +
           format_double(r.l2) + "," + (r.success ? "1" : "0") + "\n";
  return out;
}

inline void attack_trace_export(const AttackTrace& trace, const std::filesystem::path& path) {
  write_text_file(path, attack_trace_csv(trace));
}

inline AttackTrace attack_trace_import(const std::filesystem::path& path) {
  const std::vector<std::string> lines = read_lines(path);
  if (lines.empty() || lines[0] != "iter,max_logit,target_logit,confidence,l2,success")
    throw FormatError("trace csv " + path.string() + " has a bad or missing header");
  AttackTrace trace;
  for (std::size_t li = 1; li < lines.size(); ++li) {
    if (lines[li].empty()) continue;
    const std::vector<std::string> fields = split_csv_row(lines[li]);
    if (fields.size() != 6)
      throw FormatError("trace csv row " + std::to_string(li) + " has " +
                        std::to_string(fields.size()) + " fields, expected 6");
    TraceRecord r;
    r.iter = static_cast<std::size_t>(std::stoull(fields[0]));
    r.max_logit = parse_double(fields[1]);
    r.target_logit = parse_double(fields[2]);
    r.confidence = parse_double(fields[3]);
    r.l2 = parse_double(fields[4]);
    if (fields[5] != "0" && fields[5] != "1")
      throw FormatError("trace csv row " + std::to_string(li) + " has bad success flag '" +
                        fields[5] + "'");
    r.success = fields[5] == "1";
    trace.records.push_back(r);
  }
  if (trace.records.empty())
    throw FormatError("trace csv " + path.string() + " has no data rows");
  return trace;
}

// ---------------------------------------------------------------------------
// Adversarial-example persistence: raw f64 blob (original then perturbed)
// plus a JSON sidecar carrying target, config, and final logits.

inline void save_adversarial_example(const AdversarialExample& ex, const AttackConfig& cfg,
                                     const std::filesystem::path& blob_path,
                                     const std::filesystem::path& sidecar_path) {
  ByteWriter w;
  for (double v : ex.original.values()) w.f64(v);
  for (double v : ex.perturbed.values()) w.f64(v);
  write_file_bytes(blob_path, w.bytes());

  nlohmann::json j;
  j["shape"] = ex.original.shape();
  j["target"] = ex.target;
  j["config"] = cfg.to_json();
  j["final_logits"] = ex.final_logits.values();
  j["success"] = ex.success;
  write_text_file(sidecar_path, j.dump(2) + "\n");
}

struct LoadedAdversarialExample {
  AdversarialExample example;  // trace not persisted here; see attack_trace_export
  AttackConfig config;
};

inline LoadedAdversarialExample load_adversarial_example(
    const std::filesystem::path& blob_path, const std::filesystem::path& sidecar_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(sidecar_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad adversarial sidecar " + sidecar_path.string() + ": " + e.what());
  }
  LoadedAdversarialExample out;
  std::vector<std::size_t> shape;
  try {
    shape = j.at("shape").get<std::vector<std::size_t>>();
    out.example.target = j.at("target").get<std::size_t>();
    out.config = AttackConfig::from_json(j.at("config"));
    out.example.final_logits =
        Tensor({j.at("final_logits").size()}, j.at("final_logits").get<std::vector<double>>());
    out.example.success = j.at("success").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad adversarial sidecar " + sidecar_path.string() + ": " + e.what());
  }

  const std::vector<unsigned char> blob = read_file_bytes(blob_path);
  const std::size_t npix = shape_product(shape);
  if (blob.size() != 2 * npix * 8)
    throw FormatError("adversarial blob " + blob_path.string() + " holds " +
                      std::to_string(blob.size()) + " bytes, sidecar implies " +
                      std::to_string(2 * npix * 8));
  ByteReader r(blob);
  std::vector<double> ov(npix), pv(npix);
  for (std::size_t i = 0; i < npix; ++i) ov[i] = r.f64("original image");
  for (std::size_t i = 0; i < npix; ++i) pv[i] = r.f64("perturbed image");
  out.example.original = Tensor(shape, std::move(ov));
  out.example.perturbed = Tensor(shape, std::move(pv));
  return out;
}

}  // namespace logitguard
