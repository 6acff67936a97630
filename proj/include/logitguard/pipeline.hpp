// End-to-end experiment stages behind the CLI verbs: train, calibrate,
// attack, evaluate, masking-demo. One declarative JSON config drives all
// five; every stage writes its artifacts under one output directory and
// records them in a shared manifest so downstream stages can run without
// re-running upstream ones.
//
// Determinism contract: given the same config and seed, each stage rewrites
// byte-identical metric JSON. Wall-clock timestamps appear only in the
// manifest's stage records and the threshold table's timestamp field.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "logitguard/attacks.hpp"
#include "logitguard/checkpoint.hpp"
#include "logitguard/dataset.hpp"
#include "logitguard/detector.hpp"
#include "logitguard/errors.hpp"
#include "logitguard/io.hpp"
#include "logitguard/network.hpp"
#include "logitguard/train.hpp"

namespace logitguard {

// ---------------------------------------------------------------------------
// Run configuration

struct IdxSource {
  std::filesystem::path train_images;
  std::filesystem::path train_labels;
  std::filesystem::path test_images;
  std::filesystem::path test_labels;
};

struct SynthSource {
  SynthSpec base;               // per_class here is the train count
  std::size_t side = 0;         // image side; 0 for the 2-D source
  std::size_t test_per_class = 0;
  bool two_d = false;
};

struct DetectorSettings {
  bool auto_k = true;     // calibrate k to k_min
  double k = 3.0;         // used when auto_k is false
  double resolution = 0.1;
};

/// One batch of attacks: the method configuration plus how many source
/// samples to attack per target class. `target` inside `config` is ignored;
/// the stage loops it over every class.
struct AttackPlan {
  std::string name;        // directory name under attacks/; unique per run
  AttackConfig config;
  std::size_t per_class = 50;
  bool cap_from_thresholds = false;  // capped variant: cap = T_c per class
};

struct MaskingSettings {
  std::string mode = "auto";  // auto | cw_trace | boundary
  // cw_trace mode: CW runs on correctly classified test samples.
  std::size_t count = 20;
  std::size_t steps = 100;
  double confidence_k = 40.0;
  double alpha_step = 0.01;
  double lambda = 1.0;
  // boundary mode: scan line for the 2-D toy.
  double x2 = 0.5;
  double x1_lo = -40.0;
  double x1_hi = 40.0;
  std::size_t scan_steps = 400;
};

namespace detail {

inline const nlohmann::json& need(const nlohmann::json& j, const char* key, const char* ctx) {
  if (!j.is_object() || !j.contains(key))
    throw ConfigError(std::string(ctx) + " is missing \"" + key + "\"");
  return j.at(key);
}

}  // namespace detail

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  std::size_t workers = 1;

  // Exactly one dataset source.
  std::optional<IdxSource> idx;
  std::optional<SynthSource> synth;

  NetworkSpec network;
  TrainConfig train;
  std::vector<AttackPlan> attacks;
  DetectorSettings detector;
  MaskingSettings masking;

  static RunConfig from_json(const nlohmann::json& j) {
    RunConfig cfg;
    try {
      cfg.seed = j.value("seed", std::uint64_t{0});
      if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
      cfg.workers = j.value("workers", std::size_t{1});

      const nlohmann::json& dj = detail::need(j, "dataset", "config");
      const std::string kind = detail::need(dj, "kind", "dataset").get<std::string>();
      if (kind == "idx") {
        IdxSource src;
        src.train_images = detail::need(dj, "train_images", "idx dataset").get<std::string>();
        src.train_labels = detail::need(dj, "train_labels", "idx dataset").get<std::string>();
        src.test_images = detail::need(dj, "test_images", "idx dataset").get<std::string>();
        src.test_labels = detail::need(dj, "test_labels", "idx dataset").get<std::string>();
        cfg.idx = src;
      } else if (kind == "synth" || kind == "synth2d") {
        SynthSource src;
        src.two_d = kind == "synth2d";
        src.base.seed = cfg.seed;
        src.base.per_class = detail::need(dj, "per_class", "synth dataset").get<std::size_t>();
        src.test_per_class = detail::need(dj, "test_per_class", "synth dataset").get<std::size_t>();
        src.base.separation = dj.value("separation", 4.0);
        if (src.two_d) {
          src.base.num_classes = 2;
          src.base.input_shape = {2};
        } else {
          src.base.num_classes = detail::need(dj, "num_classes", "synth dataset").get<std::size_t>();
          src.side = detail::need(dj, "side", "synth dataset").get<std::size_t>();
          src.base.input_shape = {1, src.side, src.side};
        }
        cfg.synth = src;
      } else {
        throw ConfigError("dataset kind \"" + kind + "\" is not one of idx|synth|synth2d");
      }

      const nlohmann::json& nj = detail::need(j, "network", "config");
      if (nj.contains("preset")) {
        const std::string preset = nj.at("preset").get<std::string>();
        if (preset == "lenet5")
          cfg.network = NetworkSpec::lenet5();
        else if (preset == "toy2d")
          cfg.network = NetworkSpec::toy2d();
        else
          throw ConfigError("unknown network preset \"" + preset + "\"");
      } else {
        cfg.network = NetworkSpec::from_json(nj);
      }

      cfg.train.seed = cfg.seed;
      if (j.contains("train")) {
        const nlohmann::json& tj = j.at("train");
        cfg.train.learning_rate = tj.value("learning_rate", cfg.train.learning_rate);
        cfg.train.batch_size = tj.value("batch_size", cfg.train.batch_size);
        cfg.train.epochs = tj.value("epochs", cfg.train.epochs);
        cfg.train.seed = tj.value("seed", cfg.seed);
        cfg.train.momentum = tj.value("momentum", cfg.train.momentum);
        if (tj.contains("optimizer"))
          cfg.train.optimizer = optimizer_from_name(tj.at("optimizer").get<std::string>());
      }

      if (j.contains("attacks")) {
        for (const nlohmann::json& aj : j.at("attacks")) {
          AttackPlan plan;
          nlohmann::json cj = aj;
          cj.erase("name");
          cj.erase("per_class");
          // The attack stage loops the target over every class; a fixed
          // target in the config would be ignored anyway.
          if (!cj.contains("target")) cj["target"] = 0;
          if (cj.contains("logit_cap") && cj.at("logit_cap").is_string() &&
              cj.at("logit_cap").get<std::string>() == "threshold") {
            plan.cap_from_thresholds = true;
            // Placeholder so the config validates; the stage substitutes T_c.
            cj["logit_cap"] = "inf";
          }
          plan.config = AttackConfig::from_json(cj);
          plan.name = aj.value("name", attack_method_name(plan.config.method));
          plan.per_class = aj.value("per_class", std::size_t{50});
          cfg.attacks.push_back(std::move(plan));
        }
      }

      if (j.contains("detector")) {
        const nlohmann::json& kj = j.at("detector");
        if (kj.contains("k")) {
          if (kj.at("k").is_string()) {
            if (kj.at("k").get<std::string>() != "auto")
              throw ConfigError("detector k must be a number or \"auto\"");
            cfg.detector.auto_k = true;
          } else {
            cfg.detector.auto_k = false;
            cfg.detector.k = kj.at("k").get<double>();
          }
        }
        cfg.detector.resolution = kj.value("resolution", 0.1);
      }

      if (j.contains("masking")) {
        const nlohmann::json& mj = j.at("masking");
        cfg.masking.mode = mj.value("mode", std::string("auto"));
        cfg.masking.count = mj.value("count", std::size_t{20});
        cfg.masking.steps = mj.value("steps", std::size_t{100});
        cfg.masking.confidence_k = mj.value("confidence_k", 40.0);
        cfg.masking.alpha_step = mj.value("alpha_step", 0.01);
        cfg.masking.lambda = mj.value("lambda", 1.0);
        cfg.masking.x2 = mj.value("x2", 0.5);
        cfg.masking.x1_lo = mj.value("x1_lo", -40.0);
        cfg.masking.x1_hi = mj.value("x1_hi", 40.0);
        cfg.masking.scan_steps = mj.value("scan_steps", std::size_t{400});
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("bad config: ") + e.what());
    }
    return cfg;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["seed"] = seed;
    j["out_dir"] = out_dir.string();
    j["workers"] = workers;
    if (idx) {
      j["dataset"] = {{"kind", "idx"},
                      {"train_images", idx->train_images.string()},
                      {"train_labels", idx->train_labels.string()},
                      {"test_images", idx->test_images.string()},
                      {"test_labels", idx->test_labels.string()}};
    } else if (synth) {
      nlohmann::json dj;
      dj["kind"] = synth->two_d ? "synth2d" : "synth";
      dj["per_class"] = synth->base.per_class;
      dj["test_per_class"] = synth->test_per_class;
      dj["separation"] = synth->base.separation;
      if (!synth->two_d) {
        dj["num_classes"] = synth->base.num_classes;
        dj["side"] = synth->side;
      }
      j["dataset"] = dj;
    }
    j["network"] = network.to_json();
    j["train"] = {{"learning_rate", train.learning_rate},
                  {"batch_size", train.batch_size},
                  {"epochs", train.epochs},
                  {"seed", train.seed},
                  {"optimizer", optimizer_name(train.optimizer)},
                  {"momentum", train.momentum}};
    j["attacks"] = nlohmann::json::array();
    for (const AttackPlan& p : attacks) {
      nlohmann::json aj = p.config.to_json();
      aj["name"] = p.name;
      aj["per_class"] = p.per_class;
      if (p.cap_from_thresholds) aj["logit_cap"] = "threshold";
      j["attacks"].push_back(aj);
    }
    j["detector"] = nlohmann::json::object();
    if (detector.auto_k)
      j["detector"]["k"] = "auto";
    else
      j["detector"]["k"] = detector.k;
    j["detector"]["resolution"] = detector.resolution;
    j["masking"] = {{"mode", masking.mode},
                    {"count", masking.count},
                    {"steps", masking.steps},
                    {"confidence_k", masking.confidence_k},
                    {"alpha_step", masking.alpha_step},
                    {"lambda", masking.lambda},
                    {"x2", masking.x2},
                    {"x1_lo", masking.x1_lo},
                    {"x1_hi", masking.x1_hi},
                    {"scan_steps", masking.scan_steps}};
    return j;
  }

  /// Everything checkable without touching the network or datasets. Runs
  /// before any side effect, so an invalid config never leaves artifacts.
  void validate() const {
    if (out_dir.empty()) throw ConfigError("output directory is not set");
    if (idx.has_value() == synth.has_value())
      throw ConfigError("config needs exactly one dataset source");
    if (idx) {
      for (const auto& p : {idx->train_images, idx->train_labels, idx->test_images,
                            idx->test_labels})
        if (!std::filesystem::exists(p))
          throw ConfigError("dataset file not found: " + p.string());
    } else {
      synth->base.validate();
      if (synth->test_per_class < 1) throw ConfigError("synth test_per_class must be >= 1");
      if (!synth->two_d && synth->side == 0) throw ConfigError("synth side must be >= 1");
      if (synth->base.input_shape != network.input_shape)
        throw ConfigError("synth dataset shape " + Tensor::zeros(synth->base.input_shape).shape_string() +
                          " does not match the network input " +
                          Tensor::zeros(network.input_shape).shape_string());
      if (synth->base.num_classes != network.num_classes)
        throw ConfigError("synth dataset has " + std::to_string(synth->base.num_classes) +
                          " classes, network emits " + std::to_string(network.num_classes));
    }
    network.validate();
    train.validate();
    for (const AttackPlan& p : attacks) {
      if (p.name.empty()) throw ConfigError("attack entry has an empty name");
      if (p.per_class < 1) throw ConfigError("attack \"" + p.name + "\" needs per_class >= 1");
      p.config.validate();
      if (p.cap_from_thresholds && p.config.method != AttackMethod::kCwL2LogitCapped)
        throw ConfigError("attack \"" + p.name +
                          "\": logit_cap \"threshold\" needs method cw_l2_logit_capped");
      std::size_t same = 0;
      for (const AttackPlan& q : attacks)
        if (q.name == p.name) ++same;
      if (same != 1) throw ConfigError("attack name \"" + p.name + "\" is not unique");
    }
    if (!(detector.resolution > 0.0))
      throw ConfigError("detector resolution must be > 0, got " +
                        format_double(detector.resolution));
    if (!detector.auto_k && !(detector.k >= 0.0))
      throw ConfigError("detector k must be >= 0, got " + format_double(detector.k));
    if (masking.mode != "auto" && masking.mode != "cw_trace" && masking.mode != "boundary")
      throw ConfigError("masking mode \"" + masking.mode + "\" is not one of auto|cw_trace|boundary");
    if (masking.count < 1 || masking.steps < 1 || masking.scan_steps < 1)
      throw ConfigError("masking count, steps, and scan_steps must all be >= 1");
    if (!(masking.alpha_step > 0.0)) throw ConfigError("masking alpha_step must be > 0");
    if (!(masking.confidence_k >= 0.0)) throw ConfigError("masking confidence_k must be >= 0");
    if (!(masking.x1_hi > masking.x1_lo)) throw ConfigError("masking needs x1_hi > x1_lo");
  }
};

/// Parses and fully validates a config file. `out_override`, when nonempty,
/// replaces the config's own out_dir (the CLI's --out flag).
inline RunConfig load_run_config(const std::filesystem::path& path,
                                 const std::filesystem::path& out_override = {}) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("config " + path.string() + " is not valid json: " + e.what());
  }
  RunConfig cfg = RunConfig::from_json(j);
  if (!out_override.empty()) cfg.out_dir = out_override;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Shared stage plumbing

struct DatasetPair {
  LabeledDataset train;
  LabeledDataset test;
};

inline DatasetPair load_datasets(const RunConfig& cfg) {
  if (cfg.idx) {
    const std::size_t m = cfg.network.num_classes;
    return {load_idx(cfg.idx->train_images, cfg.idx->train_labels, m, "train"),
            load_idx(cfg.idx->test_images, cfg.idx->test_labels, m, "test")};
  }
  SynthSpec train_spec = cfg.synth->base;
  SynthSpec test_spec = cfg.synth->base;
  test_spec.per_class = cfg.synth->test_per_class;
  if (cfg.synth->two_d)
    return {synth_2d_two_class(train_spec, "train"), synth_2d_two_class(test_spec, "test")};
  return {synth_image_dataset(train_spec, cfg.synth->side, "train"),
          synth_image_dataset(test_spec, cfg.synth->side, "test")};
}

inline std::filesystem::path manifest_path(const RunConfig& cfg) {
  return cfg.out_dir / "manifest.json";
}
inline std::filesystem::path checkpoint_file(const RunConfig& cfg) {
  return cfg.out_dir / "checkpoint.ckpt";
}
inline std::filesystem::path thresholds_file(const RunConfig& cfg) {
  return cfg.out_dir / "thresholds.json";
}
inline std::filesystem::path attack_summary_file(const RunConfig& cfg) {
  return cfg.out_dir / "attacks" / "summary.json";
}

inline std::string iso8601_utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

namespace detail {

inline nlohmann::json read_manifest(const RunConfig& cfg) {
  const std::filesystem::path p = manifest_path(cfg);
  if (!std::filesystem::exists(p)) {
    nlohmann::json m;
    m["config"] = nullptr;
    m["checkpoint_id"] = nullptr;
    m["threshold_table_id"] = nullptr;
    m["stages"] = nlohmann::json::object();
    return m;
  }
  try {
    return nlohmann::json::parse(read_file_bytes(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + p.string() + " is not valid json: " + e.what());
  }
}

inline void write_manifest(const RunConfig& cfg, const nlohmann::json& m) {
  write_text_file(manifest_path(cfg), m.dump(2) + "\n");
}

/// Marks the stage as running. A crash mid-stage leaves this record behind,
/// so an aborted run is visible as status != "complete".
inline void stage_begin(const RunConfig& cfg, const std::string& stage) {
  std::filesystem::create_directories(cfg.out_dir);
  nlohmann::json m = read_manifest(cfg);
  m["config"] = cfg.to_json();
  m["stages"][stage] = {{"status", "running"},
                        {"timestamp", iso8601_utc_now()},
                        {"artifacts", nlohmann::json::array()},
                        {"metrics", nullptr}};
  write_manifest(cfg, m);
}

inline void stage_complete(const RunConfig& cfg, const std::string& stage,
                           const nlohmann::json& metrics,
                           const std::vector<std::string>& artifacts,
                           const nlohmann::json& toplevel = nlohmann::json::object()) {
  nlohmann::json m = read_manifest(cfg);
  m["stages"][stage] = {{"status", "complete"},
                        {"timestamp", iso8601_utc_now()},
                        {"artifacts", artifacts},
                        {"metrics", metrics}};
  for (const auto& [key, value] : toplevel.items()) m[key] = value;
  write_manifest(cfg, m);
}

/// Bounded worker pool over an index range. Results must be written to
/// per-index slots by the body; the pool adds no ordering of its own. The
/// first exception wins and is rethrown after all workers drain.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t)>& body) {
  if (n == 0) return;
  workers = std::clamp<std::size_t>(workers, 1, std::min<std::size_t>(n, 8));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  auto drain = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        body(i);
      } catch (...) {
        const std::lock_guard<std::mutex> lock(error_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(drain);
  for (std::thread& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline LoadedCheckpoint require_checkpoint(const RunConfig& cfg, const char* stage) {
  const std::filesystem::path p = checkpoint_file(cfg);
  if (!std::filesystem::exists(p))
    throw DependencyError(std::string(stage) + " needs a checkpoint at " + p.string() +
                          "; run the train stage first");
  return load_checkpoint(p);
}

inline ThresholdTable require_thresholds(const RunConfig& cfg, const char* stage) {
  const std::filesystem::path p = thresholds_file(cfg);
  if (!std::filesystem::exists(p))
    throw DependencyError(std::string(stage) + " needs a threshold table at " + p.string() +
                          "; run the calibrate stage first");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("threshold table " + p.string() + " is not valid json: " + e.what());
  }
  return ThresholdTable::from_json(j);
}

inline nlohmann::json require_attack_summary(const RunConfig& cfg, const char* stage) {
  const std::filesystem::path p = attack_summary_file(cfg);
  if (!std::filesystem::exists(p))
    throw DependencyError(std::string(stage) + " needs attack artifacts at " + p.string() +
                          "; run the attack stage first");
  try {
    return nlohmann::json::parse(read_file_bytes(p));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("attack summary " + p.string() + " is not valid json: " + e.what());
  }
}

inline void write_metrics(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages

/// Trains the configured network, writes checkpoint.ckpt and
/// train_report.json, and records both in the manifest.
inline nlohmann::json cmd_train(const RunConfig& cfg) {
  detail::stage_begin(cfg, "train");
  const DatasetPair data = load_datasets(cfg);

  Network net = build_classifier(cfg.network, Rng::derive(cfg.seed, fnv1a("weight-init")));
  const TrainReport report = train(net, data.train, cfg.train);
  const double test_accuracy = evaluate_accuracy(net, data.test);

  CheckpointMeta meta;
  meta.seed = cfg.train.seed;
  meta.epochs = cfg.train.epochs;
  meta.final_accuracy = report.final_accuracy;
  save_checkpoint(net, meta, checkpoint_file(cfg));

  nlohmann::json metrics = report.to_json();
  metrics["test_accuracy"] = test_accuracy;
  metrics["train_dataset_id"] = dataset_id(data.train);
  metrics["test_dataset_id"] = dataset_id(data.test);
  metrics["num_params"] = net.num_params();
  detail::write_metrics(cfg.out_dir / "train_report.json", metrics);

  detail::stage_complete(cfg, "train", metrics, {"checkpoint.ckpt", "train_report.json"},
                         {{"checkpoint_id", checkpoint_id(checkpoint_file(cfg))}});
  return metrics;
}

/// Fits per-class logit profiles on the training split, finds k (either
/// k_min or the fixed configured value), and writes thresholds.json,
/// distribution.csv, and calibrate_metrics.json.
inline nlohmann::json cmd_calibrate(const RunConfig& cfg) {
  const LoadedCheckpoint ckpt = detail::require_checkpoint(cfg, "calibrate");
  detail::stage_begin(cfg, "calibrate");
  const DatasetPair data = load_datasets(cfg);
  const Network& net = ckpt.net;

  const std::vector<SamplePrediction> train_preds = predict_dataset(net, data.train);
  const std::vector<SamplePrediction> test_preds = predict_dataset(net, data.test);
  const std::vector<ClassLogitProfile> profiles =
      fit_all_profiles(train_preds, cfg.network.num_classes);

  const double k_min =
      find_k_min(profiles, train_preds, test_preds, cfg.detector.resolution);
  const double k_used = cfg.detector.auto_k ? k_min : cfg.detector.k;

  ThresholdTable table = fit_thresholds(profiles, k_used);
  table.k_min = k_min;
  table.model_id = checkpoint_id(checkpoint_file(cfg));
  table.dataset_id = dataset_id(data.train);
  table.timestamp = iso8601_utc_now();
  write_text_file(thresholds_file(cfg), table.to_json().dump(2) + "\n");
  export_distribution_data(net, data.train, data.test, table, cfg.out_dir / "distribution.csv");

  // Genuine flag rate at the table's k, split by population.
  auto flagged_count = [&table](const std::vector<SamplePrediction>& preds) {
    std::size_t flagged = 0;
    for (const SamplePrediction& p : preds)
      if (p.max_logit > table.entry(p.predicted).threshold) ++flagged;
    return flagged;
  };
  const std::size_t train_flagged = flagged_count(train_preds);
  const std::size_t test_flagged = flagged_count(test_preds);

  nlohmann::json metrics;
  metrics["k"] = k_used;
  metrics["k_min"] = k_min;
  metrics["resolution"] = cfg.detector.resolution;
  metrics["train_samples"] = train_preds.size();
  metrics["test_samples"] = test_preds.size();
  metrics["train_flagged"] = train_flagged;
  metrics["test_flagged"] = test_flagged;
  metrics["genuine_flag_rate"] =
      static_cast<double>(train_flagged + test_flagged) /
      static_cast<double>(train_preds.size() + test_preds.size());
  nlohmann::json classes = nlohmann::json::array();
  for (const ThresholdEntry& e : table.entries)
    classes.push_back({{"class", e.class_index},
                       {"Q1", e.q1},
                       {"Q3", e.q3},
                       {"IQR", e.iqr},
                       {"T", e.threshold}});
  metrics["classes"] = classes;
  detail::write_metrics(cfg.out_dir / "calibrate_metrics.json", metrics);

  const std::string table_id = hex_id(fnv1a(table.to_json().dump()));
  detail::stage_complete(cfg, "calibrate", metrics,
                         {"thresholds.json", "distribution.csv", "calibrate_metrics.json"},
                         {{"threshold_table_id", table_id}});
  return metrics;
}

namespace detail {

/// Deterministic source pool for attacks on target class c: the first `n`
/// test samples whose true label differs from c.
inline std::vector<std::size_t> attack_sources(const LabeledDataset& test, std::size_t target,
                                               std::size_t n) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < test.size() && out.size() < n; ++i)
    if (test.labels[i] != target) out.push_back(i);
  if (out.empty())
    throw DataError("no test samples outside class " + std::to_string(target) +
                    " to attack from");
  return out;
}

inline AdversarialExample run_one_attack(const Network& net, const Tensor& x,
                                         const AttackConfig& cfg) {
  switch (cfg.method) {
    case AttackMethod::kFgs: return fgs_attack(net, x, cfg);
    case AttackMethod::kIfgs: return ifgs_attack(net, x, cfg);
    case AttackMethod::kCwL2: return cw_l2_attack(net, x, cfg);
    case AttackMethod::kCwL2LogitCapped: return logit_capped_attack(net, x, cfg);
  }
  throw ConfigError("unknown attack method");
}

}  // namespace detail

/// Runs every configured attack plan: per target class, per source sample.
/// Individual attack errors are recorded and the run continues; artifacts
/// land under attacks/<plan-name>/ with a machine-readable summary.json.
inline nlohmann::json cmd_attack(const RunConfig& cfg) {
  const LoadedCheckpoint ckpt = detail::require_checkpoint(cfg, "attack");
  if (cfg.attacks.empty()) throw ConfigError("attack stage configured with no attack entries");
  std::optional<ThresholdTable> table;
  for (const AttackPlan& plan : cfg.attacks)
    if (plan.cap_from_thresholds && !table)
      table = detail::require_thresholds(cfg, "attack");

  detail::stage_begin(cfg, "attack");
  const DatasetPair data = load_datasets(cfg);
  const Network& net = ckpt.net;
  const std::size_t m = cfg.network.num_classes;

  struct Job {
    const AttackPlan* plan;
    std::size_t cls;
    std::size_t source;
    std::string stem;  // artifact base name under the plan directory
  };
  std::vector<Job> jobs;
  for (const AttackPlan& plan : cfg.attacks) {
    std::filesystem::create_directories(cfg.out_dir / "attacks" / plan.name);
    for (std::size_t c = 0; c < m; ++c) {
      const std::vector<std::size_t> sources =
          detail::attack_sources(data.test, c, plan.per_class);
      for (std::size_t s : sources) {
        char stem[64];
        std::snprintf(stem, sizeof stem, "c%02zu_s%04zu", c, s);
        jobs.push_back({&plan, c, s, stem});
      }
    }
  }

  struct Outcome {
    bool errored = false;
    std::string error;
    bool success = false;
    double target_logit = 0.0;
    double l2 = 0.0;
  };
  std::vector<Outcome> outcomes(jobs.size());

  detail::parallel_for(jobs.size(), cfg.workers, [&](std::size_t i) {
    const Job& job = jobs[i];
    AttackConfig acfg = job.plan->config;
    acfg.target = job.cls;
    if (job.plan->cap_from_thresholds) acfg.logit_cap = table->entry(job.cls).threshold;
    const std::filesystem::path dir = cfg.out_dir / "attacks" / job.plan->name;
    try {
      const AdversarialExample ex = detail::run_one_attack(net, data.test.images[job.source], acfg);
      save_adversarial_example(ex, acfg, dir / (job.stem + ".bin"), dir / (job.stem + ".json"));
      attack_trace_export(ex.trace, dir / (job.stem + "_trace.csv"));
      Outcome& out = outcomes[i];
      out.success = ex.success;
      out.target_logit = LogitVector(ex.final_logits)[job.cls];
      out.l2 = l2_distance(ex.perturbed, ex.original);
    } catch (const Error& e) {
      outcomes[i].errored = true;
      outcomes[i].error = e.what();
    }
  });

  nlohmann::json entries = nlohmann::json::array();
  std::size_t total = 0, total_success = 0, total_error = 0;
  for (const AttackPlan& plan : cfg.attacks) {
    nlohmann::json per_class = nlohmann::json::array();
    std::size_t plan_n = 0, plan_success = 0, plan_error = 0;
    for (std::size_t c = 0; c < m; ++c) {
      nlohmann::json runs = nlohmann::json::array();
      std::size_t n = 0, successes = 0, errors = 0;
      double max_success_logit = 0.0, max_any_logit = 0.0;
      bool have_success = false, have_any = false;
      for (std::size_t i = 0; i < jobs.size(); ++i) {
        if (jobs[i].plan != &plan || jobs[i].cls != c) continue;
        const Outcome& out = outcomes[i];
        ++n;
        nlohmann::json run;
        run["source"] = jobs[i].source;
        if (out.errored) {
          ++errors;
          run["error"] = out.error;
        } else {
          run["success"] = out.success;
          run["target_logit"] = out.target_logit;
          run["l2"] = out.l2;
          run["example"] = "attacks/" + plan.name + "/" + jobs[i].stem + ".bin";
          run["sidecar"] = "attacks/" + plan.name + "/" + jobs[i].stem + ".json";
          run["trace"] = "attacks/" + plan.name + "/" + jobs[i].stem + "_trace.csv";
          if (!have_any || out.target_logit > max_any_logit) max_any_logit = out.target_logit;
          have_any = true;
          if (out.success) {
            ++successes;
            if (!have_success || out.target_logit > max_success_logit)
              max_success_logit = out.target_logit;
            have_success = true;
          }
        }
        runs.push_back(run);
      }
      nlohmann::json cj;
      cj["class"] = c;
      cj["n"] = n;
      cj["successes"] = successes;
      cj["errors"] = errors;
      cj["max_target_logit"] =
          have_success ? nlohmann::json(max_success_logit) : nlohmann::json(nullptr);
      cj["max_target_logit_any"] = have_any ? nlohmann::json(max_any_logit) : nlohmann::json(nullptr);
      cj["runs"] = runs;
      per_class.push_back(cj);
      plan_n += n;
      plan_success += successes;
      plan_error += errors;
    }
    nlohmann::json ej;
    ej["name"] = plan.name;
    ej["method"] = attack_method_name(plan.config.method);
    ej["config"] = plan.config.to_json();
    if (plan.cap_from_thresholds) ej["config"]["logit_cap"] = "threshold";
    ej["per_class"] = per_class;
    ej["n"] = plan_n;
    ej["n_success"] = plan_success;
    ej["n_error"] = plan_error;
    entries.push_back(ej);
    total += plan_n;
    total_success += plan_success;
    total_error += plan_error;
  }

  nlohmann::json metrics;
  metrics["entries"] = entries;
  metrics["n_total"] = total;
  metrics["n_success"] = total_success;
  metrics["n_error"] = total_error;
  detail::write_metrics(attack_summary_file(cfg), metrics);

  detail::stage_complete(cfg, "attack", metrics, {"attacks/summary.json"});
  return metrics;
}

/// Detection over genuine splits and every stored adversarial example.
/// Emits evaluation.json and the figure CSV (genuine boxplot summaries plus
/// per-method per-class adversarial maxima against the thresholds).
inline nlohmann::json cmd_evaluate(const RunConfig& cfg) {
  const LoadedCheckpoint ckpt = detail::require_checkpoint(cfg, "evaluate");
  const ThresholdTable table = detail::require_thresholds(cfg, "evaluate");
  const nlohmann::json summary = detail::require_attack_summary(cfg, "evaluate");

  detail::stage_begin(cfg, "evaluate");
  const DatasetPair data = load_datasets(cfg);
  const Network& net = ckpt.net;
  const std::size_t m = cfg.network.num_classes;

  const std::vector<SamplePrediction> train_preds = predict_dataset(net, data.train);
  const std::vector<SamplePrediction> test_preds = predict_dataset(net, data.test);
  auto flagged_count = [&table](const std::vector<SamplePrediction>& preds) {
    std::size_t flagged = 0;
    for (const SamplePrediction& p : preds)
      if (p.max_logit > table.entry(p.predicted).threshold) ++flagged;
    return flagged;
  };

  nlohmann::json genuine;
  genuine["train_n"] = train_preds.size();
  genuine["train_flagged"] = flagged_count(train_preds);
  genuine["test_n"] = test_preds.size();
  genuine["test_flagged"] = flagged_count(test_preds);
  genuine["flag_rate"] = static_cast<double>(flagged_count(train_preds) + flagged_count(test_preds)) /
                         static_cast<double>(train_preds.size() + test_preds.size());

  std::string fig = distribution_csv(net, data.train, data.test, table);

  nlohmann::json attack_reports = nlohmann::json::array();
  for (const nlohmann::json& entry : summary.at("entries")) {
    const std::string name = entry.at("name").get<std::string>();
    std::size_t n = 0, n_success = 0, n_flagged = 0, n_exceed = 0;
    bool exceed_consistent = true;
    std::vector<double> per_class_max(m, 0.0);
    std::vector<bool> have_max(m, false);

    for (const nlohmann::json& cls : entry.at("per_class")) {
      const std::size_t c = cls.at("class").get<std::size_t>();
      for (const nlohmann::json& run : cls.at("runs")) {
        if (run.contains("error")) continue;
        ++n;
        if (!run.at("success").get<bool>()) continue;
        ++n_success;
        // Re-run detection on the stored final logits, end to end.
        const std::filesystem::path sidecar = cfg.out_dir / run.at("sidecar").get<std::string>();
        const std::filesystem::path blob = cfg.out_dir / run.at("example").get<std::string>();
        const LoadedAdversarialExample ex = load_adversarial_example(blob, sidecar);
        const LogitVector u(ex.example.final_logits);
        const DetectionReport report = detect(u, table);
        const double g = u[c];
        const bool exceeds = g > table.entry(c).threshold;
        if (report.flagged) ++n_flagged;
        if (exceeds) ++n_exceed;
        if (exceeds && !report.flagged) exceed_consistent = false;
        if (!have_max[c] || g > per_class_max[c]) {
          per_class_max[c] = g;
          have_max[c] = true;
        }
      }
    }

    nlohmann::json rj;
    rj["name"] = name;
    rj["method"] = entry.at("method");
    rj["n"] = n;
    rj["n_success"] = n_success;
    rj["n_flagged"] = n_flagged;
    rj["n_exceeding_threshold"] = n_exceed;
    rj["exceeding_all_flagged"] = exceed_consistent;
    rj["flagged_fraction_of_success"] =
        n_success > 0 ? nlohmann::json(static_cast<double>(n_flagged) /
                                       static_cast<double>(n_success))
                      : nlohmann::json(nullptr);

    const bool all_classes_covered =
        std::all_of(have_max.begin(), have_max.end(), [](bool b) { return b; });
    nlohmann::json maxima = nlohmann::json::array();
    for (std::size_t c = 0; c < m; ++c) {
      maxima.push_back(have_max[c] ? nlohmann::json(per_class_max[c]) : nlohmann::json(nullptr));
      if (have_max[c])
        fig += "adv_max," + std::to_string(c) + "," + name + "," +
               format_double(per_class_max[c]) + ",,,,," + "," +
               format_double(table.entry(c).threshold) + "\n";
    }
    rj["per_class_max_logit"] = maxima;

    if (all_classes_covered &&
        std::all_of(per_class_max.begin(), per_class_max.end(), [](double g) { return g > 0.0; })) {
      const CoverageReport cov = coverage_d_adv(table, per_class_max);
      rj["d_adv"] = cov.d_adv;
      rj["d_adv_terms"] = cov.per_class_terms;
    } else {
      rj["d_adv"] = nullptr;
      rj["d_adv_note"] = "needs a successful positive-logit example in every class";
    }
    attack_reports.push_back(rj);
  }

  write_text_file(cfg.out_dir / "fig_detection.csv", fig);

  nlohmann::json metrics;
  metrics["k"] = table.k;
  if (table.k_min) metrics["k_min"] = *table.k_min;
  metrics["genuine"] = genuine;
  metrics["attacks"] = attack_reports;
  detail::write_metrics(cfg.out_dir / "evaluation.json", metrics);

  detail::stage_complete(cfg, "evaluate", metrics, {"evaluation.json", "fig_detection.csv"});
  return metrics;
}

/// Demonstration artifacts for the saturation story: CW per-iteration traces
/// on an image model, or the max-logit/max-softmax boundary scan on the 2-D
/// toy. Mode "auto" picks by input rank.
inline nlohmann::json cmd_masking_demo(const RunConfig& cfg) {
  const LoadedCheckpoint ckpt = detail::require_checkpoint(cfg, "masking-demo");
  detail::stage_begin(cfg, "masking-demo");
  const Network& net = ckpt.net;
  std::filesystem::create_directories(cfg.out_dir / "masking");

  std::string mode = cfg.masking.mode;
  if (mode == "auto")
    mode = cfg.network.input_shape == std::vector<std::size_t>{2} ? "boundary" : "cw_trace";

  nlohmann::json metrics;
  std::vector<std::string> artifacts;

  if (mode == "boundary") {
    const std::vector<BoundaryRow> rows = boundary_scan(
        net, cfg.masking.x2, cfg.masking.x1_lo, cfg.masking.x1_hi, cfg.masking.scan_steps);
    write_text_file(cfg.out_dir / "masking" / "boundary.csv", boundary_scan_csv(rows));
    artifacts.push_back("masking/boundary.csv");

    // Quantify the plateau: over the last quarter of the scan, softmax barely
    // moves while the max logit keeps growing.
    const std::size_t q = rows.size() - rows.size() / 4;
    double logit_delta = 0.0, softmax_delta = 0.0;
    for (std::size_t i = q; i < rows.size(); ++i) {
      logit_delta = std::max(logit_delta, rows[i].max_logit - rows[q - 1].max_logit);
      softmax_delta = std::max(softmax_delta, std::abs(rows[i].max_softmax - rows[q - 1].max_softmax));
    }
    metrics["mode"] = "boundary";
    metrics["rows"] = rows.size();
    metrics["x2"] = cfg.masking.x2;
    metrics["last_quarter_max_logit_growth"] = logit_delta;
    metrics["last_quarter_max_softmax_drift"] = softmax_delta;
  } else {
    const DatasetPair data = load_datasets(cfg);
    const std::size_t m = cfg.network.num_classes;

    // Sources: the first `count` correctly classified test samples.
    std::vector<std::size_t> sources;
    for (std::size_t i = 0; i < data.test.size() && sources.size() < cfg.masking.count; ++i)
      if (net.logits(data.test.images[i]).argmax() == data.test.labels[i]) sources.push_back(i);
    if (sources.empty())
      throw DataError("masking demo found no correctly classified test samples");

    struct RunOut {
      nlohmann::json summary;
      AttackTrace trace;
    };
    std::vector<RunOut> outs(sources.size());

    detail::parallel_for(sources.size(), cfg.workers, [&](std::size_t i) {
      const std::size_t src = sources[i];
      AttackConfig acfg;
      acfg.method = AttackMethod::kCwL2;
      acfg.target = (data.test.labels[src] + 1) % m;
      acfg.alpha_step = cfg.masking.alpha_step;
      acfg.iterations = cfg.masking.steps;
      acfg.confidence_k = cfg.masking.confidence_k;
      acfg.lambda = cfg.masking.lambda;
      const AdversarialExample ex = cw_l2_attack(net, data.test.images[src], acfg);

      // First iteration at which the prediction saturates (>= 0.999), the max
      // logit there versus at the end, and how far confidence ever dips after.
      std::optional<std::size_t> saturation;
      double logit_at_saturation = 0.0, min_conf_after = 1.0;
      for (std::size_t r = 0; r < ex.trace.records.size(); ++r) {
        const TraceRecord& rec = ex.trace.records[r];
        if (!saturation && rec.success && rec.confidence >= 0.999) {
          saturation = rec.iter;
          logit_at_saturation = rec.max_logit;
        }
        if (saturation && rec.iter > *saturation)
          min_conf_after = std::min(min_conf_after, rec.confidence);
      }

      nlohmann::json s;
      s["source"] = src;
      s["label"] = data.test.labels[src];
      s["target"] = acfg.target;
      s["success"] = ex.success;
      s["final_max_logit"] = ex.trace.records.back().max_logit;
      s["final_confidence"] = ex.trace.records.back().confidence;
      if (saturation) {
        s["saturation_iter"] = *saturation;
        s["max_logit_at_saturation"] = logit_at_saturation;
        s["max_logit_grew_after_saturation"] =
            ex.trace.records.back().max_logit > logit_at_saturation;
        s["min_confidence_after_saturation"] = min_conf_after;
      } else {
        s["saturation_iter"] = nullptr;
      }
      outs[i].summary = std::move(s);
      outs[i].trace = ex.trace;
    });

    nlohmann::json runs = nlohmann::json::array();
    std::size_t saturated_by_half = 0;
    for (std::size_t i = 0; i < outs.size(); ++i) {
      char name[48];
      std::snprintf(name, sizeof name, "masking/cw_trace_%03zu.csv", i);
      attack_trace_export(outs[i].trace, cfg.out_dir / name);
      artifacts.emplace_back(name);
      outs[i].summary["trace"] = name;
      if (!outs[i].summary.at("saturation_iter").is_null() &&
          outs[i].summary.at("saturation_iter").get<std::size_t>() < cfg.masking.steps / 2)
        ++saturated_by_half;
      runs.push_back(outs[i].summary);
    }

    metrics["mode"] = "cw_trace";
    metrics["steps"] = cfg.masking.steps;
    metrics["confidence_k"] = cfg.masking.confidence_k;
    metrics["n_runs"] = outs.size();
    metrics["n_saturated_before_half"] = saturated_by_half;
    metrics["runs"] = runs;
  }

  detail::write_metrics(cfg.out_dir / "masking_summary.json", metrics);
  artifacts.push_back("masking_summary.json");
  detail::stage_complete(cfg, "masking-demo", metrics, artifacts);
  return metrics;
}

}  // namespace logitguard
