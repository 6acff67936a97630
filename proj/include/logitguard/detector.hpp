#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
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

namespace logitguard {

/// Linear interpolation of order statistics: h = (n-1)p, interpolate between
/// v[floor(h)] and v[ceil(h)]. Input must already be sorted ascending.
inline double quantile(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw DataError("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0))
    throw DomainError("quantile p must be in [0,1], got " + format_double(p));
  for (std::size_t i = 1; i < sorted.size(); ++i)
    if (sorted[i] < sorted[i - 1]) throw DataError("quantile input is not sorted ascending");
  const double h = static_cast<double>(sorted.size() - 1) * p;
  const std::size_t lo = static_cast<std::size_t>(h);
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

/// What the detector needs to know about one sample: the prediction and the
/// logit backing it. Computed once per dataset, reused across calibration.
struct SamplePrediction {
  std::size_t label = 0;
  std::size_t predicted = 0;
  double max_logit = 0.0;
};

inline std::vector<SamplePrediction> predict_dataset(const Network& net,
                                                     const LabeledDataset& data) {
  data.validate();
  std::vector<SamplePrediction> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const LogitVector u = net.logits(data.images[i]);
    out.push_back({data.labels[i], u.argmax(), u.max_value()});
  }
  return out;
}

struct ClassLogitProfile {
  std::size_t class_index = 0;
  std::size_t count = 0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
  double min = 0.0;
  double max = 0.0;
};

/// Profile of class c's predicted logits over the correctly classified
/// samples (label == predicted == c). Needs at least 4 such samples.
inline ClassLogitProfile fit_profile(const std::vector<SamplePrediction>& predictions,
                                     std::size_t c) {
  std::vector<double> logits;
  for (const SamplePrediction& p : predictions)
    if (p.label == c && p.predicted == c) logits.push_back(p.max_logit);
  if (logits.size() < 4)
    throw CalibrationError("class " + std::to_string(c) + " has only " +
                           std::to_string(logits.size()) +
                           " correctly classified samples, need >= 4");
  std::sort(logits.begin(), logits.end());
  ClassLogitProfile prof;
  prof.class_index = c;
  prof.count = logits.size();
  prof.q1 = quantile(logits, 0.25);
  prof.q3 = quantile(logits, 0.75);
  prof.iqr = prof.q3 - prof.q1;
  prof.min = logits.front();
  prof.max = logits.back();
  return prof;
}

inline ClassLogitProfile fit_profile(const Network& net, const LabeledDataset& data,
                                     std::size_t c) {
  return fit_profile(predict_dataset(net, data), c);
}

inline std::vector<ClassLogitProfile> fit_all_profiles(
    const std::vector<SamplePrediction>& predictions, std::size_t num_classes) {
  std::vector<ClassLogitProfile> out;
  out.reserve(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) out.push_back(fit_profile(predictions, c));
  return out;
}

struct ThresholdEntry {
  std::size_t class_index = 0;
  double q1 = 0.0;
  double q3 = 0.0;
  double iqr = 0.0;
  double threshold = 0.0;  // Q3 + k*IQR
};

struct ThresholdTable {
  std::vector<ThresholdEntry> entries;  // one per class, in class order
  double k = 0.0;
  std::optional<double> k_min;
  std::string model_id;
  std::string dataset_id;
  std::string timestamp;

  const ThresholdEntry& entry(std::size_t c) const {
    if (c >= entries.size() || entries[c].class_index != c)
      throw IndexError("threshold table has no entry for class " + std::to_string(c));
    return entries[c];
  }

  void validate() const {
    if (entries.empty()) throw CalibrationError("threshold table is empty");
    for (std::size_t c = 0; c < entries.size(); ++c) {
      const ThresholdEntry& e = entries[c];
      if (e.class_index != c)
        throw CalibrationError("threshold table entries out of class order");
      if (!std::isfinite(e.threshold))
        throw CalibrationError("threshold for class " + std::to_string(c) + " is not finite");
      if (e.threshold != e.q3 + k * e.iqr)
        throw CalibrationError("threshold for class " + std::to_string(c) +
                               " violates T == Q3 + k*IQR");
    }
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model_id"] = model_id;
    j["dataset_id"] = dataset_id;
    j["timestamp"] = timestamp;
    j["k"] = k;
    if (k_min.has_value())
      j["k_min"] = *k_min;
    else
      j["k_min"] = nullptr;
    j["classes"] = nlohmann::json::array();
    for (const ThresholdEntry& e : entries) {
      nlohmann::json ej;
      ej["class"] = e.class_index;
      ej["Q1"] = e.q1;
      ej["Q3"] = e.q3;
      ej["IQR"] = e.iqr;
      ej["T"] = e.threshold;
      j["classes"].push_back(ej);
    }
    return j;
  }

  static ThresholdTable from_json(const nlohmann::json& j) {
    ThresholdTable t;
    try {
      t.model_id = j.at("model_id").get<std::string>();
      t.dataset_id = j.at("dataset_id").get<std::string>();
      t.timestamp = j.at("timestamp").get<std::string>();
      t.k = j.at("k").get<double>();
      if (!j.at("k_min").is_null()) t.k_min = j.at("k_min").get<double>();
      for (const auto& ej : j.at("classes")) {
        ThresholdEntry e;
        e.class_index = ej.at("class").get<std::size_t>();
        e.q1 = ej.at("Q1").get<double>();
        e.q3 = ej.at("Q3").get<double>();
        e.iqr = ej.at("IQR").get<double>();
        e.threshold = ej.at("T").get<double>();
        t.entries.push_back(e);
      }
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("bad threshold table json: ") + e.what());
    }
    try {
      t.validate();
    } catch (const CalibrationError& e) {
      throw FormatError("threshold table failed re-validation: " + std::string(e.what()));
    }
    return t;
  }
};

/// T_c = Q3_c + k*IQR_c for every profiled class.
inline ThresholdTable fit_thresholds(const std::vector<ClassLogitProfile>& profiles, double k) {
  if (!(k >= 0.0)) throw ConfigError("threshold k must be >= 0, got " + format_double(k));
  if (profiles.empty()) throw CalibrationError("no profiles to fit thresholds from");
  ThresholdTable t;
  t.k = k;
  for (std::size_t c = 0; c < profiles.size(); ++c) {
    const ClassLogitProfile& p = profiles[c];
    if (p.class_index != c) throw CalibrationError("profiles out of class order");
    t.entries.push_back({c, p.q1, p.q3, p.iqr, p.q3 + k * p.iqr});
  }
  t.validate();
  return t;
}

/// Smallest k (rounded up to `resolution`) at which no genuine sample is
/// flagged. Population: correctly classified training samples plus every test
/// sample, each measured against its predicted class's profile.
inline double find_k_min(const std::vector<ClassLogitProfile>& profiles,
                         const std::vector<SamplePrediction>& train_preds,
                         const std::vector<SamplePrediction>& test_preds,
                         double resolution = 0.1) {
  if (!(resolution > 0.0))
    throw ConfigError("k_min resolution must be > 0, got " + format_double(resolution));

  std::vector<const SamplePrediction*> population;
  for (const SamplePrediction& p : train_preds)
    if (p.predicted == p.label) population.push_back(&p);
  for (const SamplePrediction& p : test_preds) population.push_back(&p);

  double k_star = 0.0;
  for (const SamplePrediction* p : population) {
    if (p->predicted >= profiles.size())
      throw IndexError("no profile for predicted class " + std::to_string(p->predicted));
    const ClassLogitProfile& prof = profiles[p->predicted];
    const double excess = p->max_logit - prof.q3;
    if (excess <= 0.0) continue;
    if (prof.iqr == 0.0)
      throw CalibrationError("class " + std::to_string(p->predicted) +
                             " has IQR == 0 with a sample above Q3; "
                             "logit distribution is degenerate");
    k_star = std::max(k_star, excess / prof.iqr);
  }

  double k_min = std::ceil(k_star / resolution - 1e-9) * resolution;
  // Guard the ceiling against floating-point shaving: at the returned k,
  // re-scan until genuinely nothing is flagged.
  auto flags_anything = [&](double k) {
    for (const SamplePrediction* p : population) {
      const ClassLogitProfile& prof = profiles[p->predicted];
      if (p->max_logit > prof.q3 + k * prof.iqr) return true;
    }
    return false;
  };
  while (flags_anything(k_min)) k_min += resolution;
  return k_min;
}

inline double find_k_min(const Network& net, const LabeledDataset& train,
                         const LabeledDataset& test, double resolution = 0.1) {
  const std::vector<SamplePrediction> train_preds = predict_dataset(net, train);
  const std::vector<SamplePrediction> test_preds = predict_dataset(net, test);
  const auto profiles = fit_all_profiles(train_preds, train.num_classes);
  return find_k_min(profiles, train_preds, test_preds, resolution);
}

struct DetectionReport {
  std::size_t predicted = 0;
  double max_logit = 0.0;
  double threshold = 0.0;
  bool flagged = false;
  double margin = 0.0;  // max_logit - threshold; flagged iff margin > 0
};

/// Predicted-class threshold check: flagged iff the prediction's logit
/// strictly exceeds T of the predicted class.
inline DetectionReport detect(const LogitVector& logits, const ThresholdTable& table) {
  DetectionReport r;
  r.predicted = logits.argmax();
  r.max_logit = logits.max_value();
  const ThresholdEntry& e = table.entry(r.predicted);
  r.threshold = e.threshold;
  r.margin = r.max_logit - r.threshold;
  r.flagged = r.max_logit > r.threshold;
  return r;
}

struct CoverageReport {
  std::vector<double> per_class_terms;
  double d_adv = 0.0;
  std::size_t num_classes = 0;
};

/// Eq. (2): D_Adv = (1/M) sum_c (g_c - T_c)/g_c, where g_c is the maximum
/// target-class logit over class c's adversarial examples. Unclamped; a term
/// goes negative when the attack never cleared T_c.
inline CoverageReport coverage_d_adv(const ThresholdTable& table,
                                     const std::vector<double>& adv_max_logits) {
  if (adv_max_logits.size() != table.entries.size())
    throw DimensionError("coverage needs one adversarial max logit per class: got " +
                         std::to_string(adv_max_logits.size()) + ", table has " +
                         std::to_string(table.entries.size()));
  CoverageReport r;
  r.num_classes = table.entries.size();
  double sum = 0.0;
  for (std::size_t c = 0; c < adv_max_logits.size(); ++c) {
    const double g = adv_max_logits[c];
    if (!(g > 0.0))
      throw DomainError("adversarial max logit for class " + std::to_string(c) + " is " +
                        format_double(g) + "; Eq. (2) needs a positive denominator");
    r.per_class_terms.push_back((g - table.entry(c).threshold) / g);
    sum += r.per_class_terms.back();
  }
  r.d_adv = sum / static_cast<double>(r.num_classes);
  return r;
}

/// Raw material for the logit-distribution figures: one row per sample
/// (class, split, predicted logit) and one summary row per class (quartiles,
/// whiskers at the observed extremes, and the threshold).
inline std::string distribution_csv(const Network& net, const LabeledDataset& train,
                                    const LabeledDataset& test, const ThresholdTable& table) {
  const std::vector<SamplePrediction> train_preds = predict_dataset(net, train);
  const std::vector<SamplePrediction> test_preds = predict_dataset(net, test);

  std::string out = "kind,class,split,logit,q1,median,q3,lo_whisker,hi_whisker,threshold\n";
  auto sample_rows = [&out](const std::vector<SamplePrediction>& preds, const char* split) {
    for (const SamplePrediction& p : preds)
      out += "sample," + std::to_string(p.predicted) + "," + split + "," +
             format_double(p.max_logit) + ",,,,,,\n";
  };
  sample_rows(train_preds, "train");
  sample_rows(test_preds, "test");

  for (std::size_t c = 0; c < table.entries.size(); ++c) {
    std::vector<double> logits;
    for (const SamplePrediction& p : train_preds)
      if (p.label == c && p.predicted == c) logits.push_back(p.max_logit);
    std::sort(logits.begin(), logits.end());
    if (logits.size() < 4)
      throw CalibrationError("class " + std::to_string(c) +
                             " has fewer than 4 correct samples for summary");
    const double median = quantile(logits, 0.5);
    const ThresholdEntry& e = table.entry(c);
    out += "summary," + std::to_string(c) + ",,," + format_double(e.q1) + "," +
           format_double(median) + "," + format_double(e.q3) + "," +
           format_double(logits.front()) + "," + format_double(logits.back()) + "," +
           format_double(e.threshold) + "\n";
  }
  return out;
}

inline void export_distribution_data(const Network& net, const LabeledDataset& train,
                                     const LabeledDataset& test, const ThresholdTable& table,
                                     const std::filesystem::path& path) {
  write_text_file(path, distribution_csv(net, train, test, table));
}

}  // namespace logitguard
