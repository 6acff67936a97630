#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "logitguard/errors.hpp"
#include "logitguard/io.hpp"
#include "logitguard/logits.hpp"
#include "logitguard/network.hpp"
#include "logitguard/rng.hpp"
#include "logitguard/tensor.hpp"

namespace logitguard {

/// Images with class labels. Pixels live in [0,1]; out-of-range data is
/// rejected at validation, never clamped behind the caller's back.
struct LabeledDataset {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::string split = "train";  // "train" | "test"
  std::size_t num_classes = 0;

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (images.size() != labels.size())
      throw DataError("dataset has " + std::to_string(images.size()) + " images but " +
                      std::to_string(labels.size()) + " labels");
    if (images.empty()) throw DataError("dataset is empty");
    if (num_classes < 2) throw DataError("dataset num_classes must be >= 2");
    if (split != "train" && split != "test")
      throw DataError("dataset split must be \"train\" or \"test\", got \"" + split + "\"");
    for (std::size_t i = 0; i < images.size(); ++i) {
      if (!images[i].same_shape(images[0]))
        throw DataError("image " + std::to_string(i) + " has shape " +
                        images[i].shape_string() + ", expected " + images[0].shape_string());
      if (labels[i] >= num_classes)
        throw DataError("label " + std::to_string(labels[i]) + " at index " +
                        std::to_string(i) + " out of range for M=" +
                        std::to_string(num_classes));
      for (std::size_t p = 0; p < images[i].size(); ++p) {
        const double v = images[i][p];
        if (!(v >= 0.0 && v <= 1.0))
          throw DataError("pixel " + std::to_string(p) + " of image " + std::to_string(i) +
                          " is " + format_double(v) + ", outside [0,1]");
      }
    }
  }
};

/// Provenance id: content hash over shape, pixels, labels, and class count.
inline std::string dataset_id(const LabeledDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_u64 = [&h](std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    h = fnv1a(b, 8, h);
  };
  mix_u64(ds.num_classes);
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    mix_u64(ds.labels[i]);
    for (double v : ds.images[i].values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      mix_u64(bits);
    }
  }
  return hex_id(h);
}

// ---------------------------------------------------------------------------
// IDX (the MNIST container format; all integers big-endian)

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

/// Parses an images + labels IDX pair. Pixel bytes map to [0,1] by /255;
/// image tensors come out as {1, rows, cols}. Pass num_classes = 0 to infer
/// M as max(label)+1 (with a floor of 2).
inline LabeledDataset load_idx(const std::filesystem::path& images_path,
                               const std::filesystem::path& labels_path,
                               std::size_t num_classes = 0,
                               const std::string& split = "train") {
  const std::vector<unsigned char> ibytes = read_file_bytes(images_path);
  ByteReader ir(ibytes);
  const std::uint32_t imagic = ir.u32_be("images magic");
  if (imagic != kIdxImagesMagic)
    throw FormatError("bad IDX images magic 0x" + hex_id(imagic).substr(8) +
                          " in " + images_path.string() + ", expected 0x00000803",
                      0);
  const std::uint32_t count = ir.u32_be("image count");
  const std::uint32_t rows = ir.u32_be("row count");
  const std::uint32_t cols = ir.u32_be("column count");
  if (count == 0 || rows == 0 || cols == 0)
    throw FormatError("IDX images header has a zero dimension", 4);

  const std::vector<unsigned char> lbytes = read_file_bytes(labels_path);
  ByteReader lr(lbytes);
  const std::uint32_t lmagic = lr.u32_be("labels magic");
  if (lmagic != kIdxLabelsMagic)
    throw FormatError("bad IDX labels magic 0x" + hex_id(lmagic).substr(8) +
                          " in " + labels_path.string() + ", expected 0x00000801",
                      0);
  const std::uint32_t lcount = lr.u32_be("label count");
  if (lcount != count)
    throw FormatError("IDX pair mismatch: " + std::to_string(count) + " images vs " +
                      std::to_string(lcount) + " labels");

  LabeledDataset ds;
  ds.split = split;
  ds.images.reserve(count);
  ds.labels.reserve(count);
  const std::size_t npix = static_cast<std::size_t>(rows) * cols;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::vector<double> vals(npix);
    for (std::size_t p = 0; p < npix; ++p)
      vals[p] = static_cast<double>(ir.byte("pixel data")) / 255.0;
    ds.images.emplace_back(std::vector<std::size_t>{1, rows, cols}, std::move(vals));
    ds.labels.push_back(lr.byte("label data"));
  }

  if (num_classes == 0) {
    std::size_t mx = 0;
    for (std::size_t l : ds.labels) mx = std::max(mx, l);
    num_classes = std::max<std::size_t>(mx + 1, 2);
  }
  ds.num_classes = num_classes;
  ds.validate();
  return ds;
}

/// Writes the dataset back out as an IDX pair, quantizing each pixel to
/// round(v*255). parse -> save round-trips valid files byte-identically.
inline void save_idx(const LabeledDataset& ds, const std::filesystem::path& images_path,
                     const std::filesystem::path& labels_path) {
  ds.validate();
  const auto& shape = ds.images[0].shape();
  if (shape.size() != 3 || shape[0] != 1)
    throw DataError("IDX export needs {1,rows,cols} images, got " + ds.images[0].shape_string());

  ByteWriter iw;
  iw.u32_be(kIdxImagesMagic);
  iw.u32_be(static_cast<std::uint32_t>(ds.images.size()));
  iw.u32_be(static_cast<std::uint32_t>(shape[1]));
  iw.u32_be(static_cast<std::uint32_t>(shape[2]));
  ByteWriter lw;
  lw.u32_be(kIdxLabelsMagic);
  lw.u32_be(static_cast<std::uint32_t>(ds.labels.size()));
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    for (double v : ds.images[i].values()) {
      const unsigned char b = static_cast<unsigned char>(std::llround(v * 255.0));
      iw.raw(&b, 1);
    }
    const unsigned char l = static_cast<unsigned char>(ds.labels[i]);
    lw.raw(&l, 1);
  }
  write_file_bytes(images_path, iw.bytes());
  write_file_bytes(labels_path, lw.bytes());
}

// ---------------------------------------------------------------------------
// Raw-float export: a little-endian f64 blob plus a JSON sidecar. The same
// convention the attack module uses for adversarial examples.

inline void save_dataset_raw(const LabeledDataset& ds, const std::filesystem::path& blob_path,
                             const std::filesystem::path& sidecar_path) {
  ds.validate();
  ByteWriter w;
  for (const Tensor& img : ds.images)
    for (double v : img.values()) w.f64(v);
  write_file_bytes(blob_path, w.bytes());

  nlohmann::json j;
  j["count"] = ds.images.size();
  j["shape"] = ds.images[0].shape();
  j["num_classes"] = ds.num_classes;
  j["split"] = ds.split;
  j["labels"] = ds.labels;
  write_text_file(sidecar_path, j.dump(2) + "\n");
}

inline LabeledDataset load_dataset_raw(const std::filesystem::path& blob_path,
                                       const std::filesystem::path& sidecar_path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file_bytes(sidecar_path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad dataset sidecar " + sidecar_path.string() + ": " + e.what());
  }
  LabeledDataset ds;
  std::size_t count = 0;
  std::vector<std::size_t> shape;
  try {
    count = j.at("count").get<std::size_t>();
    shape = j.at("shape").get<std::vector<std::size_t>>();
    ds.num_classes = j.at("num_classes").get<std::size_t>();
    ds.split = j.at("split").get<std::string>();
    ds.labels = j.at("labels").get<std::vector<std::size_t>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad dataset sidecar " + sidecar_path.string() + ": " + e.what());
  }

  const std::vector<unsigned char> blob = read_file_bytes(blob_path);
  ByteReader r(blob);
  const std::size_t npix = shape_product(shape);
  if (blob.size() != count * npix * 8)
    throw FormatError("dataset blob " + blob_path.string() + " holds " +
                      std::to_string(blob.size()) + " bytes, sidecar implies " +
                      std::to_string(count * npix * 8));
  ds.images.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> vals(npix);
    for (std::size_t p = 0; p < npix; ++p) vals[p] = r.f64("image data");
    ds.images.emplace_back(shape, std::move(vals));
  }
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic generators

/// Recipe for a generated dataset. `separation` scales how far apart the
/// classes sit relative to their noise; bigger is easier.
struct SynthSpec {
  std::size_t num_classes = 2;
  std::size_t per_class = 100;
  std::vector<std::size_t> input_shape;
  double separation = 4.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synth spec needs num_classes >= 2");
    if (per_class < 1) throw ConfigError("synth spec needs per_class >= 1");
    if (!(separation > 0.0))
      throw ConfigError("synth spec separation must be > 0, got " + format_double(separation));
    if (input_shape.empty()) throw ConfigError("synth spec input_shape is empty");
  }
};

/// Two clusters in the unit square, centred at (0.25, 0.5) and (0.75, 0.5),
/// with per-axis Gaussian spread 0.25/separation. Linearly separable for any
/// reasonable separation; clamped to [0,1] so the dataset invariant holds.
inline LabeledDataset synth_2d_two_class(const SynthSpec& spec,
                                         const std::string& split = "train") {
  spec.validate();
  if (spec.input_shape != std::vector<std::size_t>{2})
    throw ConfigError("synth_2d_two_class needs input_shape {2}");
  if (spec.num_classes != 2) throw ConfigError("synth_2d_two_class needs num_classes == 2");

  Rng rng(Rng::derive(spec.seed, fnv1a("synth-2d-" + split)));
  const double sigma = 0.25 / spec.separation;
  LabeledDataset ds;
  ds.split = split;
  ds.num_classes = 2;
  for (std::size_t c = 0; c < 2; ++c) {
    const double cx = c == 0 ? 0.25 : 0.75;
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      const double x1 = std::clamp(rng.normal(cx, sigma), 0.0, 1.0);
      const double x2 = std::clamp(rng.normal(0.5, sigma), 0.0, 1.0);
      ds.images.emplace_back(std::vector<std::size_t>{2}, std::vector<double>{x1, x2});
      ds.labels.push_back(c);
    }
  }
  ds.validate();
  return ds;
}

namespace detail {

constexpr std::size_t kPatternSide = 8;

/// Per-class 8x8 base patterns, a pure function of the seed. These define the
/// class structure that every resolution of a family shares.
inline std::vector<std::vector<double>> synth_base_patterns(std::uint64_t seed,
                                                            std::size_t num_classes) {
  Rng rng(Rng::derive(seed, fnv1a("synth-patterns")));
  std::vector<std::vector<double>> patterns(num_classes);
  for (auto& p : patterns) {
    p.resize(kPatternSide * kPatternSide);
    for (double& v : p) v = rng.uniform(0.2, 0.8);
  }
  return patterns;
}

}  // namespace detail

/// Image dataset at one resolution: each sample is its class's base pattern
/// nearest-neighbour-resampled to side x side, plus seeded uniform pixel noise
/// of amplitude min(0.2, 0.5/separation). Pure function of (spec, side, split).
inline LabeledDataset synth_image_dataset(const SynthSpec& spec, std::size_t side,
                                          const std::string& split = "train") {
  spec.validate();
  if (side == 0) throw ConfigError("synth image side must be >= 1");
  const auto patterns = detail::synth_base_patterns(spec.seed, spec.num_classes);
  Rng rng(Rng::derive(spec.seed, fnv1a("synth-images-" + split + "-" + std::to_string(side))));
  const double amp = std::min(0.2, 0.5 / spec.separation);

  LabeledDataset ds;
  ds.split = split;
  ds.num_classes = spec.num_classes;
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    for (std::size_t s = 0; s < spec.per_class; ++s) {
      std::vector<double> vals(side * side);
      for (std::size_t i = 0; i < side; ++i) {
        const std::size_t pi = i * detail::kPatternSide / side;
        for (std::size_t j = 0; j < side; ++j) {
          const std::size_t pj = j * detail::kPatternSide / side;
          const double base = patterns[c][std::min(pi, detail::kPatternSide - 1) *
                                              detail::kPatternSide +
                                          std::min(pj, detail::kPatternSide - 1)];
          vals[i * side + j] = std::clamp(base + rng.uniform(-amp, amp), 0.0, 1.0);
        }
      }
      ds.images.emplace_back(std::vector<std::size_t>{1, side, side}, std::move(vals));
      ds.labels.push_back(c);
    }
  }
  ds.validate();
  return ds;
}

/// The same class structure rendered at each resolution, so only the input
/// dimensionality varies across the family.
inline std::vector<LabeledDataset> synth_resolution_family(
    const SynthSpec& base, const std::vector<std::size_t>& resolutions,
    const std::string& split = "train") {
  if (resolutions.empty()) throw ConfigError("resolution family needs at least one side length");
  for (std::size_t i = 1; i < resolutions.size(); ++i)
    if (resolutions[i] <= resolutions[i - 1])
      throw ConfigError("resolutions must be strictly ascending");
  std::vector<LabeledDataset> out;
  out.reserve(resolutions.size());
  for (std::size_t side : resolutions) out.push_back(synth_image_dataset(base, side, split));
  return out;
}

// ---------------------------------------------------------------------------
// Boundary scan (the Fig. 3 slice: max logit vs. max softmax along a line)

struct BoundaryRow {
  double x1 = 0.0;
  double max_logit = 0.0;
  double max_softmax = 0.0;
};

/// Evaluates the 2-input net along the horizontal line x2 = `x2`, at steps+1
/// evenly spaced x1 values over [x1_lo, x1_hi].
inline std::vector<BoundaryRow> boundary_scan(const Network& net, double x2, double x1_lo,
                                              double x1_hi, std::size_t steps) {
  if (net.spec().input_shape != std::vector<std::size_t>{2})
    throw ConfigError("boundary_scan needs a 2-input network");
  if (steps == 0) throw ConfigError("boundary_scan needs steps >= 1");
  if (!(x1_hi > x1_lo)) throw ConfigError("boundary_scan needs x1_hi > x1_lo");

  std::vector<BoundaryRow> rows;
  rows.reserve(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) {
    const double x1 = x1_lo + (x1_hi - x1_lo) * static_cast<double>(i) / static_cast<double>(steps);
    const LogitVector u = net.logits(Tensor({2}, {x1, x2}));
    rows.push_back({x1, u.max_value(), max_softmax(u)});
  }
  return rows;
}

inline std::string boundary_scan_csv(const std::vector<BoundaryRow>& rows) {
  std::string out = "x1,max_logit,max_softmax\n";
  for (const BoundaryRow& r : rows)
    out += format_double(r.x1) + "," + format_double(r.max_logit) + "," +
           format_double(r.max_softmax) + "\n";
  return out;
}

}  // namespace logitguard
