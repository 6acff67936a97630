#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "logitguard/errors.hpp"
#include "logitguard/io.hpp"
#include "logitguard/network.hpp"

namespace logitguard {

// Checkpoint layout (all integers little-endian):
//   "LGCK"            4 bytes magic
//   version           u32 (currently 1)
//   spec length       u64, then that many bytes of NetworkSpec JSON
//   seed              u64
//   epochs            u64
//   final_accuracy    f64
//   tensor count      u64, then per tensor: rank u64, extents u64..., values f64...

constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint64_t epochs = 0;
  double final_accuracy = 0.0;
};

inline void save_checkpoint(const Network& net, const CheckpointMeta& meta,
                            const std::filesystem::path& path) {
  ByteWriter w;
  w.raw("LGCK", 4);
  w.u32(kCheckpointVersion);
  const std::string spec_json = net.spec().to_json().dump();
  w.u64(spec_json.size());
  w.raw(spec_json.data(), spec_json.size());
  w.u64(meta.seed);
  w.u64(meta.epochs);
  w.f64(meta.final_accuracy);
  w.u64(net.params().size());
  for (const Tensor& t : net.params()) {
    w.u64(t.rank());
    for (std::size_t e : t.shape()) w.u64(e);
    for (double v : t.values()) w.f64(v);
  }
  write_file_bytes(path, w.bytes());
}

struct LoadedCheckpoint {
  Network net;
  CheckpointMeta meta;
};

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = read_file_bytes(path);
  ByteReader r(bytes);
  const std::string magic = r.str(4, "magic");
  if (magic != "LGCK")
    throw FormatError("not a checkpoint: bad magic in " + path.string(), 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw UnsupportedVersionError("checkpoint version " + std::to_string(version) +
                                  " not supported (expected " +
                                  std::to_string(kCheckpointVersion) + ")");
  const std::uint64_t spec_len = r.u64("spec length");
  const std::string spec_json = r.str(spec_len, "spec json");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(spec_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint spec block is not valid json: ") + e.what(), 8);
  }
  NetworkSpec spec = NetworkSpec::from_json(j);

  CheckpointMeta meta;
  meta.seed = r.u64("seed");
  meta.epochs = r.u64("epochs");
  meta.final_accuracy = r.f64("final accuracy");

  const std::uint64_t n_tensors = r.u64("tensor count");
  std::vector<Tensor> params;
  params.reserve(n_tensors);
  for (std::uint64_t t = 0; t < n_tensors; ++t) {
    const std::uint64_t rank = r.u64("tensor rank");
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      shape[d] = r.u64("tensor extent");
      n *= shape[d];
    }
    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = r.f64("tensor values");
    params.emplace_back(std::move(shape), std::move(vals));
  }
  if (!r.exhausted())
    throw FormatError("checkpoint has trailing bytes", r.offset());

  try {
    return LoadedCheckpoint{Network(std::move(spec), std::move(params)), meta};
  } catch (const Error& e) {
    throw FormatError("checkpoint is internally inconsistent: " + std::string(e.what()));
  }
}

/// Provenance id for a checkpoint file: content hash of its bytes.
inline std::string checkpoint_id(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = read_file_bytes(path);
  return hex_id(fnv1a(bytes.data(), bytes.size()));
}

}  // namespace logitguard
