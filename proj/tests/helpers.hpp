#pragma once

#include <cmath>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "logitguard/rng.hpp"
#include "logitguard/tensor.hpp"

namespace testutil {

// |a-b| / max(|a|,|b|,1): relative where values are large, absolute near zero.
inline double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

inline logitguard::Tensor random_tensor(logitguard::Rng& rng,
                                        std::vector<std::size_t> shape, double lo = -1.0,
                                        double hi = 1.0) {
  logitguard::Tensor t = logitguard::Tensor::zeros(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Random tensor whose entries stay at least `margin` away from zero, so ReLU
// finite-difference probes never straddle the kink.
inline logitguard::Tensor random_tensor_off_kink(logitguard::Rng& rng,
                                                 std::vector<std::size_t> shape,
                                                 double margin = 1e-3) {
  logitguard::Tensor t = random_tensor(rng, std::move(shape));
  for (double& v : t.values()) {
    if (std::abs(v) < margin) v = v < 0.0 ? -margin : margin;
  }
  return t;
}

// Scratch directory for file round-trip tests, unique per test binary run.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const std::filesystem::path dir =
      std::filesystem::temp_directory_path() / ("logitguard-test-" + name);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testutil
