#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kinaema/models/spec.hpp"
#include "kinaema/nn/tensor.hpp"

namespace kinaema::models {

struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  ModelSpec spec;
  int64_t step = 0;
  nlohmann::json extra;  // optimizer state metadata, rng streams
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
};

// checkpoint.json + weights.bin in `dir`. Arrays are written sorted by name
// as little-endian float32 with per-array shape and crc32 in the JSON.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

std::vector<NamedArray> arrays_from_params(const nn::ParamSet<float>& params,
                                           const std::string& name_prefix = "");

// Copies arrays with matching names into params; throws ConfigError on any
// missing name or shape mismatch.
void load_into_params(const std::vector<NamedArray>& arrays, nn::ParamSet<float>& params,
                      const std::string& name_prefix = "");

}  // namespace kinaema::models
