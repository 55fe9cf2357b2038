#pragma once

#include <filesystem>
#include <map>
#include <random>
#include <string>

#include "dgsan/autograd.hpp"
#include "dgsan/tensor.hpp"

#include <nlohmann/json.hpp>

namespace dgsan {

enum class Init { Zeros, Ones, XavierUniform, Identity };

// Named parameter registry. Creation order is deterministic for a given model
// configuration, which pins both RNG consumption and optimizer traversal.
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : rng_(seed) {}

  ag::Var create(const std::string& name, Shape shape, Init init);
  ag::Var get(const std::string& name) const;
  bool has(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, ag::Var>& items() const { return params_; }
  int64_t total_count() const;
  void zero_grad();

  // Checkpoint directory: config.json + index.json + one raw little-endian
  // float32 file per tensor.
  void save(const std::filesystem::path& dir, const nlohmann::json& config) const;
  void load_values(const std::filesystem::path& dir);
  // Loads only tensors present in both the store and the checkpoint (used for
  // warm starts); returns the number of tensors loaded.
  int load_matching(const std::filesystem::path& dir);

  std::mt19937_64& rng() { return rng_; }

 private:
  std::map<std::string, ag::Var> params_;
  std::mt19937_64 rng_;
};

// Atomic file write: temp file in the same directory, then rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
void write_f32_file(const std::filesystem::path& path, const DataVec& values);
DataVec read_f32_file(const std::filesystem::path& path);

}  // namespace dgsan
