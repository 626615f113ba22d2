#pragma once

#include <filesystem>
#include <iosfwd>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "dod/nn.hpp"
#include "dod/tensor.hpp"

namespace dod {

/// Raised when a checkpoint or tensor file is absent or malformed.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// DODT tensor file: "DODT", u32 rank, rank x u64 dims, little-endian f64 payload.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

/// Writes one DODT file per parameter plus manifest.json {"meta": ..., "params": {name: file}}.
void save_checkpoint(const std::filesystem::path& dir, const ParamSet& params, const nlohmann::json& meta);
/// Loads values into an already-constructed ParamSet; names and shapes must match.
nlohmann::json load_checkpoint(const std::filesystem::path& dir, ParamSet& params);
nlohmann::json read_manifest(const std::filesystem::path& dir);

}  // namespace dod
