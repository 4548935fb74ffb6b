// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "bigs/model.hpp"
#include "json.hpp"

namespace bigs {

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);

/// On-disk checkpoint.
///
/// Two files share a stem: `<stem>.json` is the manifest
///   { "format": "bigs-checkpoint", "version": 1, "config": {...},
///     "buffer": "<stem>.bin", "meta": {...},
///     "tensors": [ {"name", "shape", "offset", "numel"}, ... ] }
/// with byte offsets into `<stem>.bin`, a flat run of little-endian
/// IEEE-754 float64 values in manifest order. Both files are written to a
/// temporary name and renamed into place, buffer first.
struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor>> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const Tensor* find(const std::string& name) const;
};

/// Manifest path for a stem: `<stem>.json`.
std::filesystem::path manifest_path(const std::filesystem::path& stem);

void save_checkpoint(const std::filesystem::path& stem, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& stem);

/// Model parameters in registration order.
Checkpoint snapshot(const Model& model);

/// Rebuilds a model and copies every parameter from the checkpoint.
Model restore_model(const Checkpoint& ckpt);

/// Writes `bytes` to `path` via temp-file + rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

}  // namespace bigs
