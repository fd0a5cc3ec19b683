#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>

#include "pretune/models.hpp"
#include "pretune/nn.hpp"

namespace pretune {

struct CheckpointManifest {
  std::string format = "pretune-ckpt-v1";
  std::string model_kind;
  nlohmann::json arch;
  std::string inventory_digest;
  uint64_t seed = 0;
  int64_t epoch = 0;
  std::string provenance;  // e.g. "pretrain:reconstruction"
  bool has_optimizer = false;
  nlohmann::json extra;
};

struct OptimizerState {
  int64_t step_count = 0;
  std::map<std::string, std::vector<double>> m;
  std::map<std::string, std::vector<double>> v;
};

// Manifest + named parameter payloads; loading rebuilds the architecture from
// the manifest and refuses on inventory-digest mismatch.
void save_checkpoint(const std::string& path, const Model& model, CheckpointManifest manifest,
                     const OptimizerState* optimizer = nullptr);

struct LoadedCheckpoint {
  CheckpointManifest manifest;
  std::shared_ptr<Model> model;
  std::optional<OptimizerState> optimizer;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Raw payload without model reconstruction; used when the live model has
// extra structure the arch manifest cannot rebuild (e.g. injected adapters).
struct RawCheckpoint {
  CheckpointManifest manifest;
  std::vector<std::pair<std::string, std::vector<double>>> params;
  std::optional<OptimizerState> optimizer;
};

RawCheckpoint load_checkpoint_raw(const std::string& path);

// Copies payload values into the model's identically named parameters.
void overlay_parameters(Model& model, const RawCheckpoint& raw);

// Reads only the manifest (cheap digest/provenance checks).
CheckpointManifest read_checkpoint_manifest(const std::string& path);

// Digest over raw parameter values; pass `trainable_filter` to restrict to
// trainable (true) or frozen (false) entries.
std::string parameter_digest(const std::vector<nn::ParamEntry>& params,
                             std::optional<bool> trainable_filter = std::nullopt);

}  // namespace pretune
