// Copyright 2026 the voxflow authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)
//
// Binary tensor-blob container and the model checkpoint built on it.
// Layout: 8-byte magic, u32 format version, u64 header length + JSON header,
// u32 tensor count, then per tensor: u32 name length + name, u32 ndims,
// u64 dims[ndims], float32 little-endian data. Save/load round trips are
// bit-exact.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "voxflow/flow.hpp"
#include "voxflow/trainer.hpp"

namespace voxflow {

struct NamedTensor {
  std::string name;
  std::vector<int64_t> dims;
  std::vector<float> data;
};

void write_blob_file(const std::string& path, const std::string& header_json,
                     const std::vector<NamedTensor>& tensors);

struct BlobFile {
  std::string header_json;
  std::vector<NamedTensor> tensors;
};

BlobFile read_blob_file(const std::string& path);

void save_checkpoint(const std::string& path, FlowModel<float>& model,
                     const std::vector<std::string>& speaker_names, const TrainState& state,
                     const AdamState<float>* adam = nullptr);

struct LoadedCheckpoint {
  std::unique_ptr<FlowModel<float>> model;
  std::vector<std::string> speaker_names;
  TrainState state;
  bool has_optimizer = false;
  AdamState<float> adam;

  int speaker_id(const std::string& name) const;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace voxflow
