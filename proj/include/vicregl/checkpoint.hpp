#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vicregl/model.hpp"
#include "vicregl/tensor.hpp"

namespace vicregl {

/// Little-endian tensor container:
///   magic "VRGL", u32 version, u32 tensor count,
///   per tensor: u32 name length, UTF-8 name, u8 dtype tag (0 = f64),
///               u32 rank, u64 dims[rank], raw little-endian data,
///   trailing u64 config hash.
struct CheckpointData {
  std::uint32_t version = 1;
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::uint64_t config_hash = 0;

  const Tensor* find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
CheckpointData load_checkpoint(const std::string& path);

/// Packs / restores model parameters and stat buffers. Extra entries (e.g.
/// optimizer state) ride along untouched.
void pack_model_state(const VicreglModel& model, CheckpointData& data);
void restore_model_state(VicreglModel& model, const CheckpointData& data);

/// Strings (rng state, config text) stored as u8-valued tensors.
Tensor tensor_from_string(const std::string& s);
std::string string_from_tensor(const Tensor& t);

std::uint64_t fnv1a64(const std::string& text);

}  // namespace vicregl
