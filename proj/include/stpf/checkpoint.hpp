#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "stpf/framestack.hpp"
#include "stpf/layers.hpp"

namespace stpf {

struct CheckpointMeta {
  std::string property;
  NormalizationSpec norm;
  int height = 0;
  int width = 0;
  std::vector<uint8_t> mask;
  uint64_t seed = 0;
  int window = 10;
  int train_frames = 0;
  std::vector<double> loss_history;
};

// STPF container, little-endian:
//   magic "STPF" | version u32=1 | header-length u64 | UTF-8 JSON header |
//   float32 parameter blob in declared layer order (gate order i,f,g,o),
//   moving statistics included.
// Save/load is bit-exact: a loaded network predicts identically.
void checkpoint_save(const std::string& path, Network<float>& net, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Network<float> net;
  CheckpointMeta meta;
};

LoadedCheckpoint checkpoint_load(const std::string& path);

// Full parameter state in blob order; length equals the param-count total.
std::vector<float> parameter_blob(Network<float>& net);

}  // namespace stpf
