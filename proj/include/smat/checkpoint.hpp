#pragma once

// Binary checkpoints: magic "SMATCKPT", format version u32, tensor count
// u32, then per-tensor records of (name length u32, UTF-8 name, rank u32,
// dims u32 each, float32 little-endian values). Model metadata (fusion
// variant, attention kind, preset) travels as a reserved "_meta" tensor so
// the container stays pure tensor records.

#include <map>
#include <string>
#include <vector>

#include "smat/nn.hpp"

namespace smat {

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

// codes carried in the "_meta" record
struct CheckpointMeta {
  int variant = 3;    // 0..3 -> A..D
  int attention = 0;  // 0 separable, 1 standard
  int preset = 0;     // 0 desk, 1 mini, 2 full
};

void save_checkpoint(const std::string& path, const ParamRegistry<float>& reg,
                     const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::string& path);
CheckpointMeta checkpoint_meta(const Checkpoint& ckpt);

// copy values into matching registry entries; every registry tensor must be
// present with the right shape
void load_into_registry(const Checkpoint& ckpt, ParamRegistry<float>& reg);

}  // namespace smat
