#pragma once

#include <string>

#include "advlab/model.hpp"

namespace advlab {

// Checkpoint file layout:
//   [8-byte little-endian manifest length]
//   [JSON manifest: format_version, config, tensor table]
//   [raw row-major little-endian f32 data, offsets relative to this section]
// Weights are stored as f32 regardless of the compute precision; loading in
// 32-bit mode reproduces logits bit-identically.

inline constexpr int kCheckpointVersion = 1;

void save_checkpoint(Model<float>& model, const std::string& path);

Model<float> load_checkpoint_f32(const std::string& path);
Model<double> load_checkpoint_f64(const std::string& path);

}  // namespace advlab
