#pragma once

// Weight checkpoint file format:
//   magic "MPFW", version u32 LE, tensor count u32 LE, then per tensor:
//   name length u32 LE, UTF-8 name bytes, rank u32 LE, dims u64 LE each,
//   payload f64 LE row-major.
// Writes are byte-deterministic given identical parameter values.

#include <string>

#include "mpflow/nn.hpp"

namespace mpflow::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const nn::ParamStore& params);
nn::ParamStore load_checkpoint(const std::string& path);

}  // namespace mpflow::io
