#pragma once

#include <string>

#include "smope/model.hpp"

namespace smope {

// Binary learner snapshot. Layout (little-endian):
//   magic "SMOPECKP", u32 version,
//   config block (i32 fields + f64 mlp_ratio),
//   i32 tasks_trained,
//   u32 named-array count, then per array:
//     u32 name length, name bytes, i64 rows, i64 cols, rows*cols f64 values,
//   usage counter block per prompted layer (u64 counts),
//   class-stat block (class id, mean, covariance per seen class).
// Round-trips are lossless at 64-bit; load rejects unknown versions.
void save_checkpoint(const LearnerState& state, const std::string& path);
LearnerState load_checkpoint(const std::string& path);

}  // namespace smope
