// SPDX-License-Identifier: Apache-2.0
//
// "TZKC" checkpoints (little-endian):
//   "TZKC" u32 version, string config JSON, u64 step, string RNG state,
//   u32 tensor count, then per tensor: string name, TZKT tensor.
// Strings are u32 length + bytes. Optimizer moments are stored as
// opt.m.<param>, opt.v.<param> (f64) and opt.t.<param> (per-parameter step).
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "tzk/nn.hpp"
#include "tzk/training.hpp"

namespace tzk {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::string config_json;
    std::uint64_t step = 0;
    std::string rng_state;
    std::vector<std::pair<std::string, Tensor>> tensors;

    /// nullptr when absent.
    const Tensor* find(const std::string& name) const;
};

Checkpoint make_checkpoint(const std::string& config_json, const ParamList& params,
                           const TrainState& state);
/// Copies tensors into `params` (values only, shapes must match) and, when
/// given, restores the optimizer and random state. Missing or unexpected
/// tensors raise StateError.
void restore_checkpoint(const Checkpoint& ckpt, const ParamList& params, TrainState* state);

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& is);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tzk
