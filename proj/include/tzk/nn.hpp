// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "tzk/tensor.hpp"

namespace tzk {

class Rng;

/// Which factorization a parameter belongs to. The t-flow is shared by both.
enum class ParamGroup { tflow, encoder, decoder, buffer };

struct NamedTensor {
    std::string name;
    Tensor tensor;
    ParamGroup group = ParamGroup::buffer;
};

/// Flat, ordered registry of a model's tensors. Buffers (permutations, flags)
/// are listed alongside parameters so checkpoints capture everything.
using ParamList = std::vector<NamedTensor>;

/// Fully connected layer, y = x W + b with W of shape [in x out].
struct Linear {
    Tensor weight;
    Tensor bias;

    Linear() = default;
    Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init);

    Tensor operator()(const Tensor& x) const;
    void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

struct MlpConfig {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t hidden = 64;
    std::size_t hidden_layers = 2;
    /// Zero the output layer so the network starts as the constant 0.
    bool zero_last = true;
};

/// swish MLP: in -> hidden (x hidden_layers) -> out.
class Mlp {
public:
    Mlp() = default;
    Mlp(const MlpConfig& config, Rng& rng);

    Tensor operator()(const Tensor& x) const;
    void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;

    std::size_t in_dim() const { return config_.in; }
    std::size_t out_dim() const { return config_.out; }

private:
    MlpConfig config_;
    std::vector<Linear> layers_;
};

/// Sets requires_grad on every non-buffer entry.
void set_trainable(const ParamList& params, bool flag);

}  // namespace tzk
