// SPDX-License-Identifier: Apache-2.0
//
// Glow-style invertible flows. The flow maps a standard-normal latent z to an
// observation t (forward, the generative direction). Steps are stored in the
// normalizing order t -> z, one flow step being ActNorm -> Shuffle -> Coupling;
// forward() walks them in reverse.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "tzk/nn.hpp"
#include "tzk/tensor.hpp"

namespace tzk {

class Rng;

struct ImageShape {
    std::size_t c = 1;
    std::size_t h = 1;
    std::size_t w = 1;
    std::size_t numel() const { return c * h * w; }
    bool operator==(const ImageShape&) const = default;
};

struct FlowConfig {
    /// Vector dimensionality D; ignored when image is set (D = c*h*w).
    std::size_t dim = 2;
    /// Multi-scale levels. Every level but the last ends with a Split.
    std::size_t layers = 1;
    std::size_t steps = 8;  // flow steps per level
    std::size_t hidden = 64;
    std::size_t hidden_layers = 2;
    bool shuffle = true;
    /// Image layout: each level starts with a Squeeze.
    std::optional<ImageShape> image;
    /// Refuse to run before actnorm_init().
    bool strict = false;

    std::size_t total_dim() const { return image ? image->numel() : dim; }
};

/// Per-dimension affine map. Normalizing direction: y = (x + bias) * exp(log_scale).
struct ActNormStep {
    Tensor log_scale;
    Tensor bias;
};

/// Fixed permutation; normalizing direction y[j] = x[perm[j]].
struct ShuffleStep {
    Tensor perm;  // indices stored as values; checkpointed as a buffer
};

/// Affine coupling. The first `passive` coordinates condition the rest:
/// generative t_a = z_a * exp(2 tanh(s)) + b, with (s, b) = net(z_p).
struct CouplingStep {
    std::size_t passive = 0;
    std::size_t active = 0;
    Mlp net;
};

/// Space-to-channel rearrangement of a c x h x w block (volume preserving).
struct SqueezeStep {
    ImageShape in;
};

/// Factors the trailing `out` coordinates to the base distribution.
struct SplitStep {
    std::size_t keep = 0;
    std::size_t out = 0;
};

using FlowStep = std::variant<ActNormStep, ShuffleStep, CouplingStep, SqueezeStep, SplitStep>;

/// Permutation implementing squeeze on a flattened c x h x w block:
/// output channel ci*4 + dy*2 + dx at (y, x) takes input (ci, 2y+dy, 2x+dx).
std::vector<std::size_t> squeeze_permutation(const ImageShape& in);
std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm);

/// [c x h x w] -> [4c x h/2 x w/2].
Tensor squeeze(const Tensor& x);
/// Exact inverse of squeeze: [4c x h x w] -> [c x 2h x 2w].
Tensor unsqueeze(const Tensor& x);

class FlowModel {
public:
    struct Result {
        Tensor out;
        Tensor logdet;  // [n], log |det d out / d in|
    };

    FlowModel() = default;
    FlowModel(const FlowConfig& config, std::uint64_t seed);

    /// z -> t. Accepts [n x D] or a single [D] point (logdet then has shape {}).
    Result forward(const Tensor& z) const;
    /// t -> z, the exact algebraic inverse of forward.
    Result inverse(const Tensor& t) const;
    /// log N(inverse(t); 0, I) + logdet(inverse), per row.
    Tensor log_prob(const Tensor& t) const;
    /// z ~ N(0, temperature^2 I) pushed through forward; [n x D].
    Tensor sample(std::size_t n, double temperature, Rng& rng) const;

    /// Data-dependent ActNorm initialization on a batch of observations [n x D].
    void actnorm_init(const Tensor& batch);
    bool actnorm_initialized() const;
    /// Marks ActNorm as initialized without touching parameters (identity init).
    void mark_initialized();

    void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
    /// Checks the persisted permutations after a checkpoint load.
    void validate() const;

    std::size_t dim() const { return config_.total_dim(); }
    const FlowConfig& config() const { return config_; }
    const std::vector<FlowStep>& steps() const { return steps_; }
    void set_strict(bool strict) { config_.strict = strict; }

private:
    Result normalize(const Tensor& t, bool init_actnorm) const;

    FlowConfig config_;
    std::vector<FlowStep> steps_;
    Tensor initialized_;  // scalar 0/1 buffer
};

/// Standard-normal log density summed over the columns of z [n x D] -> [n].
Tensor standard_normal_log_prob(const Tensor& z);

}  // namespace tzk
