// SPDX-License-Identifier: Apache-2.0
#include "tzk/nn.hpp"

#include <cmath>

#include "tzk/errors.hpp"
#include "tzk/rng.hpp"

namespace tzk {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool zero_init) {
    if (in == 0 || out == 0) {
        throw ConfigError("Linear layer needs positive extents");
    }
    if (zero_init) {
        weight = Tensor::zeros({in, out}, true);
    } else {
        weight = Tensor::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        weight.set_requires_grad(true);
    }
    bias = Tensor::zeros({out}, true);
}

Tensor Linear::operator()(const Tensor& x) const {
    return add_rowvec(matmul(x, weight), bias);
}

void Linear::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    out.push_back({prefix + ".weight", weight, group});
    out.push_back({prefix + ".bias", bias, group});
}

Mlp::Mlp(const MlpConfig& config, Rng& rng) : config_(config) {
    std::size_t in = config.in;
    for (std::size_t i = 0; i < config.hidden_layers; ++i) {
        layers_.emplace_back(in, config.hidden, rng, false);
        in = config.hidden;
    }
    layers_.emplace_back(in, config.out, rng, config.zero_last);
}

Tensor Mlp::operator()(const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        h = layers_[i](h);
        if (i + 1 < layers_.size()) {
            h = swish(h);
        }
    }
    return h;
}

void Mlp::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        layers_[i].collect(out, prefix + ".l" + std::to_string(i), group);
    }
}

void set_trainable(const ParamList& params, bool flag) {
    for (const auto& p : params) {
        if (p.group != ParamGroup::buffer) {
            Tensor t = p.tensor;
            t.set_requires_grad(flag);
        }
    }
}

}  // namespace tzk
