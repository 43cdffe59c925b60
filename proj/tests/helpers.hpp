// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "tzk/nn.hpp"
#include "tzk/rng.hpp"
#include "tzk/tensor.hpp"

namespace testing_util {

/// Overwrites every non-buffer tensor with N(0, scale^2) values.
inline void randomize(const tzk::ParamList& params, tzk::Rng& rng, double scale) {
    for (const auto& p : params) {
        if (p.group == tzk::ParamGroup::buffer) {
            continue;
        }
        std::vector<double> v(p.tensor.numel());
        for (double& x : v) {
            x = scale * rng.normal();
        }
        tzk::Tensor t = p.tensor;
        t.assign(v);
    }
}

inline std::vector<double> values(const tzk::Tensor& t) { return t.to_vector(); }

inline std::vector<double> grad_of(const tzk::Tensor& t) {
    return {t.grad().begin(), t.grad().end()};
}

/// Snapshot of every tensor's values, for bitwise comparisons.
inline std::vector<std::vector<double>> snapshot(const tzk::ParamList& params) {
    std::vector<std::vector<double>> out;
    for (const auto& p : params) {
        out.push_back(p.tensor.to_vector());
    }
    return out;
}

inline tzk::Tensor random_matrix(tzk::Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
    return tzk::Tensor::randn({n, d}, rng, scale);
}

}  // namespace testing_util
