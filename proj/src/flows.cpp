// SPDX-License-Identifier: Apache-2.0
#include "tzk/flows.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "tzk/errors.hpp"
#include "tzk/rng.hpp"

namespace tzk {

namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

std::vector<std::size_t> perm_from_tensor(const Tensor& t) {
    std::vector<std::size_t> out;
    out.reserve(t.numel());
    for (double v : t.data()) {
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

Tensor buffer_tensor(Shape shape, std::vector<double> values) {
    PrecisionScope exact(Dtype::f64);
    return Tensor::from(std::move(shape), std::move(values));
}

ImageShape image_of(const Tensor& x) {
    if (x.rank() != 3) {
        throw DimensionError("expected a c x h x w tensor, got " + shape_str(x.shape()));
    }
    return {x.dim(0), x.dim(1), x.dim(2)};
}

}  // namespace

std::vector<std::size_t> squeeze_permutation(const ImageShape& in) {
    if (in.h % 2 != 0 || in.w % 2 != 0) {
        throw DimensionError("squeeze needs even spatial extents, got " + std::to_string(in.h) +
                             "x" + std::to_string(in.w));
    }
    const std::size_t oh = in.h / 2;
    const std::size_t ow = in.w / 2;
    std::vector<std::size_t> perm(in.numel());
    for (std::size_t ci = 0; ci < in.c; ++ci) {
        for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
                const std::size_t oc = ci * 4 + dy * 2 + dx;
                for (std::size_t y = 0; y < oh; ++y) {
                    for (std::size_t x = 0; x < ow; ++x) {
                        const std::size_t o = (oc * oh + y) * ow + x;
                        perm[o] = (ci * in.h + 2 * y + dy) * in.w + 2 * x + dx;
                    }
                }
            }
        }
    }
    return perm;
}

std::vector<std::size_t> invert_permutation(std::span<const std::size_t> perm) {
    std::vector<std::size_t> inv(perm.size(), perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        if (perm[i] >= perm.size() || inv[perm[i]] != perm.size()) {
            throw StateError("not a permutation");
        }
        inv[perm[i]] = i;
    }
    return inv;
}

Tensor squeeze(const Tensor& x) {
    const ImageShape in = image_of(x);
    const auto perm = squeeze_permutation(in);
    Tensor flat = gather_cols(reshape(x, {1, in.numel()}), perm);
    return reshape(flat, {in.c * 4, in.h / 2, in.w / 2});
}

Tensor unsqueeze(const Tensor& x) {
    const ImageShape sq = image_of(x);
    if (sq.c % 4 != 0) {
        throw DimensionError("unsqueeze needs a channel count divisible by 4");
    }
    const ImageShape in{sq.c / 4, sq.h * 2, sq.w * 2};
    const auto inv = invert_permutation(squeeze_permutation(in));
    Tensor flat = gather_cols(reshape(x, {1, in.numel()}), inv);
    return reshape(flat, {in.c, in.h, in.w});
}

Tensor standard_normal_log_prob(const Tensor& z) {
    const double d = static_cast<double>(z.dim(1));
    return add_scalar(mul_scalar(sum_rows(square(z)), -0.5), -0.5 * d * kLog2Pi);
}

FlowModel::FlowModel(const FlowConfig& config, std::uint64_t seed) : config_(config) {
    if (config.layers == 0) {
        throw ConfigError("flow needs at least one layer");
    }
    if (config.total_dim() == 0) {
        throw ConfigError("flow dimension must be positive");
    }
    Rng rng(seed);

    auto add_flow_steps = [&](std::size_t d) {
        if (d < 2 && config.steps > 0) {
            throw ConfigError("affine coupling needs at least 2 dimensions, got " +
                              std::to_string(d));
        }
        for (std::size_t s = 0; s < config.steps; ++s) {
            steps_.push_back(ActNormStep{Tensor::zeros({d}, true), Tensor::zeros({d}, true)});
            std::vector<double> perm(d);
            for (std::size_t i = 0; i < d; ++i) {
                perm[i] = static_cast<double>(i);
            }
            if (config.shuffle) {
                for (std::size_t i = d - 1; i > 0; --i) {
                    std::swap(perm[i], perm[rng.below(i + 1)]);
                }
            }
            steps_.push_back(ShuffleStep{buffer_tensor({d}, std::move(perm))});
            CouplingStep cp;
            cp.passive = d / 2;
            cp.active = d - cp.passive;
            cp.net = Mlp({cp.passive, 2 * cp.active, config.hidden, config.hidden_layers, true},
                         rng);
            steps_.push_back(std::move(cp));
        }
    };

    if (config.image) {
        ImageShape shape = *config.image;
        for (std::size_t l = 0; l < config.layers; ++l) {
            squeeze_permutation(shape);  // validates even extents
            steps_.push_back(SqueezeStep{shape});
            shape = {shape.c * 4, shape.h / 2, shape.w / 2};
            add_flow_steps(shape.numel());
            if (l + 1 < config.layers) {
                const std::size_t keep = shape.numel() / 2;
                steps_.push_back(SplitStep{keep, shape.numel() - keep});
                shape.c /= 2;
            }
        }
    } else {
        std::size_t d = config.dim;
        for (std::size_t l = 0; l < config.layers; ++l) {
            add_flow_steps(d);
            if (l + 1 < config.layers) {
                const std::size_t out = d / 2;
                if (out == 0 || d - out == 0) {
                    throw ConfigError("too many flow layers for dimension " +
                                      std::to_string(config.dim));
                }
                steps_.push_back(SplitStep{d - out, out});
                d -= out;
            }
        }
    }
    initialized_ = buffer_tensor({}, {0.0});
}

bool FlowModel::actnorm_initialized() const {
    return initialized_.defined() && initialized_.item() != 0.0;
}

void FlowModel::mark_initialized() {
    const double one = 1.0;
    initialized_.assign(std::span<const double>(&one, 1));
}

FlowModel::Result FlowModel::normalize(const Tensor& t, bool init_actnorm) const {
    if (t.rank() != 2 || t.dim(1) != dim()) {
        throw DimensionError("flow expects [n x " + std::to_string(dim()) + "], got " +
                             shape_str(t.shape()));
    }
    if (config_.strict && !init_actnorm && !actnorm_initialized()) {
        throw StateError("ActNorm used before initialization");
    }
    const std::size_t n = t.dim(0);
    Tensor x = t;
    Tensor logdet = Tensor::zeros({n});
    std::vector<Tensor> factored;

    for (std::size_t i = 0; i < steps_.size(); ++i) {
        try {
            const FlowStep& step = steps_[i];
            if (const auto* an = std::get_if<ActNormStep>(&step)) {
                if (init_actnorm) {
                    const std::size_t d = x.dim(1);
                    std::vector<double> mu(d, 0.0), var(d, 0.0);
                    for (std::size_t r = 0; r < n; ++r) {
                        for (std::size_t c = 0; c < d; ++c) {
                            mu[c] += x.at(r, c);
                        }
                    }
                    for (double& m : mu) {
                        m /= static_cast<double>(n);
                    }
                    for (std::size_t r = 0; r < n; ++r) {
                        for (std::size_t c = 0; c < d; ++c) {
                            const double dv = x.at(r, c) - mu[c];
                            var[c] += dv * dv;
                        }
                    }
                    std::vector<double> ls(d), b(d);
                    for (std::size_t c = 0; c < d; ++c) {
                        var[c] /= static_cast<double>(n);
                        if (!(var[c] > 1e-12)) {
                            throw DegenerateInputError("ActNorm init: zero variance in dimension " +
                                                       std::to_string(c));
                        }
                        ls[c] = -0.5 * std::log(var[c]);
                        b[c] = -mu[c];
                    }
                    Tensor(an->log_scale).assign(ls);
                    Tensor(an->bias).assign(b);
                }
                x = mul_rowvec(add_rowvec(x, an->bias), exp(an->log_scale));
                logdet = add(logdet, sum(an->log_scale));
            } else if (const auto* sh = std::get_if<ShuffleStep>(&step)) {
                const auto perm = perm_from_tensor(sh->perm);
                x = gather_cols(x, perm);
            } else if (const auto* cp = std::get_if<CouplingStep>(&step)) {
                const Tensor xp = slice_cols(x, 0, cp->passive);
                const Tensor xa = slice_cols(x, cp->passive, cp->passive + cp->active);
                const Tensor h = cp->net(xp);
                const Tensor ls = mul_scalar(tanh(slice_cols(h, 0, cp->active)), 2.0);
                const Tensor shift = slice_cols(h, cp->active, 2 * cp->active);
                const Tensor za = mul(sub(xa, shift), exp(neg(ls)));
                x = concat_cols({xp, za});
                logdet = sub(logdet, sum_rows(ls));
            } else if (const auto* sq = std::get_if<SqueezeStep>(&step)) {
                x = gather_cols(x, squeeze_permutation(sq->in));
            } else if (const auto* sp = std::get_if<SplitStep>(&step)) {
                factored.push_back(slice_cols(x, sp->keep, sp->keep + sp->out));
                x = slice_cols(x, 0, sp->keep);
            }
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (flow step " + std::to_string(i) + ")");
        }
    }
    if (init_actnorm) {
        return {x, logdet};
    }
    std::vector<Tensor> parts{x};
    for (auto it = factored.rbegin(); it != factored.rend(); ++it) {
        parts.push_back(*it);
    }
    return {parts.size() == 1 ? x : concat_cols(parts), logdet};
}

FlowModel::Result FlowModel::inverse(const Tensor& t) const {
    if (t.rank() == 1) {
        Result r = normalize(reshape(t, {1, t.numel()}), false);
        return {reshape(r.out, {dim()}), reshape(r.logdet, {})};
    }
    return normalize(t, false);
}

FlowModel::Result FlowModel::forward(const Tensor& z_in) const {
    if (z_in.rank() == 1) {
        Result r = forward(reshape(z_in, {1, z_in.numel()}));
        return {reshape(r.out, {dim()}), reshape(r.logdet, {})};
    }
    if (z_in.rank() != 2 || z_in.dim(1) != dim()) {
        throw DimensionError("flow expects [n x " + std::to_string(dim()) + "], got " +
                             shape_str(z_in.shape()));
    }
    if (config_.strict && !actnorm_initialized()) {
        throw StateError("ActNorm used before initialization");
    }
    const std::size_t n = z_in.dim(0);

    // z = [x_final | last split piece | ... | first split piece]
    std::size_t kept = dim();
    for (const auto& step : steps_) {
        if (const auto* sp = std::get_if<SplitStep>(&step)) {
            kept -= sp->out;
        }
    }
    Tensor x = slice_cols(z_in, 0, kept);
    std::size_t offset = kept;
    Tensor logdet = Tensor::zeros({n});

    for (std::size_t k = steps_.size(); k-- > 0;) {
        try {
            const FlowStep& step = steps_[k];
            if (const auto* an = std::get_if<ActNormStep>(&step)) {
                x = add_rowvec(mul_rowvec(x, exp(neg(an->log_scale))), neg(an->bias));
                logdet = sub(logdet, sum(an->log_scale));
            } else if (const auto* sh = std::get_if<ShuffleStep>(&step)) {
                const auto inv = invert_permutation(perm_from_tensor(sh->perm));
                x = gather_cols(x, inv);
            } else if (const auto* cp = std::get_if<CouplingStep>(&step)) {
                const Tensor xp = slice_cols(x, 0, cp->passive);
                const Tensor za = slice_cols(x, cp->passive, cp->passive + cp->active);
                const Tensor h = cp->net(xp);
                const Tensor ls = mul_scalar(tanh(slice_cols(h, 0, cp->active)), 2.0);
                const Tensor shift = slice_cols(h, cp->active, 2 * cp->active);
                x = concat_cols({xp, add(mul(za, exp(ls)), shift)});
                logdet = add(logdet, sum_rows(ls));
            } else if (const auto* sq = std::get_if<SqueezeStep>(&step)) {
                x = gather_cols(x, invert_permutation(squeeze_permutation(sq->in)));
            } else if (const auto* sp = std::get_if<SplitStep>(&step)) {
                x = concat_cols({x, slice_cols(z_in, offset, offset + sp->out)});
                offset += sp->out;
            }
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (flow step " + std::to_string(k) + ")");
        }
    }
    return {x, logdet};
}

Tensor FlowModel::log_prob(const Tensor& t) const {
    if (t.rank() == 1) {
        return reshape(log_prob(reshape(t, {1, t.numel()})), {});
    }
    Result r = normalize(t, false);
    return add(standard_normal_log_prob(r.out), r.logdet);
}

Tensor FlowModel::sample(std::size_t n, double temperature, Rng& rng) const {
    if (n == 0) {
        throw ContractError("sample: n must be at least 1");
    }
    if (!(temperature >= 0.0)) {
        throw ContractError("sample: temperature must be non-negative");
    }
    Tensor z = mul_scalar(Tensor::randn({n, dim()}, rng), temperature);
    return forward(z).out;
}

void FlowModel::actnorm_init(const Tensor& batch) {
    if (actnorm_initialized()) {
        throw StateError("ActNorm already initialized");
    }
    if (batch.rank() != 2 || batch.dim(0) < 2) {
        throw ContractError("actnorm_init needs a batch of at least 2 rows");
    }
    NoGradGuard ng;
    normalize(batch.detach(), true);
    mark_initialized();
}

void FlowModel::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
    std::size_t flow_step = 0;
    for (const auto& step : steps_) {
        const std::string base = prefix + ".step" + std::to_string(flow_step);
        if (const auto* an = std::get_if<ActNormStep>(&step)) {
            out.push_back({base + ".actnorm.log_scale", an->log_scale, group});
            out.push_back({base + ".actnorm.bias", an->bias, group});
        } else if (const auto* sh = std::get_if<ShuffleStep>(&step)) {
            out.push_back({base + ".shuffle.perm", sh->perm, ParamGroup::buffer});
        } else if (const auto* cp = std::get_if<CouplingStep>(&step)) {
            cp->net.collect(out, base + ".coupling.net", group);
            ++flow_step;
        }
    }
    out.push_back({prefix + ".actnorm_initialized", initialized_, ParamGroup::buffer});
}

void FlowModel::validate() const {
    for (std::size_t i = 0; i < steps_.size(); ++i) {
        if (const auto* sh = std::get_if<ShuffleStep>(&steps_[i])) {
            for (double v : sh->perm.data()) {
                if (v != std::floor(v) || v < 0) {
                    throw StateError("flow step " + std::to_string(i) +
                                     ": stored permutation is not integral");
                }
            }
            const auto perm = perm_from_tensor(sh->perm);
            const auto inv = invert_permutation(perm);
            for (std::size_t j = 0; j < perm.size(); ++j) {
                if (inv[perm[j]] != j) {
                    throw StateError("flow step " + std::to_string(i) + ": broken permutation");
                }
            }
        }
    }
}

}  // namespace tzk
