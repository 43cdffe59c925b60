// SPDX-License-Identifier: Apache-2.0
#include "tzk/knowledge.hpp"

#include <algorithm>
#include <cmath>

#include "tzk/errors.hpp"
#include "tzk/rng.hpp"

namespace tzk {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178032973640562;
// softplus(0 + kSigmaOffset) == 1, so a zeroed regressor yields sigma = 1.
const double kSigmaOffset = std::log(std::exp(1.0) - 1.0);

Tensor weights(const std::vector<double>& e, bool positive) {
    std::vector<double> w(e.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
        w[i] = positive ? e[i] : 1.0 - e[i];
    }
    return Tensor::from({e.size()}, std::move(w));
}

void check_e(const std::vector<double>& e, std::size_t n) {
    if (e.size() != n) {
        throw DimensionError("e has " + std::to_string(e.size()) + " entries for " +
                             std::to_string(n) + " rows");
    }
    for (double v : e) {
        if (v != 0.0 && v != 1.0) {
            throw ContractError("e must be 0 or 1");
        }
    }
}

void check_rows(const Tensor& x, std::size_t cols, const char* what) {
    if (x.rank() != 2 || x.dim(1) != cols) {
        throw DimensionError(std::string(what) + ": expected [n x " + std::to_string(cols) +
                             "], got " + shape_str(x.shape()));
    }
}

// Runs the e=1 and e=0 networks and blends per row; only one runs when e is constant.
Tensor pick(const Mlp (&nets)[2], const Tensor& x, const std::vector<double>& e) {
    const bool all1 = std::all_of(e.begin(), e.end(), [](double v) { return v == 1.0; });
    const bool all0 = std::all_of(e.begin(), e.end(), [](double v) { return v == 0.0; });
    if (all1) {
        return nets[1](x);
    }
    if (all0) {
        return nets[0](x);
    }
    return add(scale_rows(nets[1](x), weights(e, true)), scale_rows(nets[0](x), weights(e, false)));
}

Gaussian split_gaussian(const Tensor& out, std::size_t k) {
    Tensor mu = slice_cols(out, 0, k);
    Tensor raw = slice_cols(out, k, 2 * k);
    return {mu, clamp_min(softplus(add_scalar(raw, kSigmaOffset)), kSigmaFloor)};
}

}  // namespace

std::vector<double> e_fill(std::size_t n, double value) { return std::vector<double>(n, value); }

Tensor gaussian_log_prob(const Tensor& x, const Gaussian& g) {
    const Tensor r = div(sub(x, g.mu), g.sigma);
    const double k = static_cast<double>(x.dim(1));
    return add_scalar(neg(add(mul_scalar(sum_rows(square(r)), 0.5), sum_rows(log(g.sigma)))),
                      -k * kHalfLog2Pi);
}

Tensor bernoulli_log_prob(const Tensor& logit, const std::vector<double>& e) {
    check_e(e, logit.numel());
    return add(mul(log_sigmoid(logit), weights(e, true)),
               mul(log_sigmoid(neg(logit)), weights(e, false)));
}

KnowledgeHead::KnowledgeHead(const HeadConfig& config, std::size_t obs_dim, std::uint64_t seed)
    : config_(config), obs_dim_(obs_dim) {
    if (config.id.empty()) {
        throw ConfigError("head id must be non-empty");
    }
    if (config.code_dim == 0 || obs_dim == 0) {
        throw ConfigError("head '" + config.id + "': dimensions must be positive");
    }
    const std::uint64_t hs = derive_seed(seed, "head." + config.id);
    Rng rng(hs);
    const std::size_t C = config.code_dim;
    const std::size_t D = obs_dim;
    const std::size_t H = config.hidden;
    const std::size_t L = config.hidden_layers;
    disc_t_ = Mlp({D, 1, H, L, true}, rng);
    disc_c_ = Mlp({C, 1, H, L, true}, rng);
    for (int e = 0; e < 2; ++e) {
        enc_[e] = Mlp({D, 2 * C, H, L, true}, rng);
    }
    for (int e = 0; e < 2; ++e) {
        dec_[e] = Mlp({C, 2 * D, H, L, true}, rng);
    }
    FlowConfig fc;
    fc.dim = C;
    fc.layers = 1;
    fc.steps = config.cflow_steps;
    fc.hidden = H;
    fc.hidden_layers = L;
    fc.shuffle = config.cflow_shuffle;
    cflow_ = FlowModel(fc, derive_seed(hs, "cflow"));
    // Codes do not exist before training, so the code flow starts from the identity ActNorm.
    cflow_.mark_initialized();
}

Tensor KnowledgeHead::disc_t_logit(const Tensor& t) const {
    check_rows(t, obs_dim_, "disc_t");
    return reshape(disc_t_(t), {t.dim(0)});
}

Tensor KnowledgeHead::disc_c_logit(const Tensor& c) const {
    check_rows(c, code_dim(), "disc_c");
    return reshape(disc_c_(c), {c.dim(0)});
}

Gaussian KnowledgeHead::encode(const Tensor& t, const std::vector<double>& e) const {
    check_rows(t, obs_dim_, "encode");
    check_e(e, t.dim(0));
    return split_gaussian(pick(enc_, t, e), code_dim());
}

Gaussian KnowledgeHead::decode(const Tensor& c, const std::vector<double>& e) const {
    check_rows(c, code_dim(), "decode");
    check_e(e, c.dim(0));
    return split_gaussian(pick(dec_, c, e), obs_dim_);
}

Tensor KnowledgeHead::log_p_e_given_t(const Tensor& t, const std::vector<double>& e) const {
    return bernoulli_log_prob(disc_t_logit(t), e);
}

Tensor KnowledgeHead::log_p_c_given_e_t(const Tensor& c, const std::vector<double>& e,
                                        const Tensor& t) const {
    check_rows(c, code_dim(), "log_p_c_given_e_t");
    return gaussian_log_prob(c, encode(t, e));
}

Tensor KnowledgeHead::log_p_t_given_e_c(const Tensor& t, const std::vector<double>& e,
                                        const Tensor& c, const FlowModel& tflow) const {
    check_rows(t, obs_dim_, "log_p_t_given_e_c");
    const FlowModel::Result inv = tflow.inverse(t);
    return add(gaussian_log_prob(inv.out, decode(c, e)), inv.logdet);
}

Tensor KnowledgeHead::log_p_e_given_c(const Tensor& c, const std::vector<double>& e) const {
    return bernoulli_log_prob(disc_c_logit(c), e);
}

Tensor KnowledgeHead::log_p_k(const Tensor& c, const std::vector<double>& e) const {
    return add(log_p_e_given_c(c, e), cflow_.log_prob(c));
}

Tensor KnowledgeHead::sample_c_prior(const Tensor& eps) const {
    check_rows(eps, code_dim(), "sample_c_prior");
    return cflow_.forward(eps).out;
}

Tensor KnowledgeHead::sample_c_posterior(const Tensor& t, const std::vector<double>& e,
                                         const Tensor& eps) const {
    if (!t.defined()) {
        throw ContractError("posterior sampling needs an observation t");
    }
    check_rows(eps, code_dim(), "sample_c_posterior");
    const Gaussian g = encode(t, e);
    return add(g.mu, mul(g.sigma, eps));
}

Tensor KnowledgeHead::sample_t_given_c(const Tensor& c, const std::vector<double>& e,
                                       const FlowModel& tflow, double temperature,
                                       Rng& rng) const {
    const Gaussian g = decode(c, e);
    const Tensor eps = Tensor::randn({c.dim(0), obs_dim_}, rng);
    const Tensor z = add(g.mu, mul_scalar(mul(g.sigma, eps), temperature));
    return tflow.forward(z).out;
}

void KnowledgeHead::collect(ParamList& out, const std::string& prefix) const {
    disc_t_.collect(out, prefix + ".disc_t", ParamGroup::encoder);
    enc_[0].collect(out, prefix + ".enc0", ParamGroup::encoder);
    enc_[1].collect(out, prefix + ".enc1", ParamGroup::encoder);
    disc_c_.collect(out, prefix + ".disc_c", ParamGroup::decoder);
    dec_[0].collect(out, prefix + ".dec0", ParamGroup::decoder);
    dec_[1].collect(out, prefix + ".dec1", ParamGroup::decoder);
    cflow_.collect(out, prefix + ".cflow", ParamGroup::decoder);
}

}  // namespace tzk
