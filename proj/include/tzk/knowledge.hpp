// SPDX-License-Identifier: Apache-2.0
//
// Knowledge heads. A head i models the pair k = (e, c): a binary existence
// flag and a C-dimensional code. All ops are batched over rows; `e` is a
// length-n vector of 0/1 values.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tzk/flows.hpp"
#include "tzk/nn.hpp"
#include "tzk/tensor.hpp"

namespace tzk {

class Rng;

enum class Label : std::uint8_t { negative = 0, positive = 1, unobserved = 255 };

/// Lower bound applied to every regressed standard deviation.
inline constexpr double kSigmaFloor = 1e-6;

struct HeadConfig {
    std::string id;
    std::size_t code_dim = 10;
    std::size_t hidden = 64;
    std::size_t hidden_layers = 2;
    std::size_t cflow_steps = 4;
    bool cflow_shuffle = true;
};

/// Diagonal Gaussian, both members [n x k].
struct Gaussian {
    Tensor mu;
    Tensor sigma;
};

/// Row-wise log N(x; mu, diag sigma^2) -> [n].
Tensor gaussian_log_prob(const Tensor& x, const Gaussian& g);
/// Row-wise Bernoulli log-probability of e under logit -> [n].
Tensor bernoulli_log_prob(const Tensor& logit, const std::vector<double>& e);

class KnowledgeHead {
public:
    KnowledgeHead() = default;
    /// Parameters are seeded from (seed, id) only, so construction order of
    /// heads does not matter.
    KnowledgeHead(const HeadConfig& config, std::size_t obs_dim, std::uint64_t seed);

    const std::string& id() const { return config_.id; }
    std::size_t code_dim() const { return config_.code_dim; }
    std::size_t obs_dim() const { return obs_dim_; }
    const HeadConfig& config() const { return config_; }

    Tensor disc_t_logit(const Tensor& t) const;  // [n]
    Tensor disc_c_logit(const Tensor& c) const;  // [n]

    /// p(c | e, t): encoder regressor, weight set picked per row by e.
    Gaussian encode(const Tensor& t, const std::vector<double>& e) const;
    /// p(z | e, c): decoder regressor over the t-flow latent.
    Gaussian decode(const Tensor& c, const std::vector<double>& e) const;

    Tensor log_p_e_given_t(const Tensor& t, const std::vector<double>& e) const;
    Tensor log_p_c_given_e_t(const Tensor& c, const std::vector<double>& e, const Tensor& t) const;
    Tensor log_p_t_given_e_c(const Tensor& t, const std::vector<double>& e, const Tensor& c,
                             const FlowModel& tflow) const;
    Tensor log_p_e_given_c(const Tensor& c, const std::vector<double>& e) const;
    /// p(k) = p(e | c) p(c).
    Tensor log_p_k(const Tensor& c, const std::vector<double>& e) const;

    /// Prior draw: c = c_flow.forward(eps).
    Tensor sample_c_prior(const Tensor& eps) const;
    /// Posterior draw: c = mu_c(t, e) + sigma_c(t, e) * eps.
    Tensor sample_c_posterior(const Tensor& t, const std::vector<double>& e,
                              const Tensor& eps) const;
    /// z = mu_z + temperature * sigma_z * eps, t = f_T(z).
    Tensor sample_t_given_c(const Tensor& c, const std::vector<double>& e, const FlowModel& tflow,
                            double temperature, Rng& rng) const;

    const FlowModel& c_flow() const { return cflow_; }

    void collect(ParamList& out, const std::string& prefix) const;

private:
    HeadConfig config_;
    std::size_t obs_dim_ = 0;
    Mlp disc_t_;
    Mlp disc_c_;
    Mlp enc_[2];
    Mlp dec_[2];
    FlowModel cflow_;
};

/// Constant e vector of length n.
std::vector<double> e_fill(std::size_t n, double value);

}  // namespace tzk
