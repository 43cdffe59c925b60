// SPDX-License-Identifier: Apache-2.0
#include "tzk/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include "tzk/errors.hpp"
#include "tzk/rng.hpp"

namespace tzk {

TzkModel::TzkModel(const FlowConfig& tflow, const std::vector<HeadConfig>& heads,
                   std::uint64_t seed)
    : tflow_(tflow, derive_seed(seed, "tflow")), seed_(seed) {
    for (const auto& h : heads) {
        add_head(h);
    }
}

bool TzkModel::has_head(const std::string& id) const {
    return std::any_of(heads_.begin(), heads_.end(),
                       [&](const KnowledgeHead& h) { return h.id() == id; });
}

const KnowledgeHead& TzkModel::head(const std::string& id) const {
    for (const auto& h : heads_) {
        if (h.id() == id) {
            return h;
        }
    }
    std::string avail;
    for (const auto& h : heads_) {
        avail += (avail.empty() ? "" : ", ") + h.id();
    }
    throw KeyError("unknown head '" + id + "'; available: [" + avail + "]");
}

std::vector<std::string> TzkModel::head_ids() const {
    std::vector<std::string> ids;
    for (const auto& h : heads_) {
        ids.push_back(h.id());
    }
    return ids;
}

void TzkModel::add_head(const HeadConfig& config) {
    if (has_head(config.id)) {
        throw KeyError("head '" + config.id + "' already exists");
    }
    heads_.emplace_back(config, obs_dim(), seed_);
}

TzkModel TzkModel::view(const std::vector<std::string>& ids) const {
    TzkModel m;
    m.tflow_ = tflow_;
    m.seed_ = seed_;
    for (const auto& id : ids) {
        m.heads_.push_back(head(id));
    }
    return m;
}

ParamList TzkModel::tflow_params() const {
    ParamList out;
    tflow_.collect(out, "tflow", ParamGroup::tflow);
    return out;
}

ParamList TzkModel::params() const {
    ParamList out = tflow_params();
    for (const auto& h : heads_) {
        h.collect(out, "head." + h.id());
    }
    return out;
}

namespace {

struct Participation {
    std::vector<double> e;     // 0/1, unobserved rows set to 0
    std::vector<double> mask;  // 1 where observed
    bool any = false;
    bool all = false;
};

Participation participation(const HeadColumn& col, std::size_t n) {
    if (col.e.size() != n) {
        throw DimensionError("head '" + col.id + "': label column length " +
                             std::to_string(col.e.size()) + " for " + std::to_string(n) +
                             " rows");
    }
    Participation p;
    p.e.resize(n);
    p.mask.resize(n);
    p.all = true;
    for (std::size_t r = 0; r < n; ++r) {
        const bool obs = col.e[r] != Label::unobserved;
        p.e[r] = col.e[r] == Label::positive ? 1.0 : 0.0;
        p.mask[r] = obs ? 1.0 : 0.0;
        p.any = p.any || obs;
        p.all = p.all && obs;
    }
    return p;
}

Tensor masked(const Tensor& x, const Participation& p) {
    return p.all ? x : mul(x, Tensor::from({p.mask.size()}, p.mask));
}

void check_batch(const TzkModel& model, const JointBatch& batch) {
    if (!batch.t.defined() || batch.t.rank() != 2 || batch.t.dim(1) != model.obs_dim()) {
        throw DimensionError("batch observations must be [n x " +
                             std::to_string(model.obs_dim()) + "]");
    }
    for (const auto& col : batch.heads) {
        model.head(col.id);
    }
}

}  // namespace

Tensor log_p_enc(const TzkModel& model, const JointBatch& batch) {
    check_batch(model, batch);
    const std::size_t n = batch.size();
    Tensor total = model.tflow().log_prob(batch.t);
    for (const auto& col : batch.heads) {
        const Participation p = participation(col, n);
        if (!p.any) {
            continue;
        }
        const KnowledgeHead& h = model.head(col.id);
        Tensor term = add(h.log_p_c_given_e_t(col.c, p.e, batch.t), h.log_p_e_given_t(batch.t, p.e));
        total = add(total, masked(term, p));
    }
    return total;
}

Tensor log_p_dec(const TzkModel& model, const JointBatch& batch) {
    check_batch(model, batch);
    const std::size_t n = batch.size();
    std::vector<double> k_row(n, 0.0);
    Tensor total = Tensor::zeros({n});
    for (const auto& col : batch.heads) {
        const Participation p = participation(col, n);
        if (!p.any) {
            continue;
        }
        for (std::size_t r = 0; r < n; ++r) {
            k_row[r] += p.mask[r];
        }
        const KnowledgeHead& h = model.head(col.id);
        Tensor term = add(h.log_p_t_given_e_c(batch.t, p.e, col.c, model.tflow()),
                          h.log_p_k(col.c, p.e));
        total = add(total, masked(term, p));
    }
    std::vector<double> coef(n);
    for (std::size_t r = 0; r < n; ++r) {
        coef[r] = 1.0 - k_row[r];
    }
    // -(K - 1) log p(t); the K = 1 case contributes nothing.
    const bool skip = std::all_of(coef.begin(), coef.end(), [](double v) { return v == 0.0; });
    if (!skip) {
        total = add(total, mul(model.tflow().log_prob(batch.t), Tensor::from({n}, coef)));
    }
    return total;
}

Tensor lower_bound_from(const Tensor& enc, const Tensor& dec) {
    return mul_scalar(add(enc, dec), 0.5);
}

Tensor log_mixture_from(const Tensor& enc, const Tensor& dec) {
    // (enc + dec)/2 + log cosh((enc - dec)/2): equal to the bound when enc == dec
    return add(lower_bound_from(enc, dec), log_cosh(mul_scalar(sub(enc, dec), 0.5)));
}

Tensor consistency_gap_from(const Tensor& enc, const Tensor& dec) {
    return neg(log_cosh(mul_scalar(sub(enc, dec), 0.5)));
}

Tensor lower_bound(const TzkModel& model, const JointBatch& batch) {
    return lower_bound_from(log_p_enc(model, batch), log_p_dec(model, batch));
}

Tensor log_mixture(const TzkModel& model, const JointBatch& batch) {
    return log_mixture_from(log_p_enc(model, batch), log_p_dec(model, batch));
}

Tensor consistency_gap(const TzkModel& model, const JointBatch& batch) {
    return consistency_gap_from(log_p_enc(model, batch), log_p_dec(model, batch));
}

namespace {

JointBatch row_of(const JointBatch& batch, std::size_t r) {
    const std::size_t idx[1] = {r};
    JointBatch out;
    out.t = gather_rows(batch.t, idx).detach();
    for (const auto& col : batch.heads) {
        HeadColumn c{col.id, {col.e[r]}, gather_rows(col.c, idx).detach()};
        out.heads.push_back(std::move(c));
    }
    return out;
}

std::vector<std::vector<double>> grads_of(const Tensor& objective, const ParamList& params) {
    for (const auto& p : params) {
        Tensor(p.tensor).zero_grad();
    }
    backward(sum(objective));
    std::vector<std::vector<double>> g;
    for (const auto& p : params) {
        if (p.tensor.has_grad()) {
            g.emplace_back(p.tensor.grad().begin(), p.tensor.grad().end());
        } else {
            g.emplace_back(p.tensor.numel(), 0.0);
        }
    }
    return g;
}

}  // namespace

double gradient_identity_check(const TzkModel& model, const JointBatch& batch) {
    PrecisionScope exact(Dtype::f64);
    ParamList params;
    for (const auto& p : model.params()) {
        if (p.group != ParamGroup::buffer && p.tensor.requires_grad()) {
            params.push_back(p);
        }
    }
    double worst = 0.0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const JointBatch point = row_of(batch, r);
        const auto g_lb = grads_of(lower_bound(model, point), params);
        const auto g_mix = grads_of(log_mixture(model, point), params);
        const Tensor enc = log_p_enc(model, point);
        const double le = enc.item();
        const auto g_enc = grads_of(enc, params);
        const Tensor dec = log_p_dec(model, point);
        const double ld = dec.item();
        const auto g_dec = grads_of(dec, params);

        const double r_de = std::exp(ld - le);
        const double r_ed = std::exp(le - ld);
        for (std::size_t i = 0; i < params.size(); ++i) {
            for (std::size_t j = 0; j < g_lb[i].size(); ++j) {
                const double corr =
                    0.5 * ((r_de - 1.0) * g_enc[i][j] + (r_ed - 1.0) * r_de * g_dec[i][j]) /
                    (1.0 + r_de);
                worst = std::max(worst, std::abs(g_lb[i][j] - (g_mix[i][j] + corr)));
            }
        }
        for (const auto& p : params) {
            Tensor(p.tensor).zero_grad();
        }
    }
    return worst;
}

Diagnostics diagnose(const TzkModel& model, const JointBatch& batch) {
    NoGradGuard ng;
    const Tensor enc = log_p_enc(model, batch);
    const Tensor dec = log_p_dec(model, batch);
    const Tensor lb = lower_bound_from(enc, dec);
    const Tensor mix = log_mixture_from(enc, dec);
    const Tensor gap = consistency_gap_from(enc, dec);
    Diagnostics d;
    const double n = static_cast<double>(batch.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        d.bound += lb.at(r) / n;
        d.mixture += mix.at(r) / n;
        d.gap += gap.at(r) / n;
        d.jensen_violation = std::max(d.jensen_violation, lb.at(r) - mix.at(r));
        d.identity_deviation =
            std::max(d.identity_deviation, std::abs(lb.at(r) - (mix.at(r) + gap.at(r))));
    }
    return d;
}

void write_diagnostics_header(std::ostream& os) {
    os << "batch,bound,mixture,gap,jensen_violation,identity_deviation\n";
}

void write_diagnostics_row(std::ostream& os, std::size_t batch_index, const Diagnostics& d) {
    os << batch_index << ',' << d.bound << ',' << d.mixture << ',' << d.gap << ','
       << d.jensen_violation << ',' << d.identity_deviation << '\n';
}

}  // namespace tzk
