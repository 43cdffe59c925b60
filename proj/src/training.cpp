// SPDX-License-Identifier: Apache-2.0
#include "tzk/training.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iostream>
#include <thread>

#include "tzk/errors.hpp"

namespace tzk {

void TrainConfig::validate() const {
    if (!(lr_max >= 0.0)) {
        throw ConfigError("lr_max must be non-negative");
    }
    if (warmup_steps < 1) {
        throw ConfigError("warmup_steps must be at least 1");
    }
    if (batch_size < 1) {
        throw ConfigError("batch_size must be at least 1");
    }
    if (grad_clip_norm && !(*grad_clip_norm > 0.0)) {
        throw ConfigError("grad_clip_norm must be positive");
    }
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
          adam.eps > 0.0)) {
        throw ConfigError("invalid Adam parameters");
    }
}

void OptimizerState::extend(const ParamList& params) {
    for (const auto& p : params) {
        if (p.group == ParamGroup::buffer || moments.count(p.name)) {
            continue;
        }
        Moments m;
        m.m.assign(p.tensor.numel(), 0.0);
        m.v.assign(p.tensor.numel(), 0.0);
        moments.emplace(p.name, std::move(m));
    }
}

Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& rows, const TzkModel& model,
                 Rng& rng) {
    Batch b;
    Tensor x = gather_rows(ds.x, rows).detach();
    b.t = ds.kind == DataKind::byte_image ? dequantize(x, rng) : x;
    for (const auto& col : ds.labels) {
        if (!model.has_head(col.id)) {
            continue;
        }
        HeadObservation h;
        h.id = col.id;
        for (std::size_t r : rows) {
            h.e.push_back(col.e.at(r));
        }
        b.heads.push_back(std::move(h));
    }
    return b;
}

JointBatch fill_missing_codes(const TzkModel& model, const Batch& batch, Rng& rng,
                              std::vector<bool>* encoder_branch) {
    const std::size_t n = batch.size();
    std::vector<bool> enc(n);
    for (std::size_t r = 0; r < n; ++r) {
        enc[r] = rng.bernoulli(0.5);
    }
    JointBatch out;
    out.t = batch.t;
    for (const auto& obs : batch.heads) {
        const KnowledgeHead& h = model.head(obs.id);
        const std::size_t C = h.code_dim();
        if (obs.e.size() != n) {
            throw DimensionError("head '" + obs.id + "': label column length mismatch");
        }
        const bool has_c = obs.c.defined();
        if (has_c && (obs.c.rank() != 2 || obs.c.dim(0) != n || obs.c.dim(1) != C)) {
            throw DimensionError("head '" + obs.id + "': observed codes must be [n x " +
                                 std::to_string(C) + "]");
        }
        std::vector<double> e(n), m_enc(n, 0.0), m_dec(n, 0.0), m_obs(n, 0.0);
        bool any_enc = false, any_dec = false, any_obs = false;
        for (std::size_t r = 0; r < n; ++r) {
            const bool c_obs = has_c && r < obs.c_observed.size() && obs.c_observed[r];
            if (obs.e[r] == Label::unobserved) {
                if (c_obs) {
                    throw LabelingError("head '" + obs.id + "', row " + std::to_string(r) +
                                        ": code given without an existence label");
                }
                continue;
            }
            if (obs.e[r] != Label::negative && obs.e[r] != Label::positive) {
                throw LabelingError("head '" + obs.id + "': invalid label byte");
            }
            e[r] = obs.e[r] == Label::positive ? 1.0 : 0.0;
            if (c_obs) {
                m_obs[r] = 1.0;
                any_obs = true;
            } else if (enc[r]) {
                m_enc[r] = 1.0;
                any_enc = true;
            } else {
                m_dec[r] = 1.0;
                any_dec = true;
            }
        }
        const Tensor eps = Tensor::randn({n, C}, rng);
        Tensor c;
        auto accumulate = [&](const Tensor& part, const std::vector<double>& mask) {
            Tensor term = scale_rows(part, Tensor::from({n}, mask));
            c = c.defined() ? add(c, term) : term;
        };
        if (any_enc) {
            accumulate(h.sample_c_posterior(batch.t, e, eps), m_enc);
        }
        if (any_dec) {
            accumulate(h.sample_c_prior(eps), m_dec);
        }
        if (any_obs) {
            accumulate(obs.c, m_obs);
        }
        if (!c.defined()) {
            c = Tensor::zeros({n, C});
        }
        out.heads.push_back({obs.id, obs.e, c});
    }
    if (encoder_branch) {
        *encoder_branch = enc;
    }
    return out;
}

double lr_schedule(std::size_t step, const TrainConfig& config) {
    if (step == 0) {
        throw ContractError("lr_schedule: steps count from 1");
    }
    const double s = static_cast<double>(step);
    const double w = static_cast<double>(config.warmup_steps);
    return config.lr_max * std::min(s / w, std::sqrt(w / s));
}

void adam_update(const ParamList& params, OptimizerState& opt, const TrainConfig& config,
                 double lr) {
    std::vector<const NamedTensor*> active;
    double norm2 = 0.0;
    for (const auto& p : params) {
        if (p.group == ParamGroup::buffer || !p.tensor.requires_grad() || !p.tensor.has_grad()) {
            continue;
        }
        active.push_back(&p);
        for (double g : p.tensor.grad()) {
            norm2 += g * g;
        }
    }
    double scale = 1.0;
    if (config.grad_clip_norm) {
        const double norm = std::sqrt(norm2);
        if (norm > *config.grad_clip_norm) {
            scale = *config.grad_clip_norm / norm;
        }
    }
    const AdamConfig& a = config.adam;
    for (const NamedTensor* p : active) {
        auto it = opt.moments.find(p->name);
        if (it == opt.moments.end()) {
            Moments m;
            m.m.assign(p->tensor.numel(), 0.0);
            m.v.assign(p->tensor.numel(), 0.0);
            it = opt.moments.emplace(p->name, std::move(m)).first;
        }
        Moments& mo = it->second;
        mo.step += 1;
        const double bc1 = 1.0 - std::pow(a.beta1, static_cast<double>(mo.step));
        const double bc2 = 1.0 - std::pow(a.beta2, static_cast<double>(mo.step));
        const auto g = p->tensor.grad();
        const auto x = p->tensor.data();
        std::vector<double> next(x.begin(), x.end());
        for (std::size_t i = 0; i < next.size(); ++i) {
            const double gi = g[i] * scale;
            mo.m[i] = a.beta1 * mo.m[i] + (1.0 - a.beta1) * gi;
            mo.v[i] = a.beta2 * mo.v[i] + (1.0 - a.beta2) * gi * gi;
            const double mhat = mo.m[i] / bc1;
            const double vhat = mo.v[i] / bc2;
            next[i] -= lr * mhat / (std::sqrt(vhat) + a.eps);
        }
        Tensor t = p->tensor;
        t.assign(next);
    }
    // Frozen tensors never receive gradients and may be shared across threads.
    for (const auto& p : params) {
        if (p.tensor.requires_grad()) {
            Tensor t = p.tensor;
            t.zero_grad();
        }
    }
}

namespace {

std::string failing_rows(const TzkModel& model, const Batch& batch, Rng rng) {
    NoGradGuard ng;
    std::string rows;
    try {
        const JointBatch jb = fill_missing_codes(model, batch, rng);
        for (std::size_t r = 0; r < batch.size(); ++r) {
            const std::size_t idx[1] = {r};
            JointBatch one;
            one.t = gather_rows(jb.t, idx);
            for (const auto& col : jb.heads) {
                one.heads.push_back({col.id, {col.e[r]}, gather_rows(col.c, idx)});
            }
            try {
                lower_bound(model, one);
            } catch (const NumericError&) {
                rows += (rows.empty() ? "" : ",") + std::to_string(r);
            }
        }
    } catch (const NumericError&) {
        return "code filling";
    }
    return rows.empty() ? "none isolated" : rows;
}

}  // namespace

StepStats train_step(TzkModel& model, const Batch& batch, OptimizerState& opt,
                     const TrainConfig& config, Rng& rng) {
    if (batch.size() == 0) {
        throw ContractError("train_step on an empty batch");
    }
    if (!model.tflow().actnorm_initialized()) {
        throw StateError("train_step before ActNorm initialization");
    }
    StepStats st;
    st.step = opt.step + 1;
    st.lr = lr_schedule(st.step, config);
    const Rng rng_before = rng;
    Tensor loss;
    Tensor enc, dec;
    try {
        const JointBatch jb = fill_missing_codes(model, batch, rng);
        enc = log_p_enc(model, jb);
        dec = log_p_dec(model, jb);
        loss = neg(mean(lower_bound_from(enc, dec)));
    } catch (const NumericError& e) {
        throw NumericError("step " + std::to_string(st.step) + ": " + e.what() +
                           "; non-finite rows: " + failing_rows(model, batch, rng_before));
    }
    st.loss = loss.item();
    {
        NoGradGuard ng;
        const double n = static_cast<double>(batch.size());
        const Tensor lb = lower_bound_from(enc.detach(), dec.detach());
        const Tensor mix = log_mixture_from(enc.detach(), dec.detach());
        const Tensor gap = consistency_gap_from(enc.detach(), dec.detach());
        for (std::size_t r = 0; r < batch.size(); ++r) {
            st.bound += lb.at(r) / n;
            st.mixture += mix.at(r) / n;
            st.gap += gap.at(r) / n;
        }
    }
    const ParamList params = model.params();
    if (loss.requires_grad()) {
        backward(loss);
    }
    opt.step = st.step;
    adam_update(params, opt, config, st.lr);
    return st;
}

TrainState TrainState::fresh(const TrainConfig& config) {
    return TrainState{OptimizerState{}, Rng(derive_seed(config.seed, "train"))};
}

void ensure_actnorm(TzkModel& model, const Dataset& ds, const TrainConfig& config) {
    if (model.tflow().actnorm_initialized()) {
        return;
    }
    const std::size_t rows = std::min(ds.size(), config.actnorm_init_rows);
    std::vector<std::size_t> idx(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        idx[i] = i;
    }
    Tensor x = gather_rows(ds.x, idx).detach();
    if (ds.kind == DataKind::byte_image) {
        x = mul_scalar(add_scalar(x, 0.5), 1.0 / 256.0).detach();
    }
    model.tflow().actnorm_init(x);
}

double batch_disc_accuracy(const TzkModel& model, const Batch& batch, const std::string& id) {
    NoGradGuard ng;
    for (const auto& h : batch.heads) {
        if (h.id != id) {
            continue;
        }
        const Tensor logit = model.head(id).disc_t_logit(batch.t);
        std::size_t seen = 0, right = 0;
        for (std::size_t r = 0; r < batch.size(); ++r) {
            if (h.e[r] == Label::unobserved) {
                continue;
            }
            ++seen;
            const bool pred = logit.at(r) > 0.0;
            right += pred == (h.e[r] == Label::positive) ? 1 : 0;
        }
        return seen ? static_cast<double>(right) / static_cast<double>(seen) : 0.0;
    }
    return 0.0;
}

void train(TzkModel& model, const Dataset& ds, const TrainConfig& config, TrainState& state,
           const TrainHooks& hooks) {
    config.validate();
    if (ds.size() == 0) {
        throw ContractError("training set is empty");
    }
    auto warn = [&](const std::string& msg) {
        if (hooks.warn) {
            hooks.warn(msg);
        } else {
            std::cerr << "warning: " << msg << '\n';
        }
    };
    if (config.freeze_tflow) {
        if (!model.tflow().actnorm_initialized()) {
            warn("freezing a t-flow that was never trained; it stays at its random initialization");
        }
        set_trainable(model.tflow_params(), false);
    }
    if (state.opt.step >= config.max_steps) {
        return;
    }
    if (!model.tflow().actnorm_initialized()) {
        if (config.freeze_tflow) {
            model.tflow().mark_initialized();
        } else {
            ensure_actnorm(model, ds, config);
        }
    }
    const auto ids = model.head_ids();
    if (hooks.log && state.opt.step == 0) {
        *hooks.log << "step,lr,loss,bound,mixture,gap";
        for (const auto& id : ids) {
            *hooks.log << ",acc_" << id;
        }
        *hooks.log << '\n';
    }
    while (state.opt.step < config.max_steps) {
        std::vector<std::size_t> rows(config.batch_size);
        for (auto& r : rows) {
            r = state.rng.below(ds.size());
        }
        const Batch batch = make_batch(ds, rows, model, state.rng);
        const StepStats st = train_step(model, batch, state.opt, config, state.rng);
        if (hooks.log && config.log_every > 0 &&
            (st.step % config.log_every == 0 || st.step == 1 || st.step == config.max_steps)) {
            *hooks.log << st.step << ',' << st.lr << ',' << st.loss << ',' << st.bound << ','
                       << st.mixture << ',' << st.gap;
            for (const auto& id : ids) {
                *hooks.log << ',' << batch_disc_accuracy(model, batch, id);
            }
            *hooks.log << '\n';
        }
        if (hooks.checkpoint && config.checkpoint_every > 0 &&
            st.step % config.checkpoint_every == 0) {
            hooks.checkpoint(st.step);
        }
    }
}

void add_knowledge(TzkModel& model, const HeadConfig& config, OptimizerState* opt) {
    model.add_head(config);
    if (opt) {
        opt->extend(model.params());
    }
}

SpecializeResult specialize(TzkModel& model, const Dataset& ds,
                            const std::vector<std::string>& head_ids, const TrainConfig& config,
                            bool parallel) {
    config.validate();
    if (!model.tflow().actnorm_initialized()) {
        throw StateError("specialize needs a pre-trained t-flow");
    }
    SpecializeResult result;
    if (head_ids.size() < 2) {
        result.warnings.push_back(
            "fewer than two labeled groups: discriminators have no negatives to separate");
    }
    for (const auto& id : head_ids) {
        model.head(id);
        const LabelColumn* col = ds.column(id);
        if (!col) {
            throw KeyError("dataset has no label column for head '" + id + "'");
        }
        const bool has_neg = std::any_of(col->e.begin(), col->e.end(),
                                         [](Label l) { return l == Label::negative; });
        if (!has_neg) {
            result.warnings.push_back("head '" + id + "' has no negative examples");
        }
    }
    for (const auto& w : result.warnings) {
        std::cerr << "warning: " << w << '\n';
    }
    // Freeze once up front; worker threads only read the flow.
    set_trainable(model.tflow_params(), false);
    TrainConfig cfg = config;
    cfg.freeze_tflow = false;

    std::vector<double> losses(head_ids.size(), 0.0);
    auto run = [&](std::size_t i) {
        TzkModel view = model.view({head_ids[i]});
        TrainState state{OptimizerState{},
                         Rng(derive_seed(config.seed, "specialize." + head_ids[i]))};
        StepStats last;
        while (state.opt.step < cfg.max_steps) {
            std::vector<std::size_t> rows(cfg.batch_size);
            for (auto& r : rows) {
                r = state.rng.below(ds.size());
            }
            const Batch batch = make_batch(ds, rows, view, state.rng);
            last = train_step(view, batch, state.opt, cfg, state.rng);
        }
        losses[i] = last.loss;
    };

    if (parallel) {
        std::vector<std::thread> threads;
        std::vector<std::exception_ptr> errors(head_ids.size());
        for (std::size_t i = 0; i < head_ids.size(); ++i) {
            threads.emplace_back([&, i] {
                try {
                    run(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            });
        }
        for (auto& t : threads) {
            t.join();
        }
        for (auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    } else {
        for (std::size_t i = 0; i < head_ids.size(); ++i) {
            run(i);
        }
    }
    for (std::size_t i = 0; i < head_ids.size(); ++i) {
        result.final_loss[head_ids[i]] = losses[i];
    }
    return result;
}

}  // namespace tzk
