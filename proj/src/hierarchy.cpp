// SPDX-License-Identifier: Apache-2.0
#include "tzk/hierarchy.hpp"

#include <cmath>

#include "tzk/errors.hpp"

namespace tzk {

namespace {

Tensor f64_buffer(Shape shape, std::vector<double> values) {
    PrecisionScope exact(Dtype::f64);
    return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace

HierarchicalModel::HierarchicalModel(TzkModel parent, std::string bridge_head, TzkModel child)
    : parent_(std::move(parent)), bridge_(std::move(bridge_head)), child_(std::move(child)) {
    const KnowledgeHead& b = parent_.head(bridge_);
    if (child_.obs_dim() != b.code_dim()) {
        throw ContractError("child observes " + std::to_string(child_.obs_dim()) +
                            " dims but bridge head '" + bridge_ + "' has code_dim " +
                            std::to_string(b.code_dim()));
    }
    for (const auto& id : child_.head_ids()) {
        if (parent_.has_head(id)) {
            throw ConfigError("head id '" + id + "' used by both parent and child");
        }
    }
    const std::size_t C = b.code_dim();
    loc_ = f64_buffer({C}, std::vector<double>(C, 0.0));
    log_scale_ = f64_buffer({C}, std::vector<double>(C, 0.0));
    standardized_ = f64_buffer({}, {0.0});
}

ParamList HierarchicalModel::params() const {
    ParamList out;
    for (auto& p : parent_.params()) {
        out.push_back({"parent." + p.name, p.tensor, p.group});
    }
    for (auto& p : child_.params()) {
        out.push_back({"child." + p.name, p.tensor, p.group});
    }
    out.push_back({"bridge.loc", loc_, ParamGroup::buffer});
    out.push_back({"bridge.log_scale", log_scale_, ParamGroup::buffer});
    out.push_back({"bridge.standardized", standardized_, ParamGroup::buffer});
    return out;
}

HierarchicalModel HierarchicalModel::child_view(const std::vector<std::string>& head_ids) const {
    HierarchicalModel out = *this;
    out.child_ = child_.view(head_ids);
    return out;
}

Tensor HierarchicalModel::to_child(const Tensor& codes) const {
    if (!bridge_standardized()) {
        return codes;
    }
    return mul_rowvec(add_rowvec(codes, neg(loc_)), exp(neg(log_scale_)));
}

Tensor HierarchicalModel::from_child(const Tensor& u) const {
    if (!bridge_standardized()) {
        return u;
    }
    return add_rowvec(mul_rowvec(u, exp(log_scale_)), loc_);
}

double HierarchicalModel::bridge_log_scale() const {
    double s = 0.0;
    for (double v : log_scale_.data()) {
        s += v;
    }
    return s;
}

bool HierarchicalModel::bridge_standardized() const {
    return standardized_.defined() && standardized_.item() != 0.0;
}

void HierarchicalModel::standardize_bridge(const Tensor& codes) {
    if (bridge_standardized()) {
        throw StateError("bridge already standardized");
    }
    const std::size_t C = loc_.numel();
    if (codes.rank() != 2 || codes.dim(1) != C || codes.dim(0) < 2) {
        throw ContractError("standardize_bridge needs at least two rows of width " +
                            std::to_string(C));
    }
    const std::size_t n = codes.dim(0);
    const auto v = codes.to_vector();
    std::vector<double> m(C, 0.0), ls(C, 0.0);
    for (std::size_t d = 0; d < C; ++d) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            acc += v[r * C + d];
        }
        m[d] = acc / static_cast<double>(n);
        double var = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            var += (v[r * C + d] - m[d]) * (v[r * C + d] - m[d]);
        }
        ls[d] = 0.5 * std::log(std::max(var / static_cast<double>(n), 1e-24));
    }
    loc_.assign(m);
    log_scale_.assign(ls);
    const double one = 1.0;
    standardized_.assign(std::span<const double>(&one, 1));
}

HierarchicalLoss hierarchical_loss(const HierarchicalModel& model, const Batch& parent_batch,
                                   const std::vector<HeadObservation>& child_labels, Rng& rng,
                                   BridgeCodes codes) {
    HierarchicalLoss out;
    out.parent_batch = fill_missing_codes(model.parent(), parent_batch, rng);
    out.parent = neg(mean(lower_bound(model.parent(), out.parent_batch)));

    const HeadColumn* bridge = nullptr;
    for (const auto& col : out.parent_batch.heads) {
        if (col.id == model.bridge()) {
            bridge = &col;
        }
    }
    if (!bridge) {
        throw LabelingError("batch carries no labels for bridge head '" + model.bridge() + "'");
    }
    if (bridge->c.dim(1) != model.child().obs_dim()) {
        throw ContractError("bridge code width differs from the child observation dimension");
    }
    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < bridge->e.size(); ++r) {
        if (bridge->e[r] != Label::unobserved) {
            rows.push_back(r);
        }
    }
    if (rows.empty()) {
        out.child = Tensor::scalar(0.0);
        out.total = out.parent;
        return out;
    }
    Batch child;
    if (codes == BridgeCodes::posterior_mean) {
        std::vector<double> e;
        for (std::size_t r : rows) {
            e.push_back(bridge->e[r] == Label::positive ? 1.0 : 0.0);
        }
        const Tensor t = rows.size() == bridge->e.size() ? parent_batch.t
                                                         : gather_rows(parent_batch.t, rows);
        child.t = model.to_child(model.parent().head(model.bridge()).encode(t, e).mu.detach());
    } else {
        child.t = model.to_child(rows.size() == bridge->e.size() ? bridge->c
                                                                  : gather_rows(bridge->c, rows));
    }
    for (const auto& lab : child_labels) {
        HeadObservation h;
        h.id = lab.id;
        for (std::size_t r : rows) {
            h.e.push_back(lab.e.at(r));
        }
        child.heads.push_back(std::move(h));
    }
    out.child_batch = fill_missing_codes(model.child(), child, rng);
    out.child = neg(mean(lower_bound(model.child(), out.child_batch)));
    if (model.bridge_standardized()) {
        out.child = add_scalar(out.child, model.bridge_log_scale());
    }
    out.total = add(out.parent, out.child);
    return out;
}

HierarchicalSample hierarchical_sample(const HierarchicalModel& model,
                                       const std::string& child_head, std::size_t n,
                                       double temperature, Rng& rng) {
    if (n == 0) {
        throw ContractError("hierarchical_sample: n must be at least 1");
    }
    const KnowledgeHead& ch = model.child().head(child_head);
    const KnowledgeHead& bh = model.parent().head(model.bridge());
    HierarchicalSample s;
    const Tensor eps = mul_scalar(Tensor::randn({n, ch.code_dim()}, rng), temperature);
    s.child_code = ch.sample_c_prior(eps);
    s.bridge = model.from_child(ch.sample_t_given_c(s.child_code, e_fill(n, 1.0),
                                                    model.child().tflow(), temperature, rng));
    s.t = bh.sample_t_given_c(s.bridge, e_fill(n, 1.0), model.parent().tflow(), temperature, rng);
    return s;
}

void train_hierarchical(HierarchicalModel& model, const Dataset& ds,
                        const HierarchyTrainConfig& config, TrainState& state) {
    const TrainConfig& tc = config.train;
    tc.validate();
    if (ds.size() == 0) {
        throw ContractError("training set is empty");
    }
    if (config.freeze_parent_tflow) {
        set_trainable(model.parent().tflow_params(), false);
    }
    if (config.freeze_child_tflow) {
        set_trainable(model.child().tflow_params(), false);
    }
    if (!model.parent().tflow().actnorm_initialized()) {
        ensure_actnorm(model.parent(), ds, tc);
    }
    if (config.standardize_bridge && !model.bridge_standardized()) {
        // posterior means of the bridge head on the first rows with an observed label
        const LabelColumn* col = ds.column(model.bridge());
        if (!col) {
            throw LabelingError("dataset has no labels for bridge head '" + model.bridge() + "'");
        }
        std::vector<std::size_t> idx;
        std::vector<double> e;
        for (std::size_t r = 0; r < ds.size() && idx.size() < tc.actnorm_init_rows; ++r) {
            if (col->e[r] != Label::unobserved) {
                idx.push_back(r);
                e.push_back(col->e[r] == Label::positive ? 1.0 : 0.0);
            }
        }
        if (idx.size() < 2) {
            throw LabelingError("too few observed bridge labels to standardize the bridge");
        }
        NoGradGuard ng;
        Rng deq(tc.seed);
        Tensor x = gather_rows(ds.x, idx).detach();
        if (ds.kind == DataKind::byte_image) {
            x = dequantize(x, deq);
        }
        const KnowledgeHead& bh = model.parent().head(model.bridge());
        model.standardize_bridge(bh.encode(x, e).mu.detach());
    }
    // The child's observations are codes that do not exist yet; start from identity.
    if (!model.child().tflow().actnorm_initialized()) {
        model.child().tflow().mark_initialized();
    }
    while (state.opt.step < tc.max_steps) {
        std::vector<std::size_t> rows(tc.batch_size);
        for (auto& r : rows) {
            r = state.rng.below(ds.size());
        }
        const Batch pb = make_batch(ds, rows, model.parent(), state.rng);
        std::vector<HeadObservation> child_labels;
        for (const auto& id : model.child().head_ids()) {
            const LabelColumn* col = ds.column(id);
            if (!col) {
                continue;
            }
            HeadObservation h;
            h.id = id;
            for (std::size_t r : rows) {
                h.e.push_back(col->e.at(r));
            }
            child_labels.push_back(std::move(h));
        }
        const std::size_t step = state.opt.step + 1;
        const double lr = lr_schedule(step, tc);
        HierarchicalLoss loss =
            hierarchical_loss(model, pb, child_labels, state.rng, config.bridge_codes);
        const ParamList params = model.params();
        if (loss.total.requires_grad()) {
            backward(loss.total);
        }
        state.opt.step = step;
        adam_update(params, state.opt, tc, lr);
    }
}

}  // namespace tzk
