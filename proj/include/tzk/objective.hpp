// SPDX-License-Identifier: Apache-2.0
//
// The joint model over (t, k^1..k^K) and its two factorizations.
//
//   enc: log p(t) + sum_i [log p(c_i | e_i, t) + log p(e_i | t)]
//   dec: sum_i [log p(t | e_i, c_i) + log p(e_i | c_i) + log p(c_i)] - (K - 1) log p(t)
//
// A head takes part in a row only where its e is observed; K counts the
// participating heads of that row.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tzk/flows.hpp"
#include "tzk/knowledge.hpp"

namespace tzk {

class TzkModel {
public:
    TzkModel() = default;
    TzkModel(const FlowConfig& tflow, const std::vector<HeadConfig>& heads, std::uint64_t seed);

    FlowModel& tflow() { return tflow_; }
    const FlowModel& tflow() const { return tflow_; }
    std::size_t obs_dim() const { return tflow_.dim(); }
    std::uint64_t seed() const { return seed_; }

    std::size_t num_heads() const { return heads_.size(); }
    const std::vector<KnowledgeHead>& heads() const { return heads_; }
    bool has_head(const std::string& id) const;
    /// Throws KeyError listing the available ids.
    const KnowledgeHead& head(const std::string& id) const;
    std::vector<std::string> head_ids() const;

    /// Appends a freshly initialized head; existing parameters are untouched.
    void add_head(const HeadConfig& config);
    /// A model sharing this one's t-flow and the named heads (same tensors).
    TzkModel view(const std::vector<std::string>& ids) const;

    /// tflow.* and head.{id}.* entries, parameters and buffers.
    ParamList params() const;
    ParamList tflow_params() const;

private:
    FlowModel tflow_;
    std::vector<KnowledgeHead> heads_;
    std::uint64_t seed_ = 0;
};

/// One head's column of a completed batch.
struct HeadColumn {
    std::string id;
    std::vector<Label> e;  // unobserved rows do not take part
    Tensor c;              // [n x C]; rows with unobserved e are ignored
};

/// Observations with every participating code filled in.
struct JointBatch {
    Tensor t;  // [n x D]
    std::vector<HeadColumn> heads;
    std::size_t size() const { return t.dim(0); }
};

Tensor log_p_enc(const TzkModel& model, const JointBatch& batch);  // [n]
Tensor log_p_dec(const TzkModel& model, const JointBatch& batch);  // [n]
/// 0.5 (enc + dec).
Tensor lower_bound_from(const Tensor& enc, const Tensor& dec);
/// log((exp(enc) + exp(dec)) / 2).
Tensor log_mixture_from(const Tensor& enc, const Tensor& dec);
/// -log cosh((enc - dec) / 2) <= 0.
Tensor consistency_gap_from(const Tensor& enc, const Tensor& dec);

Tensor lower_bound(const TzkModel& model, const JointBatch& batch);
Tensor log_mixture(const TzkModel& model, const JointBatch& batch);
Tensor consistency_gap(const TzkModel& model, const JointBatch& batch);

/// Compares d(lower_bound)/d(theta) with
///   d(log_mixture) + 0.5 [(r - 1) d(enc) + (1/r - 1) r d(dec)] / (1 + r),  r = p_dec / p_enc,
/// assembled from separately computed gradients. Runs in f64; each row is
/// checked on its own. Returns the max absolute component deviation.
double gradient_identity_check(const TzkModel& model, const JointBatch& batch);

struct Diagnostics {
    double bound = 0.0;
    double mixture = 0.0;
    double gap = 0.0;
    double jensen_violation = 0.0;   // max(bound - mixture, 0)
    double identity_deviation = 0.0;  // max |bound - (mixture + gap)|
};

Diagnostics diagnose(const TzkModel& model, const JointBatch& batch);
void write_diagnostics_header(std::ostream& os);
void write_diagnostics_row(std::ostream& os, std::size_t batch_index, const Diagnostics& d);

// ---------------------------------------------------------------------------
// Discretized toy for the entropy / mutual-information identity.

/// Joint table P(t, k^1, ..., k^K) with t on `t_cells` cells and each k on
/// `k_cells` cells (k = e * c_cells + c). `z_of_t` is the bijective flow on the
/// grid. Layout is row-major with t slowest.
struct DiscreteToy {
    std::size_t t_cells = 0;
    std::size_t k_cells = 0;
    std::size_t heads = 0;
    std::vector<double> joint;
    std::vector<std::size_t> z_of_t;

    /// P(t) prod_i P(k^i | t). cond[i] is [t_cells x k_cells] row-stochastic.
    static DiscreteToy from_conditionals(const std::vector<double>& p_t,
                                         const std::vector<std::vector<double>>& cond,
                                         std::size_t k_cells, std::vector<std::size_t> z_of_t);
};

struct EntropyCheck {
    double lhs = 0.0;  // -H(k, t)
    double rhs = 0.0;  // -H(t) - sum H(k^i) + 0.5 sum [I(k^i; t) + I(z; k^i)]
    double deviation = 0.0;
};

/// Raises ContractError unless p_enc and p_dec both reproduce the table.
EntropyCheck entropy_mi_identity_check(const DiscreteToy& toy);

}  // namespace tzk
