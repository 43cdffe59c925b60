// SPDX-License-Identifier: Apache-2.0
//
// Two-level composition: the codes of one parent head (the bridge) are the
// observations of a child model.
#pragma once

#include <string>

#include "tzk/training.hpp"

namespace tzk {

class HierarchicalModel {
public:
    HierarchicalModel() = default;
    /// Throws ContractError when the child's observation dimension differs
    /// from the bridge head's code dimension, ConfigError on head id clashes.
    HierarchicalModel(TzkModel parent, std::string bridge_head, TzkModel child);

    TzkModel& parent() { return parent_; }
    const TzkModel& parent() const { return parent_; }
    TzkModel& child() { return child_; }
    const TzkModel& child() const { return child_; }
    const std::string& bridge() const { return bridge_; }

    /// parent.*, child.* and the bridge.* buffers.
    ParamList params() const;

    /// Same parent and bridge map, child restricted to `head_ids`; storage is shared.
    HierarchicalModel child_view(const std::vector<std::string>& head_ids) const;

    /// Fixed per-dimension affine map between bridge codes and child
    /// observations, u = (c - loc) / scale. Identity until standardized.
    Tensor to_child(const Tensor& codes) const;
    Tensor from_child(const Tensor& u) const;
    /// sum of log scale: -log p(c) = -log p_child(u) + this.
    double bridge_log_scale() const;
    bool bridge_standardized() const;
    /// Sets loc and scale from code rows. StateError if already set.
    void standardize_bridge(const Tensor& codes);

private:
    TzkModel parent_;
    std::string bridge_;
    TzkModel child_;
    Tensor loc_, log_scale_, standardized_;
};

/// What the child observes: the parent's filled codes, or the bridge head's
/// posterior mean at the observed e (no gradient path into the parent).
enum class BridgeCodes { sampled, posterior_mean };

struct HierarchicalLoss {
    Tensor total;   // parent + child
    Tensor parent;  // mean -lower_bound of the parent
    Tensor child;   // mean -lower_bound of the child, as a density over bridge codes
    JointBatch parent_batch;
    JointBatch child_batch;
};

/// Fills parent codes, then scores the filled bridge codes (rows where the
/// bridge label is observed) under the child with the child's own labels.
/// Gradients reach the parent through the reparameterized bridge codes.
HierarchicalLoss hierarchical_loss(const HierarchicalModel& model, const Batch& parent_batch,
                                   const std::vector<HeadObservation>& child_labels, Rng& rng,
                                   BridgeCodes codes = BridgeCodes::sampled);

struct HierarchicalSample {
    Tensor t;           // [n x D]
    Tensor bridge;      // [n x C] parent code (after from_child)
    Tensor child_code;  // [n x C_child]
};

/// c_child from the child head's code prior, then the bridge code from the
/// child's decoder at e=1, then t from the parent bridge head's decoder at e=1.
HierarchicalSample hierarchical_sample(const HierarchicalModel& model,
                                       const std::string& child_head, std::size_t n,
                                       double temperature, Rng& rng);

struct HierarchyTrainConfig {
    TrainConfig train;
    bool freeze_parent_tflow = true;
    bool freeze_child_tflow = false;
    // Estimate the bridge map from parent posterior means before the first step.
    bool standardize_bridge = true;
    BridgeCodes bridge_codes = BridgeCodes::sampled;
};

/// Joint training on one dataset whose label columns cover both models.
void train_hierarchical(HierarchicalModel& model, const Dataset& ds,
                        const HierarchyTrainConfig& config, TrainState& state);

}  // namespace tzk
