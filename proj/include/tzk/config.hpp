// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. JSON with strict key checking: any key not listed here
// is an error naming its path.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "tzk/data.hpp"
#include "tzk/evaluation.hpp"
#include "tzk/hierarchy.hpp"
#include "tzk/training.hpp"

namespace tzk {

struct DataConfig {
    std::optional<std::string> path;  // TZKD container
    std::optional<ToyOptions> toy;
    std::size_t side = 8;  // byte images are fitted to side x side
    bool rgb = false;
};

struct EvalConfig {
    std::size_t draws = 1;
    double threshold = 0.5;
    std::optional<std::string> path;  // evaluation set; defaults to the training data
};

struct IoConfig {
    std::string checkpoint_dir = "checkpoints";
    std::string log_path = "train_log.csv";
};

struct HierarchyConfig {
    std::string bridge;
    FlowConfig flow;  // dim defaults to the bridge code_dim
    std::vector<HeadConfig> heads;
    bool freeze_parent_tflow = true;
    bool freeze_child_tflow = false;
    bool standardize_bridge = true;
    BridgeCodes bridge_codes = BridgeCodes::sampled;
};

struct ModelConfig {
    FlowConfig flow;
    std::vector<HeadConfig> heads;
    std::optional<HierarchyConfig> hierarchy;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;
    IoConfig io;
    std::uint64_t seed = 0;

    /// Throws ConfigError with the offending key path or parse position.
    static RunConfig parse(const std::string& text);
    static RunConfig load(const std::string& path);
    std::string dump() const;
};

TzkModel build_model(const RunConfig& config);
HierarchicalModel build_hierarchy(const RunConfig& config);
/// Toy or container data, byte images fitted to the configured side.
Dataset load_data(const DataConfig& config);

}  // namespace tzk
