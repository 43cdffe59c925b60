// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tzk/data.hpp"
#include "tzk/objective.hpp"
#include "tzk/rng.hpp"

namespace tzk {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct TrainConfig {
    double lr_max = 1e-3;
    std::size_t warmup_steps = 100;
    std::size_t batch_size = 64;
    AdamConfig adam;
    std::size_t max_steps = 1000;
    std::uint64_t seed = 0;
    bool freeze_tflow = false;
    std::optional<double> grad_clip_norm = 100.0;
    std::size_t log_every = 0;         // 0 disables the CSV log
    std::size_t checkpoint_every = 0;  // 0 disables periodic checkpoints
    std::size_t actnorm_init_rows = 1024;

    void validate() const;
};

struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    std::size_t step = 0;
};

struct OptimizerState {
    std::map<std::string, Moments> moments;
    std::size_t step = 0;

    /// Adds zeroed moments for parameters not seen before.
    void extend(const ParamList& params);
};

/// Per-head observations of a training batch. `c`, when defined, is [n x C]
/// and only the rows flagged in `c_observed` are taken from it.
struct HeadObservation {
    std::string id;
    std::vector<Label> e;
    Tensor c;
    std::vector<bool> c_observed;
};

struct Batch {
    Tensor t;
    std::vector<HeadObservation> heads;
    std::size_t size() const { return t.dim(0); }
};

/// Rows of a dataset as a batch, keeping the label columns of heads the model
/// has. Byte images are dequantized.
Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& rows, const TzkModel& model,
                 Rng& rng);

/// Samples every missing code. One Bernoulli(1/2) draw per row picks the
/// branch: decoder -> c = c_flow(eps), encoder -> c = mu_c + sigma_c * eps at the
/// observed e. Observed codes pass through. `encoder_branch`, if given,
/// receives the per-row draws.
JointBatch fill_missing_codes(const TzkModel& model, const Batch& batch, Rng& rng,
                              std::vector<bool>* encoder_branch = nullptr);

double lr_schedule(std::size_t step, const TrainConfig& config);

struct StepStats {
    std::size_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double bound = 0.0;
    double mixture = 0.0;
    double gap = 0.0;
};

/// Scales gradients to the configured global norm, then applies one Adam
/// update with learning rate `lr` and clears the gradients.
void adam_update(const ParamList& params, OptimizerState& opt, const TrainConfig& config,
                 double lr);

StepStats train_step(TzkModel& model, const Batch& batch, OptimizerState& opt,
                     const TrainConfig& config, Rng& rng);

struct TrainState {
    OptimizerState opt;
    Rng rng;

    static TrainState fresh(const TrainConfig& config);
};

struct TrainHooks {
    std::ostream* log = nullptr;  // CSV training log
    std::function<void(std::size_t step)> checkpoint;
    std::function<void(const std::string&)> warn;
};

/// Initializes ActNorm on the leading rows of the dataset when needed.
void ensure_actnorm(TzkModel& model, const Dataset& ds, const TrainConfig& config);

/// Runs minibatch steps until state.opt.step reaches config.max_steps.
void train(TzkModel& model, const Dataset& ds, const TrainConfig& config, TrainState& state,
           const TrainHooks& hooks = {});

/// Adds a head; optimizer moments for it start at zero.
void add_knowledge(TzkModel& model, const HeadConfig& config, OptimizerState* opt = nullptr);

struct SpecializeResult {
    std::vector<std::string> warnings;
    std::map<std::string, double> final_loss;
};

/// Trains each listed head over the frozen t-flow, e=1 on its group and e=0
/// elsewhere (the dataset's label column for that head). Heads have their own
/// optimizer and random stream, so threaded and sequential runs agree.
SpecializeResult specialize(TzkModel& model, const Dataset& ds,
                            const std::vector<std::string>& head_ids, const TrainConfig& config,
                            bool parallel);

/// Fraction of observed rows where sigmoid(disc_t) > 0.5 matches e.
double batch_disc_accuracy(const TzkModel& model, const Batch& batch, const std::string& id);

}  // namespace tzk
