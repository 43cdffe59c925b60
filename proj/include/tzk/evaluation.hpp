// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "tzk/data.hpp"
#include "tzk/objective.hpp"

namespace tzk {

class Rng;

/// Reference values from the large-scale runs; documentation only.
namespace reference_bpd {
inline constexpr double cifar10_prior = 3.54;
inline constexpr double cifar10_conditional = 2.99;
inline constexpr double mnist_conditional = 1.02;
}  // namespace reference_bpd

struct EvalReport {
    std::string dataset;
    std::vector<std::pair<std::string, double>> metrics;
    std::size_t samples = 0;
    std::uint64_t seed = 0;

    void set(const std::string& name, double value);
    /// Throws KeyError when absent.
    double get(const std::string& name) const;
    void write_csv(std::ostream& os) const;
    void write_table(std::ostream& os) const;
};

struct BpdResult {
    double bpd = 0.0;
    double se = 0.0;  // standard error over points
    std::size_t n = 0;
};

/// Row-wise log density of a batch [n x D] -> [n].
using LogDensity = std::function<Tensor(const Tensor&)>;

/// Continuous data: mean(-log2 p(t)) / D. Byte images: points are dequantized
/// to [0, 1)^D and log2(256) = 8 is added per dimension.
BpdResult nll_bits_per_dim(const LogDensity& log_density, const Dataset& ds, Rng& rng);
/// Uses the t-flow density.
BpdResult nll_bits_per_dim(const TzkModel& model, const Dataset& ds, Rng& rng);

/// Draws c ~ p_enc(c | e=1, t) and scores log p_dec(t | e=1, c), averaged over
/// `draws` codes per point.
BpdResult conditional_nll(const TzkModel& model, const std::string& head_id, const Dataset& ds,
                          std::size_t draws, Rng& rng);

/// Predicts 1 where p > threshold (so p == threshold predicts 0).
double accuracy_from_probs(const std::vector<double>& probs, const std::vector<Label>& labels,
                           double threshold = 0.5);
/// disc_t accuracy over rows with an observed label for head_id.
double discriminator_accuracy(const TzkModel& model, const std::string& head_id,
                              const Dataset& ds, double threshold = 0.5);

struct InterpolationPoint {
    double alpha = 0.0;
    Tensor t;  // [D]
    double base_log_prob = 0.0;
};

std::vector<InterpolationPoint> interpolate_latent(const TzkModel& model, const Tensor& t_a,
                                                   const Tensor& t_b, std::size_t n_steps);

/// Rows of `images` ([n x c*h*w], values in [0, 1]) side by side as one PGM
/// (c = 1) or PPM (c = 3) strip.
void write_image_strip(const std::string& path, const Tensor& images, const ImageShape& shape);
/// One CSV row per point, columns x0..x{D-1} plus any extra named columns.
void write_points_csv(std::ostream& os, const Tensor& points,
                      const std::vector<std::pair<std::string, std::vector<double>>>& extra = {});

/// Batch diagnostics (bound, mixture, gap) after code filling on the dataset.
Diagnostics dataset_diagnostics(const TzkModel& model, const Dataset& ds, Rng& rng);

}  // namespace tzk
