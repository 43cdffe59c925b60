// SPDX-License-Identifier: Apache-2.0
#include "tzk/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <ostream>

#include "tzk/errors.hpp"
#include "tzk/rng.hpp"
#include "tzk/training.hpp"

namespace tzk {

namespace {

constexpr std::size_t kChunk = 512;

std::vector<std::size_t> range(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> r;
    for (std::size_t i = begin; i < end; ++i) {
        r.push_back(i);
    }
    return r;
}

// Observation rows as the density sees them; byte images become [0, 1) points.
Tensor points(const Dataset& ds, const std::vector<std::size_t>& rows, Rng& rng) {
    Tensor x = gather_rows(ds.x, rows).detach();
    return ds.kind == DataKind::byte_image ? dequantize(x, rng) : x;
}

BpdResult summarize(const std::vector<double>& per_point) {
    BpdResult r;
    r.n = per_point.size();
    double mean = 0.0;
    for (double v : per_point) {
        mean += v;
    }
    mean /= static_cast<double>(r.n);
    double ss = 0.0;
    for (double v : per_point) {
        ss += (v - mean) * (v - mean);
    }
    r.bpd = mean;
    r.se = r.n > 1 ? std::sqrt(ss / static_cast<double>(r.n - 1) / static_cast<double>(r.n)) : 0.0;
    return r;
}

double to_bits(double log_p, const Dataset& ds) {
    const double D = static_cast<double>(ds.dim());
    const double bits = -log_p / (D * std::numbers::ln2);
    return ds.kind == DataKind::byte_image ? bits + 8.0 : bits;
}

}  // namespace

void EvalReport::set(const std::string& name, double value) {
    for (auto& m : metrics) {
        if (m.first == name) {
            m.second = value;
            return;
        }
    }
    metrics.emplace_back(name, value);
}

double EvalReport::get(const std::string& name) const {
    for (const auto& m : metrics) {
        if (m.first == name) {
            return m.second;
        }
    }
    throw KeyError("no metric '" + name + "'");
}

void EvalReport::write_csv(std::ostream& os) const {
    os << "dataset,metric,value,samples,seed\n";
    for (const auto& [k, v] : metrics) {
        os << dataset << ',' << k << ',' << std::setprecision(10) << v << ',' << samples << ','
           << seed << '\n';
    }
}

void EvalReport::write_table(std::ostream& os) const {
    std::size_t w = 6;
    for (const auto& m : metrics) {
        w = std::max(w, m.first.size());
    }
    os << "dataset: " << dataset << "  (n=" << samples << ", seed=" << seed << ")\n";
    for (const auto& [k, v] : metrics) {
        os << "  " << std::left << std::setw(static_cast<int>(w)) << k << "  " << std::right
           << std::fixed << std::setprecision(6) << v << '\n';
    }
    os.unsetf(std::ios::fixed);
}

BpdResult nll_bits_per_dim(const LogDensity& log_density, const Dataset& ds, Rng& rng) {
    if (!ds.x.defined() || ds.size() == 0) {
        throw ContractError("bits/dim needs a non-empty dataset");
    }
    NoGradGuard ng;
    std::vector<double> per_point;
    for (std::size_t b = 0; b < ds.size(); b += kChunk) {
        const auto rows = range(b, std::min(ds.size(), b + kChunk));
        const Tensor lp = log_density(points(ds, rows, rng));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            per_point.push_back(to_bits(lp.at(i), ds));
        }
    }
    return summarize(per_point);
}

BpdResult nll_bits_per_dim(const TzkModel& model, const Dataset& ds, Rng& rng) {
    return nll_bits_per_dim([&](const Tensor& t) { return model.tflow().log_prob(t); }, ds, rng);
}

BpdResult conditional_nll(const TzkModel& model, const std::string& head_id, const Dataset& ds,
                          std::size_t draws, Rng& rng) {
    const KnowledgeHead& h = model.head(head_id);
    if (ds.size() == 0) {
        throw ContractError("conditional NLL needs a non-empty dataset");
    }
    if (draws == 0) {
        throw ContractError("conditional NLL needs at least one code draw");
    }
    NoGradGuard ng;
    std::vector<double> per_point;
    for (std::size_t b = 0; b < ds.size(); b += kChunk) {
        const auto rows = range(b, std::min(ds.size(), b + kChunk));
        const Tensor t = points(ds, rows, rng);
        const auto e = e_fill(rows.size(), 1.0);
        std::vector<double> acc(rows.size(), 0.0);
        for (std::size_t d = 0; d < draws; ++d) {
            const Tensor eps = Tensor::randn({rows.size(), h.code_dim()}, rng);
            const Tensor c = h.sample_c_posterior(t, e, eps);
            const Tensor lp = h.log_p_t_given_e_c(t, e, c, model.tflow());
            for (std::size_t i = 0; i < rows.size(); ++i) {
                acc[i] += to_bits(lp.at(i), ds) / static_cast<double>(draws);
            }
        }
        per_point.insert(per_point.end(), acc.begin(), acc.end());
    }
    return summarize(per_point);
}

double accuracy_from_probs(const std::vector<double>& probs, const std::vector<Label>& labels,
                           double threshold) {
    if (probs.size() != labels.size()) {
        throw DimensionError("accuracy: prediction and label counts differ");
    }
    std::size_t seen = 0, right = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        if (labels[i] == Label::unobserved) {
            continue;
        }
        ++seen;
        const bool pred = probs[i] > threshold;
        right += pred == (labels[i] == Label::positive) ? 1 : 0;
    }
    return seen ? static_cast<double>(right) / static_cast<double>(seen) : 0.0;
}

double discriminator_accuracy(const TzkModel& model, const std::string& head_id,
                              const Dataset& ds, double threshold) {
    const KnowledgeHead& h = model.head(head_id);
    const LabelColumn* col = ds.column(head_id);
    if (!col) {
        throw KeyError("dataset has no labels for head '" + head_id + "'");
    }
    NoGradGuard ng;
    std::vector<double> probs;
    for (std::size_t b = 0; b < ds.size(); b += kChunk) {
        const auto rows = range(b, std::min(ds.size(), b + kChunk));
        Tensor t = gather_rows(ds.x, rows).detach();
        if (ds.kind == DataKind::byte_image) {
            t = mul_scalar(add_scalar(t, 0.5), 1.0 / 256.0);
        }
        const Tensor p = sigmoid(h.disc_t_logit(t));
        for (std::size_t i = 0; i < rows.size(); ++i) {
            probs.push_back(p.at(i));
        }
    }
    return accuracy_from_probs(probs, col->e, threshold);
}

std::vector<InterpolationPoint> interpolate_latent(const TzkModel& model, const Tensor& t_a,
                                                   const Tensor& t_b, std::size_t n_steps) {
    if (n_steps < 2) {
        throw ContractError("interpolation needs at least 2 steps");
    }
    const std::size_t D = model.obs_dim();
    if (t_a.numel() != D || t_b.numel() != D) {
        throw DimensionError("interpolation endpoints must have " + std::to_string(D) +
                             " values");
    }
    NoGradGuard ng;
    const Tensor za = model.tflow().inverse(reshape(t_a, {1, D})).out;
    const Tensor zb = model.tflow().inverse(reshape(t_b, {1, D})).out;
    std::vector<InterpolationPoint> out;
    for (std::size_t k = 0; k < n_steps; ++k) {
        const double alpha = static_cast<double>(k) / static_cast<double>(n_steps - 1);
        const Tensor z = add(mul_scalar(za, 1.0 - alpha), mul_scalar(zb, alpha));
        InterpolationPoint p;
        p.alpha = alpha;
        p.t = reshape(model.tflow().forward(z).out, {D});
        p.base_log_prob = standard_normal_log_prob(z).item();
        out.push_back(std::move(p));
    }
    return out;
}

void write_image_strip(const std::string& path, const Tensor& images, const ImageShape& shape) {
    if (shape.c != 1 && shape.c != 3) {
        throw ConfigError("image strips need 1 or 3 channels");
    }
    if (images.rank() != 2 || images.dim(1) != shape.numel()) {
        throw DimensionError("image strip expects [n x c*h*w]");
    }
    const std::size_t n = images.dim(0);
    const std::size_t W = n * shape.w;
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw FormatError("cannot open " + path + " for writing");
    }
    os << (shape.c == 1 ? "P5" : "P6") << '\n' << W << ' ' << shape.h << "\n255\n";
    for (std::size_t y = 0; y < shape.h; ++y) {
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t x = 0; x < shape.w; ++x) {
                for (std::size_t c = 0; c < shape.c; ++c) {
                    const double v = images.at(i, (c * shape.h + y) * shape.w + x);
                    const double b = std::clamp(std::floor(v * 256.0), 0.0, 255.0);
                    os.put(static_cast<char>(static_cast<unsigned char>(b)));
                }
            }
        }
    }
}

void write_points_csv(std::ostream& os, const Tensor& pts,
                      const std::vector<std::pair<std::string, std::vector<double>>>& extra) {
    const std::size_t n = pts.dim(0);
    const std::size_t D = pts.dim(1);
    for (std::size_t j = 0; j < D; ++j) {
        os << (j ? "," : "") << 'x' << j;
    }
    for (const auto& [name, col] : extra) {
        if (col.size() != n) {
            throw DimensionError("extra column '" + name + "' has the wrong length");
        }
        os << ',' << name;
    }
    os << '\n' << std::setprecision(9);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < D; ++j) {
            os << (j ? "," : "") << pts.at(i, j);
        }
        for (const auto& [name, col] : extra) {
            os << ',' << col[i];
        }
        os << '\n';
    }
}

Diagnostics dataset_diagnostics(const TzkModel& model, const Dataset& ds, Rng& rng) {
    NoGradGuard ng;
    Diagnostics total;
    double weight = 0.0;
    for (std::size_t b = 0; b < ds.size(); b += kChunk) {
        const auto rows = range(b, std::min(ds.size(), b + kChunk));
        const Batch batch = make_batch(ds, rows, model, rng);
        const JointBatch jb = fill_missing_codes(model, batch, rng);
        const Diagnostics d = diagnose(model, jb);
        const double w = static_cast<double>(rows.size());
        total.bound += d.bound * w;
        total.mixture += d.mixture * w;
        total.gap += d.gap * w;
        total.jensen_violation = std::max(total.jensen_violation, d.jensen_violation);
        total.identity_deviation = std::max(total.identity_deviation, d.identity_deviation);
        weight += w;
    }
    total.bound /= weight;
    total.mixture /= weight;
    total.gap /= weight;
    return total;
}

}  // namespace tzk
