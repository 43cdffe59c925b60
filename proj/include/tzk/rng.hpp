// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace tzk {

/// Seeded generator with a platform-independent normal sampler.
///
/// std::normal_distribution is implementation-defined, so normals are drawn
/// with Box-Muller directly from the 64-bit engine. The full state (engine and
/// the cached second normal) round-trips through serialize()/deserialize().
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform on [0, 1) with 53 random bits.
    double uniform();
    double normal();
    bool bernoulli(double p) { return uniform() < p; }
    /// Uniform integer on [0, n).
    std::size_t below(std::size_t n);

    std::string serialize() const;
    void deserialize(const std::string& state);

    bool operator==(const Rng& other) const;

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Stable 64-bit mix of a seed and a name (FNV-1a over the name, then splitmix).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view name);

}  // namespace tzk
