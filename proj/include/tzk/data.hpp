// SPDX-License-Identifier: Apache-2.0
//
// Datasets, toy generators, the TZKD container and label coding.
//
// TZKD layout (little-endian):
//   "TZKD" u8 version u8 kind u32 n
//   kind 0 (continuous): u32 D        kind 1 (byte image): u32 c u32 h u32 w
//   TZKT tensor [n x D] or [n x c x h x w]
//   u32 head count, then per head: u32 id length, id bytes, n label bytes (0/1/255)
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "tzk/flows.hpp"
#include "tzk/knowledge.hpp"
#include "tzk/tensor.hpp"

namespace tzk {

class Rng;

inline constexpr std::uint8_t kDatasetFormatVersion = 1;

enum class DataKind : std::uint8_t { continuous = 0, byte_image = 1 };

struct LabelColumn {
    std::string id;
    std::vector<Label> e;
};

struct Dataset {
    std::string name;
    DataKind kind = DataKind::continuous;
    Tensor x;  // [n x D]; byte images hold integers 0..255 flattened as c*h*w
    std::optional<ImageShape> image;
    std::vector<LabelColumn> labels;

    std::size_t size() const { return x.dim(0); }
    std::size_t dim() const { return x.dim(1); }
    /// nullptr when absent.
    const LabelColumn* column(const std::string& id) const;
    Dataset subset(const std::vector<std::size_t>& rows) const;
    /// Checks the documented invariants; throws FormatError.
    void validate() const;
};

enum class LabelScheme { one_bit_per_class, binary_code };

struct LabelCodec {
    LabelScheme scheme = LabelScheme::one_bit_per_class;
    std::size_t n_bits = 0;  // binary_code only
    std::string prefix = "class";

    /// Head ids produced by this codec for n_classes classes.
    std::vector<std::string> head_ids(std::size_t n_classes) const;
};

/// Bits of `label`, most significant first. Throws RangeError on overflow.
std::vector<std::uint8_t> encode_label(std::size_t label, std::size_t n_bits);
std::size_t decode_label(const std::vector<std::uint8_t>& bits);

std::vector<LabelColumn> encode_labels(const std::vector<std::size_t>& labels,
                                       std::size_t n_classes, const LabelCodec& codec);
/// Inverse of encode_labels. Unobserved or contradictory rows raise LabelingError.
std::vector<std::size_t> decode_labels(const std::vector<LabelColumn>& columns,
                                       std::size_t n_classes, const LabelCodec& codec);

struct ToyOptions {
    /// two-moons | gaussian-mixture | ring | blobs | normal (standard normal, noise unused)
    std::string kind = "blobs";
    std::size_t n = 1000;
    double noise = 0.1;
    std::uint64_t seed = 0;
    std::size_t centers = 2;  // blobs and gaussian-mixture
    double radius = 3.0;      // blob / mixture circle; the ring uses ring_radius
    double ring_radius = 2.0;
    /// An empty prefix picks one from the kind (blob, moon, comp).
    LabelCodec codec{LabelScheme::one_bit_per_class, 0, ""};
};

/// Deterministic in its arguments. Component labels become head columns.
Dataset make_toy(const ToyOptions& options);
/// Generating component of every row of make_toy(options).
std::vector<std::size_t> toy_components(const ToyOptions& options);

void write_dataset(std::ostream& os, const Dataset& ds);
Dataset read_dataset(std::istream& is);
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

/// Loads a byte-image container and fits every image to side x side: smaller
/// images are centered on a zero border, larger ones resized (nearest).
/// With rgb set, single-channel images are duplicated into three channels.
Dataset load_grid_images(const std::string& path, std::size_t side, bool rgb = false);
Dataset fit_grid_images(const Dataset& ds, std::size_t side, bool rgb);

/// Continuous view of a batch: byte images become (x + u) / 256 with u ~ U[0, 1).
Tensor dequantize(const Tensor& bytes, Rng& rng);

}  // namespace tzk
