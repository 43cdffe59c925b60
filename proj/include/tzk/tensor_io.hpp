// SPDX-License-Identifier: Apache-2.0
//
// "TZKT" tensor files: magic TZKT, u8 version (1), u8 dtype (0=f32, 1=f64),
// u32 rank, rank x u32 extents, then raw values. All integers and values are
// little-endian.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "tzk/tensor.hpp"

namespace tzk {

inline constexpr std::uint8_t kTensorFormatVersion = 1;

/// Little-endian writer helpers shared by the container formats.
namespace io {

void write_u8(std::ostream& os, std::uint8_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_string(std::ostream& os, const std::string& s);  // u32 length + bytes

/// Reads with offset tracking so format errors can say where they happened.
class Reader {
public:
    explicit Reader(std::istream& is) : is_(is) {}

    std::uint8_t u8();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    double f64();
    std::string bytes(std::size_t n);
    std::string string();
    std::size_t offset() const { return offset_; }
    bool at_end();
    [[noreturn]] void fail(const std::string& what) const;

private:
    std::istream& is_;
    std::size_t offset_ = 0;
};

}  // namespace io

/// Writes values in the tensor's own dtype.
void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(io::Reader& reader);

void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace tzk
