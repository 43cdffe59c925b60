// SPDX-License-Identifier: Apache-2.0
#include "tzk/tensor_io.hpp"

#include <bit>
#include <fstream>
#include <istream>
#include <ostream>

#include "tzk/errors.hpp"

namespace tzk {

namespace io {

namespace {

template <class U>
void put_le(std::ostream& os, U v) {
    char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) {
        buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
    }
    os.write(buf, sizeof(U));
}

}  // namespace

void write_u8(std::ostream& os, std::uint8_t v) { os.put(static_cast<char>(v)); }
void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }

void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void Reader::fail(const std::string& what) const {
    throw FormatError(what + " at offset " + std::to_string(offset_));
}

std::string Reader::bytes(std::size_t n) {
    std::string out(n, '\0');
    is_.read(out.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(is_.gcount()) != n) {
        fail("unexpected end of data (wanted " + std::to_string(n) + " bytes)");
    }
    offset_ += n;
    return out;
}

std::uint8_t Reader::u8() { return static_cast<std::uint8_t>(bytes(1)[0]); }

std::uint32_t Reader::u32() {
    const std::string b = bytes(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) {
        v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    }
    return v;
}

std::uint64_t Reader::u64() {
    const std::string b = bytes(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | static_cast<unsigned char>(b[static_cast<std::size_t>(i)]);
    }
    return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }
double Reader::f64() { return std::bit_cast<double>(u64()); }

std::string Reader::string() {
    const std::uint32_t n = u32();
    return bytes(n);
}

bool Reader::at_end() { return is_.peek() == std::char_traits<char>::eof(); }

}  // namespace io

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("TZKT", 4);
    io::write_u8(os, kTensorFormatVersion);
    io::write_u8(os, static_cast<std::uint8_t>(t.dtype()));
    io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) {
        io::write_u32(os, static_cast<std::uint32_t>(e));
    }
    for (double v : t.data()) {
        if (t.dtype() == Dtype::f32) {
            io::write_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
        } else {
            io::write_u64(os, std::bit_cast<std::uint64_t>(v));
        }
    }
}

Tensor read_tensor(io::Reader& reader) {
    if (reader.bytes(4) != "TZKT") {
        reader.fail("bad tensor magic");
    }
    const std::uint8_t version = reader.u8();
    if (version != kTensorFormatVersion) {
        reader.fail("unsupported tensor version " + std::to_string(version));
    }
    const std::uint8_t dtype = reader.u8();
    if (dtype > 1) {
        reader.fail("unknown tensor dtype " + std::to_string(dtype));
    }
    const std::uint32_t rank = reader.u32();
    if (rank > 16) {
        reader.fail("implausible tensor rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (auto& e : shape) {
        e = reader.u32();
        if (e == 0) {
            reader.fail("zero tensor extent");
        }
    }
    const std::size_t n = shape_numel(shape);
    std::vector<double> values(n);
    for (double& v : values) {
        v = dtype == 0 ? static_cast<double>(reader.f32()) : reader.f64();
    }
    PrecisionScope scope(static_cast<Dtype>(dtype));
    try {
        return Tensor::from(std::move(shape), std::move(values));
    } catch (const NumericError&) {
        reader.fail("non-finite tensor payload");
    }
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw FormatError("cannot open " + path + " for writing");
    }
    write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot open " + path);
    }
    io::Reader reader(is);
    Tensor t = read_tensor(reader);
    if (!reader.at_end()) {
        reader.fail("trailing bytes after tensor");
    }
    return t;
}

}  // namespace tzk
