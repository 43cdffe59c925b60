// SPDX-License-Identifier: Apache-2.0
#include "tzk/data.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "tzk/errors.hpp"
#include "tzk/rng.hpp"
#include "tzk/tensor_io.hpp"

namespace tzk {

const LabelColumn* Dataset::column(const std::string& id) const {
    for (const auto& c : labels) {
        if (c.id == id) {
            return &c;
        }
    }
    return nullptr;
}

Dataset Dataset::subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.name = name;
    out.kind = kind;
    out.image = image;
    {
        PrecisionScope keep(x.dtype());
        out.x = gather_rows(x, rows).detach();
    }
    for (const auto& c : labels) {
        LabelColumn col{c.id, {}};
        for (std::size_t r : rows) {
            col.e.push_back(c.e.at(r));
        }
        out.labels.push_back(std::move(col));
    }
    return out;
}

void Dataset::validate() const {
    if (!x.defined() || x.rank() != 2) {
        throw FormatError("dataset observations must be a matrix");
    }
    if (kind == DataKind::byte_image) {
        if (!image || image->numel() != x.dim(1)) {
            throw FormatError("byte-image dataset needs a matching c x h x w shape");
        }
        for (double v : x.data()) {
            if (v < 0.0 || v > 255.0 || v != std::floor(v)) {
                throw FormatError("byte-image value outside 0..255");
            }
        }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i].e.size() != x.dim(0)) {
            throw FormatError("label column '" + labels[i].id + "' has the wrong length");
        }
        for (std::size_t j = 0; j < i; ++j) {
            if (labels[j].id == labels[i].id) {
                throw FormatError("duplicate label column '" + labels[i].id + "'");
            }
        }
        for (Label l : labels[i].e) {
            if (l != Label::negative && l != Label::positive && l != Label::unobserved) {
                throw FormatError("label column '" + labels[i].id + "' holds an invalid byte");
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Labels

std::vector<std::string> LabelCodec::head_ids(std::size_t n_classes) const {
    std::vector<std::string> ids;
    const std::size_t count = scheme == LabelScheme::binary_code ? n_bits : n_classes;
    for (std::size_t j = 0; j < count; ++j) {
        ids.push_back(prefix + std::to_string(j));
    }
    return ids;
}

std::vector<std::uint8_t> encode_label(std::size_t label, std::size_t n_bits) {
    if (n_bits == 0 || n_bits >= 64 || label >= (std::size_t{1} << n_bits)) {
        throw RangeError("label " + std::to_string(label) + " does not fit in " +
                         std::to_string(n_bits) + " bits");
    }
    std::vector<std::uint8_t> bits(n_bits);
    for (std::size_t b = 0; b < n_bits; ++b) {
        bits[b] = static_cast<std::uint8_t>((label >> (n_bits - 1 - b)) & 1U);
    }
    return bits;
}

std::size_t decode_label(const std::vector<std::uint8_t>& bits) {
    std::size_t v = 0;
    for (std::uint8_t b : bits) {
        if (b > 1) {
            throw LabelingError("label bit must be 0 or 1");
        }
        v = (v << 1) | b;
    }
    return v;
}

std::vector<LabelColumn> encode_labels(const std::vector<std::size_t>& labels,
                                       std::size_t n_classes, const LabelCodec& codec) {
    if (codec.scheme == LabelScheme::binary_code &&
        (codec.n_bits == 0 || codec.n_bits >= 64 || n_classes > (std::size_t{1} << codec.n_bits))) {
        throw RangeError(std::to_string(n_classes) + " classes do not fit in " +
                         std::to_string(codec.n_bits) + " bits");
    }
    std::vector<LabelColumn> cols;
    for (const auto& id : codec.head_ids(n_classes)) {
        cols.push_back({id, std::vector<Label>(labels.size(), Label::negative)});
    }
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] >= n_classes) {
            throw RangeError("label " + std::to_string(labels[r]) + " >= class count " +
                             std::to_string(n_classes));
        }
        if (codec.scheme == LabelScheme::one_bit_per_class) {
            cols[labels[r]].e[r] = Label::positive;
        } else {
            const auto bits = encode_label(labels[r], codec.n_bits);
            for (std::size_t b = 0; b < bits.size(); ++b) {
                cols[b].e[r] = bits[b] ? Label::positive : Label::negative;
            }
        }
    }
    return cols;
}

std::vector<std::size_t> decode_labels(const std::vector<LabelColumn>& columns,
                                       std::size_t n_classes, const LabelCodec& codec) {
    const auto ids = codec.head_ids(n_classes);
    if (columns.size() != ids.size()) {
        throw LabelingError("expected " + std::to_string(ids.size()) + " label columns");
    }
    const std::size_t n = columns.empty() ? 0 : columns[0].e.size();
    std::vector<std::size_t> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        std::vector<std::uint8_t> bits;
        for (const auto& c : columns) {
            if (c.e.at(r) == Label::unobserved) {
                throw LabelingError("row " + std::to_string(r) + " has an unobserved bit");
            }
            bits.push_back(static_cast<std::uint8_t>(c.e[r]));
        }
        if (codec.scheme == LabelScheme::binary_code) {
            out[r] = decode_label(bits);
        } else {
            std::size_t hits = 0;
            for (std::size_t j = 0; j < bits.size(); ++j) {
                if (bits[j]) {
                    out[r] = j;
                    ++hits;
                }
            }
            if (hits != 1) {
                throw LabelingError("row " + std::to_string(r) + " is not one-hot");
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Toys

namespace {

Dataset generate(const ToyOptions& o, std::vector<std::size_t>* components) {
    if (o.n == 0) {
        throw ConfigError("toy dataset needs n >= 1");
    }
    if (!(o.noise >= 0.0)) {
        throw ConfigError("toy noise must be non-negative");
    }
    Rng rng(o.seed);
    std::vector<double> xs(o.n * 2);
    std::vector<std::size_t> comp(o.n, 0);
    std::size_t n_classes = 0;
    std::string prefix;
    constexpr double pi = std::numbers::pi;

    if (o.kind == "two-moons") {
        n_classes = 2;
        prefix = "moon";
        for (std::size_t i = 0; i < o.n; ++i) {
            const double th = pi * rng.uniform();
            comp[i] = i % 2;
            double x = std::cos(th), y = std::sin(th);
            if (comp[i] == 1) {
                x = 1.0 - x;
                y = 0.5 - y;
            }
            xs[2 * i] = x + o.noise * rng.normal();
            xs[2 * i + 1] = y + o.noise * rng.normal();
        }
    } else if (o.kind == "blobs" || o.kind == "gaussian-mixture") {
        if (o.centers == 0) {
            throw ConfigError("toy needs at least one center");
        }
        n_classes = o.centers;
        prefix = o.kind == "blobs" ? "blob" : "comp";
        for (std::size_t i = 0; i < o.n; ++i) {
            comp[i] = o.kind == "blobs" ? i % o.centers : rng.below(o.centers);
            const double a = 2.0 * pi * static_cast<double>(comp[i]) / static_cast<double>(o.centers);
            xs[2 * i] = o.radius * std::cos(a) + o.noise * rng.normal();
            xs[2 * i + 1] = o.radius * std::sin(a) + o.noise * rng.normal();
        }
    } else if (o.kind == "ring") {
        for (std::size_t i = 0; i < o.n; ++i) {
            const double th = 2.0 * pi * rng.uniform();
            const double r = o.ring_radius + o.noise * rng.normal();
            xs[2 * i] = r * std::cos(th);
            xs[2 * i + 1] = r * std::sin(th);
        }
    } else if (o.kind == "normal") {
        for (double& v : xs) {
            v = rng.normal();
        }
    } else {
        throw ConfigError("unknown toy kind '" + o.kind +
                          "' (two-moons, gaussian-mixture, ring, blobs, normal)");
    }

    Dataset ds;
    ds.name = o.kind;
    ds.kind = DataKind::continuous;
    {
        PrecisionScope exact(Dtype::f64);
        ds.x = Tensor::from({o.n, 2}, std::move(xs));
    }
    if (n_classes > 0) {
        LabelCodec codec = o.codec;
        if (codec.prefix.empty()) {
            codec.prefix = prefix;
        }
        ds.labels = encode_labels(comp, n_classes, codec);
    }
    if (components) {
        *components = std::move(comp);
    }
    return ds;
}

}  // namespace

Dataset make_toy(const ToyOptions& options) { return generate(options, nullptr); }

std::vector<std::size_t> toy_components(const ToyOptions& options) {
    std::vector<std::size_t> comp;
    generate(options, &comp);
    return comp;
}

// ---------------------------------------------------------------------------
// Container

void write_dataset(std::ostream& os, const Dataset& ds) {
    ds.validate();
    os.write("TZKD", 4);
    io::write_u8(os, kDatasetFormatVersion);
    io::write_u8(os, static_cast<std::uint8_t>(ds.kind));
    io::write_u32(os, static_cast<std::uint32_t>(ds.size()));
    if (ds.kind == DataKind::byte_image) {
        io::write_u32(os, static_cast<std::uint32_t>(ds.image->c));
        io::write_u32(os, static_cast<std::uint32_t>(ds.image->h));
        io::write_u32(os, static_cast<std::uint32_t>(ds.image->w));
        write_tensor(os, reshape(ds.x, {ds.size(), ds.image->c, ds.image->h, ds.image->w}));
    } else {
        io::write_u32(os, static_cast<std::uint32_t>(ds.dim()));
        write_tensor(os, ds.x);
    }
    io::write_u32(os, static_cast<std::uint32_t>(ds.labels.size()));
    for (const auto& c : ds.labels) {
        io::write_string(os, c.id);
        for (Label l : c.e) {
            io::write_u8(os, static_cast<std::uint8_t>(l));
        }
    }
}

Dataset read_dataset(std::istream& is) {
    io::Reader rd(is);
    if (rd.bytes(4) != "TZKD") {
        rd.fail("bad dataset magic");
    }
    const std::uint8_t version = rd.u8();
    if (version != kDatasetFormatVersion) {
        rd.fail("unsupported dataset version " + std::to_string(version));
    }
    const std::uint8_t kind = rd.u8();
    if (kind > 1) {
        rd.fail("unknown dataset kind " + std::to_string(kind));
    }
    Dataset ds;
    ds.kind = static_cast<DataKind>(kind);
    const std::uint32_t n = rd.u32();
    Shape expect;
    if (ds.kind == DataKind::byte_image) {
        ImageShape im;
        im.c = rd.u32();
        im.h = rd.u32();
        im.w = rd.u32();
        ds.image = im;
        expect = {n, im.c, im.h, im.w};
    } else {
        expect = {n, rd.u32()};
    }
    const std::size_t at = rd.offset();
    Tensor x = read_tensor(rd);
    if (x.shape() != expect) {
        throw FormatError("dataset payload shape " + shape_str(x.shape()) +
                          " disagrees with header " + shape_str(expect) + " at offset " +
                          std::to_string(at));
    }
    {
        PrecisionScope keep(x.dtype());
        const std::size_t width = ds.image ? ds.image->numel() : expect.back();
        ds.x = reshape(x, {n, width});
    }
    const std::uint32_t heads = rd.u32();
    for (std::uint32_t h = 0; h < heads; ++h) {
        LabelColumn col;
        col.id = rd.string();
        const std::string raw = rd.bytes(n);
        for (char ch : raw) {
            const auto b = static_cast<std::uint8_t>(ch);
            if (b != 0 && b != 1 && b != 255) {
                rd.fail("label byte " + std::to_string(b) + " is not 0, 1 or 255");
            }
            col.e.push_back(static_cast<Label>(b));
        }
        ds.labels.push_back(std::move(col));
    }
    if (!rd.at_end()) {
        rd.fail("trailing bytes after dataset");
    }
    try {
        ds.validate();
    } catch (const FormatError& e) {
        throw FormatError(std::string(e.what()) + " at offset " + std::to_string(at));
    }
    return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw FormatError("cannot open " + path + " for writing");
    }
    write_dataset(os, ds);
}

Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot open " + path);
    }
    Dataset ds = read_dataset(is);
    if (ds.name.empty()) {
        ds.name = path;
    }
    return ds;
}

Dataset fit_grid_images(const Dataset& ds, std::size_t side, bool rgb) {
    if (ds.kind != DataKind::byte_image || !ds.image) {
        throw FormatError("expected a byte-image dataset");
    }
    if (side == 0) {
        throw ConfigError("image side must be positive");
    }
    const ImageShape in = *ds.image;
    const std::size_t out_c = (rgb && in.c == 1) ? 3 : in.c;
    const bool pad = in.h <= side && in.w <= side;
    const std::size_t oy = pad ? (side - in.h) / 2 : 0;
    const std::size_t ox = pad ? (side - in.w) / 2 : 0;
    const std::size_t n = ds.size();
    const std::size_t D = out_c * side * side;
    std::vector<double> out(n * D, 0.0);
    for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < out_c; ++c) {
            const std::size_t src_c = in.c == 1 ? 0 : c;
            for (std::size_t y = 0; y < side; ++y) {
                for (std::size_t x = 0; x < side; ++x) {
                    std::size_t sy, sx;
                    if (pad) {
                        if (y < oy || y >= oy + in.h || x < ox || x >= ox + in.w) {
                            continue;
                        }
                        sy = y - oy;
                        sx = x - ox;
                    } else {
                        sy = y * in.h / side;
                        sx = x * in.w / side;
                    }
                    out[r * D + (c * side + y) * side + x] =
                        ds.x.at(r, (src_c * in.h + sy) * in.w + sx);
                }
            }
        }
    }
    Dataset res;
    res.name = ds.name;
    res.kind = DataKind::byte_image;
    res.image = ImageShape{out_c, side, side};
    {
        PrecisionScope exact(Dtype::f64);
        res.x = Tensor::from({n, D}, std::move(out));
    }
    res.labels = ds.labels;
    return res;
}

Dataset load_grid_images(const std::string& path, std::size_t side, bool rgb) {
    return fit_grid_images(load_dataset(path), side, rgb);
}

Tensor dequantize(const Tensor& bytes, Rng& rng) {
    std::vector<double> v(bytes.data().begin(), bytes.data().end());
    for (double& x : v) {
        x = (x + rng.uniform()) / 256.0;
    }
    return Tensor::from(bytes.shape(), std::move(v));
}

}  // namespace tzk
