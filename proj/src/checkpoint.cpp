// SPDX-License-Identifier: Apache-2.0
#include "tzk/checkpoint.hpp"

#include <filesystem>
#include <fstream>
#include <map>

#include "tzk/errors.hpp"
#include "tzk/tensor_io.hpp"

namespace tzk {

namespace {

Tensor f64_tensor(Shape shape, std::vector<double> values) {
    PrecisionScope exact(Dtype::f64);
    return Tensor::from(std::move(shape), std::move(values));
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return &t;
        }
    }
    return nullptr;
}

Checkpoint make_checkpoint(const std::string& config_json, const ParamList& params,
                           const TrainState& state) {
    Checkpoint c;
    c.config_json = config_json;
    c.step = state.opt.step;
    c.rng_state = state.rng.serialize();
    for (const auto& p : params) {
        c.tensors.emplace_back(p.name, p.tensor.detach());
    }
    for (const auto& [name, mo] : state.opt.moments) {
        const Shape shape{mo.m.size()};
        c.tensors.emplace_back("opt.m." + name, f64_tensor(shape, mo.m));
        c.tensors.emplace_back("opt.v." + name, f64_tensor(shape, mo.v));
        c.tensors.emplace_back("opt.t." + name,
                               f64_tensor({}, {static_cast<double>(mo.step)}));
    }
    return c;
}

void restore_checkpoint(const Checkpoint& ckpt, const ParamList& params, TrainState* state) {
    std::map<std::string, const Tensor*> table;
    for (const auto& [name, t] : ckpt.tensors) {
        if (!table.emplace(name, &t).second) {
            throw StateError("checkpoint lists tensor '" + name + "' twice");
        }
    }
    std::size_t used = 0;
    for (const auto& p : params) {
        auto it = table.find(p.name);
        if (it == table.end()) {
            throw StateError("checkpoint has no tensor '" + p.name + "'");
        }
        if (it->second->shape() != p.tensor.shape()) {
            throw StateError("checkpoint tensor '" + p.name + "' has shape " +
                             shape_str(it->second->shape()) + ", model expects " +
                             shape_str(p.tensor.shape()));
        }
        Tensor dst = p.tensor;
        dst.assign(it->second->data());
        ++used;
    }
    std::map<std::string, Moments> moments;
    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind("opt.", 0) != 0) {
            continue;
        }
        ++used;
        if (name.size() < 7 || name[5] != '.') {
            throw StateError("malformed optimizer tensor name '" + name + "'");
        }
        const char kind = name[4];
        Moments& mo = moments[name.substr(6)];
        if (kind == 'm') {
            mo.m = t.to_vector();
        } else if (kind == 'v') {
            mo.v = t.to_vector();
        } else if (kind == 't') {
            mo.step = static_cast<std::size_t>(t.item());
        } else {
            throw StateError("malformed optimizer tensor name '" + name + "'");
        }
    }
    if (used != ckpt.tensors.size()) {
        throw StateError("checkpoint holds tensors the model does not have");
    }
    for (const auto& [name, mo] : moments) {
        if (mo.m.size() != mo.v.size()) {
            throw StateError("optimizer moments for '" + name + "' disagree in size");
        }
    }
    if (state) {
        state->opt.moments = std::move(moments);
        state->opt.step = ckpt.step;
        state->rng.deserialize(ckpt.rng_state);
    }
}

void write_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
    os.write("TZKC", 4);
    io::write_u32(os, ckpt.version);
    io::write_string(os, ckpt.config_json);
    io::write_u64(os, ckpt.step);
    io::write_string(os, ckpt.rng_state);
    io::write_u32(os, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& [name, t] : ckpt.tensors) {
        io::write_string(os, name);
        write_tensor(os, t);
    }
}

Checkpoint read_checkpoint(std::istream& is) {
    io::Reader rd(is);
    if (rd.bytes(4) != "TZKC") {
        rd.fail("bad checkpoint magic");
    }
    Checkpoint c;
    c.version = rd.u32();
    if (c.version != kCheckpointVersion) {
        rd.fail("unsupported checkpoint version " + std::to_string(c.version));
    }
    c.config_json = rd.string();
    c.step = rd.u64();
    c.rng_state = rd.string();
    const std::uint32_t count = rd.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = rd.string();
        Tensor t = read_tensor(rd);
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!rd.at_end()) {
        rd.fail("trailing bytes after checkpoint");
    }
    return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) {
        std::filesystem::create_directories(parent);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw FormatError("cannot open " + path + " for writing");
    }
    write_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw FormatError("cannot open " + path);
    }
    return read_checkpoint(is);
}

}  // namespace tzk
