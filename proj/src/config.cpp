// SPDX-License-Identifier: Apache-2.0
#include "tzk/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "tzk/errors.hpp"
#include "tzk/rng.hpp"

namespace tzk {

using nlohmann::json;

namespace {

// Reads one JSON object and rejects keys nobody asked for.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) {
            throw ConfigError(where() + " must be an object");
        }
    }

    template <class T>
    void read(const std::string& key, T& out) {
        seen_.insert(key);
        if (!j_.contains(key)) {
            return;
        }
        try {
            out = j_.at(key).get<T>();
        } catch (const json::exception& e) {
            throw ConfigError(where(key) + ": " + e.what());
        }
    }

    bool has(const std::string& key) {
        seen_.insert(key);
        return j_.contains(key) && !j_.at(key).is_null();
    }
    const json& at(const std::string& key) {
        seen_.insert(key);
        return j_.at(key);
    }
    std::string where(const std::string& key = "") const {
        const std::string p = key.empty() ? path_ : path_ + "." + key;
        return p.empty() ? "<root>" : p;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) {
                throw ConfigError("unknown config key '" + where(k) + "'");
            }
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

FlowConfig parse_flow(const json& j, const std::string& path, std::size_t default_dim) {
    FlowConfig f;
    f.dim = default_dim;
    Section s(j, path);
    s.read("dim", f.dim);
    s.read("layers", f.layers);
    s.read("steps", f.steps);
    s.read("hidden", f.hidden);
    s.read("hidden_layers", f.hidden_layers);
    s.read("shuffle", f.shuffle);
    s.read("strict", f.strict);
    if (s.has("image")) {
        Section im(s.at("image"), path + ".image");
        ImageShape shape;
        im.read("c", shape.c);
        im.read("h", shape.h);
        im.read("w", shape.w);
        im.finish();
        f.image = shape;
    }
    s.finish();
    return f;
}

json flow_json(const FlowConfig& f) {
    json j{{"dim", f.dim},       {"layers", f.layers},   {"steps", f.steps},
           {"hidden", f.hidden}, {"hidden_layers", f.hidden_layers},
           {"shuffle", f.shuffle}, {"strict", f.strict}};
    if (f.image) {
        j["image"] = {{"c", f.image->c}, {"h", f.image->h}, {"w", f.image->w}};
    }
    return j;
}

std::vector<HeadConfig> parse_heads(const json& j, const std::string& path) {
    if (!j.is_array()) {
        throw ConfigError(path + " must be an array");
    }
    std::vector<HeadConfig> heads;
    std::set<std::string> ids;
    for (std::size_t i = 0; i < j.size(); ++i) {
        const std::string p = path + "[" + std::to_string(i) + "]";
        Section s(j[i], p);
        HeadConfig h;
        if (!s.has("id")) {
            throw ConfigError(p + ".id is required");
        }
        s.read("id", h.id);
        s.read("code_dim", h.code_dim);
        s.read("hidden", h.hidden);
        s.read("hidden_layers", h.hidden_layers);
        s.read("cflow_steps", h.cflow_steps);
        s.read("cflow_shuffle", h.cflow_shuffle);
        s.finish();
        if (!ids.insert(h.id).second) {
            throw ConfigError("head id '" + h.id + "' declared twice (" + p + ")");
        }
        heads.push_back(h);
    }
    return heads;
}

json heads_json(const std::vector<HeadConfig>& heads) {
    json a = json::array();
    for (const auto& h : heads) {
        a.push_back({{"id", h.id},
                     {"code_dim", h.code_dim},
                     {"hidden", h.hidden},
                     {"hidden_layers", h.hidden_layers},
                     {"cflow_steps", h.cflow_steps},
                     {"cflow_shuffle", h.cflow_shuffle}});
    }
    return a;
}

ToyOptions parse_toy(const json& j, const std::string& path, std::uint64_t seed) {
    ToyOptions t;
    t.seed = seed;
    Section s(j, path);
    s.read("kind", t.kind);
    s.read("n", t.n);
    s.read("noise", t.noise);
    s.read("seed", t.seed);
    s.read("centers", t.centers);
    s.read("radius", t.radius);
    s.read("ring_radius", t.ring_radius);
    if (s.has("labels")) {
        Section l(s.at("labels"), path + ".labels");
        std::string scheme = "one-bit";
        l.read("scheme", scheme);
        l.read("bits", t.codec.n_bits);
        l.read("prefix", t.codec.prefix);
        l.finish();
        if (scheme == "one-bit") {
            t.codec.scheme = LabelScheme::one_bit_per_class;
        } else if (scheme == "binary") {
            t.codec.scheme = LabelScheme::binary_code;
        } else {
            throw ConfigError(path + ".labels.scheme must be one-bit or binary");
        }
    }
    s.finish();
    return t;
}

json toy_json(const ToyOptions& t) {
    return {{"kind", t.kind},
            {"n", t.n},
            {"noise", t.noise},
            {"seed", t.seed},
            {"centers", t.centers},
            {"radius", t.radius},
            {"ring_radius", t.ring_radius},
            {"labels",
             {{"scheme", t.codec.scheme == LabelScheme::binary_code ? "binary" : "one-bit"},
              {"bits", t.codec.n_bits},
              {"prefix", t.codec.prefix}}}};
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text) {
    json root;
    try {
        root = json::parse(text, nullptr, true, false);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
    RunConfig c;
    Section s(root, "");
    s.read("seed", c.seed);
    c.train.seed = c.seed;

    if (!s.has("model")) {
        throw ConfigError("config needs a model section");
    }
    {
        Section m(s.at("model"), "model");
        if (m.has("flow")) {
            c.model.flow = parse_flow(m.at("flow"), "model.flow", c.model.flow.dim);
        }
        if (m.has("heads")) {
            c.model.heads = parse_heads(m.at("heads"), "model.heads");
        }
        if (m.has("hierarchy")) {
            Section h(m.at("hierarchy"), "model.hierarchy");
            HierarchyConfig hc;
            if (!h.has("bridge")) {
                throw ConfigError("model.hierarchy.bridge is required");
            }
            h.read("bridge", hc.bridge);
            h.read("freeze_parent_tflow", hc.freeze_parent_tflow);
            h.read("freeze_child_tflow", hc.freeze_child_tflow);
            h.read("standardize_bridge", hc.standardize_bridge);
            if (h.has("bridge_codes")) {
                std::string mode;
                h.read("bridge_codes", mode);
                if (mode == "sampled") {
                    hc.bridge_codes = BridgeCodes::sampled;
                } else if (mode == "posterior_mean") {
                    hc.bridge_codes = BridgeCodes::posterior_mean;
                } else {
                    throw ConfigError("model.hierarchy.bridge_codes must be 'sampled' or "
                                      "'posterior_mean', got '" + mode + "'");
                }
            }
            std::size_t bridge_dim = 0;
            for (const auto& head : c.model.heads) {
                if (head.id == hc.bridge) {
                    bridge_dim = head.code_dim;
                }
            }
            if (bridge_dim == 0) {
                throw ConfigError("model.hierarchy.bridge '" + hc.bridge +
                                  "' is not a declared head");
            }
            hc.flow.dim = bridge_dim;
            if (h.has("flow")) {
                hc.flow = parse_flow(h.at("flow"), "model.hierarchy.flow", bridge_dim);
            }
            if (h.has("heads")) {
                hc.heads = parse_heads(h.at("heads"), "model.hierarchy.heads");
            }
            for (const auto& ch : hc.heads) {
                for (const auto& ph : c.model.heads) {
                    if (ch.id == ph.id) {
                        throw ConfigError("head id '" + ch.id +
                                          "' declared in both model.heads and "
                                          "model.hierarchy.heads");
                    }
                }
            }
            h.finish();
            c.model.hierarchy = hc;
        }
        m.finish();
    }
    if (s.has("train")) {
        Section t(s.at("train"), "train");
        TrainConfig& tc = c.train;
        t.read("lr_max", tc.lr_max);
        t.read("warmup_steps", tc.warmup_steps);
        t.read("batch_size", tc.batch_size);
        t.read("max_steps", tc.max_steps);
        t.read("seed", tc.seed);
        t.read("beta1", tc.adam.beta1);
        t.read("beta2", tc.adam.beta2);
        t.read("eps", tc.adam.eps);
        t.read("freeze_tflow", tc.freeze_tflow);
        t.read("log_every", tc.log_every);
        t.read("checkpoint_every", tc.checkpoint_every);
        t.read("actnorm_init_rows", tc.actnorm_init_rows);
        if (t.has("grad_clip_norm")) {
            double v = 0.0;
            t.read("grad_clip_norm", v);
            tc.grad_clip_norm = v;
        } else if (root.at("train").contains("grad_clip_norm")) {
            tc.grad_clip_norm.reset();  // explicit null disables clipping
        }
        t.finish();
        try {
            tc.validate();
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("train: ") + e.what());
        }
    }
    if (s.has("data")) {
        Section d(s.at("data"), "data");
        if (d.has("path")) {
            std::string p;
            d.read("path", p);
            c.data.path = p;
        }
        if (d.has("toy")) {
            c.data.toy = parse_toy(d.at("toy"), "data.toy", c.seed);
        }
        d.read("side", c.data.side);
        d.read("rgb", c.data.rgb);
        d.finish();
        if (c.data.path && c.data.toy) {
            throw ConfigError("data: give either path or toy, not both");
        }
    }
    if (s.has("eval")) {
        Section e(s.at("eval"), "eval");
        e.read("draws", c.eval.draws);
        e.read("threshold", c.eval.threshold);
        if (e.has("path")) {
            std::string p;
            e.read("path", p);
            c.eval.path = p;
        }
        e.finish();
    }
    if (s.has("io")) {
        Section io(s.at("io"), "io");
        io.read("checkpoint_dir", c.io.checkpoint_dir);
        io.read("log_path", c.io.log_path);
        io.finish();
    }
    s.finish();
    return c;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot open config " + path);
    }
    std::stringstream ss;
    ss << is.rdbuf();
    try {
        return parse(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

std::string RunConfig::dump() const {
    json j;
    j["seed"] = seed;
    j["model"] = {{"flow", flow_json(model.flow)}, {"heads", heads_json(model.heads)}};
    if (model.hierarchy) {
        j["model"]["hierarchy"] = {{"bridge", model.hierarchy->bridge},
                                   {"flow", flow_json(model.hierarchy->flow)},
                                   {"heads", heads_json(model.hierarchy->heads)},
                                   {"freeze_parent_tflow", model.hierarchy->freeze_parent_tflow},
                                   {"freeze_child_tflow", model.hierarchy->freeze_child_tflow},
                                   {"standardize_bridge", model.hierarchy->standardize_bridge},
                                   {"bridge_codes", model.hierarchy->bridge_codes == BridgeCodes::sampled
                                                        ? "sampled"
                                                        : "posterior_mean"}};
    }
    j["train"] = {{"lr_max", train.lr_max},
                  {"warmup_steps", train.warmup_steps},
                  {"batch_size", train.batch_size},
                  {"max_steps", train.max_steps},
                  {"seed", train.seed},
                  {"beta1", train.adam.beta1},
                  {"beta2", train.adam.beta2},
                  {"eps", train.adam.eps},
                  {"freeze_tflow", train.freeze_tflow},
                  {"log_every", train.log_every},
                  {"checkpoint_every", train.checkpoint_every},
                  {"actnorm_init_rows", train.actnorm_init_rows}};
    j["train"]["grad_clip_norm"] =
        train.grad_clip_norm ? json(*train.grad_clip_norm) : json(nullptr);
    j["data"] = {{"side", data.side}, {"rgb", data.rgb}};
    if (data.path) {
        j["data"]["path"] = *data.path;
    }
    if (data.toy) {
        j["data"]["toy"] = toy_json(*data.toy);
    }
    j["eval"] = {{"draws", eval.draws}, {"threshold", eval.threshold}};
    if (eval.path) {
        j["eval"]["path"] = *eval.path;
    }
    j["io"] = {{"checkpoint_dir", io.checkpoint_dir}, {"log_path", io.log_path}};
    return j.dump(2);
}

TzkModel build_model(const RunConfig& config) {
    return TzkModel(config.model.flow, config.model.heads, config.seed);
}

HierarchicalModel build_hierarchy(const RunConfig& config) {
    if (!config.model.hierarchy) {
        throw ConfigError("config has no model.hierarchy section");
    }
    const HierarchyConfig& h = *config.model.hierarchy;
    TzkModel parent = build_model(config);
    TzkModel child(h.flow, h.heads, derive_seed(config.seed, "child"));
    return HierarchicalModel(std::move(parent), h.bridge, std::move(child));
}

Dataset load_data(const DataConfig& config) {
    if (config.toy) {
        return make_toy(*config.toy);
    }
    if (!config.path) {
        throw ConfigError("data section needs a path or a toy");
    }
    Dataset ds = load_dataset(*config.path);
    if (ds.kind == DataKind::byte_image) {
        ds = fit_grid_images(ds, config.side, config.rgb);
    }
    return ds;
}

}  // namespace tzk
