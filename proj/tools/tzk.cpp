// SPDX-License-Identifier: Apache-2.0
//
// tzk: train, eval, sample, interpolate, make-data.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "tzk/checkpoint.hpp"
#include "tzk/config.hpp"
#include "tzk/errors.hpp"
#include "tzk/evaluation.hpp"
#include "tzk/hierarchy.hpp"
#include "tzk/tensor_io.hpp"

using namespace tzk;

namespace {

constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

// A model as stored in a checkpoint: flat or two-level.
struct Loaded {
    RunConfig config;
    std::optional<TzkModel> flat;
    std::optional<HierarchicalModel> hier;

    const TzkModel& top() const { return hier ? hier->parent() : *flat; }
    TzkModel& top() { return hier ? hier->parent() : *flat; }
    ParamList params() const { return hier ? hier->params() : flat->params(); }
};

Loaded build(const RunConfig& config) {
    Loaded l;
    l.config = config;
    if (config.model.hierarchy) {
        l.hier = build_hierarchy(config);
    } else {
        l.flat = build_model(config);
    }
    return l;
}

void validate_flows(const Loaded& l) {
    auto check = [](const TzkModel& m) {
        m.tflow().validate();
        for (const auto& h : m.heads()) {
            h.c_flow().validate();
        }
    };
    if (l.hier) {
        check(l.hier->parent());
        check(l.hier->child());
    } else {
        check(*l.flat);
    }
}

Loaded load_model(const std::string& ckpt_path, TrainState* state) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    Loaded l = build(RunConfig::parse(ckpt.config_json));
    restore_checkpoint(ckpt, l.params(), state);
    validate_flows(l);
    return l;
}

std::string ckpt_path(const RunConfig& c, const std::string& name) {
    return (std::filesystem::path(c.io.checkpoint_dir) / name).string();
}

Tensor read_point(const std::string& path, std::size_t D) {
    const Tensor t = load_tensor(path);
    if (t.numel() != D) {
        throw DimensionError(path + " holds " + std::to_string(t.numel()) +
                             " values, model dimension is " + std::to_string(D));
    }
    return reshape(t, {D});
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string resume;
    std::string init;
    bool freeze = false;
    bool specialize = false;
    bool parallel = false;
    long max_steps = -1;
};

int cmd_train(const TrainArgs& a) {
    RunConfig cfg = RunConfig::load(a.config);
    if (a.max_steps >= 0) {
        cfg.train.max_steps = static_cast<std::size_t>(a.max_steps);
    }
    if (a.freeze) {
        cfg.train.freeze_tflow = true;
    }
    const Dataset ds = load_data(cfg.data);
    TrainState state = TrainState::fresh(cfg.train);
    Loaded l = build(cfg);

    if (!a.resume.empty()) {
        const Checkpoint ckpt = load_checkpoint(a.resume);
        const RunConfig saved = RunConfig::parse(ckpt.config_json);
        if (saved.model.flow.total_dim() != cfg.model.flow.total_dim()) {
            throw StateError("checkpoint model does not match the config");
        }
        restore_checkpoint(ckpt, l.params(), &state);
        validate_flows(l);
    } else if (!a.init.empty()) {
        // Take the t-flow (and nothing else) from a pre-trained checkpoint.
        const Checkpoint ckpt = load_checkpoint(a.init);
        for (auto& p : l.top().tflow_params()) {
            const std::string name = l.hier ? "parent." + p.name : p.name;
            const Tensor* src = ckpt.find(name);
            if (!src) {
                src = ckpt.find(p.name);
            }
            if (!src || src->shape() != p.tensor.shape()) {
                throw StateError("init checkpoint lacks a compatible '" + p.name + "'");
            }
            Tensor dst = p.tensor;
            dst.assign(src->data());
        }
        l.top().tflow().validate();
    }
    if (cfg.train.freeze_tflow && a.init.empty() && a.resume.empty() &&
        !l.top().tflow().actnorm_initialized()) {
        warn("--freeze-tflow without a pre-trained flow: the flow stays random (use --init)");
    }

    std::ofstream log;
    if (!cfg.io.log_path.empty() && cfg.train.log_every > 0) {
        const auto parent = std::filesystem::path(cfg.io.log_path).parent_path();
        if (!parent.empty()) {
            std::filesystem::create_directories(parent);
        }
        log.open(cfg.io.log_path, state.opt.step == 0 ? std::ios::trunc : std::ios::app);
    }
    const std::string cfg_json = cfg.dump();
    auto save = [&](const std::string& name) {
        save_checkpoint(ckpt_path(cfg, name), make_checkpoint(cfg_json, l.params(), state));
    };

    if (a.specialize) {
        if (l.hier) {
            throw ConfigError("--specialize applies to flat models only");
        }
        const SpecializeResult r =
            specialize(*l.flat, ds, l.flat->head_ids(), cfg.train, a.parallel);
        for (const auto& [id, loss] : r.final_loss) {
            std::cout << "head " << id << " final loss " << loss << '\n';
        }
        state.opt.step = cfg.train.max_steps;
    } else if (l.hier) {
        if (a.parallel) {
            warn("--parallel-heads is ignored for hierarchical training");
        }
        const HierarchyConfig& hcfg = *cfg.model.hierarchy;
        HierarchyTrainConfig hc{cfg.train, hcfg.freeze_parent_tflow, hcfg.freeze_child_tflow,
                                hcfg.standardize_bridge, hcfg.bridge_codes};
        if (cfg.train.max_steps > state.opt.step) {
            train_hierarchical(*l.hier, ds, hc, state);
        }
    } else {
        TrainHooks hooks;
        hooks.log = log.is_open() ? &log : nullptr;
        hooks.warn = warn;
        hooks.checkpoint = [&](std::size_t step) { save("step-" + std::to_string(step) + ".tzkc"); };
        if (a.parallel) {
            warn("--parallel-heads only takes effect with --specialize");
        }
        train(*l.flat, ds, cfg.train, state, hooks);
    }
    save("last.tzkc");
    std::cout << "trained to step " << state.opt.step << "; checkpoint "
              << ckpt_path(cfg, "last.tzkc") << '\n';
    return 0;
}

struct EvalArgs {
    std::string checkpoint;
    std::string data;
    std::string head;
    std::string csv;
    std::uint64_t seed = 0;
    std::size_t draws = 0;
};

int cmd_eval(const EvalArgs& a) {
    Loaded l = load_model(a.checkpoint, nullptr);
    const TzkModel& m = l.top();
    if (!a.head.empty()) {
        m.head(a.head);
    }
    Dataset ds;
    if (!a.data.empty()) {
        DataConfig dc = l.config.data;
        dc.toy.reset();
        dc.path = a.data;
        ds = load_data(dc);
    } else if (l.config.eval.path) {
        DataConfig dc = l.config.data;
        dc.toy.reset();
        dc.path = l.config.eval.path;
        ds = load_data(dc);
    } else {
        ds = load_data(l.config.data);
    }
    Rng rng(derive_seed(a.seed, "eval"));
    EvalReport rep;
    rep.dataset = ds.name;
    rep.samples = ds.size();
    rep.seed = a.seed;
    const BpdResult u = nll_bits_per_dim(m, ds, rng);
    rep.set("bpd", u.bpd);
    rep.set("bpd_se", u.se);
    if (!a.head.empty()) {
        const std::size_t draws = a.draws ? a.draws : l.config.eval.draws;
        Dataset in_group = ds;
        if (const LabelColumn* col = ds.column(a.head)) {
            std::vector<std::size_t> rows;
            for (std::size_t r = 0; r < ds.size(); ++r) {
                if (col->e[r] == Label::positive) {
                    rows.push_back(r);
                }
            }
            if (!rows.empty()) {
                in_group = ds.subset(rows);
                const BpdResult g = nll_bits_per_dim(m, in_group, rng);
                rep.set("bpd_in_group", g.bpd);
            }
        }
        const BpdResult c = conditional_nll(m, a.head, in_group, draws, rng);
        rep.set("conditional_bpd", c.bpd);
        rep.set("conditional_bpd_se", c.se);
    }
    for (const auto& h : m.heads()) {
        if (ds.column(h.id())) {
            rep.set("disc_acc_" + h.id(),
                    discriminator_accuracy(m, h.id(), ds, l.config.eval.threshold));
        }
    }
    const Diagnostics d = dataset_diagnostics(m, ds, rng);
    rep.set("bound", d.bound);
    rep.set("mixture", d.mixture);
    rep.set("gap", d.gap);
    rep.write_table(std::cout);
    if (!a.csv.empty()) {
        std::ofstream os(a.csv);
        rep.write_csv(os);
    }
    return 0;
}

struct SampleArgs {
    std::string checkpoint;
    std::string head;
    std::string child_head;
    std::string out = "samples.tzkt";
    std::string image;
    std::size_t n = 16;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

int cmd_sample(const SampleArgs& a) {
    Loaded l = load_model(a.checkpoint, nullptr);
    const TzkModel& m = l.top();
    Rng rng(derive_seed(a.seed, "sample"));
    NoGradGuard ng;
    Tensor t;
    if (!a.child_head.empty()) {
        if (!l.hier) {
            throw KeyError("--child-head needs a hierarchical checkpoint");
        }
        t = hierarchical_sample(*l.hier, a.child_head, a.n, a.temperature, rng).t;
    } else if (!a.head.empty()) {
        const KnowledgeHead& h = m.head(a.head);
        const Tensor eps = mul_scalar(Tensor::randn({a.n, h.code_dim()}, rng), a.temperature);
        const Tensor c = h.sample_c_prior(eps);
        t = h.sample_t_given_c(c, e_fill(a.n, 1.0), m.tflow(), a.temperature, rng);
    } else {
        t = m.tflow().sample(a.n, a.temperature, rng);
    }
    save_tensor(a.out, t.detach());
    if (!a.image.empty()) {
        const auto& img = m.tflow().config().image;
        if (!img) {
            throw ConfigError("--image needs an image model");
        }
        write_image_strip(a.image, t, *img);
    }
    std::cout << "wrote " << shape_str(t.shape()) << " samples to " << a.out << '\n';
    return 0;
}

struct InterpArgs {
    std::string checkpoint;
    std::string a;
    std::string b;
    std::string out = "interpolation.csv";
    std::string image;
    std::size_t steps = 8;
};

int cmd_interpolate(const InterpArgs& a) {
    Loaded l = load_model(a.checkpoint, nullptr);
    const TzkModel& m = l.top();
    const std::size_t D = m.obs_dim();
    const auto pts = interpolate_latent(m, read_point(a.a, D), read_point(a.b, D), a.steps);
    std::vector<double> vals, alpha, base;
    for (const auto& p : pts) {
        const auto v = p.t.to_vector();
        vals.insert(vals.end(), v.begin(), v.end());
        alpha.push_back(p.alpha);
        base.push_back(p.base_log_prob);
    }
    const Tensor grid = Tensor::from({pts.size(), D}, vals);
    std::ofstream os(a.out);
    if (!os) {
        throw FormatError("cannot open " + a.out + " for writing");
    }
    write_points_csv(os, grid, {{"alpha", alpha}, {"base_log_prob", base}});
    if (!a.image.empty()) {
        const auto& img = m.tflow().config().image;
        if (!img) {
            throw ConfigError("--image needs an image model");
        }
        write_image_strip(a.image, grid, *img);
    }
    std::cout << "wrote " << pts.size() << " interpolants to " << a.out << '\n';
    return 0;
}

struct MakeDataArgs {
    ToyOptions toy;
    std::string scheme = "one-bit";
    std::string out = "toy.tzkd";
};

int cmd_make_data(MakeDataArgs a) {
    if (a.scheme == "binary") {
        a.toy.codec.scheme = LabelScheme::binary_code;
    } else if (a.scheme != "one-bit") {
        throw ConfigError("--labels must be one-bit or binary");
    }
    const Dataset ds = make_toy(a.toy);
    save_dataset(a.out, ds);
    std::cout << "wrote " << ds.size() << " points (" << ds.labels.size() << " label columns) to "
              << a.out << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tzk: flows with knowledge heads"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* train_cmd = app.add_subcommand("train", "train a model from a config");
    train_cmd->add_option("config", ta.config, "run config (JSON)")->required();
    train_cmd->add_option("--resume", ta.resume, "continue from a checkpoint");
    train_cmd->add_option("--init", ta.init, "take the t-flow from a checkpoint");
    train_cmd->add_flag("--freeze-tflow", ta.freeze, "keep the t-flow fixed");
    train_cmd->add_flag("--specialize", ta.specialize, "train each head over the frozen t-flow");
    train_cmd->add_flag("--parallel-heads", ta.parallel, "one thread per head with --specialize");
    train_cmd->add_option("--max-steps", ta.max_steps, "override train.max_steps");

    EvalArgs ea;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
    eval_cmd->add_option("checkpoint", ea.checkpoint)->required();
    eval_cmd->add_option("--data", ea.data, "dataset container (default: config data)");
    eval_cmd->add_option("--head", ea.head, "report conditional bits/dim for this head");
    eval_cmd->add_option("--csv", ea.csv, "also write the report as CSV");
    eval_cmd->add_option("--seed", ea.seed);
    eval_cmd->add_option("--draws", ea.draws, "code draws per point (default: config)");

    SampleArgs sa;
    auto* sample_cmd = app.add_subcommand("sample", "draw samples");
    sample_cmd->add_option("checkpoint", sa.checkpoint)->required();
    sample_cmd->add_option("--head", sa.head, "conditional on a head");
    sample_cmd->add_option("--child-head", sa.child_head, "hierarchical, via a child head");
    sample_cmd->add_option("--n", sa.n)->check(CLI::PositiveNumber);
    sample_cmd->add_option("--temperature", sa.temperature)->check(CLI::NonNegativeNumber);
    sample_cmd->add_option("--out", sa.out, "TZKT output");
    sample_cmd->add_option("--image", sa.image, "PGM/PPM strip for image models");
    sample_cmd->add_option("--seed", sa.seed);

    InterpArgs ia;
    auto* interp_cmd = app.add_subcommand("interpolate", "linear interpolation in z");
    interp_cmd->add_option("checkpoint", ia.checkpoint)->required();
    interp_cmd->add_option("--a", ia.a, "TZKT endpoint")->required();
    interp_cmd->add_option("--b", ia.b, "TZKT endpoint")->required();
    interp_cmd->add_option("--steps", ia.steps)->check(CLI::Range(2, 100000));
    interp_cmd->add_option("--out", ia.out, "CSV output");
    interp_cmd->add_option("--image", ia.image, "PGM/PPM strip for image models");

    MakeDataArgs ma;
    auto* data_cmd = app.add_subcommand("make-data", "write a toy dataset");
    data_cmd->add_option("--kind", ma.toy.kind, "two-moons|gaussian-mixture|ring|blobs|normal");
    data_cmd->add_option("--n", ma.toy.n)->check(CLI::PositiveNumber);
    data_cmd->add_option("--noise", ma.toy.noise);
    data_cmd->add_option("--seed", ma.toy.seed);
    data_cmd->add_option("--centers", ma.toy.centers);
    data_cmd->add_option("--radius", ma.toy.radius);
    data_cmd->add_option("--ring-radius", ma.toy.ring_radius);
    data_cmd->add_option("--labels", ma.scheme, "one-bit|binary");
    data_cmd->add_option("--bits", ma.toy.codec.n_bits);
    data_cmd->add_option("--prefix", ma.toy.codec.prefix);
    data_cmd->add_option("--out", ma.out);

    CLI11_PARSE(app, argc, argv);

    try {
        set_precision(precision_from_env());
        if (*train_cmd) {
            return cmd_train(ta);
        }
        if (*eval_cmd) {
            return cmd_eval(ea);
        }
        if (*sample_cmd) {
            return cmd_sample(sa);
        }
        if (*interp_cmd) {
            return cmd_interpolate(ia);
        }
        if (*data_cmd) {
            return cmd_make_data(ma);
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitError;
    }
    return 0;
}
