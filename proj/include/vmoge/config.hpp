#pragma once

#include <string>
#include <vector>

#include "vmoge/io.hpp"
#include "vmoge/model.hpp"
#include "vmoge/synthgen.hpp"
#include "vmoge/trainer.hpp"

namespace vmoge {

// Every pipeline knob in one flat struct, loadable from key=value text and
// serialized back into each run directory.
struct RunConfig {
    // featurize
    double fs = 100.0;
    double epoch_sec = 2.0;
    double density = 0.3;
    std::string graph_scope = "epoch";
    // model
    std::string granularity = "fine";
    int token_dim = 16;
    int heads = 2;
    int layers = 2;
    int d_h = 16;
    int d_g = 16;
    int d_z = 8;
    std::string aggregation = "mean";
    std::string mixture = "prob";
    bool add_self_loops = false;
    bool use_pe = true;
    // prior and objective
    std::string prior = "lnorm-shift";
    double lambda_shift = 0.1;
    double lambda_kl = kDefaultLambdaKl;
    bool paper_kl_sign = false;
    // optimizer and evaluation
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    int epochs = 30;
    int batch = 16;
    int folds = 5;
    uint64_t seed = 1;
    int eval_samples = 8;
    // synthetic data
    int subjects_per_class = 20;
    double duration_sec = 20.0;
    int channels = 19;
    std::string target_band = "delta";
    std::string target_channels = "1-6";
    double effect_size = 2.5;
    double noise_amp = 1.0;
};

namespace detail_cfg {

// Single field registry driving both parsing and serialization.
template <typename F>
void visit_fields(RunConfig& c, F&& f) {
    f("fs", c.fs);
    f("epoch_sec", c.epoch_sec);
    f("density", c.density);
    f("graph_scope", c.graph_scope);
    f("granularity", c.granularity);
    f("token_dim", c.token_dim);
    f("heads", c.heads);
    f("layers", c.layers);
    f("d_h", c.d_h);
    f("d_g", c.d_g);
    f("d_z", c.d_z);
    f("aggregation", c.aggregation);
    f("mixture", c.mixture);
    f("add_self_loops", c.add_self_loops);
    f("use_pe", c.use_pe);
    f("prior", c.prior);
    f("lambda_shift", c.lambda_shift);
    f("lambda_kl", c.lambda_kl);
    f("paper_kl_sign", c.paper_kl_sign);
    f("lr", c.lr);
    f("beta1", c.beta1);
    f("beta2", c.beta2);
    f("adam_eps", c.adam_eps);
    f("epochs", c.epochs);
    f("batch", c.batch);
    f("folds", c.folds);
    f("seed", c.seed);
    f("eval_samples", c.eval_samples);
    f("subjects_per_class", c.subjects_per_class);
    f("duration_sec", c.duration_sec);
    f("channels", c.channels);
    f("target_band", c.target_band);
    f("target_channels", c.target_channels);
    f("effect_size", c.effect_size);
    f("noise_amp", c.noise_amp);
}

inline void assign(double& dst, const std::string& v, const std::string& key) {
    dst = detail_io::parse_double(v, "config key '" + key + "'");
}

inline void assign(int& dst, const std::string& v, const std::string& key) {
    size_t used = 0;
    int out = 0;
    try {
        out = std::stoi(v, &used);
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "': not an integer: '" + v + "'");
    }
    if (used != v.size())
        throw ValidationError("config key '" + key + "': not an integer: '" + v + "'");
    dst = out;
}

inline void assign(uint64_t& dst, const std::string& v, const std::string& key) {
    size_t used = 0;
    unsigned long long out = 0;
    try {
        out = std::stoull(v, &used);
    } catch (const std::exception&) {
        throw ValidationError("config key '" + key + "': not an unsigned integer: '" + v + "'");
    }
    if (used != v.size())
        throw ValidationError("config key '" + key + "': not an unsigned integer: '" + v + "'");
    dst = out;
}

inline void assign(bool& dst, const std::string& v, const std::string& key) {
    if (v == "true" || v == "1")
        dst = true;
    else if (v == "false" || v == "0")
        dst = false;
    else
        throw ValidationError("config key '" + key + "': not a boolean: '" + v + "'");
}

inline void assign(std::string& dst, const std::string& v, const std::string&) { dst = v; }

inline std::string format(double v) { return detail_io::format_double(v); }
inline std::string format(int v) { return std::to_string(v); }
inline std::string format(uint64_t v) { return std::to_string(v); }
inline std::string format(bool v) { return v ? "true" : "false"; }
inline std::string format(const std::string& v) { return v; }

}  // namespace detail_cfg

inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    bool found = false;
    detail_cfg::visit_fields(cfg, [&](const char* name, auto& field) {
        if (!found && key == name) {
            detail_cfg::assign(field, value, key);
            found = true;
        }
    });
    if (!found) throw ValidationError("unknown config key '" + key + "'");
}

inline std::string serialize_config(const RunConfig& cfg) {
    std::string out;
    detail_cfg::visit_fields(const_cast<RunConfig&>(cfg), [&](const char* name, auto& field) {
        out += std::string(name) + "=" + detail_cfg::format(field) + "\n";
    });
    return out;
}

inline RunConfig parse_config(const std::string& text, RunConfig base = RunConfig{}) {
    size_t start = 0;
    int line_no = 0;
    while (start < text.size()) {
        size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(start, end - start);
        start = end + 1;
        ++line_no;
        size_t first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        size_t last = line.find_last_not_of(" \t\r");
        line = line.substr(first, last - first + 1);
        if (line.empty() || line[0] == '#') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(line_no) +
                                  ": expected key=value, got '" + line + "'");
        config_set(base, line.substr(0, eq), line.substr(eq + 1));
    }
    return base;
}

inline RunConfig load_config(const std::string& path, RunConfig base = RunConfig{}) {
    return parse_config(detail_io::read_file(path), std::move(base));
}

// "1-6" or "2,5,9" style 1-based channel list to 0-based indices.
inline std::vector<int> parse_channel_list(const std::string& text) {
    std::vector<int> out;
    for (const auto& part : detail_io::split(text, ',')) {
        if (part.empty()) throw ValidationError("channel list: empty entry in '" + text + "'");
        size_t dash = part.find('-');
        auto to_index = [&](const std::string& s) {
            int v = 0;
            detail_cfg::assign(v, s, "target_channels");
            if (v < 1) throw ValidationError("channel list: channels are 1-based, got " + s);
            return v - 1;
        };
        if (dash == std::string::npos) {
            out.push_back(to_index(part));
        } else {
            int lo = to_index(part.substr(0, dash));
            int hi = to_index(part.substr(dash + 1));
            if (hi < lo) throw ValidationError("channel list: descending range '" + part + "'");
            for (int c = lo; c <= hi; ++c) out.push_back(c);
        }
    }
    return out;
}

// ---- conversions into per-module configs ------------------------------------

inline FeaturizeOptions featurize_options(const RunConfig& cfg) {
    FeaturizeOptions opt;
    opt.epoch_sec = cfg.epoch_sec;
    opt.density = cfg.density;
    opt.scope = graph_scope_from_string(cfg.graph_scope);
    return opt;
}

inline ModelConfig model_config(const RunConfig& cfg, int channels, int t_prime, double fs) {
    ModelConfig m;
    m.channels = channels;
    m.t_prime = t_prime;
    m.fs = fs;
    m.granularity = cfg.granularity;
    m.token_dim = cfg.token_dim;
    m.heads = cfg.heads;
    m.layers = cfg.layers;
    m.d_h = cfg.d_h;
    m.d_g = cfg.d_g;
    m.d_z = cfg.d_z;
    m.aggregation = aggregation_from_string(cfg.aggregation);
    m.mixture = mixture_mode_from_string(cfg.mixture);
    m.add_self_loops = cfg.add_self_loops;
    m.use_pe = cfg.use_pe;
    return m;
}

inline TrainConfig train_config(const RunConfig& cfg, int channels, int t_prime, double fs) {
    TrainConfig t;
    t.lr = cfg.lr;
    t.beta1 = cfg.beta1;
    t.beta2 = cfg.beta2;
    t.adam_eps = cfg.adam_eps;
    t.epochs = cfg.epochs;
    t.batch = cfg.batch;
    t.lambda_kl = cfg.lambda_kl;
    t.prior.variant = prior_variant_from_string(cfg.prior);
    t.prior.lambda_shift = cfg.lambda_shift;
    t.paper_kl_sign = cfg.paper_kl_sign;
    t.seed = cfg.seed;
    t.folds = cfg.folds;
    t.eval_samples = cfg.eval_samples;
    t.model = model_config(cfg, channels, t_prime, fs);
    return t;
}

inline SynthConfig synth_config(const RunConfig& cfg) {
    SynthConfig s;
    s.subjects_per_class = cfg.subjects_per_class;
    s.fs = cfg.fs;
    s.duration_sec = cfg.duration_sec;
    s.channels = cfg.channels;
    s.target_band = band_index_from_string(cfg.target_band);
    s.target_channels = parse_channel_list(cfg.target_channels);
    s.effect_size = cfg.effect_size;
    s.noise_amp = cfg.noise_amp;
    s.seed = cfg.seed;
    return s;
}

}  // namespace vmoge
