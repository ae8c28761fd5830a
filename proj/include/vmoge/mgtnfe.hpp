#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "vmoge/common.hpp"
#include "vmoge/tensor.hpp"

namespace vmoge {

enum class Aggregation { mean, max };

inline Aggregation aggregation_from_string(const std::string& s) {
    if (s == "mean") return Aggregation::mean;
    if (s == "max") return Aggregation::max;
    if (s == "attention")
        throw ValidationError("aggregation 'attention' is not implemented; use mean or max");
    throw ValidationError("unknown aggregation '" + s + "' (expected mean or max)");
}

struct GranularityConfig {
    std::string name;
    std::vector<double> windows;  // seconds
};

inline GranularityConfig granularity_config(const std::string& name) {
    if (name == "fine") return {name, {0.02, 0.03, 0.04}};
    if (name == "medium") return {name, {0.04, 0.06, 0.08}};
    if (name == "coarse") return {name, {0.08, 0.10, 0.12}};
    if (name == "mixed-1") return {name, {0.02, 0.06, 0.10}};
    if (name == "mixed-2") return {name, {0.03, 0.07, 0.11}};
    if (name == "single-fine") return {name, {0.02}};
    if (name == "single-medium") return {name, {0.06}};
    if (name == "single-coarse") return {name, {0.10}};
    throw ValidationError("unknown granularity configuration '" + name + "'");
}

inline int kernel_length(double window_sec, double fs) {
    return static_cast<int>(std::llround(window_sec * fs));
}
inline int stride_of(int phi) { return std::max(1, (phi + 1) / 2); }

struct MgtnfeConfig {
    GranularityConfig granularity = granularity_config("fine");
    int token_dim = 16;  // D_T
    int heads = 2;
    int layers = 2;  // transformer blocks
    int feat_dim = 16;  // d_h per node feature
    Aggregation agg = Aggregation::mean;
    int pe_max_len = 4096;
    bool use_pe = true;
};

// Shared-weight extractor parameters: one conv bank per granularity, a fixed
// sinusoidal PE table, the transformer stack, and the output projection.
// The same instance serves every channel and band.
struct MgtnfeParams {
    MgtnfeConfig cfg;
    std::vector<Var> conv_w;  // D_T x Phi(g)
    std::vector<Var> conv_b;  // D_T
    struct Block {
        Var ln1_g, ln1_b;
        std::vector<Var> wq, wk, wv;  // per head: D_T x (D_T/H)
        Var wo, wo_b;                 // D_T x D_T, D_T
        Var ln2_g, ln2_b;
        Var ff1_w, ff1_b;  // D_T x 4*D_T
        Var ff2_w, ff2_b;  // 4*D_T x D_T
    };
    std::vector<Block> blocks;
    Var proj_w, proj_b;  // D_T x d_h
    Mat pe;              // pe_max_len x D_T

    static MgtnfeParams init(ParameterStore& ps, const MgtnfeConfig& cfg, double fs,
                             Rng& rng, const std::string& prefix = "nfe.") {
        if (cfg.token_dim <= 0 || cfg.heads <= 0 || cfg.token_dim % cfg.heads != 0)
            throw ValidationError("mgtnfe: token_dim must be a positive multiple of heads");
        if (cfg.granularity.windows.empty())
            throw ValidationError("mgtnfe: granularity list is empty");
        MgtnfeParams p;
        p.cfg = cfg;
        int dt = cfg.token_dim;
        for (size_t gi = 0; gi < cfg.granularity.windows.size(); ++gi) {
            int phi = kernel_length(cfg.granularity.windows[gi], fs);
            if (phi < 1)
                throw ValidationError("mgtnfe: granularity " +
                                      std::to_string(cfg.granularity.windows[gi]) +
                                      " s is under one sample at fs " + std::to_string(fs));
            std::string g = prefix + "conv" + std::to_string(gi) + ".";
            p.conv_w.push_back(ps.add(g + "w", Shape::mat(dt, phi),
                                      glorot_uniform(rng, phi, dt,
                                                     static_cast<size_t>(dt) * phi)));
            p.conv_b.push_back(ps.add_zero_vec(g + "b", dt));
        }
        int dk = dt / cfg.heads;
        for (int l = 0; l < cfg.layers; ++l) {
            std::string b = prefix + "blk" + std::to_string(l) + ".";
            Block blk;
            blk.ln1_g = ps.add(b + "ln1.g", Shape::vec(dt),
                               std::vector<double>(static_cast<size_t>(dt), 1.0));
            blk.ln1_b = ps.add_zero_vec(b + "ln1.b", dt);
            for (int h = 0; h < cfg.heads; ++h) {
                std::string hh = b + "head" + std::to_string(h) + ".";
                blk.wq.push_back(ps.add_glorot(hh + "wq", dt, dk, rng));
                blk.wk.push_back(ps.add_glorot(hh + "wk", dt, dk, rng));
                blk.wv.push_back(ps.add_glorot(hh + "wv", dt, dk, rng));
            }
            blk.wo = ps.add_glorot(b + "wo", dt, dt, rng);
            blk.wo_b = ps.add_zero_vec(b + "wo.b", dt);
            blk.ln2_g = ps.add(b + "ln2.g", Shape::vec(dt),
                               std::vector<double>(static_cast<size_t>(dt), 1.0));
            blk.ln2_b = ps.add_zero_vec(b + "ln2.b", dt);
            blk.ff1_w = ps.add_glorot(b + "ff1.w", dt, 4 * dt, rng);
            blk.ff1_b = ps.add_zero_vec(b + "ff1.b", 4 * dt);
            blk.ff2_w = ps.add_glorot(b + "ff2.w", 4 * dt, dt, rng);
            blk.ff2_b = ps.add_zero_vec(b + "ff2.b", dt);
            p.blocks.push_back(std::move(blk));
        }
        p.proj_w = ps.add_glorot(prefix + "proj.w", dt, cfg.feat_dim, rng);
        p.proj_b = ps.add_zero_vec(prefix + "proj.b", cfg.feat_dim);

        p.pe = Mat(cfg.pe_max_len, dt);
        for (int pos = 0; pos < cfg.pe_max_len; ++pos)
            for (int d = 0; d < dt; ++d) {
                int pair = d - d % 2;
                double omega = std::pow(10000.0, -static_cast<double>(pair) / dt);
                p.pe(pos, d) = d % 2 == 0 ? std::sin(pos * omega) : std::cos(pos * omega);
            }
        return p;
    }
};

// Token lengths for one granularity: strided conv positions, then
// non-overlapping pooling by 2.
inline int conv_positions(int tprime, int phi, int stride) {
    return (tprime - phi) / stride + 1;
}
inline int token_count(int tprime, int phi, int stride) {
    return conv_positions(tprime, phi, stride) / 2;
}

// Strided conv bank + leaky rectifier + pairwise max pooling for one
// granularity. Returns an undefined Var when the signal is too short (or
// pools to nothing); callers skip it with a warning.
inline Var tokenize_granularity(const Var& x, size_t gi, const MgtnfeParams& p, double fs) {
    int tprime = x.shape().d0;
    int phi = kernel_length(p.cfg.granularity.windows[gi], fs);
    int stride = stride_of(phi);
    if (tprime < phi || token_count(tprime, phi, stride) < 1) {
        warn("tokenize_granularity: window " + std::to_string(p.cfg.granularity.windows[gi]) +
             " s needs more than " + std::to_string(tprime) + " samples; skipped");
        return {};
    }
    auto conv = conv1d(x, p.conv_w[gi], p.conv_b[gi], stride);
    return max_pool_rows2(leaky_relu(conv));
}

namespace detail_nfe {

inline Var attention(const Var& x, const MgtnfeParams::Block& blk, int heads) {
    int dk = blk.wq[0].shape().d1;
    double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Var> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        auto q = matmul(x, blk.wq[static_cast<size_t>(h)]);
        auto k = matmul(x, blk.wk[static_cast<size_t>(h)]);
        auto v = matmul(x, blk.wv[static_cast<size_t>(h)]);
        auto scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
        head_outs.push_back(matmul(softmax_rows(scores), v));
    }
    return add(matmul(concat_cols(head_outs), blk.wo), blk.wo_b);
}

}  // namespace detail_nfe

// Concatenated tokens + positional encoding, then the pre-norm transformer
// stack: LN -> multi-head self-attention -> residual, LN -> feed-forward
// (hidden 4*D_T, leaky) -> residual.
inline Var concat_and_encode(const std::vector<Var>& tokens, const MgtnfeParams& p) {
    if (tokens.empty()) throw ValidationError("concat_and_encode: no token blocks");
    Var e = tokens.size() == 1 ? tokens[0] : concat_rows(tokens);
    int L = e.shape().d0;
    int dt = e.shape().d1;
    if (L > p.cfg.pe_max_len)
        throw ValidationError("concat_and_encode: sequence length " + std::to_string(L) +
                              " exceeds the positional table (" +
                              std::to_string(p.cfg.pe_max_len) +
                              "); raise pe_max_len");
    if (p.cfg.use_pe) {
        std::vector<double> pe(static_cast<size_t>(L) * dt);
        for (int pos = 0; pos < L; ++pos)
            for (int d = 0; d < dt; ++d)
                pe[static_cast<size_t>(pos) * dt + d] = p.pe(pos, d);
        e = add(e, constant(Shape::mat(L, dt), std::move(pe)));
    }
    for (const auto& blk : p.blocks) {
        auto attn = detail_nfe::attention(layer_norm(e, blk.ln1_g, blk.ln1_b), blk,
                                          p.cfg.heads);
        e = add(e, attn);
        auto h = layer_norm(e, blk.ln2_g, blk.ln2_b);
        auto ff = add(matmul(leaky_relu(add(matmul(h, blk.ff1_w), blk.ff1_b)), blk.ff2_w),
                      blk.ff2_b);
        e = add(e, ff);
    }
    return e;
}

// Aggregation over token positions followed by the D_T -> d_h projection.
inline Var aggregate_and_project(const Var& encoded, const MgtnfeParams& p) {
    Var pooled = p.cfg.agg == Aggregation::mean ? mean_axis(encoded, 0) : max_rows(encoded);
    return add(as_vector(matmul(as_row(pooled), p.proj_w)), p.proj_b);
}

// Full per-channel, per-band path: multi-granularity tokens -> transformer ->
// d_h feature vector.
inline Var encode_channel_band(std::span<const double> x, const MgtnfeParams& p, double fs) {
    auto xv = constant(Shape::vec(static_cast<int>(x.size())),
                       std::vector<double>(x.begin(), x.end()));
    std::vector<Var> tokens;
    for (size_t gi = 0; gi < p.cfg.granularity.windows.size(); ++gi) {
        auto t = tokenize_granularity(xv, gi, p, fs);
        if (t.defined()) tokens.push_back(t);
    }
    if (tokens.empty())
        throw ValidationError("encode_channel_band: every granularity was skipped (signal too short)");
    return aggregate_and_project(concat_and_encode(tokens, p), p);
}

// H^(k): one row of d_h features per channel, channels independent, weights
// shared.
inline Var extract_band_features(const Mat& filtered, const MgtnfeParams& p, double fs) {
    std::vector<Var> rows;
    rows.reserve(static_cast<size_t>(filtered.rows()));
    for (int c = 0; c < filtered.rows(); ++c)
        rows.push_back(encode_channel_band(
            std::span<const double>(filtered.row(c), static_cast<size_t>(filtered.cols())), p,
            fs));
    return stack_rows(rows);
}

}  // namespace vmoge
