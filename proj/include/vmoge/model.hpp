#pragma once

#include <array>
#include <string>
#include <vector>

#include "vmoge/common.hpp"
#include "vmoge/io.hpp"
#include "vmoge/mgtnfe.hpp"
#include "vmoge/moe.hpp"
#include "vmoge/objective.hpp"
#include "vmoge/vencoder.hpp"

namespace vmoge {

struct ModelConfig {
    int channels = 19;
    int t_prime = 0;
    double fs = 0.0;
    std::string granularity = "fine";
    int token_dim = 16;
    int heads = 2;
    int layers = 2;
    int d_h = 16;  // node feature width out of the extractor
    int d_g = 16;
    int d_z = 8;
    Aggregation aggregation = Aggregation::mean;
    MixtureMode mixture = MixtureMode::prob;
    bool add_self_loops = false;
    bool use_pe = true;
    int pe_max_len = 4096;
};

// The full pipeline: one shared extractor, four band experts (GCN + posterior
// heads + decoder MLP), and the gate over concatenated band features.
struct VmogeModel {
    ModelConfig cfg;
    ParameterStore params;
    MgtnfeConfig nfe_cfg;
    MgtnfeParams nfe;
    std::array<GcnParams, kNumBands> gcn;
    std::array<PosteriorHeads, kNumBands> heads;
    std::array<ExpertParams, kNumBands> experts;
    GatingParams gate;

    static VmogeModel init(const ModelConfig& cfg, uint64_t seed) {
        VmogeModel m;
        m.cfg = cfg;
        m.nfe_cfg.granularity = granularity_config(cfg.granularity);
        m.nfe_cfg.token_dim = cfg.token_dim;
        m.nfe_cfg.heads = cfg.heads;
        m.nfe_cfg.layers = cfg.layers;
        m.nfe_cfg.feat_dim = cfg.d_h;
        m.nfe_cfg.agg = cfg.aggregation;
        m.nfe_cfg.use_pe = cfg.use_pe;
        m.nfe_cfg.pe_max_len = cfg.pe_max_len;

        Rng rng(seed);
        m.nfe = MgtnfeParams::init(m.params, m.nfe_cfg, cfg.fs, rng, "nfe.");
        for (int k = 0; k < kNumBands; ++k) {
            std::string band = band_name(k);
            m.gcn[static_cast<size_t>(k)] =
                GcnParams::init(m.params, cfg.d_h, cfg.d_g, rng, "gcn." + band + ".");
            m.heads[static_cast<size_t>(k)] =
                PosteriorHeads::init(m.params, cfg.d_g, cfg.d_z, rng, "post." + band + ".");
            m.experts[static_cast<size_t>(k)] =
                ExpertParams::init(m.params, cfg.d_z, rng, "expert." + band + ".");
        }
        m.gate = GatingParams::init(m.params, kNumBands * cfg.d_h, kNumBands, rng, "gate.");
        return m;
    }
};

// Normalized adjacencies for one epoch, precomputed outside the tape.
inline std::array<Mat, kNumBands> normalized_adjacencies(const EpochFeatures& ep,
                                                         bool add_self_loops) {
    std::array<Mat, kNumBands> out;
    for (int b = 0; b < kNumBands; ++b)
        out[static_cast<size_t>(b)] =
            normalize_adjacency(ep.adjacency[static_cast<size_t>(b)], add_self_loops);
    return out;
}

// The noise-independent part of one epoch's forward pass.
struct EpochEncoding {
    Var pi;                                          // 4
    std::array<LatentPosterior, kNumBands> post;     // C x d_z each
};

inline EpochEncoding encode_epoch(const VmogeModel& m, const EpochFeatures& ep,
                                  const std::array<Mat, kNumBands>& ahat) {
    EpochEncoding enc;
    std::array<Var, kNumBands> band_feats;
    for (int k = 0; k < kNumBands; ++k)
        band_feats[static_cast<size_t>(k)] =
            extract_band_features(ep.filtered[static_cast<size_t>(k)], m.nfe, m.cfg.fs);
    auto hprime = concat_cols(std::vector<Var>(band_feats.begin(), band_feats.end()));
    enc.pi = gate_weights(hprime, m.gate);
    for (int k = 0; k < kNumBands; ++k) {
        auto htilde = gcn_forward(band_feats[static_cast<size_t>(k)],
                                  ahat[static_cast<size_t>(k)], m.gcn[static_cast<size_t>(k)]);
        enc.post[static_cast<size_t>(k)] =
            posterior_params(htilde, m.heads[static_cast<size_t>(k)]);
    }
    return enc;
}

// Expert logits for one latent draw; eps[k] is a C x d_z standard-normal draw.
inline Var decode_logits(const VmogeModel& m, const EpochEncoding& enc,
                         const std::array<Mat, kNumBands>& eps) {
    std::vector<Var> logits;
    logits.reserve(kNumBands);
    for (int k = 0; k < kNumBands; ++k) {
        auto z = reparameterize(enc.post[static_cast<size_t>(k)], eps[static_cast<size_t>(k)]);
        logits.push_back(
            expert_logit(mean_pool(z), m.experts[static_cast<size_t>(k)]));
    }
    return concat_scalars(logits);
}

inline std::array<Mat, kNumBands> draw_noise(Rng& rng, int C, int d_z) {
    std::array<Mat, kNumBands> eps;
    for (int k = 0; k < kNumBands; ++k)
        eps[static_cast<size_t>(k)] = standard_normal(rng, C, d_z);
    return eps;
}

// Mixture probability averaged over `samples` posterior draws (probabilities
// averaged, not logits). Returns the gate weights and per-band posterior mean
// row norms alongside, for the gating and attribution reports.
struct EpochPrediction {
    double phat = 0.0;
    std::array<double, kNumBands> pi{};
    Mat mu_norms;  // kNumBands x C, ||mu_c^(k)||_2
};

inline EpochPrediction predict_epoch(const VmogeModel& m, const EpochFeatures& ep,
                                     const std::array<Mat, kNumBands>& ahat, Rng& rng,
                                     int samples) {
    auto enc = encode_epoch(m, ep, ahat);
    EpochPrediction out;
    for (int k = 0; k < kNumBands; ++k) out.pi[static_cast<size_t>(k)] = enc.pi.values()[static_cast<size_t>(k)];
    int C = m.cfg.channels;
    out.mu_norms = Mat(kNumBands, C);
    for (int k = 0; k < kNumBands; ++k) {
        const auto& mu = enc.post[static_cast<size_t>(k)].mu.values();
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int j = 0; j < m.cfg.d_z; ++j) {
                double v = mu[static_cast<size_t>(c * m.cfg.d_z + j)];
                acc += v * v;
            }
            out.mu_norms(k, c) = std::sqrt(acc);
        }
    }
    double acc = 0.0;
    for (int s = 0; s < samples; ++s) {
        auto logits = decode_logits(m, enc, draw_noise(rng, C, m.cfg.d_z));
        acc += mixture_probability(enc.pi, logits, m.cfg.mixture).item();
    }
    out.phat = acc / samples;
    return out;
}

// One training batch's loss graph: mean NLL plus lambda-weighted batch-mean KL
// per expert. Sample index i uses priors[i][k] (per-epoch adjacency scope).
struct BatchLoss {
    Var total;
    LossBreakdown values;
};

inline BatchLoss batch_loss(const VmogeModel& m, const std::vector<const EpochFeatures*>& batch,
                            const std::vector<const std::array<Mat, kNumBands>*>& ahat,
                            const std::vector<const std::array<PrecisionMatrix, kNumBands>*>& priors,
                            double lambda_kl, bool use_prior, bool paper_sign, Rng& noise) {
    size_t B = batch.size();
    if (B == 0) throw std::invalid_argument("batch_loss: empty batch");
    Var nll_sum;
    std::array<Var, kNumBands> kl_sum;
    for (size_t i = 0; i < B; ++i) {
        auto enc = encode_epoch(m, *batch[i], *ahat[i]);
        auto logits = decode_logits(m, enc, draw_noise(noise, m.cfg.channels, m.cfg.d_z));
        auto nll = mixture_nll(enc.pi, logits, m.cfg.mixture, batch[i]->label);
        nll_sum = i == 0 ? nll : add(nll_sum, nll);
        if (use_prior)
            for (int k = 0; k < kNumBands; ++k) {
                auto kl = kl_gmrf(enc.post[static_cast<size_t>(k)].mu,
                                  enc.post[static_cast<size_t>(k)].logsigma,
                                  (*priors[i])[static_cast<size_t>(k)], paper_sign);
                kl_sum[static_cast<size_t>(k)] =
                    i == 0 ? kl : add(kl_sum[static_cast<size_t>(k)], kl);
            }
    }
    double inv = 1.0 / static_cast<double>(B);
    BatchLoss out;
    auto nll_mean = scale(nll_sum, inv);
    std::vector<Var> kls;
    if (use_prior)
        for (int k = 0; k < kNumBands; ++k) {
            auto kl_mean = scale(kl_sum[static_cast<size_t>(k)], inv);
            out.values.kl[static_cast<size_t>(k)] = kl_mean.item();
            kls.push_back(kl_mean);
        }
    out.total = total_loss(nll_mean, kls, lambda_kl);
    out.values.nll = nll_mean.item();
    out.values.total = out.total.item();
    return out;
}

// Binary weight snapshot: magic, version, then each parameter in store order
// as name, shape, and little-endian doubles.
inline constexpr char kWeightsMagic[4] = {'V', 'M', 'G', 'W'};

inline void save_weights(const std::string& path, const VmogeModel& model) {
    const ParameterStore& ps = model.params;
    std::string out;
    out.append(kWeightsMagic, 4);
    detail_io::put_u32(out, 1);  // version
    detail_io::put_u32(out, static_cast<uint32_t>(ps.count()));
    for (size_t i = 0; i < ps.count(); ++i) {
        const std::string& name = ps.name_at(i);
        Var v = ps.var_at(i);
        detail_io::put_u32(out, static_cast<uint32_t>(name.size()));
        out.append(name);
        const Shape& s = v.shape();
        detail_io::put_u32(out, static_cast<uint32_t>(s.rank));
        detail_io::put_u32(out, static_cast<uint32_t>(s.d0));
        detail_io::put_u32(out, static_cast<uint32_t>(s.d1));
        for (double x : v.values()) detail_io::put_f64(out, x);
    }
    detail_io::write_file(path, out);
}

// Overwrites the values of an already-built model in place. The file must
// list exactly the model's parameters with matching shapes.
inline void load_weights(const std::string& path, VmogeModel& model) {
    std::string buf = detail_io::read_file(path);
    detail_io::Reader r(buf, "weights file");
    if (r.bytes(4) != std::string(kWeightsMagic, 4))
        throw ValidationError("weights file: bad magic");
    uint32_t version = r.u32();
    if (version != 1)
        throw ValidationError("weights file: unsupported version " + std::to_string(version));
    uint32_t n = r.u32();
    ParameterStore& ps = model.params;
    if (n != ps.count())
        throw ValidationError("weights file: has " + std::to_string(n) +
                              " parameters, model expects " + std::to_string(ps.count()));
    for (uint32_t i = 0; i < n; ++i) {
        std::string name = r.bytes(r.u32());
        if (!ps.contains(name))
            throw ValidationError("weights file: unknown parameter '" + name + "'");
        Var v = ps.get(name);
        Shape s;
        s.rank = static_cast<int>(r.u32());
        s.d0 = static_cast<int>(r.u32());
        s.d1 = static_cast<int>(r.u32());
        if (!(s == v.shape()))
            throw ValidationError("weights file: shape mismatch for '" + name + "'");
        auto& vals = v.mutable_values();
        for (size_t j = 0; j < vals.size(); ++j) vals[j] = r.f64();
    }
    if (r.remaining() != 0)
        throw ValidationError("weights file: trailing bytes");
}

}  // namespace vmoge
