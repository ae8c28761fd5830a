#pragma once

// Self-check for the closed-form GMRF divergence: random posterior/prior
// instances compared against an antithetic Monte-Carlo estimate of
// E_q[log q(z) - log p(z)]. Shared by the kl-check CLI subcommand and the
// test suites.

#include <cmath>
#include <string>
#include <vector>

#include "vmoge/common.hpp"
#include "vmoge/graphprior.hpp"
#include "vmoge/objective.hpp"
#include "vmoge/tensor.hpp"

namespace vmoge {

struct KlInstance {
    Mat mu;
    Mat logsigma;
    PrecisionMatrix prior;
};

// Draws a posterior/prior pair. Generic instances cover 2..8 nodes, 1..4
// latent dims, and cycle through the prior variants; near-zero instances sit
// close to the prior (Q = I via an empty graph with unit shift) so the
// divergence is tiny and the absolute branch of the tolerance is exercised.
inline KlInstance random_kl_instance(unsigned seed, bool near_zero = false) {
    Rng rng(10000 + seed);
    int C = near_zero ? 4 : 2 + static_cast<int>(rng.integer(7));
    int d_z = 1 + static_cast<int>(rng.integer(4));

    KlInstance inst;
    inst.mu = Mat(C, d_z);
    inst.logsigma = Mat(C, d_z);
    // The mean contributes a deterministic quadratic to the divergence, so a
    // generous mu scale keeps the relative tolerance far above the sampling
    // noise of the estimator below.
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < d_z; ++j) {
            inst.mu(i, j) = (near_zero ? 0.01 : 2.0) * rng.normal();
            inst.logsigma(i, j) = near_zero ? 0.01 * rng.uniform(-1.0, 1.0)
                                            : rng.uniform(-0.6, 0.3);
        }

    PriorSpec spec;
    Mat A(C, C);
    if (near_zero) {
        spec.variant = PriorVariant::laplacian_shift;
        spec.lambda_shift = 1.0;
    } else {
        for (int i = 0; i < C; ++i)
            for (int j = i + 1; j < C; ++j)
                if (rng.uniform() < 0.6) {
                    double w = rng.uniform(0.1, 1.0);
                    A(i, j) = w;
                    A(j, i) = w;
                }
        switch (seed % 3) {
            case 0: spec.variant = PriorVariant::laplacian_shift; break;
            case 1: spec.variant = PriorVariant::normalized_laplacian_shift; break;
            default: spec.variant = PriorVariant::pure_normalized; break;
        }
        spec.lambda_shift = rng.uniform(0.05, 0.6);
    }
    inst.prior = PrecisionMatrix::build(A, spec);
    return inst;
}

// Monte-Carlo estimate of KL(q || p) with two variance reductions: antithetic
// noise pairs, and per-coordinate standardization of the drawn noise so its
// empirical second moment is exactly one (moment matching). `pairs` counts
// pairs, so the draw count is 2 * pairs.
inline double mc_kl_estimate(const KlInstance& inst, int pairs, Rng& rng) {
    const Mat& Q = inst.prior.q();
    int C = inst.mu.rows();
    int d_z = inst.mu.cols();
    size_t K = static_cast<size_t>(C) * d_z;
    const double log2pi = std::log(2.0 * 3.14159265358979323846);

    // log q depends on the noise only through its square, so it is shared by
    // the antithetic pair up to the -log sigma constant.
    double ls_sum = 0.0;
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < d_z; ++j) ls_sum += inst.logsigma(i, j);
    double logp_const = d_z * (-0.5 * C * log2pi + 0.5 * inst.prior.logdet());

    // First pass accumulates each coordinate's second moment; the second pass
    // replays the same stream with the matching rescale applied.
    Rng replay = rng;
    std::vector<double> m2(K, 0.0);
    for (int t = 0; t < pairs; ++t)
        for (size_t i = 0; i < K; ++i) {
            double e = rng.normal();
            m2[i] += e * e;
        }
    std::vector<double> scale(K);
    for (size_t i = 0; i < K; ++i) scale[i] = std::sqrt(pairs / m2[i]);

    std::vector<double> eps(K);
    std::vector<double> zp(K), zm(K);
    double acc = 0.0;
    for (int t = 0; t < pairs; ++t) {
        double eps_sq = 0.0;
        for (size_t i = 0; i < K; ++i) {
            eps[i] = replay.normal() * scale[i];
            eps_sq += eps[i] * eps[i];
        }
        double logq = -0.5 * C * d_z * log2pi - ls_sum - 0.5 * eps_sq;
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d_z; ++j) {
                size_t at = static_cast<size_t>(i * d_z + j);
                double s = std::exp(inst.logsigma(i, j)) * eps[at];
                zp[at] = inst.mu(i, j) + s;
                zm[at] = inst.mu(i, j) - s;
            }
        double quad_p = 0.0, quad_m = 0.0;
        for (int j = 0; j < d_z; ++j)
            for (int i = 0; i < C; ++i) {
                double rp = 0.0, rm = 0.0;
                for (int k = 0; k < C; ++k) {
                    rp += Q(i, k) * zp[static_cast<size_t>(k * d_z + j)];
                    rm += Q(i, k) * zm[static_cast<size_t>(k * d_z + j)];
                }
                quad_p += zp[static_cast<size_t>(i * d_z + j)] * rp;
                quad_m += zm[static_cast<size_t>(i * d_z + j)] * rm;
            }
        double logp_pair = logp_const - 0.25 * (quad_p + quad_m);
        acc += logq - logp_pair;
    }
    return acc / pairs;
}

inline double kl_exact(const KlInstance& inst) {
    return kl_gmrf(constant_mat(inst.mu), constant_mat(inst.logsigma), inst.prior).item();
}

struct KlCheckResult {
    int trials = 0;
    int failures = 0;
    double max_rel_err = 0.0;  // over instances with |MC| >= 0.1
    double max_abs_err = 0.0;  // over instances with |MC| < 0.1
    double min_kl = 0.0;       // smallest closed-form value seen
    int worst_trial = -1;
    bool passed() const { return failures == 0 && min_kl >= -1e-9; }
    std::string summary() const;
};

inline std::string KlCheckResult::summary() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "kl-check: %d trials, max rel err %.3e, max abs err (small-KL) %.3e, "
                  "min KL %.3e, %d failure%s",
                  trials, max_rel_err, max_abs_err, min_kl, failures,
                  failures == 1 ? "" : "s");
    return buf;
}

// Compares the closed form against the MC estimate on `trials` random
// instances using `samples` draws each. An instance passes when the error is
// within 1% of the MC value, or within 1e-3 absolutely when the divergence
// magnitude is below 0.1. Every fourth instance is near-zero.
inline KlCheckResult run_kl_check(int trials, int samples, uint64_t seed = 424242) {
    if (trials <= 0) throw ValidationError("kl-check: trials must be positive");
    if (samples < 2) throw ValidationError("kl-check: samples must be at least 2");
    int pairs = samples / 2;

    KlCheckResult res;
    res.trials = trials;
    res.min_kl = std::numeric_limits<double>::infinity();
    std::vector<double> exact(static_cast<size_t>(trials));
    std::vector<double> mc(static_cast<size_t>(trials));
    parallel_for(trials, [&](int t) {
        KlInstance inst = random_kl_instance(static_cast<unsigned>(t), t % 4 == 3);
        Rng rng(Rng(seed).derive(0x6d63ULL + static_cast<uint64_t>(t)).seed());
        exact[static_cast<size_t>(t)] = kl_exact(inst);
        mc[static_cast<size_t>(t)] = mc_kl_estimate(inst, pairs, rng);
    });
    for (int t = 0; t < trials; ++t) {
        double a = exact[static_cast<size_t>(t)];
        double c = mc[static_cast<size_t>(t)];
        double diff = std::abs(a - c);
        res.min_kl = std::min(res.min_kl, a);
        bool small = std::abs(c) < 0.1;
        bool ok;
        if (small) {
            ok = diff <= 1e-3;
            if (diff > res.max_abs_err) res.max_abs_err = diff;
        } else {
            double rel = diff / std::abs(c);
            ok = rel <= 0.01;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst_trial = t;
            }
        }
        if (!ok) ++res.failures;
    }
    return res;
}

}  // namespace vmoge
