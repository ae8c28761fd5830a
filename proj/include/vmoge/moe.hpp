#pragma once

#include <string>
#include <vector>

#include "vmoge/common.hpp"
#include "vmoge/tensor.hpp"

namespace vmoge {

inline constexpr int kNumExperts = 4;
inline constexpr int kExpertHidden = 16;
inline constexpr int kGateHidden = 32;

enum class MixtureMode { prob, logit };

inline MixtureMode mixture_mode_from_string(const std::string& s) {
    if (s == "prob") return MixtureMode::prob;
    if (s == "logit") return MixtureMode::logit;
    throw ValidationError("unknown mixture mode '" + s + "' (expected prob or logit)");
}

inline const char* mixture_mode_name(MixtureMode m) {
    return m == MixtureMode::prob ? "prob" : "logit";
}

// Per-expert classifier head: d_z -> 16 (leaky) -> 1 logit.
struct ExpertParams {
    Var w1, b1;  // d_z x 16, 16
    Var w2, b2;  // 16 x 1, scalar

    static ExpertParams init(ParameterStore& ps, int d_z, Rng& rng,
                             const std::string& prefix) {
        ExpertParams p;
        p.w1 = ps.add_glorot(prefix + "w1", d_z, kExpertHidden, rng);
        p.b1 = ps.add_zero_vec(prefix + "b1", kExpertHidden);
        p.w2 = ps.add_glorot(prefix + "w2", kExpertHidden, 1, rng);
        p.b2 = ps.add(prefix + "b2", Shape::scalar(), {0.0});
        return p;
    }
};

// Column means of Z (C x d_z) -> pooled latent (d_z).
inline Var mean_pool(const Var& z) { return mean_axis(z, 0); }

// Expert logit from a pooled latent vector.
inline Var expert_logit(const Var& zbar, const ExpertParams& p) {
    auto hidden = leaky_relu(add(as_vector(matmul(as_row(zbar), p.w1)), p.b1));
    return add(as_scalar(matmul(as_row(hidden), p.w2)), p.b2);
}

// Gating network: summary vector phi from the channel mean of the concatenated
// band features, one logit per expert (no bias), softmax.
struct GatingParams {
    Var wphi, bphi;  // feat_in x 32, 32
    Var wgate;       // 32 x K, column k scores expert k

    static GatingParams init(ParameterStore& ps, int feat_in, int num_experts, Rng& rng,
                             const std::string& prefix) {
        GatingParams p;
        p.wphi = ps.add_glorot(prefix + "wphi", feat_in, kGateHidden, rng);
        p.bphi = ps.add_zero_vec(prefix + "bphi", kGateHidden);
        p.wgate = ps.add_glorot(prefix + "wgate", kGateHidden, num_experts, rng);
        return p;
    }
};

inline Var gate_weights(const Var& hprime, const GatingParams& p) {
    auto pooled = mean_axis(hprime, 0);
    auto phi = leaky_relu(add(as_vector(matmul(as_row(pooled), p.wphi)), p.bphi));
    auto logits = matmul(as_row(phi), p.wgate);
    return as_vector(softmax_rows(logits));
}

// Collect per-expert scalar logits into one K-vector.
inline Var concat_scalars(const std::vector<Var>& xs) {
    std::vector<Var> rows;
    rows.reserve(xs.size());
    for (const auto& x : xs) rows.push_back(reshape(x, Shape::vec(1)));
    return as_vector(stack_rows(rows));
}

// Mixture probability from gate weights and per-expert logits.
//   prob:  p = sum_k pi_k * sigmoid(l_k)
//   logit: p = sigmoid(sum_k pi_k * l_k)
inline Var mixture_probability(const Var& pi, const Var& expert_logits, MixtureMode mode) {
    if (mode == MixtureMode::prob) return dot(pi, sigmoid(expert_logits));
    return sigmoid(dot(pi, expert_logits));
}

}  // namespace vmoge
