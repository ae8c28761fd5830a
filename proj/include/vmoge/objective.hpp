#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <vector>

#include "vmoge/common.hpp"
#include "vmoge/graphprior.hpp"
#include "vmoge/moe.hpp"
#include "vmoge/tensor.hpp"

namespace vmoge {

// KL(q || p) for a mean-field Gaussian posterior over C nodes (columns of mu /
// logsigma are independent d_z coordinates) against a zero-mean GMRF with
// precision Q, summed over coordinates:
//
//   KL = 1/2 tr(Q S) + 1/2 sum_j mu_j' Q mu_j - d_z C / 2
//        - sum(logsigma) - d_z/2 log|Q|
//
// where S accumulates the per-coordinate diagonal covariances. The negative
// log-determinant sign is required for KL >= 0; paper_sign flips it to the
// published form, which can drive the term negative.
inline Var kl_gmrf(const Var& mu, const Var& logsigma, const PrecisionMatrix& prior,
                   bool paper_sign = false) {
    const Shape& s = mu.shape();
    if (s.rank != 2 || logsigma.shape() != s)
        throw std::invalid_argument("kl_gmrf: mu and logsigma must be matching matrices");
    int C = s.d0;
    int d_z = s.d1;
    const Mat& Q = prior.q();
    if (Q.rows() != C)
        throw std::invalid_argument("kl_gmrf: precision is " + std::to_string(Q.rows()) +
                                    "x" + std::to_string(Q.cols()) + " but posterior has " +
                                    std::to_string(C) + " nodes");

    std::vector<double> qdiag(static_cast<size_t>(C));
    for (int i = 0; i < C; ++i) qdiag[static_cast<size_t>(i)] = Q(i, i);

    auto sigma2 = exp(scale(logsigma, 2.0));
    auto t1 = dot(constant(Shape::vec(C), std::move(qdiag)), sum_axis(sigma2, 1));
    auto t2 = sum(mul(mu, matmul(constant_mat(Q), mu)));
    auto varying = sub(add(scale(t1, 0.5), scale(t2, 0.5)), sum(logsigma));
    double logdet_term = 0.5 * d_z * prior.logdet();
    double shift = -0.5 * d_z * C + (paper_sign ? logdet_term : -logdet_term);
    return add_const(varying, shift);
}

// Count of mixture probabilities that had to be clamped away from {0, 1}
// before the log. Warned once, counted always.
inline std::atomic<std::uint64_t>& probability_clamp_count() {
    static std::atomic<std::uint64_t> count{0};
    return count;
}

inline constexpr double kProbFloor = 1e-12;

// Bernoulli negative log-likelihood from a probability already in (0, 1).
inline Var nll_from_probability(const Var& p, int label) {
    double raw = p.item();
    if (raw < kProbFloor || raw > 1.0 - kProbFloor) {
        auto prev = probability_clamp_count().fetch_add(1);
        if (prev == 0)
            warn("mixture probability " + std::to_string(raw) +
                 " clamped away from {0,1} before log; check for saturated logits");
    }
    auto pc = clamp(p, kProbFloor, 1.0 - kProbFloor);
    if (label != 0) return neg(log(pc));
    return neg(log(add_const(neg(pc), 1.0)));
}

// Bernoulli negative log-likelihood straight from a logit; numerically stable,
// no clamping needed.
inline Var nll_from_logit(const Var& logit, int label) {
    if (label != 0) return neg(log_sigmoid(logit));
    return neg(log_sigmoid(neg(logit)));
}

// NLL of one instance under the gated mixture. The logit route is used where
// the mixture itself produces a logit; the probability route clamps.
inline Var mixture_nll(const Var& pi, const Var& expert_logits, MixtureMode mode,
                       int label) {
    if (mode == MixtureMode::logit) return nll_from_logit(dot(pi, expert_logits), label);
    return nll_from_probability(dot(pi, sigmoid(expert_logits)), label);
}

inline constexpr double kDefaultLambdaKl = 0.6;

// total = nll + lambda * sum_k kl_k. Pass an empty kl list to train without
// the prior term (variant none).
inline Var total_loss(const Var& nll, const std::vector<Var>& kls, double lambda_kl) {
    if (kls.empty()) return nll;
    Var acc = kls[0];
    for (size_t k = 1; k < kls.size(); ++k) acc = add(acc, kls[k]);
    return add(nll, scale(acc, lambda_kl));
}

// Scalar snapshot of one optimization step for tracing.
struct LossBreakdown {
    double nll = 0.0;
    std::array<double, 4> kl{0.0, 0.0, 0.0, 0.0};
    double total = 0.0;
};

}  // namespace vmoge
