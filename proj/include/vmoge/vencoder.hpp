#pragma once

#include <cmath>
#include <string>

#include "vmoge/common.hpp"
#include "vmoge/graphprior.hpp"
#include "vmoge/tensor.hpp"

namespace vmoge {

// Symmetric degree normalization of an adjacency, with the same zero-degree
// convention as the Laplacian path. Self-loop augmentation is off by default;
// when enabled, degrees include the added identity.
inline Mat normalize_adjacency(const Mat& A, bool add_self_loops = false) {
    int C = A.rows();
    Mat M = A;
    if (add_self_loops)
        for (int i = 0; i < C; ++i) M(i, i) += 1.0;
    std::vector<double> isqrt(static_cast<size_t>(C), 0.0);
    for (int i = 0; i < C; ++i) {
        double deg = 0.0;
        for (int j = 0; j < C; ++j) deg += M(i, j);
        if (deg > 0.0) isqrt[static_cast<size_t>(i)] = 1.0 / std::sqrt(deg);
    }
    Mat out(C, C);
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j)
            out(i, j) = isqrt[static_cast<size_t>(i)] * M(i, j) * isqrt[static_cast<size_t>(j)];
    return out;
}

// Two-layer graph convolution weights for one band expert.
struct GcnParams {
    Var w1, b1;  // d_h x d_g, d_g
    Var w2, b2;  // d_g x d_g, d_g

    static GcnParams init(ParameterStore& ps, int d_h, int d_g, Rng& rng,
                          const std::string& prefix) {
        GcnParams p;
        p.w1 = ps.add_glorot(prefix + "w1", d_h, d_g, rng);
        p.b1 = ps.add_zero_vec(prefix + "b1", d_g);
        p.w2 = ps.add_glorot(prefix + "w2", d_g, d_g, rng);
        p.b2 = ps.add_zero_vec(prefix + "b2", d_g);
        return p;
    }
};

// H-tilde = A-hat * rho(A-hat * H * W1 + b1) * W2 + b2
inline Var gcn_forward(const Var& h, const Mat& ahat, const GcnParams& p) {
    auto a = constant_mat(ahat);
    auto hidden = leaky_relu(add(matmul(matmul(a, h), p.w1), p.b1));
    return add(matmul(matmul(a, hidden), p.w2), p.b2);
}

// Mean-field Gaussian posterior heads for one band expert.
struct PosteriorHeads {
    Var wmu, bmu;  // d_g x d_z, d_z
    Var wls, bls;  // d_g x d_z, d_z

    static PosteriorHeads init(ParameterStore& ps, int d_g, int d_z, Rng& rng,
                               const std::string& prefix) {
        PosteriorHeads p;
        p.wmu = ps.add_glorot(prefix + "wmu", d_g, d_z, rng);
        p.bmu = ps.add_zero_vec(prefix + "bmu", d_z);
        p.wls = ps.add_glorot(prefix + "wls", d_g, d_z, rng);
        p.bls = ps.add_zero_vec(prefix + "bls", d_z);
        return p;
    }
};

inline constexpr double kLogSigmaMin = -8.0;
inline constexpr double kLogSigmaMax = 4.0;

struct LatentPosterior {
    Var mu;        // C x d_z
    Var logsigma;  // C x d_z, clamped to [kLogSigmaMin, kLogSigmaMax]
};

inline LatentPosterior posterior_params(const Var& htilde, const PosteriorHeads& heads) {
    LatentPosterior post;
    post.mu = add(matmul(htilde, heads.wmu), heads.bmu);
    post.logsigma = clamp(add(matmul(htilde, heads.wls), heads.bls), kLogSigmaMin,
                          kLogSigmaMax);
    return post;
}

// Z = mu + exp(logsigma) .* eps; the noise draw carries no gradient.
inline Var reparameterize(const LatentPosterior& post, const Mat& eps) {
    if (post.mu.shape() != Shape::mat(eps.rows(), eps.cols()))
        throw std::invalid_argument("reparameterize: noise shape " +
                                    Shape::mat(eps.rows(), eps.cols()).str() +
                                    " does not match posterior " + post.mu.shape().str());
    return add(post.mu, mul(exp(post.logsigma), constant_mat(eps)));
}

inline Mat standard_normal(Rng& rng, int rows, int cols) {
    Mat m(rows, cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

}  // namespace vmoge
