#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "vmoge/common.hpp"

namespace vmoge {

enum class PriorVariant { none, laplacian_shift, normalized_laplacian_shift, pure_normalized };

struct PriorSpec {
    PriorVariant variant = PriorVariant::normalized_laplacian_shift;
    double lambda_shift = 0.1;
};

inline PriorVariant prior_variant_from_string(const std::string& s) {
    if (s == "none") return PriorVariant::none;
    if (s == "l-shift") return PriorVariant::laplacian_shift;
    if (s == "lnorm-shift") return PriorVariant::normalized_laplacian_shift;
    if (s == "pure") return PriorVariant::pure_normalized;
    throw ValidationError("unknown prior variant '" + s +
                          "' (expected none, l-shift, lnorm-shift, pure)");
}

inline const char* prior_variant_name(PriorVariant v) {
    switch (v) {
        case PriorVariant::none: return "none";
        case PriorVariant::laplacian_shift: return "l-shift";
        case PriorVariant::normalized_laplacian_shift: return "lnorm-shift";
        case PriorVariant::pure_normalized: return "pure";
    }
    return "?";
}

// ---- adjacency construction ------------------------------------------------

// Absolute Pearson correlation between channel signals, sparsified to the
// top-p fraction of off-diagonal pairs (kept symmetrically, weighted by
// |corr|). Constant channels correlate with nothing.
inline Mat build_adjacency(const Mat& filtered, double density) {
    if (density <= 0.0 || density > 1.0)
        throw ValidationError("build_adjacency: density must be in (0, 1]");
    int C = filtered.rows();
    int T = filtered.cols();
    if (T < 2) throw ValidationError("build_adjacency: need at least 2 samples");

    std::vector<double> mean(static_cast<size_t>(C), 0.0);
    std::vector<double> sd(static_cast<size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) {
        const double* x = filtered.row(c);
        double mu = 0.0;
        for (int t = 0; t < T; ++t) mu += x[t];
        mu /= T;
        double var = 0.0;
        for (int t = 0; t < T; ++t) var += (x[t] - mu) * (x[t] - mu);
        mean[static_cast<size_t>(c)] = mu;
        double s = std::sqrt(var);
        // Numerically-constant channels count as zero-variance.
        if (s <= 1e-13 * (1.0 + std::fabs(mu)) * std::sqrt(static_cast<double>(T))) s = 0.0;
        sd[static_cast<size_t>(c)] = s;
    }

    struct Pair {
        double weight;
        int i, j;
    };
    std::vector<Pair> pairs;
    pairs.reserve(static_cast<size_t>(C) * (C - 1) / 2);
    for (int i = 0; i < C; ++i)
        for (int j = i + 1; j < C; ++j) {
            double w = 0.0;
            if (sd[static_cast<size_t>(i)] > 0.0 && sd[static_cast<size_t>(j)] > 0.0) {
                const double* xi = filtered.row(i);
                const double* xj = filtered.row(j);
                double cov = 0.0;
                for (int t = 0; t < T; ++t)
                    cov += (xi[t] - mean[static_cast<size_t>(i)]) *
                           (xj[t] - mean[static_cast<size_t>(j)]);
                w = std::fabs(cov / (sd[static_cast<size_t>(i)] * sd[static_cast<size_t>(j)]));
                if (w > 1.0) w = 1.0;  // guard fp overshoot
            }
            pairs.push_back({w, i, j});
        }

    size_t keep = static_cast<size_t>(
        std::ceil(density * static_cast<double>(pairs.size()) - 1e-12));
    if (keep > pairs.size()) keep = pairs.size();
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
        if (a.weight != b.weight) return a.weight > b.weight;
        return std::tie(a.i, a.j) < std::tie(b.i, b.j);
    });

    Mat A(C, C);
    for (size_t n = 0; n < keep; ++n) {
        A(pairs[n].i, pairs[n].j) = pairs[n].weight;
        A(pairs[n].j, pairs[n].i) = pairs[n].weight;
    }
    return A;
}

// ---- Laplacians and precision matrices -------------------------------------

// L_norm = I - D^{-1/2} A D^{-1/2}; zero-degree nodes use D^{-1/2} = 0, so
// their row and column match the identity's.
inline Mat normalized_laplacian(const Mat& A) {
    int C = A.rows();
    std::vector<double> isqrt(static_cast<size_t>(C), 0.0);
    for (int i = 0; i < C; ++i) {
        double deg = 0.0;
        for (int j = 0; j < C; ++j) deg += A(i, j);
        if (deg > 0.0) isqrt[static_cast<size_t>(i)] = 1.0 / std::sqrt(deg);
    }
    Mat L = Mat::identity(C);
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < C; ++j)
            if (A(i, j) != 0.0)
                L(i, j) -= isqrt[static_cast<size_t>(i)] * A(i, j) * isqrt[static_cast<size_t>(j)];
    return L;
}

inline Mat unnormalized_laplacian(const Mat& A) {
    int C = A.rows();
    Mat L(C, C);
    for (int i = 0; i < C; ++i) {
        double deg = 0.0;
        for (int j = 0; j < C; ++j) {
            deg += A(i, j);
            L(i, j) = -A(i, j);
        }
        L(i, i) += deg;
    }
    return L;
}

// Lower-triangular Cholesky factor; throws on a non-positive pivot.
inline Mat cholesky(const Mat& Q, const char* what = "matrix") {
    int C = Q.rows();
    Mat L(C, C);
    for (int i = 0; i < C; ++i) {
        for (int j = 0; j <= i; ++j) {
            double acc = Q(i, j);
            for (int k = 0; k < j; ++k) acc -= L(i, k) * L(j, k);
            if (i == j) {
                if (acc <= 0.0)
                    throw NumericalError(std::string("cholesky: ") + what +
                                         " is not positive definite (pivot " +
                                         std::to_string(i) + " = " + std::to_string(acc) + ")");
                L(i, i) = std::sqrt(acc);
            } else {
                L(i, j) = acc / L(j, j);
            }
        }
    }
    return L;
}

inline double logdet_pd(const Mat& Q, const char* what = "matrix") {
    Mat L = cholesky(Q, what);
    double acc = 0.0;
    for (int i = 0; i < Q.rows(); ++i) acc += std::log(L(i, i));
    return 2.0 * acc;
}

// GMRF precision matrix for one band graph: the variant's base matrix plus
// any needed jitter, with the Cholesky factor and log-determinant cached.
class PrecisionMatrix {
public:
    static PrecisionMatrix build(const Mat& A, const PriorSpec& spec) {
        if (spec.variant == PriorVariant::none)
            throw ValidationError("precision_matrix: variant 'none' has no precision matrix");
        if (spec.lambda_shift < 0.0)
            throw ValidationError("precision_matrix: lambda_shift must be >= 0");
        int C = A.rows();
        Mat base;
        double shift = 0.0;
        double jitter = 0.0;
        switch (spec.variant) {
            case PriorVariant::laplacian_shift:
                base = unnormalized_laplacian(A);
                shift = spec.lambda_shift;
                break;
            case PriorVariant::normalized_laplacian_shift:
                base = normalized_laplacian(A);
                shift = spec.lambda_shift;
                break;
            case PriorVariant::pure_normalized:
                base = normalized_laplacian(A);
                jitter = 1e-6;
                break;
            default:
                break;
        }

        // L and L_norm are positive semidefinite, so the shifted matrix is
        // PD in exact arithmetic; escalate jitter if roundoff says otherwise.
        for (;;) {
            Mat Q = base;
            for (int i = 0; i < C; ++i) Q(i, i) += shift + jitter;
            try {
                PrecisionMatrix out;
                out.chol_ = cholesky(Q, prior_variant_name(spec.variant));
                out.q_ = std::move(Q);
                double acc = 0.0;
                for (int i = 0; i < C; ++i) acc += std::log(out.chol_(i, i));
                out.logdet_ = 2.0 * acc;
                return out;
            } catch (const NumericalError&) {
                double next = jitter <= 0.0 ? 1e-6 : jitter * 10.0;
                if (next > 1e-2 + 1e-15)
                    throw NumericalError(
                        std::string("precision_matrix: ") + prior_variant_name(spec.variant) +
                        " not positive definite even with jitter 1e-2");
                warn(std::string("precision_matrix: escalating jitter to ") +
                     std::to_string(next));
                jitter = next;
            }
        }
    }

    const Mat& q() const { return q_; }
    const Mat& chol() const { return chol_; }
    double logdet() const { return logdet_; }
    int dim() const { return q_.rows(); }

private:
    Mat q_;
    Mat chol_;
    double logdet_ = 0.0;
};

}  // namespace vmoge
