#pragma once

#include <array>
#include <complex>
#include <cstring>
#include <mutex>
#include <span>
#include <vector>

#include <fftw3.h>

#include "vmoge/common.hpp"

namespace vmoge {

struct Band {
    double lo;
    double hi;
    const char* name;
};

// Half-open intervals; together they partition the analysis range.
inline constexpr std::array<Band, 4> kBands = {{
    {0.5, 4.0, "delta"},
    {4.0, 8.0, "theta"},
    {8.0, 13.0, "alpha"},
    {13.0, 45.0, "beta"},
}};
inline constexpr double kAnalysisLo = 0.5;
inline constexpr double kAnalysisHi = 45.0;
inline constexpr int kNumBands = 4;

inline const char* band_name(int b) {
    if (b < 0 || b >= kNumBands) throw ValidationError("band index out of range");
    return kBands[static_cast<size_t>(b)].name;
}

inline int band_index_from_string(const std::string& s) {
    for (int b = 0; b < kNumBands; ++b)
        if (s == kBands[static_cast<size_t>(b)].name) return b;
    throw ValidationError("unknown band '" + s + "' (expected delta, theta, alpha, or beta)");
}

namespace fft {

namespace detail {
// The FFTW planner is not thread-safe; executes on distinct buffers are.
inline std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}
}  // namespace detail

inline std::vector<std::complex<double>> rfft(std::span<const double> x) {
    int n = static_cast<int>(x.size());
    std::vector<double> in(x.begin(), x.end());
    std::vector<std::complex<double>> out(static_cast<size_t>(n / 2 + 1));
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lk(detail::planner_mutex());
        plan = fftw_plan_dft_r2c_1d(n, in.data(),
                                    reinterpret_cast<fftw_complex*>(out.data()),
                                    FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lk(detail::planner_mutex());
        fftw_destroy_plan(plan);
    }
    return out;
}

// Inverse of rfft for a real signal of length n, including the 1/n scaling.
inline std::vector<double> irfft(std::span<const std::complex<double>> spec, int n) {
    std::vector<std::complex<double>> in(spec.begin(), spec.end());
    std::vector<double> out(static_cast<size_t>(n));
    fftw_plan plan;
    {
        std::lock_guard<std::mutex> lk(detail::planner_mutex());
        plan = fftw_plan_dft_c2r_1d(n, reinterpret_cast<fftw_complex*>(in.data()),
                                    out.data(), FFTW_ESTIMATE);
    }
    fftw_execute(plan);
    {
        std::lock_guard<std::mutex> lk(detail::planner_mutex());
        fftw_destroy_plan(plan);
    }
    for (auto& v : out) v /= n;
    return out;
}

}  // namespace fft

// ---- epoching --------------------------------------------------------------

// Splits a C x T recording into floor(T / (epoch_sec * fs)) non-overlapping
// C x T' segments in temporal order; the trailing remainder is dropped.
inline std::vector<Mat> epoch_split(const Mat& data, double fs, double epoch_sec) {
    int tprime = static_cast<int>(std::llround(epoch_sec * fs));
    if (tprime < 2)
        throw ValidationError("epoch_split: epoch of " + std::to_string(tprime) +
                              " samples is too short");
    int T = data.cols();
    int count = T / tprime;
    if (count == 0) {
        warn("epoch_split: recording of " + std::to_string(T) +
             " samples is shorter than one epoch (" + std::to_string(tprime) + ")");
        return {};
    }
    std::vector<Mat> out;
    out.reserve(static_cast<size_t>(count));
    for (int e = 0; e < count; ++e) {
        Mat seg(data.rows(), tprime);
        for (int c = 0; c < data.rows(); ++c)
            std::memcpy(seg.row(c), data.row(c) + e * tprime,
                        sizeof(double) * static_cast<size_t>(tprime));
        out.push_back(std::move(seg));
    }
    return out;
}

// ---- Welch spectral estimation --------------------------------------------

struct WelchParams {
    int nperseg = 0;       // 0 means min(2 * fs, T')
    double overlap = 0.5;  // fraction in [0, 1)
};

struct PsdResult {
    std::vector<double> freqs;
    std::vector<double> psd;
    double df = 0.0;
};

// Hann-windowed averaged modified periodograms, one-sided density scaling.
// Segments are mean-detrended; sum(psd) * df approximates the variance of a
// zero-mean stationary input.
inline PsdResult welch_psd(std::span<const double> x, double fs, WelchParams wp = {}) {
    int T = static_cast<int>(x.size());
    if (wp.overlap < 0.0 || wp.overlap >= 1.0)
        throw ValidationError("welch_psd: overlap must be in [0, 1)");
    int nperseg = wp.nperseg > 0 ? wp.nperseg
                                 : std::min(static_cast<int>(std::llround(2.0 * fs)), T);
    if (nperseg > T) {
        warn("welch_psd: nperseg " + std::to_string(nperseg) + " clamped to signal length " +
             std::to_string(T));
        nperseg = T;
    }
    if (nperseg < 2) throw ValidationError("welch_psd: need at least 2 samples per segment");

    int step = std::max(1, static_cast<int>(std::llround(nperseg * (1.0 - wp.overlap))));
    int nseg = 1 + (T - nperseg) / step;

    std::vector<double> window(static_cast<size_t>(nperseg));
    double wss = 0.0;  // sum of squared window values
    for (int i = 0; i < nperseg; ++i) {
        window[static_cast<size_t>(i)] =
            0.5 * (1.0 - std::cos(2.0 * M_PI * i / nperseg));
        wss += window[static_cast<size_t>(i)] * window[static_cast<size_t>(i)];
    }

    int nbins = nperseg / 2 + 1;
    PsdResult res;
    res.df = fs / nperseg;
    res.freqs.resize(static_cast<size_t>(nbins));
    for (int k = 0; k < nbins; ++k) res.freqs[static_cast<size_t>(k)] = k * res.df;
    res.psd.assign(static_cast<size_t>(nbins), 0.0);

    std::vector<double> seg(static_cast<size_t>(nperseg));
    for (int s = 0; s < nseg; ++s) {
        const double* src = x.data() + static_cast<size_t>(s) * step;
        double mu = 0.0;
        for (int i = 0; i < nperseg; ++i) mu += src[i];
        mu /= nperseg;
        for (int i = 0; i < nperseg; ++i)
            seg[static_cast<size_t>(i)] = (src[i] - mu) * window[static_cast<size_t>(i)];
        auto spec = fft::rfft(seg);
        for (int k = 0; k < nbins; ++k) {
            double mag2 = std::norm(spec[static_cast<size_t>(k)]);
            double scale = 1.0 / (fs * wss);
            if (k != 0 && !(nperseg % 2 == 0 && k == nbins - 1)) scale *= 2.0;
            res.psd[static_cast<size_t>(k)] += mag2 * scale;
        }
    }
    for (auto& v : res.psd) v /= nseg;
    return res;
}

// Integral of the one-sided density over [lo, hi) by the rectangle rule on
// the half-open bin set.
inline double band_power(const PsdResult& psd, double lo, double hi) {
    double acc = 0.0;
    for (size_t k = 0; k < psd.freqs.size(); ++k)
        if (psd.freqs[k] >= lo && psd.freqs[k] < hi) acc += psd.psd[k];
    return acc * psd.df;
}

// ---- relative band power ---------------------------------------------------

// B x C matrix of per-channel relative band powers over the analysis range.
// Columns sum to one; a channel with zero total power falls back to a
// uniform column with a warning.
inline Mat relative_band_power(const Mat& epoch, double fs, WelchParams wp = {}) {
    if (fs <= 2.0 * kAnalysisHi)
        throw ValidationError("relative_band_power: fs must exceed " +
                              std::to_string(2.0 * kAnalysisHi) + " Hz");
    int C = epoch.rows();
    Mat rbp(kNumBands, C);
    for (int c = 0; c < C; ++c) {
        auto psd = welch_psd(std::span<const double>(epoch.row(c),
                                                     static_cast<size_t>(epoch.cols())),
                             fs, wp);
        std::array<double, kNumBands> powers{};
        double total = 0.0;
        for (int b = 0; b < kNumBands; ++b) {
            powers[static_cast<size_t>(b)] = band_power(psd, kBands[static_cast<size_t>(b)].lo,
                                                        kBands[static_cast<size_t>(b)].hi);
            total += powers[static_cast<size_t>(b)];
        }
        if (total <= 0.0) {
            warn("relative_band_power: channel " + std::to_string(c) +
                 " has zero power in the analysis range; using uniform fallback");
            for (int b = 0; b < kNumBands; ++b) rbp(b, c) = 1.0 / kNumBands;
        } else {
            for (int b = 0; b < kNumBands; ++b) rbp(b, c) = powers[static_cast<size_t>(b)] / total;
        }
    }
    return rbp;
}

// ---- band-pass decomposition ----------------------------------------------

// Frequency-domain mask: zero every bin whose frequency lies outside
// [lo, hi), then invert. Linear and idempotent.
inline std::vector<double> bandpass_filter(std::span<const double> x, double fs,
                                           double lo, double hi) {
    if (lo < 0.0 || hi <= lo || hi > fs / 2.0)
        throw ValidationError("bandpass_filter: band [" + std::to_string(lo) + ", " +
                              std::to_string(hi) + ") outside (0, fs/2)");
    int n = static_cast<int>(x.size());
    auto spec = fft::rfft(x);
    double df = fs / n;
    for (size_t k = 0; k < spec.size(); ++k) {
        double f = static_cast<double>(k) * df;
        if (f < lo || f >= hi) spec[k] = 0.0;
    }
    return fft::irfft(spec, n);
}

inline std::vector<double> analysis_band_filter(std::span<const double> x, double fs) {
    return bandpass_filter(x, fs, kAnalysisLo, kAnalysisHi);
}

}  // namespace vmoge
