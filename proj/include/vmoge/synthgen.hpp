#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "vmoge/common.hpp"
#include "vmoge/io.hpp"
#include "vmoge/signal.hpp"

namespace vmoge {

struct SynthConfig {
    int subjects_per_class = 20;
    double fs = 100.0;
    double duration_sec = 20.0;
    int channels = 19;
    int target_band = 0;                 // index into kBands
    std::vector<int> target_channels;    // zero-based; defaults to the first 6
    double effect_size = 2.5;            // class-1 amplitude multiplier, >= 1
    double noise_amp = 1.0;              // pink-noise RMS
    uint64_t seed = 1;

    void validate() const {
        if (subjects_per_class < 1) throw ValidationError("synth: subjects_per_class must be >= 1");
        if (fs <= 0.0) throw ValidationError("synth: fs must be positive");
        if (duration_sec <= 0.0) throw ValidationError("synth: duration must be positive");
        if (channels < 1) throw ValidationError("synth: channels must be >= 1");
        if (target_band < 0 || target_band >= kNumBands)
            throw ValidationError("synth: target band index must be in [0, " +
                                  std::to_string(kNumBands - 1) + "]");
        if (effect_size < 1.0) throw ValidationError("synth: effect size must be >= 1");
        if (noise_amp < 0.0) throw ValidationError("synth: noise amplitude must be >= 0");
        for (int c : target_channels)
            if (c < 0 || c >= channels)
                throw ValidationError("synth: target channel " + std::to_string(c + 1) +
                                      " outside 1.." + std::to_string(channels));
    }

    std::vector<int> effective_targets() const {
        if (!target_channels.empty()) return target_channels;
        std::vector<int> v;
        for (int c = 0; c < std::min(channels, 6); ++c) v.push_back(c);
        return v;
    }
};

namespace detail_synth {

// 1/f noise by spectral synthesis: complex Gaussian bins scaled by 1/sqrt(f),
// inverse transform, RMS normalized.
inline std::vector<double> pink_noise(Rng& rng, int n, double fs, double amp) {
    int nb = n / 2 + 1;
    std::vector<std::complex<double>> spec(static_cast<size_t>(nb));
    for (int k = 1; k < nb; ++k) {
        double f = fs * k / n;
        double s = 1.0 / std::sqrt(f);
        spec[static_cast<size_t>(k)] = {s * rng.normal(), s * rng.normal()};
    }
    auto x = fft::irfft(spec, n);
    double ms = 0.0;
    for (double v : x) ms += v * v;
    double rms = std::sqrt(ms / n);
    if (rms > 0.0)
        for (double& v : x) v *= amp / rms;
    return x;
}

}  // namespace detail_synth

// One subject's recording: per channel, a random-phase oscillation per band
// (unit amplitude, center frequency inside the band) plus pink noise; class-1
// subjects carry the target band's amplitude times effect_size on the target
// channels. The stream depends only on (seed, subject index), so effect size 1
// makes the classes identical in law.
inline RawRecording generate_subject(const SynthConfig& cfg, int label, int subject_index) {
    cfg.validate();
    Rng rng = Rng(cfg.seed).derive(static_cast<uint64_t>(subject_index));
    int T = static_cast<int>(std::llround(cfg.duration_sec * cfg.fs));
    auto targets = cfg.effective_targets();

    RawRecording rec;
    rec.label = label;
    rec.fs = cfg.fs;
    rec.data = Mat(cfg.channels, T);
    for (int c = 0; c < cfg.channels; ++c) {
        bool on_target = std::find(targets.begin(), targets.end(), c) != targets.end();
        double* row = rec.data.row(c);
        for (int b = 0; b < kNumBands; ++b) {
            const Band& band = kBands[static_cast<size_t>(b)];
            // Tones sit on the integer-Hz grid, half a bin clear of the band
            // edges, so each one is periodic within integer-second epochs and
            // per-epoch spectral masking captures it exactly. An off-grid tone
            // would bleed the class effect into neighboring bands through
            // window sidelobes.
            int flo = static_cast<int>(std::ceil(band.lo + 0.5));
            int fhi = static_cast<int>(std::floor(band.hi - 0.5));
            double f = flo + static_cast<double>(rng.integer(static_cast<uint64_t>(fhi - flo + 1)));
            double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            double amp = (label == 1 && b == cfg.target_band && on_target) ? cfg.effect_size : 1.0;
            double w = 2.0 * 3.14159265358979323846 * f / cfg.fs;
            for (int t = 0; t < T; ++t) row[t] += amp * std::sin(w * t + phase);
        }
        auto noise = detail_synth::pink_noise(rng, T, cfg.fs, cfg.noise_amp);
        for (int t = 0; t < T; ++t) row[t] += noise[static_cast<size_t>(t)];
    }
    return rec;
}

// Balanced dataset: class 0 subjects first, then class 1; ids s000, s001, ...
// Covariates: age uniform in [60, 85] for everyone, cognitive score high for
// class 0 (27-30) and lower for class 1 (18-26), from a separate stream.
inline std::vector<RawRecording> generate_dataset(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<RawRecording> out;
    int n = 2 * cfg.subjects_per_class;
    out.resize(static_cast<size_t>(n));
    parallel_for(n, [&](int idx) {
        size_t i = static_cast<size_t>(idx);
        int label = static_cast<int>(i) < cfg.subjects_per_class ? 0 : 1;
        auto rec = generate_subject(cfg, label, static_cast<int>(i));
        char id[8];
        std::snprintf(id, sizeof(id), "s%03d", static_cast<int>(i));
        rec.subject = id;
        Rng cov = Rng(cfg.seed).derive(0x636f76ULL + i);
        rec.age = cov.uniform(60.0, 85.0);
        rec.score = label == 0 ? cov.uniform(27.0, 30.0) : cov.uniform(18.0, 26.0);
        out[i] = std::move(rec);
    });
    return out;
}

// Writes one CSV per subject plus a manifest listing the members.
inline void write_dataset(const std::string& dir, const SynthConfig& cfg) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    auto recs = generate_dataset(cfg);
    nlohmann::json members = nlohmann::json::array();
    for (const auto& rec : recs) {
        std::string file = rec.subject + ".csv";
        write_raw_csv((fs::path(dir) / file).string(), rec);
        nlohmann::json j{{"file", file}, {"subject", rec.subject}, {"label", rec.label}};
        if (rec.age) j["age"] = *rec.age;
        if (rec.score) j["score"] = *rec.score;
        members.push_back(std::move(j));
    }
    nlohmann::json manifest{{"fs", cfg.fs},
                            {"duration_sec", cfg.duration_sec},
                            {"channels", cfg.channels},
                            {"subjects_per_class", cfg.subjects_per_class},
                            {"target_band", band_name(cfg.target_band)},
                            {"target_channels", cfg.effective_targets()},
                            {"effect_size", cfg.effect_size},
                            {"noise_amp", cfg.noise_amp},
                            {"seed", cfg.seed},
                            {"members", std::move(members)}};
    detail_io::write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

// Reads every member CSV named by a dataset manifest.
inline std::vector<RawRecording> read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    auto manifest_path = (fs::path(dir) / "manifest.json").string();
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(detail_io::read_file(manifest_path));
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(manifest_path + ": bad JSON: " + e.what());
    }
    std::vector<RawRecording> recs;
    for (const auto& m : manifest.at("members"))
        recs.push_back(read_raw_csv((fs::path(dir) / m.at("file").get<std::string>()).string()));
    return recs;
}

}  // namespace vmoge
