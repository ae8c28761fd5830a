#pragma once

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vmoge/common.hpp"
#include "vmoge/graphprior.hpp"
#include "vmoge/klcheck.hpp"
#include "vmoge/tensor.hpp"

namespace testsup {

// Scratch directory removed on scope exit.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("vmoge_test_" + tag + "_" + std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline std::vector<double> random_vec(vmoge::Rng& rng, size_t n, double lo = -1.0,
                                      double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Random values kept away from the given kink points so central differences
// stay valid for piecewise primitives.
inline std::vector<double> random_vec_away_from(vmoge::Rng& rng, size_t n,
                                                const std::vector<double>& kinks,
                                                double margin = 0.02) {
    std::vector<double> v(n);
    for (auto& x : v) {
        for (;;) {
            double cand = rng.uniform(-1.0, 1.0);
            bool ok = true;
            for (double k : kinks)
                if (std::fabs(cand - k) < margin) ok = false;
            if (ok) {
                x = cand;
                break;
            }
        }
    }
    return v;
}

// Scalarizes an arbitrary-shape output with fixed positive weights so every
// output entry influences the root.
inline vmoge::Var weighted_sum(const vmoge::Var& v, vmoge::Rng& rng) {
    auto w = vmoge::constant(v.shape(), random_vec(rng, v.numel(), 0.5, 1.5));
    return vmoge::sum(vmoge::mul(v, w));
}

// KL self-check fixtures live in the library so the CLI shares them.
using vmoge::KlInstance;
using vmoge::mc_kl_estimate;
using vmoge::random_kl_instance;

}  // namespace testsup
