#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support.hpp"
#include "vmoge/synthgen.hpp"

using namespace vmoge;
using Catch::Matchers::ContainsSubstring;

namespace {

bool rows_equal(const Mat& a, const Mat& b, int row) {
    for (int t = 0; t < a.cols(); ++t)
        if (a(row, t) != b(row, t)) return false;
    return true;
}

double pairwise_auc(const std::vector<double>& s0, const std::vector<double>& s1) {
    double wins = 0.0;
    for (double a : s1)
        for (double b : s0) wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
    return wins / (static_cast<double>(s0.size()) * static_cast<double>(s1.size()));
}

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.subjects_per_class = 4;
    cfg.fs = 100.0;
    cfg.duration_sec = 4.0;
    cfg.channels = 5;
    cfg.target_channels = {0, 1};
    cfg.effect_size = 2.0;
    cfg.seed = 9;
    return cfg;
}

}  // namespace

TEST_CASE("generator is deterministic per (seed, subject)") {
    auto cfg = small_config();
    auto a = generate_subject(cfg, 1, 3);
    auto b = generate_subject(cfg, 1, 3);
    REQUIRE(a.data.rows() == 5);
    REQUIRE(a.data.cols() == 400);
    for (int c = 0; c < 5; ++c) CHECK(rows_equal(a.data, b.data, c));

    cfg.seed = 10;
    auto other = generate_subject(cfg, 1, 3);
    bool differs = false;
    for (int c = 0; c < 5; ++c)
        if (!rows_equal(a.data, other.data, c)) differs = true;
    CHECK(differs);
}

TEST_CASE("effect size 1 makes the class label irrelevant to the signal") {
    auto cfg = small_config();
    cfg.effect_size = 1.0;
    auto healthy = generate_subject(cfg, 0, 6);
    auto patient = generate_subject(cfg, 1, 6);
    for (int c = 0; c < cfg.channels; ++c) CHECK(rows_equal(healthy.data, patient.data, c));
}

TEST_CASE("the effect lives only in the target band on target channels") {
    SynthConfig cfg;
    cfg.subjects_per_class = 1;
    cfg.fs = 100.0;
    cfg.duration_sec = 20.0;
    cfg.channels = 6;
    cfg.target_channels = {1, 4};
    cfg.effect_size = 2.5;
    cfg.seed = 21;

    for (int band = 0; band < kNumBands; ++band) {
        cfg.target_band = band;
        for (int subject = 0; subject < 3; ++subject) {
            auto x0 = generate_subject(cfg, 0, subject);
            auto x1 = generate_subject(cfg, 1, subject);
            // off-target channels identical bit for bit
            for (int c : {0, 2, 3, 5}) CHECK(rows_equal(x0.data, x1.data, c));
            // on-target difference is a pure sinusoid inside the target band
            Mat diff(2, x0.data.cols());
            int at = 0;
            for (int c : {1, 4}) {
                for (int t = 0; t < x0.data.cols(); ++t)
                    diff(at, t) = x1.data(c, t) - x0.data(c, t);
                ++at;
            }
            auto rbp = relative_band_power(diff, cfg.fs);
            for (int c = 0; c < 2; ++c) {
                CHECK(rbp(band, c) > 0.85);
                for (int other = 0; other < kNumBands; ++other)
                    if (other != band) CHECK(rbp(other, c) < 0.15);
            }
        }
    }
}

TEST_CASE("band power separates the classes only on target channels") {
    SynthConfig cfg;
    cfg.subjects_per_class = 12;
    cfg.fs = 100.0;
    cfg.duration_sec = 10.0;
    cfg.channels = 8;
    cfg.target_band = 2;  // alpha
    cfg.target_channels = {0, 1, 2};
    cfg.effect_size = 2.5;
    cfg.seed = 33;

    auto recs = generate_dataset(cfg);
    REQUIRE(recs.size() == 24);
    std::vector<double> target0, target1, off0, off1;
    for (const auto& rec : recs) {
        auto rbp = relative_band_power(rec.data, cfg.fs);
        double on = (rbp(2, 0) + rbp(2, 1) + rbp(2, 2)) / 3.0;
        double off = (rbp(2, 3) + rbp(2, 4) + rbp(2, 5) + rbp(2, 6) + rbp(2, 7)) / 5.0;
        (rec.label ? target1 : target0).push_back(on);
        (rec.label ? off1 : off0).push_back(off);
    }
    CHECK(pairwise_auc(target0, target1) > 0.9);
    double null_auc = pairwise_auc(off0, off1);
    CHECK(null_auc > 0.2);
    CHECK(null_auc < 0.8);
}

TEST_CASE("dataset layout ids labels and covariates") {
    auto cfg = small_config();
    auto recs = generate_dataset(cfg);
    REQUIRE(recs.size() == 8);
    for (size_t i = 0; i < recs.size(); ++i) {
        char expect[8];
        std::snprintf(expect, sizeof(expect), "s%03d", static_cast<int>(i));
        CHECK(recs[i].subject == expect);
        CHECK(recs[i].label == (i < 4 ? 0 : 1));
        REQUIRE(recs[i].age.has_value());
        REQUIRE(recs[i].score.has_value());
        CHECK(*recs[i].age >= 60.0);
        CHECK(*recs[i].age <= 85.0);
        if (recs[i].label == 0) {
            CHECK(*recs[i].score >= 27.0);
            CHECK(*recs[i].score <= 30.0);
        } else {
            CHECK(*recs[i].score >= 18.0);
            CHECK(*recs[i].score <= 26.0);
        }
    }

    // covariates come from their own stream: the effect knob does not move them
    auto harder = small_config();
    harder.effect_size = 3.5;
    auto recs2 = generate_dataset(harder);
    for (size_t i = 0; i < recs.size(); ++i) {
        CHECK(*recs[i].age == *recs2[i].age);
        CHECK(*recs[i].score == *recs2[i].score);
    }
}

TEST_CASE("dataset write and read round-trip") {
    testsup::TempDir dir("synth");
    auto cfg = small_config();
    write_dataset(dir.file("data"), cfg);
    auto direct = generate_dataset(cfg);
    auto loaded = read_dataset(dir.file("data"));
    REQUIRE(loaded.size() == direct.size());
    for (size_t i = 0; i < direct.size(); ++i) {
        CHECK(loaded[i].subject == direct[i].subject);
        CHECK(loaded[i].label == direct[i].label);
        CHECK(loaded[i].fs == direct[i].fs);
        CHECK(*loaded[i].age == *direct[i].age);
        CHECK(*loaded[i].score == *direct[i].score);
        for (int c = 0; c < direct[i].data.rows(); ++c)
            CHECK(rows_equal(loaded[i].data, direct[i].data, c));
    }
}

TEST_CASE("synth config validation") {
    auto cfg = small_config();
    cfg.target_band = 4;
    CHECK_THROWS_WITH(cfg.validate(), ContainsSubstring("band"));
    cfg = small_config();
    cfg.effect_size = 0.5;
    CHECK_THROWS_WITH(cfg.validate(), ContainsSubstring("effect"));
    cfg = small_config();
    cfg.target_channels = {7};
    CHECK_THROWS_WITH(cfg.validate(), ContainsSubstring("channel"));
    cfg = small_config();
    cfg.subjects_per_class = 0;
    CHECK_THROWS_WITH(cfg.validate(), ContainsSubstring("subjects_per_class"));
}
