#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "support.hpp"
#include "vmoge/moe.hpp"

using namespace vmoge;

namespace {

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Gate fixture whose logits are directly programmable: wphi = 0 and bphi = e1
// make phi the first basis vector, so logits are the first row of wgate.
struct ProgrammableGate {
    ParameterStore ps;
    GatingParams params;
    Var hprime;

    explicit ProgrammableGate(const std::vector<double>& logits) {
        Rng rng(7000);
        params = GatingParams::init(ps, 8, static_cast<int>(logits.size()), rng, "gate.");
        auto& wphi = params.wphi.mutable_values();
        std::fill(wphi.begin(), wphi.end(), 0.0);
        params.bphi.mutable_values()[0] = 1.0;
        auto& wg = params.wgate.mutable_values();
        std::fill(wg.begin(), wg.end(), 0.0);
        for (size_t k = 0; k < logits.size(); ++k) wg[k] = logits[k];
        hprime = constant(Shape::mat(3, 8), std::vector<double>(24, 0.4));
    }

    std::vector<double> pi() const { return gate_weights(hprime, params).values(); }
};

}  // namespace

TEST_CASE("mean pooling oracles", "[moe]") {
    SECTION("equal rows pool to that row") {
        auto z = constant(Shape::mat(3, 2), {0.7, -0.2, 0.7, -0.2, 0.7, -0.2});
        auto pooled = mean_pool(z);
        CHECK(pooled.values()[0] == Catch::Approx(0.7).margin(1e-15));
        CHECK(pooled.values()[1] == Catch::Approx(-0.2).margin(1e-15));
    }
    SECTION("opposite rows cancel") {
        auto z = constant(Shape::mat(2, 3), {1.0, -2.0, 3.0, -1.0, 2.0, -3.0});
        auto pooled = mean_pool(z);
        for (double v : pooled.values()) CHECK(v == 0.0);
    }
    SECTION("hand-computed three-row pool") {
        auto z = constant(Shape::mat(3, 2), {1.0, 0.0, 0.0, 1.0, 2.0, 2.0});
        auto pooled = mean_pool(z);
        CHECK(pooled.values()[0] == Catch::Approx(1.0).margin(1e-15));
        CHECK(pooled.values()[1] == Catch::Approx(1.0).margin(1e-15));
    }
}

TEST_CASE("gate weight oracles", "[moe]") {
    SECTION("identical expert scores split the gate evenly") {
        ProgrammableGate g({0.3, 0.3, 0.3, 0.3});
        for (double p : g.pi()) CHECK(p == 0.25);
    }
    SECTION("a dominant logit takes nearly all the mass") {
        ProgrammableGate g({10.0, 0.0, 0.0, 0.0});
        auto pi = g.pi();
        double e10 = std::exp(10.0);
        CHECK(pi[0] == Catch::Approx(e10 / (e10 + 3.0)).margin(1e-12));
        CHECK(pi[0] > 0.9998);
    }
    SECTION("shifting every logit leaves the gate unchanged") {
        ProgrammableGate a({1.2, -0.4, 0.9, 0.1});
        ProgrammableGate b({1.2 + 37.0, -0.4 + 37.0, 0.9 + 37.0, 0.1 + 37.0});
        auto pa = a.pi();
        auto pb = b.pi();
        for (size_t k = 0; k < 4; ++k) CHECK(pb[k] == Catch::Approx(pa[k]).margin(1e-12));
    }
}

TEST_CASE("gate output is a probability vector", "[moe]") {
    for (int s = 0; s < 50; ++s) {
        Rng rng(7100 + static_cast<unsigned>(s));
        ParameterStore ps;
        auto params = GatingParams::init(ps, 12, kNumExperts, rng, "gate.");
        auto hprime = constant(Shape::mat(5, 12), testsup::random_vec(rng, 60, -3.0, 3.0));
        auto pi = gate_weights(hprime, params);
        double total = 0.0;
        for (double p : pi.values()) {
            CHECK(p >= 0.0);
            total += p;
        }
        CHECK(total == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("expert decoder", "[moe]") {
    SECTION("zero weights and input give a zero logit") {
        ParameterStore ps;
        Rng rng(7200);
        auto p = ExpertParams::init(ps, 3, rng, "e0.");
        std::fill(p.w1.mutable_values().begin(), p.w1.mutable_values().end(), 0.0);
        std::fill(p.w2.mutable_values().begin(), p.w2.mutable_values().end(), 0.0);
        auto logit = expert_logit(constant(Shape::vec(3), {0.0, 0.0, 0.0}), p);
        CHECK(logit.item() == 0.0);
        CHECK(sigmoid(logit).item() == 0.5);
    }
    SECTION("decoder parameters pass the finite-difference check") {
        ParameterStore ps;
        Rng rng(7201);
        auto p = ExpertParams::init(ps, 4, rng, "e0.");
        auto zbar = constant(Shape::vec(4), {0.4, -0.7, 1.1, 0.2});
        auto f = [&]() { return expert_logit(zbar, p); };
        CHECK(grad_check(f, ps, 1e-5) < 1e-4);
    }
}

TEST_CASE("mixture prediction oracles", "[moe]") {
    SECTION("degenerate gate selects one expert in both modes") {
        auto pi = constant(Shape::vec(4), {1.0, 0.0, 0.0, 0.0});
        auto logits = constant(Shape::vec(4), {0.8, -5.0, 3.0, 0.1});
        double expected = sigmoid_ref(0.8);
        CHECK(mixture_probability(pi, logits, MixtureMode::prob).item() ==
              Catch::Approx(expected).margin(1e-15));
        CHECK(mixture_probability(pi, logits, MixtureMode::logit).item() ==
              Catch::Approx(expected).margin(1e-15));
    }
    SECTION("hand-computed probability mixture") {
        auto pi = constant(Shape::vec(4), {0.7, 0.1, 0.1, 0.1});
        // logits chosen so the expert probabilities are exactly 0.9, 0.5, 0.5, 0.5
        auto logits = constant(Shape::vec(4), {std::log(9.0), 0.0, 0.0, 0.0});
        CHECK(mixture_probability(pi, logits, MixtureMode::prob).item() ==
              Catch::Approx(0.78).margin(1e-12));
    }
    SECTION("equal logits make the modes agree") {
        auto pi = constant(Shape::vec(4), {0.4, 0.3, 0.2, 0.1});
        auto logits = constant(Shape::vec(4), {1.3, 1.3, 1.3, 1.3});
        double expected = sigmoid_ref(1.3);
        CHECK(mixture_probability(pi, logits, MixtureMode::prob).item() ==
              Catch::Approx(expected).margin(1e-12));
        CHECK(mixture_probability(pi, logits, MixtureMode::logit).item() ==
              Catch::Approx(expected).margin(1e-12));
    }
}

TEST_CASE("mixture probability bounds", "[moe]") {
    for (int s = 0; s < 100; ++s) {
        Rng rng(7300 + static_cast<unsigned>(s));
        auto raw = testsup::random_vec(rng, 4, 0.05, 1.0);
        double tot = raw[0] + raw[1] + raw[2] + raw[3];
        for (double& v : raw) v /= tot;
        auto lv = testsup::random_vec(rng, 4, -6.0, 6.0);
        auto pi = constant(Shape::vec(4), raw);
        auto logits = constant(Shape::vec(4), lv);
        double lo = 1.0, hi = 0.0;
        for (double l : lv) {
            lo = std::min(lo, sigmoid_ref(l));
            hi = std::max(hi, sigmoid_ref(l));
        }
        for (auto mode : {MixtureMode::prob, MixtureMode::logit}) {
            double p = mixture_probability(pi, logits, mode).item();
            CHECK(p > 0.0);
            CHECK(p < 1.0);
            if (mode == MixtureMode::prob) {
                CHECK(p >= lo - 1e-12);
                CHECK(p <= hi + 1e-12);
            }
        }
    }
}

TEST_CASE("swapping experts swaps their gate weights", "[moe]") {
    Rng rng(7400);
    ParameterStore ps;
    auto params = GatingParams::init(ps, 8, kNumExperts, rng, "gate.");
    auto hprime = constant(Shape::mat(4, 8), testsup::random_vec(rng, 32, -2.0, 2.0));
    auto pi = gate_weights(hprime, params).values();

    // swap the score vectors of experts 1 and 3 (columns of wgate)
    auto& wg = params.wgate.mutable_values();
    for (int r = 0; r < kGateHidden; ++r)
        std::swap(wg[static_cast<size_t>(r * kNumExperts + 1)],
                  wg[static_cast<size_t>(r * kNumExperts + 3)]);
    auto pis = gate_weights(hprime, params).values();

    CHECK(pis[1] == pi[3]);
    CHECK(pis[3] == pi[1]);
    CHECK(pis[0] == pi[0]);
    CHECK(pis[2] == pi[2]);
}

TEST_CASE("gate and experts pass the finite-difference check", "[moe]") {
    Rng rng(7500);
    ParameterStore ps;
    const int d_z = 3, feat = 8;
    auto gate = GatingParams::init(ps, feat, kNumExperts, rng, "gate.");
    std::vector<ExpertParams> experts;
    for (int k = 0; k < kNumExperts; ++k)
        experts.push_back(ExpertParams::init(ps, d_z, rng, "e" + std::to_string(k) + "."));
    auto hprime = constant(Shape::mat(4, feat), testsup::random_vec(rng, 32, -1.0, 1.0));
    std::vector<Var> zbars;
    for (int k = 0; k < kNumExperts; ++k)
        zbars.push_back(constant(Shape::vec(d_z), testsup::random_vec(rng, d_z, -1.0, 1.0)));

    for (auto mode : {MixtureMode::prob, MixtureMode::logit}) {
        auto f = [&]() {
            auto pi = gate_weights(hprime, gate);
            std::vector<Var> ls;
            for (int k = 0; k < kNumExperts; ++k)
                ls.push_back(expert_logit(zbars[static_cast<size_t>(k)],
                                          experts[static_cast<size_t>(k)]));
            return mixture_probability(pi, concat_scalars(ls), mode);
        };
        CHECK(grad_check(f, ps, 1e-5) < 1e-4);
    }
}
