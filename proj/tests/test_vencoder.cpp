#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <cmath>
#include <numeric>
#include <vector>

#include "support.hpp"
#include "vmoge/vencoder.hpp"

using namespace vmoge;

namespace {

Mat random_adjacency(Rng& rng, int C, double fill = 0.5) {
    Mat A(C, C);
    for (int i = 0; i < C; ++i)
        for (int j = i + 1; j < C; ++j) {
            double w = rng.uniform() < fill ? rng.uniform(0.1, 1.0) : 0.0;
            A(i, j) = w;
            A(j, i) = w;
        }
    return A;
}

Mat random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
    Mat m(r, c);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
    return m;
}

Eigen::MatrixXd to_eigen(const Mat& m) {
    Eigen::MatrixXd e(m.rows(), m.cols());
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j) e(i, j) = m(i, j);
    return e;
}

}  // namespace

TEST_CASE("adjacency normalization oracles", "[vencoder]") {
    SECTION("single unit edge is its own normalization") {
        Mat A(2, 2);
        A(0, 1) = 1.0;
        A(1, 0) = 1.0;
        Mat ahat = normalize_adjacency(A);
        CHECK(ahat(0, 0) == 0.0);
        CHECK(ahat(0, 1) == Catch::Approx(1.0).margin(1e-15));
        CHECK(ahat(1, 0) == Catch::Approx(1.0).margin(1e-15));
        CHECK(ahat(1, 1) == 0.0);
    }
    SECTION("uniform edge weight cancels") {
        Mat A(2, 2);
        A(0, 1) = 0.37;
        A(1, 0) = 0.37;
        Mat ahat = normalize_adjacency(A);
        CHECK(ahat(0, 1) == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("empty graph stays empty") {
        Mat A(3, 3);
        Mat ahat = normalize_adjacency(A);
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) CHECK(ahat(i, j) == 0.0);
    }
    SECTION("self-loop augmentation changes unit-edge value to 1/2") {
        Mat A(2, 2);
        A(0, 1) = 1.0;
        A(1, 0) = 1.0;
        Mat ahat = normalize_adjacency(A, true);
        // degrees become 2; off-diagonal 1/2, diagonal 1/2
        CHECK(ahat(0, 1) == Catch::Approx(0.5).margin(1e-15));
        CHECK(ahat(0, 0) == Catch::Approx(0.5).margin(1e-15));
    }
}

TEST_CASE("normalized adjacency has spectrum inside the unit ball", "[vencoder]") {
    for (int seed = 0; seed < 20; ++seed) {
        Rng rng(900 + static_cast<unsigned>(seed));
        int C = 2 + static_cast<int>(rng.integer(18));
        Mat ahat = normalize_adjacency(random_adjacency(rng, C));
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(ahat));
        REQUIRE(es.info() == Eigen::Success);
        for (int i = 0; i < C; ++i) {
            CHECK(es.eigenvalues()(i) >= -1.0 - 1e-12);
            CHECK(es.eigenvalues()(i) <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("gcn degenerate propagation", "[vencoder]") {
    const int C = 4, d_h = 3, d_g = 5;
    Rng rng(4001);
    ParameterStore ps;
    auto gcn = GcnParams::init(ps, d_h, d_g, rng, "gcn.");
    // visible biases
    for (int j = 0; j < d_g; ++j) gcn.b2.mutable_values()[static_cast<size_t>(j)] = 0.1 * (j + 1);
    auto h = constant_mat(random_mat(rng, C, d_h));

    SECTION("zero graph collapses every row to the output bias") {
        Mat zero(C, C);
        auto out = gcn_forward(h, zero, gcn);
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d_g; ++j)
                CHECK(out.values()[static_cast<size_t>(i * d_g + j)] ==
                      Catch::Approx(0.1 * (j + 1)).margin(0.0));
    }

    SECTION("identity graph acts as a per-node perceptron") {
        auto out = gcn_forward(h, Mat::identity(C), gcn);
        const auto& hv = h.values();
        for (int i = 0; i < C; ++i) {
            // hand-rolled two-layer forward for row i
            std::vector<double> hid(static_cast<size_t>(d_g));
            for (int j = 0; j < d_g; ++j) {
                double acc = gcn.b1.values()[static_cast<size_t>(j)];
                for (int t = 0; t < d_h; ++t)
                    acc += hv[static_cast<size_t>(i * d_h + t)] *
                           gcn.w1.values()[static_cast<size_t>(t * d_g + j)];
                hid[static_cast<size_t>(j)] = acc > 0.0 ? acc : 0.01 * acc;
            }
            for (int j = 0; j < d_g; ++j) {
                double acc = gcn.b2.values()[static_cast<size_t>(j)];
                for (int t = 0; t < d_g; ++t)
                    acc += hid[static_cast<size_t>(t)] *
                           gcn.w2.values()[static_cast<size_t>(t * d_g + j)];
                CHECK(out.values()[static_cast<size_t>(i * d_g + j)] ==
                      Catch::Approx(acc).margin(1e-14));
            }
        }
    }
}

TEST_CASE("encoder is permutation equivariant", "[vencoder]") {
    const int C = 7, d_h = 4, d_g = 5, d_z = 3;
    Rng rng(4100);
    ParameterStore ps;
    auto gcn = GcnParams::init(ps, d_h, d_g, rng, "gcn.");
    auto heads = PosteriorHeads::init(ps, d_g, d_z, rng, "post.");
    Mat H = random_mat(rng, C, d_h);
    Mat A = random_adjacency(rng, C, 0.6);

    std::vector<int> perm(C);
    std::iota(perm.begin(), perm.end(), 0);
    Rng shuf(4101);
    shuf.shuffle(perm);

    Mat Hp(C, d_h);
    Mat Ap(C, C);
    for (int i = 0; i < C; ++i) {
        for (int j = 0; j < d_h; ++j) Hp(i, j) = H(perm[static_cast<size_t>(i)], j);
        for (int j = 0; j < C; ++j)
            Ap(i, j) = A(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
    }

    auto post = posterior_params(gcn_forward(constant_mat(H), normalize_adjacency(A), gcn), heads);
    auto postp =
        posterior_params(gcn_forward(constant_mat(Hp), normalize_adjacency(Ap), gcn), heads);

    for (int i = 0; i < C; ++i)
        for (int j = 0; j < d_z; ++j) {
            size_t at = static_cast<size_t>(i * d_z + j);
            size_t from = static_cast<size_t>(perm[static_cast<size_t>(i)] * d_z + j);
            CHECK(postp.mu.values()[at] == Catch::Approx(post.mu.values()[from]).margin(1e-12));
            CHECK(postp.logsigma.values()[at] ==
                  Catch::Approx(post.logsigma.values()[from]).margin(1e-12));
        }
}

TEST_CASE("identical disconnected components produce identical rows", "[vencoder]") {
    const int half = 3, d_h = 3, d_g = 4;
    Rng rng(4200);
    ParameterStore ps;
    auto gcn = GcnParams::init(ps, d_h, d_g, rng, "gcn.");
    Mat comp = random_adjacency(rng, half, 0.9);
    Mat rows = random_mat(rng, half, d_h);

    int C = 2 * half;
    Mat A(C, C);
    Mat H(C, d_h);
    for (int i = 0; i < half; ++i) {
        for (int j = 0; j < half; ++j) {
            A(i, j) = comp(i, j);
            A(half + i, half + j) = comp(i, j);
        }
        for (int j = 0; j < d_h; ++j) {
            H(i, j) = rows(i, j);
            H(half + i, j) = rows(i, j);
        }
    }
    auto out = gcn_forward(constant_mat(H), normalize_adjacency(A), gcn);
    for (int i = 0; i < half; ++i)
        for (int j = 0; j < d_g; ++j)
            CHECK(out.values()[static_cast<size_t>(i * d_g + j)] ==
                  Catch::Approx(out.values()[static_cast<size_t>((half + i) * d_g + j)])
                      .margin(1e-12));
}

TEST_CASE("posterior heads", "[vencoder]") {
    const int C = 3, d_g = 4, d_z = 2;
    Rng rng(4300);
    ParameterStore ps;
    auto heads = PosteriorHeads::init(ps, d_g, d_z, rng, "post.");

    SECTION("zero features with zero biases give a standard posterior") {
        auto post = posterior_params(constant(Shape::mat(C, d_g), std::vector<double>(C * d_g, 0.0)),
                                     heads);
        for (double v : post.mu.values()) CHECK(v == 0.0);
        for (double v : post.logsigma.values()) CHECK(v == 0.0);
        Mat eps(C, d_z);
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d_z; ++j) eps(i, j) = 0.25 * (i + 1) * (j + 1);
        auto z = reparameterize(post, eps);
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d_z; ++j)
                CHECK(z.values()[static_cast<size_t>(i * d_z + j)] == eps(i, j));
    }

    SECTION("mean head is linear in the features") {
        Mat f = random_mat(rng, C, d_g);
        Mat f2 = f;
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d_g; ++j) f2(i, j) *= 2.0;
        auto a = posterior_params(constant_mat(f), heads);
        auto b = posterior_params(constant_mat(f2), heads);
        for (size_t i = 0; i < a.mu.values().size(); ++i)
            CHECK(b.mu.values()[i] == Catch::Approx(2.0 * a.mu.values()[i]).margin(1e-12));
    }

    SECTION("log-sigma saturates at the clamp bounds") {
        // drive the pre-clamp value through the bias
        heads.bls.mutable_values()[0] = 10.0;
        heads.bls.mutable_values()[1] = -20.0;
        auto post = posterior_params(
            constant(Shape::mat(C, d_g), std::vector<double>(C * d_g, 0.0)), heads);
        for (int i = 0; i < C; ++i) {
            CHECK(post.logsigma.values()[static_cast<size_t>(i * d_z)] == 4.0);
            CHECK(post.logsigma.values()[static_cast<size_t>(i * d_z + 1)] == -8.0);
        }
    }

    SECTION("sigma stays inside the clamp range for wild inputs") {
        for (int s = 0; s < 20; ++s) {
            Rng wild(4400 + static_cast<unsigned>(s));
            auto post =
                posterior_params(constant_mat(random_mat(wild, C, d_g, -100.0, 100.0)), heads);
            for (double ls : post.logsigma.values()) {
                CHECK(ls >= -8.0);
                CHECK(ls <= 4.0);
            }
        }
    }
}

TEST_CASE("reparameterization", "[vencoder]") {
    const int C = 2, d_z = 3;

    SECTION("zero noise returns the mean") {
        LatentPosterior post;
        Rng rng(4500);
        Mat mu = random_mat(rng, C, d_z);
        post.mu = constant_mat(mu);
        post.logsigma = constant_mat(random_mat(rng, C, d_z, -0.5, 0.5));
        auto z = reparameterize(post, Mat(C, d_z));
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d_z; ++j)
                CHECK(z.values()[static_cast<size_t>(i * d_z + j)] == mu(i, j));
    }

    SECTION("unit sigma passes the draw through") {
        LatentPosterior post;
        post.mu = constant(Shape::mat(1, 1), {0.0});
        post.logsigma = constant(Shape::mat(1, 1), {0.0});
        Mat eps(1, 1);
        eps(0, 0) = 0.5;
        CHECK(reparameterize(post, eps).values()[0] == 0.5);
    }

    SECTION("noise shape must match") {
        LatentPosterior post;
        post.mu = constant(Shape::mat(2, 3), std::vector<double>(6, 0.0));
        post.logsigma = constant(Shape::mat(2, 3), std::vector<double>(6, 0.0));
        CHECK_THROWS_AS(reparameterize(post, Mat(3, 2)), std::invalid_argument);
    }

    SECTION("gradients route to mean and log-sigma with exact closed forms") {
        ParameterStore ps;
        auto mu = ps.add("mu", Shape::mat(C, d_z), std::vector<double>(C * d_z, 0.3));
        auto ls = ps.add("ls", Shape::mat(C, d_z), std::vector<double>(C * d_z, -0.2));
        Rng rng(4600);
        Mat eps = standard_normal(rng, C, d_z);
        auto z = reparameterize(LatentPosterior{mu, ls}, eps);
        auto f = sum(z);
        backward(f);
        double sig = std::exp(-0.2);
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d_z; ++j) {
                size_t at = static_cast<size_t>(i * d_z + j);
                CHECK(mu.grads()[at] == 1.0);
                CHECK(ls.grads()[at] == Catch::Approx(sig * eps(i, j)).margin(1e-15));
            }
    }
}

TEST_CASE("sample mean and variance converge to the posterior moments", "[vencoder]") {
    const int C = 2, d_z = 3;
    Rng prng(4700);
    Mat mu = random_mat(prng, C, d_z, -1.0, 1.0);
    Mat ls = random_mat(prng, C, d_z, -0.7, 0.4);
    LatentPosterior post{constant_mat(mu), constant_mat(ls)};

    const int n = 100000;
    Mat acc(C, d_z), acc2(C, d_z);
    Rng noise(4701);
    for (int t = 0; t < n; ++t) {
        auto z = reparameterize(post, standard_normal(noise, C, d_z));
        const auto& zv = z.values();
        for (int i = 0; i < C; ++i)
            for (int j = 0; j < d_z; ++j) {
                double v = zv[static_cast<size_t>(i * d_z + j)];
                acc(i, j) += v;
                acc2(i, j) += v * v;
            }
    }
    for (int i = 0; i < C; ++i)
        for (int j = 0; j < d_z; ++j) {
            double sig = std::exp(ls(i, j));
            double m = acc(i, j) / n;
            double var = acc2(i, j) / n - m * m;
            CHECK(std::abs(m - mu(i, j)) <= 3.0 * sig / std::sqrt(static_cast<double>(n)));
            CHECK(var == Catch::Approx(sig * sig).epsilon(0.05));
        }
}

TEST_CASE("encoder chain passes the finite-difference check", "[vencoder]") {
    const int C = 3, d_h = 3, d_g = 4, d_z = 2;
    Rng rng(4800);
    ParameterStore ps;
    auto h = ps.add("h", Shape::mat(C, d_h), testsup::random_vec(rng, C * d_h, -1.0, 1.0));
    auto gcn = GcnParams::init(ps, d_h, d_g, rng, "gcn.");
    auto heads = PosteriorHeads::init(ps, d_g, d_z, rng, "post.");
    Mat A = random_adjacency(rng, C, 0.8);
    Mat ahat = normalize_adjacency(A);
    Rng noise(4801);
    Mat eps = standard_normal(noise, C, d_z);
    Rng wrng(4802);
    auto weights = testsup::random_vec(wrng, C * d_z, 0.5, 1.5);

    auto f = [&]() {
        auto post = posterior_params(gcn_forward(h, ahat, gcn), heads);
        auto z = reparameterize(post, eps);
        return sum(mul(z, constant(Shape::mat(C, d_z), weights)));
    };
    double worst = grad_check(f, ps, 1e-5);
    CHECK(worst < 1e-4);
}
