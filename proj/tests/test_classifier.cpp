#include <doctest.h>

#include <cmath>

#include "fewtune/classifier.hpp"
#include "fewtune/errors.hpp"
#include "fewtune/rng.hpp"
#include "test_support.hpp"

using namespace fewtune;

TEST_SUITE_BEGIN("classifier");

namespace {

Prototypes random_protos(std::size_t c, std::size_t d, Rng& rng) {
    Prototypes p;
    p.rows = Matrix(c, d);
    for (std::size_t i = 0; i < c; ++i)
        for (std::size_t k = 0; k < d; ++k) p.rows(i, k) = rng.uniform(-2.0, 2.0);
    return p;
}

Vec random_vec(std::size_t d, Rng& rng, double lo = -2.0, double hi = 2.0) {
    Vec v(d);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

} // namespace

TEST_CASE("prototypes: mean of two points") {
    Matrix f = Matrix::from_rows({{1.0, 0.0}, {0.0, 1.0}});
    Prototypes p = compute_prototypes(f, {0, 0}, 1);
    CHECK(p.rows(0, 0) == 0.5);
    CHECK(p.rows(0, 1) == 0.5);
}

TEST_CASE("prototypes: one shot equals the feature") {
    Matrix f = Matrix::from_rows({{0.3, -1.2}, {2.0, 0.5}});
    Prototypes p = compute_prototypes(f, {0, 1}, 2);
    CHECK(p.rows.row_copy(0) == Vec{0.3, -1.2});
    CHECK(p.rows.row_copy(1) == Vec{2.0, 0.5});
}

TEST_CASE("prototypes: match a brute-force accumulate-and-divide oracle") {
    Rng rng(30);
    std::size_t c = 5, per = 7, d = 6;
    Matrix f(c * per, d);
    std::vector<int> labels;
    for (std::size_t i = 0; i < c * per; ++i) {
        labels.push_back(static_cast<int>(i % c));
        for (std::size_t k = 0; k < d; ++k) f(i, k) = rng.uniform(-3.0, 3.0);
    }
    Prototypes p = compute_prototypes(f, labels, static_cast<int>(c));
    for (std::size_t cls = 0; cls < c; ++cls)
        for (std::size_t k = 0; k < d; ++k) {
            double acc = 0.0;
            int n = 0;
            for (std::size_t i = 0; i < c * per; ++i)
                if (labels[i] == static_cast<int>(cls)) {
                    acc += f(i, k);
                    ++n;
                }
            CHECK(std::fabs(p.rows(cls, k) - acc / n) < 1e-12);
        }
}

TEST_CASE("prototypes: empty class names the class") {
    Matrix f = Matrix::from_rows({{1.0, 0.0}});
    try {
        compute_prototypes(f, {0}, 2);
        FAIL("expected data_error");
    } catch (const data_error& e) {
        CHECK(std::string(e.what()).find("class 1") != std::string::npos);
    }
}

TEST_CASE("logits: aligned, orthogonal, hand-computed cosine") {
    ClassifierHead head{10.0, HeadMode::kCosine};
    Prototypes p;
    p.rows = Matrix::from_rows({{2.0, 0.0}, {0.0, 5.0}});
    Matrix f = Matrix::from_rows({{7.0, 0.0}});
    Matrix lg = logits(f, p, head);
    CHECK(lg(0, 0) == doctest::Approx(10.0).epsilon(1e-12)); // parallel
    CHECK(lg(0, 1) == doctest::Approx(0.0));                 // orthogonal

    p.rows = Matrix::from_rows({{4.0, 3.0}});
    f = Matrix::from_rows({{3.0, 4.0}});
    lg = logits(f, p, head);
    CHECK(lg(0, 0) == doctest::Approx(9.6).epsilon(1e-12)); // 10 * 24/25
}

TEST_CASE("logits: invariant to positive rescaling of features and prototypes") {
    Rng rng(31);
    ClassifierHead head{10.0, HeadMode::kCosine};
    Prototypes p = random_protos(3, 4, rng);
    Matrix f(1, 4);
    for (std::size_t k = 0; k < 4; ++k) f(0, k) = rng.uniform(-2.0, 2.0);
    Matrix base = logits(f, p, head);

    Matrix f_scaled = f;
    for (std::size_t k = 0; k < 4; ++k) f_scaled(0, k) *= 7.3;
    Prototypes p_scaled = p;
    for (std::size_t k = 0; k < 4; ++k) p_scaled.rows(1, k) *= 7.3;
    Matrix scaled = logits(f_scaled, p_scaled, head);
    for (std::size_t c = 0; c < 3; ++c)
        CHECK(base(0, c) == doctest::Approx(scaled(0, c)).epsilon(1e-12));
}

TEST_CASE("logits: zero-norm vectors are rejected") {
    ClassifierHead head;
    Prototypes p;
    p.rows = Matrix::from_rows({{1.0, 0.0}});
    CHECK_THROWS_AS(logits(Matrix(1, 2, 0.0), p, head), contract_error);
    Prototypes zp;
    zp.rows = Matrix(1, 2, 0.0);
    CHECK_THROWS_AS(logits(Matrix::from_rows({{1.0, 1.0}}), zp, head), contract_error);
}

TEST_CASE("probabilities: uniform, scalar evaluation, shift invariance") {
    Vec equal{2.0, 2.0, 2.0, 2.0};
    Vec p = probabilities(equal);
    for (double v : p) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

    Vec two{10.0, 0.0};
    Vec q = probabilities(two);
    CHECK(q[0] == doctest::Approx(0.9999546021312976).epsilon(1e-12));
    CHECK(q[1] == doctest::Approx(4.5397868702434395e-05).epsilon(1e-9));
    CHECK(q[0] + q[1] == doctest::Approx(1.0).epsilon(1e-15));

    // Max subtraction makes a constant shift produce bit-identical values.
    Vec shifted{10.0 + 123.5, 0.0 + 123.5};
    CHECK(probabilities(shifted) == q);
}

TEST_CASE("probabilities: rows sum to one, entries in (0,1)") {
    Rng rng(32);
    for (int trial = 0; trial < 100; ++trial) {
        Vec lg = random_vec(5, rng, -15.0, 15.0);
        Vec p = probabilities(lg);
        double sum = 0.0;
        for (double v : p) {
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            sum += v;
        }
        CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("predict: prototype match and tie rule") {
    ClassifierHead head{10.0, HeadMode::kCosine};
    Prototypes p;
    p.rows = Matrix::from_rows({{1.0, 0.0, 0.0}, {0.0, 1.0, 0.0}, {0.0, 0.0, 2.0}});
    Matrix f = Matrix::from_rows({{0.0, 0.0, 5.0}});
    CHECK(predict(f, p, head) == std::vector<int>{2});

    // Exact two-way tie resolves to the lower class index.
    Matrix tie = Matrix::from_rows({{1.0, 1.0, 0.0}});
    CHECK(predict(tie, p, head)[0] == 0);
}

TEST_CASE("cross entropy: perfect, uniform, clamped") {
    Matrix perfect = Matrix::from_rows({{1.0, 0.0}});
    CrossEntropy ce = cross_entropy(perfect, {0});
    CHECK(ce.loss == 0.0);

    Matrix uniform(1, 5, 0.2);
    ce = cross_entropy(uniform, {3});
    CHECK(ce.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));

    Matrix zero = Matrix::from_rows({{0.0, 1.0}});
    ce = cross_entropy(zero, {0});
    CHECK(ce.clamp_count == 1);
    CHECK(std::isfinite(ce.loss));
}

TEST_CASE("cross entropy: logit gradient matches finite differences") {
    Rng rng(33);
    for (int trial = 0; trial < 20; ++trial) {
        std::size_t n = 4, c = 3;
        Matrix lg(n, c);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng.uniform_index(c));
            for (std::size_t k = 0; k < c; ++k) lg(i, k) = rng.uniform(-2.0, 2.0);
        }
        CrossEntropy ce = cross_entropy(probabilities(lg), y);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < c; ++k) {
                double saved = lg(i, k);
                lg(i, k) = saved + 1e-5;
                double up = cross_entropy(probabilities(lg), y).loss;
                lg(i, k) = saved - 1e-5;
                double down = cross_entropy(probabilities(lg), y).loss;
                lg(i, k) = saved;
                double fd = (up - down) / 2e-5;
                CHECK(testing::close_rel(fd, ce.logit_grad(i, k), 1e-5, 1e-9));
            }
    }
}

TEST_CASE("feature gradient: diagnostic mode with p(y)=1 vanishes") {
    // Huge separation drives p(y|x) to exactly 1.0 in double precision.
    Prototypes p;
    p.rows = Matrix::from_rows({{1000.0, 0.0}, {-1000.0, 0.0}});
    ClassifierHead diag{1.0, HeadMode::kDot};
    Vec f{1.0, 0.0};
    Vec g = feature_gradient(f, 0, p, diag);
    CHECK(g[0] == 0.0);
    CHECK(g[1] == 0.0);
}

TEST_CASE("feature gradient: diagnostic mode matches the symbolic two-way form") {
    // Oracle: for C=2, the gradient is (p(y)-1) w_y + p(j) w_j with
    // p computed from the raw dot products, expanded independently here.
    Rng rng(34);
    for (int trial = 0; trial < 50; ++trial) {
        Prototypes p = random_protos(2, 3, rng);
        Vec f = random_vec(3, rng);
        int y = trial % 2;
        int j = 1 - y;
        double sy = dot(f, p.rows.row(static_cast<std::size_t>(y)));
        double sj = dot(f, p.rows.row(static_cast<std::size_t>(j)));
        double py = 1.0 / (1.0 + std::exp(sj - sy));
        Vec expected(3);
        for (std::size_t k = 0; k < 3; ++k)
            expected[k] = (py - 1.0) * p.rows(static_cast<std::size_t>(y), k) +
                          (1.0 - py) * p.rows(static_cast<std::size_t>(j), k);
        Vec g = feature_gradient(f, y, p, ClassifierHead{1.0, HeadMode::kDot});
        for (std::size_t k = 0; k < 3; ++k)
            CHECK(testing::close_rel(g[k], expected[k], 1e-10, 1e-12));
    }
}

TEST_CASE("feature gradient: cosine mode matches finite differences") {
    Rng rng(35);
    for (int trial = 0; trial < 50; ++trial) {
        Prototypes p = random_protos(4, 5, rng);
        Vec f = random_vec(5, rng);
        if (norm(f) < 0.3) continue; // keep the normalization well-conditioned
        int y = static_cast<int>(rng.uniform_index(4));
        ClassifierHead head{rng.uniform(1.0, 20.0), HeadMode::kCosine};
        Vec analytic = feature_gradient(f, y, p, head);
        auto loss = [&]() {
            Matrix fm(1, 5);
            for (std::size_t k = 0; k < 5; ++k) fm(0, k) = f[k];
            Vec probs = probabilities(logits(fm, p, head).row(0));
            return -std::log(probs[static_cast<std::size_t>(y)]);
        };
        CHECK(testing::max_grad_error(f, loss, analytic) < 1e-4);
    }
}

TEST_CASE("bias decomposition: zero bias, p=1, and exact re-sum") {
    Rng rng(36);
    // delta_y = 0 makes the bias component vanish.
    {
        Prototypes p = random_protos(3, 4, rng);
        Matrix means = p.rows; // true means equal prototypes
        Vec f = random_vec(4, rng);
        BiasDecomposition bd = bias_decomposition(f, 1, p, means);
        for (double v : bd.bias_component) CHECK(v == 0.0);
    }
    // p(y|x) = 1 zeroes both labeled-class components.
    {
        Prototypes p;
        p.rows = Matrix::from_rows({{1000.0, 0.0}, {-1000.0, 0.0}});
        Matrix means = Matrix::from_rows({{900.0, 1.0}, {-900.0, -1.0}});
        Vec f{1.0, 0.0};
        BiasDecomposition bd = bias_decomposition(f, 0, p, means);
        for (double v : bd.bias_component) CHECK(v == 0.0);
        for (double v : bd.mean_component) CHECK(v == 0.0);
    }
    // Components re-sum to the diagnostic gradient exactly.
    for (int trial = 0; trial < 100; ++trial) {
        Prototypes p = random_protos(4, 6, rng);
        Matrix means(4, 6);
        for (std::size_t c = 0; c < 4; ++c)
            for (std::size_t k = 0; k < 6; ++k) means(c, k) = rng.uniform(-2.0, 2.0);
        Vec f = random_vec(6, rng);
        int y = static_cast<int>(rng.uniform_index(4));
        BiasDecomposition bd = bias_decomposition(f, y, p, means);
        Vec g = feature_gradient(f, y, p, ClassifierHead{1.0, HeadMode::kDot});
        for (std::size_t k = 0; k < 6; ++k)
            CHECK(std::fabs(bd.bias_component[k] + bd.mean_component[k] - g[k]) < 1e-10);
    }
    // Missing true means -> diagnostics unavailable.
    {
        Prototypes p = random_protos(3, 4, rng);
        Vec f = random_vec(4, rng);
        CHECK_THROWS_AS(bias_decomposition(f, 0, p, Matrix()), data_error);
    }
}

TEST_CASE("temperature gradient matches finite differences") {
    Rng rng(37);
    for (int trial = 0; trial < 30; ++trial) {
        Prototypes p = random_protos(3, 4, rng);
        Vec f = random_vec(4, rng);
        if (norm(f) < 0.3) continue;
        int y = static_cast<int>(rng.uniform_index(3));
        double tau = rng.uniform(1.0, 20.0);
        double analytic = temperature_gradient(f, y, p, ClassifierHead{tau, HeadMode::kCosine});
        auto loss = [&](double t) {
            Matrix fm(1, 4);
            for (std::size_t k = 0; k < 4; ++k) fm(0, k) = f[k];
            Vec probs = probabilities(logits(fm, p, ClassifierHead{t, HeadMode::kCosine}).row(0));
            return -std::log(probs[static_cast<std::size_t>(y)]);
        };
        double fd = testing::central_diff(loss, tau);
        CHECK(testing::close_rel(fd, analytic, 1e-4, 1e-8));
    }
}

TEST_SUITE_END();
