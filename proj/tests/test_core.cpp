#include <doctest.h>

#include <cmath>
#include <set>

#include "fewtune/matrix.hpp"
#include "fewtune/rng.hpp"

using namespace fewtune;

TEST_SUITE_BEGIN("core");

TEST_CASE("matrix basics") {
    Matrix m(2, 3, 0.0);
    m(0, 0) = 1.0;
    m(1, 2) = -4.5;
    CHECK(m.rows() == 2);
    CHECK(m.cols() == 3);
    CHECK(m(0, 0) == 1.0);
    CHECK(m(1, 2) == -4.5);
    CHECK(m.row(1)[2] == -4.5);

    Matrix id = Matrix::identity(3);
    CHECK(id(0, 0) == 1.0);
    CHECK(id(0, 1) == 0.0);

    Matrix f = Matrix::from_rows({{1.0, 2.0}, {3.0, 4.0}});
    CHECK(f(1, 0) == 3.0);
    CHECK(f == f);
}

TEST_CASE("dot and norm") {
    Vec a{3.0, 4.0};
    CHECK(dot(a, a) == 25.0);
    CHECK(norm(a) == 5.0);
}

TEST_CASE("argmax breaks ties toward the lowest index") {
    Vec v{1.0, 3.0, 3.0, 2.0};
    CHECK(argmax_tie_low(v) == 1);
    Vec w{5.0, 5.0};
    CHECK(argmax_tie_low(w) == 0);
}

TEST_CASE("argmax invariance under strictly monotone transforms") {
    Rng rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Vec v(5);
        for (double& x : v) x = rng.uniform(-3.0, 3.0);
        Vec scaled(5), shifted(5);
        for (std::size_t i = 0; i < v.size(); ++i) {
            scaled[i] = 2.7 * v[i] + 0.3;
            shifted[i] = std::tanh(v[i]); // monotone, order preserving
        }
        CHECK(argmax_tie_low(v) == argmax_tie_low(scaled));
        CHECK(argmax_tie_low(v) == argmax_tie_low(shifted));
    }
}

TEST_CASE("derive_seed separates streams") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t i = 0; i < 100; ++i) {
        seen.insert(derive_seed(7, "a", i));
        seen.insert(derive_seed(7, "b", i));
    }
    CHECK(seen.size() == 200);
    CHECK(derive_seed(7, "a", 3) == derive_seed(7, "a", 3));
    CHECK(derive_seed(7, "a", 3) != derive_seed(8, "a", 3));
}

TEST_CASE("rng determinism") {
    Rng a(42), b(42);
    for (int i = 0; i < 20; ++i) CHECK(a.normal() == b.normal());
}

TEST_SUITE_END();
