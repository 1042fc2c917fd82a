#include <doctest.h>

#include <cmath>

#include "nullport/rng.hpp"
#include "nullport/svd.hpp"

using namespace nullport;

namespace {

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Tensor reconstruct(const SvdFactors& f) {
    Tensor us = f.u;
    for (std::size_t i = 0; i < us.rows(); ++i)
        for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= f.s[j];
    return matmul(us, f.vt);
}

void check_factors(const Tensor& a, const SvdFactors& f) {
    const std::size_t r = std::min(a.rows(), a.cols());
    REQUIRE(f.u.rows() == a.rows());
    REQUIRE(f.u.cols() == r);
    REQUIRE(f.s.size() == r);
    REQUIRE(f.vt.rows() == r);
    REQUIRE(f.vt.cols() == a.cols());

    for (std::size_t i = 0; i + 1 < r; ++i) CHECK(f.s[i] >= f.s[i + 1]);
    for (std::size_t i = 0; i < r; ++i) CHECK(f.s[i] >= 0.0);

    CHECK(max_abs_diff(matmul(transposed(f.u), f.u), Tensor::identity(r)) <= 1e-10);
    CHECK(max_abs_diff(matmul(f.vt, transposed(f.vt)), Tensor::identity(r)) <= 1e-10);

    double denom = std::max(frobenius_norm(a), 1e-30);
    CHECK(frobenius_norm(subtracted(reconstruct(f), a)) / denom <= 1e-10);
}

}  // namespace

TEST_CASE("svd of identity and diagonal matrices") {
    SvdFactors fi = thin_svd(Tensor::identity(3));
    CHECK(fi.s.size() == 3);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(fi.s[i] == doctest::Approx(1.0).epsilon(1e-12));

    SvdFactors fd = thin_svd(Tensor::matrix(2, 2, {3, 0, 0, 0}));
    CHECK(fd.s[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(fd.s[1] == 0.0);
}

TEST_CASE("svd properties over random shapes") {
    SeededRng rng(101);
    for (int trial = 0; trial < 120; ++trial) {
        std::size_t m = 1 + rng.next_below(32);
        std::size_t n = 1 + rng.next_below(32);
        Tensor a = rng.normal({m, n});
        SvdFactors f = thin_svd(a);
        check_factors(a, f);

        double energy = 0.0;
        for (std::size_t i = 0; i < f.s.size(); ++i) energy += f.s[i] * f.s[i];
        double total = frobenius_norm_sq(a);
        CHECK(std::abs(energy - total) <= 1e-10 * std::max(total, 1e-30));
    }
}

TEST_CASE("svd clamps numerically zero singular values") {
    SeededRng rng(55);
    // Rank-2 matrix living in a 6x5 shape: trailing values must be exactly 0.
    Tensor u = rng.normal({6, 2});
    Tensor v = rng.normal({2, 5});
    Tensor a = matmul(u, v);
    SvdFactors f = thin_svd(a);
    check_factors(a, f);
    for (std::size_t i = 2; i < f.s.size(); ++i) CHECK(f.s[i] == 0.0);
}

TEST_CASE("svd of the zero matrix keeps orthonormal factors") {
    Tensor z({4, 3});
    SvdFactors f = thin_svd(z);
    for (std::size_t i = 0; i < f.s.size(); ++i) CHECK(f.s[i] == 0.0);
    CHECK(max_abs_diff(matmul(transposed(f.u), f.u), Tensor::identity(3)) <= 1e-10);
}

TEST_CASE("svd is deterministic") {
    SeededRng rng(9);
    Tensor a = rng.normal({8, 5});
    SvdFactors f1 = thin_svd(a);
    SvdFactors f2 = thin_svd(a);
    CHECK(f1.u == f2.u);
    CHECK(f1.s == f2.s);
    CHECK(f1.vt == f2.vt);
}

TEST_CASE("pinv of an invertible matrix is its inverse") {
    Tensor a = Tensor::matrix(2, 2, {4, 7, 2, 6});
    Tensor expected = Tensor::matrix(2, 2, {0.6, -0.7, -0.2, 0.4});
    CHECK(max_abs_diff(pinv(a), expected) <= 1e-10);
}

TEST_CASE("pinv of zero is zero") {
    Tensor p = pinv(Tensor({3, 2}));
    CHECK(p.rows() == 2);
    CHECK(p.cols() == 3);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] == 0.0);
}

TEST_CASE("pinv left-inverts tall full-column-rank matrices") {
    SeededRng rng(77);
    for (int trial = 0; trial < 25; ++trial) {
        Tensor a = rng.normal({9, 4});
        Tensor p = pinv(a);
        CHECK(max_abs_diff(matmul(p, a), Tensor::identity(4)) <= 1e-9);
    }
}

TEST_CASE("pinv satisfies the four Moore-Penrose identities") {
    SeededRng rng(78);
    for (int trial = 0; trial < 25; ++trial) {
        std::size_t m = 2 + rng.next_below(7);
        std::size_t n = 2 + rng.next_below(7);
        Tensor a = rng.normal({m, n});
        Tensor p = pinv(a);
        double scale = std::max(frobenius_norm(a), 1.0);

        Tensor apa = matmul(matmul(a, p), a);
        Tensor pap = matmul(matmul(p, a), p);
        Tensor ap = matmul(a, p);
        Tensor pa = matmul(p, a);
        CHECK(frobenius_norm(subtracted(apa, a)) <= 1e-9 * scale);
        CHECK(frobenius_norm(subtracted(pap, p)) <= 1e-9 * std::max(frobenius_norm(p), 1.0));
        CHECK(max_abs_diff(ap, transposed(ap)) <= 1e-9 * scale);
        CHECK(max_abs_diff(pa, transposed(pa)) <= 1e-9 * scale);
    }
}

TEST_CASE("dense inverse") {
    Tensor a = Tensor::matrix(2, 2, {4, 7, 2, 6});
    Tensor inv = inverse(a);
    CHECK(max_abs_diff(matmul(a, inv), Tensor::identity(2)) <= 1e-12);

    CHECK_THROWS(inverse(Tensor::matrix(2, 2, {1, 2, 2, 4})));
    CHECK_THROWS(inverse(Tensor({2, 3})));
}

TEST_CASE("operation counters track inverse-class calls") {
    stats::reset_op_counters();
    CHECK(stats::basis_svd_count() == 0);
    CHECK(stats::inverse_op_count() == 0);

    SeededRng rng(3);
    Tensor a = rng.normal({5, 3});
    thin_svd(a);  // raw factorization is not a basis build
    CHECK(stats::basis_svd_count() == 0);

    pinv(a);
    CHECK(stats::inverse_op_count() == 1);
    inverse(Tensor::matrix(2, 2, {2, 0, 0, 2}));
    CHECK(stats::inverse_op_count() == 2);

    stats::reset_op_counters();
    CHECK(stats::inverse_op_count() == 0);
}
