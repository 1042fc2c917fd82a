#include "nullport/svd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace nullport {

namespace stats {
namespace {
std::atomic<unsigned long> g_basis_svd{0};
std::atomic<unsigned long> g_inverse_ops{0};
}  // namespace
void reset_op_counters() {
    g_basis_svd = 0;
    g_inverse_ops = 0;
}
unsigned long basis_svd_count() { return g_basis_svd.load(); }
unsigned long inverse_op_count() { return g_inverse_ops.load(); }
void bump_basis_svd() { ++g_basis_svd; }
void bump_inverse_op() { ++g_inverse_ops; }
}  // namespace stats

namespace {

constexpr int kMaxSweeps = 60;
constexpr double kRelClamp = 1e-12;

// Deterministic orthonormal completion: fills u column `col` with the first
// standard basis vector that keeps a usable residual after projecting out
// the already-filled columns (two Gram-Schmidt passes).
void complete_column(Tensor& u, std::size_t col) {
    const std::size_t m = u.rows();
    std::vector<double> v(m, 0.0);
    for (std::size_t cand = 0; cand < m; ++cand) {
        std::fill(v.begin(), v.end(), 0.0);
        v[cand] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < u.cols(); ++j) {
                if (j == col) continue;
                double d = 0.0;
                for (std::size_t i = 0; i < m; ++i) d += u(i, j) * v[i];
                for (std::size_t i = 0; i < m; ++i) v[i] -= d * u(i, j);
            }
        }
        double nrm = 0.0;
        for (double x : v) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm >= 1e-6) {
            for (std::size_t i = 0; i < m; ++i) u(i, col) = v[i] / nrm;
            return;
        }
    }
    throw std::runtime_error("thin_svd failed to complete an orthonormal basis");
}

// One-sided Jacobi on a tall matrix (m >= n): rotate column pairs until the
// gram matrix is numerically diagonal, then read off s and u.
SvdFactors jacobi_tall(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    Tensor b = a;
    Tensor v = Tensor::identity(n);

    const double total_mass = frobenius_norm_sq(a);
    const double off_tol = kRelClamp * total_mass;

    double off_mass = 0.0;
    bool converged = false;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        off_mass = 0.0;
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double al = 0.0, be = 0.0, ga = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    al += bp * bp;
                    be += bq * bq;
                    ga += bp * bq;
                }
                off_mass += ga * ga;
                if (std::abs(ga) <= 1e-15 * std::sqrt(al * be) || ga == 0.0) continue;
                const double zeta = (be - al) / (2.0 * ga);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    b(i, p) = c * bp - s * bq;
                    b(i, q) = s * bp + c * bq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
                rotated = true;
            }
        }
        off_mass = std::sqrt(off_mass);
        if (off_mass <= off_tol || !rotated) {
            converged = true;
            break;
        }
    }
    if (!converged) {
        std::ostringstream os;
        os << "thin_svd did not converge in " << kMaxSweeps
           << " sweeps; off-diagonal residual " << off_mass << " exceeds " << off_tol;
        throw std::runtime_error(os.str());
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s2 = 0.0;
        for (std::size_t i = 0; i < m; ++i) s2 += b(i, j) * b(i, j);
        sigma[j] = std::sqrt(s2);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    SvdFactors f;
    f.u = Tensor({m, n});
    f.s = Tensor({n});
    f.vt = Tensor({n, n});
    const double smax = sigma[order[0]];
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t src = order[j];
        double sj = sigma[src];
        if (sj < kRelClamp * smax) sj = 0.0;
        f.s[j] = sj;
        for (std::size_t i = 0; i < n; ++i) f.vt(j, i) = v(i, src);
        if (sj > 0.0)
            for (std::size_t i = 0; i < m; ++i) f.u(i, j) = b(i, src) / sj;
    }
    for (std::size_t j = 0; j < n; ++j)
        if (f.s[j] == 0.0) complete_column(f.u, j);
    return f;
}

}  // namespace

SvdFactors thin_svd(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("thin_svd expects a rank-2 tensor");
    ensure_finite(a, "thin_svd input");
    if (a.rows() >= a.cols()) return jacobi_tall(a);
    SvdFactors t = jacobi_tall(transposed(a));
    SvdFactors f;
    f.u = transposed(t.vt);
    f.s = t.s;
    f.vt = transposed(t.u);
    return f;
}

Tensor pinv(const Tensor& a) {
    stats::bump_inverse_op();
    SvdFactors f = thin_svd(a);
    const std::size_t r = f.s.size();
    Tensor w = transposed(f.vt);  // n x r
    for (std::size_t j = 0; j < r; ++j) {
        const double inv = f.s[j] > 0.0 ? 1.0 / f.s[j] : 0.0;
        for (std::size_t i = 0; i < w.rows(); ++i) w(i, j) *= inv;
    }
    return matmul(w, transposed(f.u));
}

Tensor inverse(const Tensor& a) {
    if (a.rank() != 2 || a.rows() != a.cols())
        throw std::invalid_argument("inverse expects a square matrix");
    stats::bump_inverse_op();
    const std::size_t n = a.rows();
    Tensor aug({n, 2 * n});
    double maxabs = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            aug(i, j) = a(i, j);
            maxabs = std::max(maxabs, std::abs(a(i, j)));
        }
        aug(i, n + i) = 1.0;
    }
    const double tiny = 1e-14 * std::max(maxabs, 1.0);
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t i = col + 1; i < n; ++i)
            if (std::abs(aug(i, col)) > std::abs(aug(piv, col))) piv = i;
        if (std::abs(aug(piv, col)) < tiny)
            throw std::runtime_error("inverse: matrix is numerically singular");
        if (piv != col)
            for (std::size_t j = 0; j < 2 * n; ++j) std::swap(aug(piv, j), aug(col, j));
        const double d = aug(col, col);
        for (std::size_t j = 0; j < 2 * n; ++j) aug(col, j) /= d;
        for (std::size_t i = 0; i < n; ++i) {
            if (i == col) continue;
            const double f = aug(i, col);
            if (f == 0.0) continue;
            for (std::size_t j = 0; j < 2 * n; ++j) aug(i, j) -= f * aug(col, j);
        }
    }
    Tensor out({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) = aug(i, n + j);
    ensure_finite(out, "inverse");
    return out;
}

}  // namespace nullport
