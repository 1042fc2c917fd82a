#pragma once

#include "nullport/tensor.hpp"

namespace nullport {

// Thin SVD of an m x n matrix: a = u * diag(s) * vt with r = min(m, n).
// u is m x r with orthonormal columns, vt is r x n with orthonormal rows,
// s holds singular values sorted descending. Values below 1e-12 * s_max are
// clamped to exactly zero; the matching u columns are completed to an
// orthonormal set so the factor stays well formed for rank-deficient input.
struct SvdFactors {
    Tensor u;
    Tensor s;   // rank-1, length r
    Tensor vt;
};

SvdFactors thin_svd(const Tensor& a);

// Moore-Penrose pseudo-inverse via thin_svd; singular values below
// 1e-12 * s_max are treated as zero.
Tensor pinv(const Tensor& a);

// Dense inverse by Gauss-Jordan elimination with partial pivoting.
// Throws on (numerically) singular input.
Tensor inverse(const Tensor& a);

namespace stats {
// Process-wide operation counters used by the runtime scaling probe.
// basis_svd counts null-space basis factorizations; inverse_ops counts
// pseudo-inverse / dense-inverse calls.
void reset_op_counters();
unsigned long basis_svd_count();
unsigned long inverse_op_count();
void bump_basis_svd();
void bump_inverse_op();
}  // namespace stats

}  // namespace nullport
