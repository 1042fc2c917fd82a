#include "nullport/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace nullport {

namespace {

std::size_t checked_volume(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) {
        if (e == 0) throw std::invalid_argument("tensor extent must be positive");
        n *= e;
    }
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(checked_volume(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    if (checked_volume(shape_) != data_.size())
        throw std::invalid_argument("tensor data length does not match shape volume");
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) throw std::invalid_argument("tensor axis out of range");
    return shape_[axis];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    if (rank() != 2 || i >= shape_[0] || j >= shape_[1])
        throw std::invalid_argument("tensor index out of range");
    return (*this)(i, j);
}

void Tensor::fill(double v) {
    for (double& x : data_) x = v;
}

Tensor Tensor::reshaped(std::vector<std::size_t> shape) const {
    if (checked_volume(shape) != size())
        throw std::invalid_argument("reshape must preserve element count");
    return Tensor(std::move(shape), data_);
}

std::string shape_string(const Tensor& t) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < t.rank(); ++i) {
        if (i) os << 'x';
        os << t.shape()[i];
    }
    os << ')';
    return os.str();
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw std::invalid_argument("matmul expects rank-2 tensors");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k)
        throw std::invalid_argument("matmul shape mismatch: " + shape_string(a) +
                                    " * " + shape_string(b));
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        double* orow = po + i * n;
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = arow[kk];
            const double* brow = pb + kk * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    ensure_finite(out, "matmul");
    return out;
}

Tensor transposed(const Tensor& a) {
    if (a.rank() != 2) throw std::invalid_argument("transpose expects a rank-2 tensor");
    Tensor out({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

double frobenius_norm_sq(const Tensor& a) {
    double s = 0.0;
    const double* p = a.data();
    for (std::size_t i = 0; i < a.size(); ++i) s += p[i] * p[i];
    ensure_finite(s, "frobenius_norm_sq");
    return s;
}

double frobenius_norm(const Tensor& a) { return std::sqrt(frobenius_norm_sq(a)); }

double dot(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw std::invalid_argument("dot shape mismatch: " + shape_string(a) + " vs " +
                                    shape_string(b));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    ensure_finite(s, "dot");
    return s;
}

Tensor scaled(const Tensor& a, double s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    ensure_finite(out, "scale");
    return out;
}

static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + " shape mismatch: " +
                                    shape_string(a) + " vs " + shape_string(b));
}

Tensor added(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor subtracted(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "subtract");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "hadamard");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

void add_scaled(Tensor& dst, const Tensor& src, double s) {
    check_same_shape(dst, src, "add_scaled");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * src[i];
}

void ensure_finite(const Tensor& t, const char* what) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i]))
            throw std::runtime_error(std::string(what) + " produced a non-finite value");
}

void ensure_finite(double v, const char* what) {
    if (!std::isfinite(v))
        throw std::runtime_error(std::string(what) + " produced a non-finite value");
}

}  // namespace nullport
