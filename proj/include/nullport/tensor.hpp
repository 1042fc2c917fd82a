#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace nullport {

// Dense row-major tensor of doubles. Rank 2 is the workhorse (matrices);
// rank 4 carries image batches as (count, channels, height, width).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> values);

    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> values);
    static Tensor identity(std::size_t n);

    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }
    const std::vector<std::size_t>& shape() const { return shape_; }
    bool empty() const { return data_.empty(); }

    std::size_t rows() const { return extent(0); }
    std::size_t cols() const { return extent(1); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& operator()(std::size_t i, std::size_t j) {
        return data_[i * shape_[1] + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        return data_[i * shape_[1] + j];
    }

    double at(std::size_t i, std::size_t j) const;

    void fill(double v);
    Tensor reshaped(std::vector<std::size_t> shape) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool operator==(const Tensor& other) const = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::string shape_string(const Tensor& t);

// Matrix product of two rank-2 tensors. Accumulation order is fixed
// (i, k, j) so results are bit-reproducible across runs and thread counts.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transposed(const Tensor& a);

double frobenius_norm_sq(const Tensor& a);
double frobenius_norm(const Tensor& a);

double dot(const Tensor& a, const Tensor& b);

Tensor scaled(const Tensor& a, double s);
Tensor added(const Tensor& a, const Tensor& b);
Tensor subtracted(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);

// dst += s * src
void add_scaled(Tensor& dst, const Tensor& src, double s);

// Throws if any entry is NaN or infinite; `what` names the producing op.
void ensure_finite(const Tensor& t, const char* what);
void ensure_finite(double v, const char* what);

}  // namespace nullport
