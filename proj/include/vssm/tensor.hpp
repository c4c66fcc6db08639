#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vssm/error.hpp"

namespace vssm {

using Shape = std::vector<std::size_t>;

/// Dense n-dimensional array of doubles in row-major order.
///
/// Shape extents are strictly positive; the flat payload length always equals
/// the shape product. Instances are value types; all operations on them are
/// pure functions that allocate fresh results, so sharing across threads
/// needs no synchronization.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }
    static Tensor identity(std::size_t n);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    std::size_t extent(std::size_t dim) const { return shape_[dim]; }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t flat) { return data_[flat]; }
    double operator[](std::size_t flat) const { return data_[flat]; }

    // Row-major multi-index accessors for the ranks used in this project.
    double& operator()(std::size_t i) { return data_[i]; }
    double operator()(std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t i, std::size_t j) {
        return data_[i * shape_[1] + j];
    }
    double operator()(std::size_t i, std::size_t j) const {
        return data_[i * shape_[1] + j];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }
    double operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
        return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

private:
    Shape shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Throws DomainError if any element is NaN or infinite. `what` names the
/// operation for the error message.
void ensure_finite(const Tensor& t, const char* what);

void ensure_same_shape(const Tensor& a, const Tensor& b, const char* what);

// ---- contraction -----------------------------------------------------------

/// [M x K] . [K x N] -> [M x N]; summation runs sequentially over K so the
/// result is bit-reproducible.
Tensor matmul(const Tensor& a, const Tensor& b);

/// 2-D transpose.
Tensor transpose(const Tensor& a);

// ---- normalization ---------------------------------------------------------

/// Softmax along `axis`, computed with max-subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Per-row normalization over the trailing axis followed by the affine map
/// gain * xhat + bias. gain and bias have length extent(last).
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// ---- elementwise -----------------------------------------------------------

/// add/mul accept equal shapes or a scalar (shape {1}) on either side.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor exp(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);

double sigmoid_scalar(double x);
double softplus_scalar(double x);
double silu_scalar(double x);
double gelu_scalar(double x);

// ---- reductions / utilities ------------------------------------------------

double sum(const Tensor& a);
double max_abs(const Tensor& a);
/// max |a - b| over all elements; shapes must match.
double max_abs_diff(const Tensor& a, const Tensor& b);
/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-30);
bool bit_equal(const Tensor& a, const Tensor& b);

Tensor reshape(const Tensor& a, Shape shape);

}  // namespace vssm
