#include "vssm/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace vssm {

std::size_t shape_product(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t e : shape) {
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_to_string(shape));
    }
}

}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (shape_product(shape_) != data_.size()) {
        throw ShapeError("payload length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

void ensure_finite(const Tensor& t, const char* what) {
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(t[i])) {
            throw DomainError(std::string(what) + ": non-finite value at flat index " +
                              std::to_string(i));
        }
    }
}

void ensure_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw ShapeError("matmul: expected rank-2 operands, got " + a.shape_str() + " and " +
                         b.shape_str());
    }
    if (a.extent(1) != b.extent(0)) {
        throw ShapeError("matmul: inner extents disagree, " + a.shape_str() + " . " +
                         b.shape_str());
    }
    const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a(i, p) * b(p, j);
            out(i, j) = acc;
        }
    }
    ensure_finite(out, "matmul");
    return out;
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + a.shape_str());
    Tensor out({a.extent(1), a.extent(0)});
    for (std::size_t i = 0; i < a.extent(0); ++i)
        for (std::size_t j = 0; j < a.extent(1); ++j) out(j, i) = a(i, j);
    return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + x.shape_str());
    const std::size_t k = x.extent(axis);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.extent(d);
    std::size_t outer = x.size() / (k * inner);

    Tensor out(x.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * k * inner + i;
            double m = x[base];
            for (std::size_t j = 1; j < k; ++j) m = std::max(m, x[base + j * inner]);
            double denom = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                const double e = std::exp(x[base + j * inner] - m);
                out[base + j * inner] = e;
                denom += e;
            }
            for (std::size_t j = 0; j < k; ++j) out[base + j * inner] /= denom;
        }
    }
    ensure_finite(out, "softmax");
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    if (eps <= 0.0) throw DomainError("layer_norm: eps must be positive");
    const std::size_t d = x.extent(x.rank() - 1);
    if (gain.rank() != 1 || gain.extent(0) != d || bias.rank() != 1 || bias.extent(0) != d) {
        throw ShapeError("layer_norm: gain/bias must be length-" + std::to_string(d) +
                         " vectors, got " + gain.shape_str() + ", " + bias.shape_str());
    }
    const std::size_t rows = x.size() / d;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            out[r * d + j] = (row[j] - mean) * inv * gain[j] + bias[j];
        }
    }
    ensure_finite(out, "layer_norm");
    return out;
}

namespace {

template <typename F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* what, F f) {
    if (a.same_shape(b)) {
        Tensor out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
        ensure_finite(out, what);
        return out;
    }
    if (b.size() == 1) {
        Tensor out(a.shape());
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[0]);
        ensure_finite(out, what);
        return out;
    }
    if (a.size() == 1) {
        Tensor out(b.shape());
        for (std::size_t i = 0; i < b.size(); ++i) out[i] = f(a[0], b[i]);
        ensure_finite(out, what);
        return out;
    }
    throw ShapeError(std::string(what) + ": incompatible shapes " + a.shape_str() + " vs " +
                     b.shape_str());
}

template <typename F>
Tensor map_unary(const Tensor& a, const char* what, F f) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    ensure_finite(out, what);
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return broadcast_binary(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return broadcast_binary(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return broadcast_binary(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor scale(const Tensor& a, double c) {
    return map_unary(a, "scale", [c](double x) { return c * x; });
}

Tensor exp(const Tensor& a) {
    return map_unary(a, "exp", [](double x) { return std::exp(x); });
}

double sigmoid_scalar(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus_scalar(double x) {
    // log(1 + e^x), overflow-safe on both tails.
    if (x > 30.0) return x;
    return std::log1p(std::exp(x));
}

double silu_scalar(double x) { return x * sigmoid_scalar(x); }

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Tensor softplus(const Tensor& a) { return map_unary(a, "softplus", softplus_scalar); }
Tensor silu(const Tensor& a) { return map_unary(a, "silu", silu_scalar); }
Tensor gelu(const Tensor& a) { return map_unary(a, "gelu", gelu_scalar); }

double sum(const Tensor& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
    return acc;
}

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i]));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    ensure_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

double max_rel_diff(const Tensor& a, const Tensor& b, double floor) {
    ensure_same_shape(a, b, "max_rel_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
        m = std::max(m, std::fabs(a[i] - b[i]) / denom);
    }
    return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_product(shape) != a.size()) {
        throw ShapeError("reshape: " + a.shape_str() + " has " + std::to_string(a.size()) +
                         " elements, target " + shape_to_string(shape) + " needs " +
                         std::to_string(shape_product(shape)));
    }
    return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

}  // namespace vssm
