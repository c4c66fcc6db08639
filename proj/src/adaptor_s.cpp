#include "vssm/adaptor_s.hpp"

namespace vssm {

CombineRule combine_rule_from_string(const std::string& name) {
    if (name == "sum") return CombineRule::sum;
    if (name == "mean") return CombineRule::mean;
    throw ConfigError("unknown combine rule: " + name);
}

const char* combine_rule_name(CombineRule rule) {
    return rule == CombineRule::sum ? "sum" : "mean";
}

void KernelBank::validate() const {
    if (kernels.empty()) throw ConfigError("adaptor_s: kernel bank must not be empty");
    const std::size_t d = kernels.front().weights.extent(0);
    for (const auto& k : kernels) {
        if (k.weights.rank() != 3) {
            throw ShapeError("adaptor_s: kernel weights must be [D x Kh x Kw], got " +
                             k.weights.shape_str());
        }
        if (k.weights.extent(0) != d) {
            throw ShapeError("adaptor_s: all kernels must share the channel count");
        }
        if (k.weights.extent(1) % 2 == 0 || k.weights.extent(2) % 2 == 0) {
            throw ConfigError("adaptor_s: kernel extents must be odd, got " +
                              k.weights.shape_str());
        }
        if (k.dilation == 0) throw ConfigError("adaptor_s: dilation must be >= 1");
    }
}

Tensor depthwise_conv2d(const Tensor& y, const Tensor& weights, std::size_t dilation) {
    if (y.rank() != 3) throw ShapeError("depthwise_conv2d: input must be [H x W x D]");
    if (weights.rank() != 3) {
        throw ShapeError("depthwise_conv2d: weights must be [D x Kh x Kw]");
    }
    if (weights.extent(0) != y.extent(2)) {
        throw ShapeError("depthwise_conv2d: channel mismatch, input " + y.shape_str() +
                         " vs weights " + weights.shape_str());
    }
    if (weights.extent(1) % 2 == 0 || weights.extent(2) % 2 == 0) {
        throw ConfigError("depthwise_conv2d: kernel extents must be odd");
    }
    if (dilation == 0) throw ConfigError("depthwise_conv2d: dilation must be >= 1");

    const std::size_t h = y.extent(0), w = y.extent(1), d = y.extent(2);
    const std::size_t kh = weights.extent(1), kw = weights.extent(2);
    const long ch = static_cast<long>(kh / 2), cw = static_cast<long>(kw / 2);
    const long dil = static_cast<long>(dilation);

    Tensor out({h, w, d});
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            for (std::size_t c = 0; c < d; ++c) {
                double acc = 0.0;
                for (std::size_t ki = 0; ki < kh; ++ki) {
                    const long si = static_cast<long>(i) + (static_cast<long>(ki) - ch) * dil;
                    if (si < 0 || si >= static_cast<long>(h)) continue;
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                        const long sj = static_cast<long>(j) + (static_cast<long>(kj) - cw) * dil;
                        if (sj < 0 || sj >= static_cast<long>(w)) continue;
                        acc += weights(c, ki, kj) *
                               y(static_cast<std::size_t>(si), static_cast<std::size_t>(sj), c);
                    }
                }
                out(i, j, c) = acc;
            }
        }
    }
    ensure_finite(out, "depthwise_conv2d");
    return out;
}

Tensor multi_scale_aggregate(const Tensor& y, const KernelBank& bank) {
    bank.validate();
    if (bank.channels() != y.extent(2)) {
        throw ShapeError("multi_scale_aggregate: channel mismatch, input " + y.shape_str() +
                         " vs bank with D=" + std::to_string(bank.channels()));
    }
    Tensor acc({y.shape()});
    for (const auto& k : bank.kernels) {
        const Tensor conv = depthwise_conv2d(y, k.weights, k.dilation);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += conv[i];
    }
    if (bank.combine == CombineRule::mean) {
        const double inv = 1.0 / static_cast<double>(bank.kernels.size());
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] *= inv;
    }
    if (bank.residual) {
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += y[i];
    }
    ensure_finite(acc, "multi_scale_aggregate");
    return acc;
}

}  // namespace vssm
