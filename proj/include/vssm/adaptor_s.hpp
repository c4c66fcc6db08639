#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vssm/tensor.hpp"

namespace vssm {

enum class CombineRule { sum, mean };

CombineRule combine_rule_from_string(const std::string& name);
const char* combine_rule_name(CombineRule rule);

/// One depthwise filter: weights [D x Kh x Kw] (one centered odd-sized filter
/// per channel) applied with the given dilation.
struct DepthwiseKernel {
    Tensor weights;
    std::size_t dilation = 1;
};

/// Bank of depthwise filters at multiple dilation scales.
struct KernelBank {
    std::vector<DepthwiseKernel> kernels;
    CombineRule combine = CombineRule::sum;
    bool residual = true;

    void validate() const;
    std::size_t channels() const { return kernels.front().weights.extent(0); }
};

/// Per-channel 2D cross-correlation with zero padding and "same" output size:
///   out[i,j,c] = sum_{ki,kj} w[c,ki,kj] * x[i + (ki-ch)*dil, j + (kj-cw)*dil, c]
/// Kernel extents must be odd (ConfigError otherwise).
Tensor depthwise_conv2d(const Tensor& y, const Tensor& weights, std::size_t dilation);

/// y' = y * [residual] + combine_d depthwise_conv2d(y, w_d, dilation_d).
/// Filters run in bank order; combine is elementwise sum or mean over scales.
Tensor multi_scale_aggregate(const Tensor& y, const KernelBank& bank);

}  // namespace vssm
