#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vssm/tensor.hpp"

namespace vssm {

enum class SelectionMode { learnable, static_offsets };

SelectionMode selection_mode_from_string(const std::string& name);
const char* selection_mode_name(SelectionMode mode);

/// Memory-retention parameters. Position and coefficient predictors are
/// lightweight linear layers on the state vector; they serve all S scan
/// sequences at once, with rows [s*K, (s+1)*K) belonging to sequence s.
/// Exactly one of phi_c / shared_c provides coefficients, per the
/// weight_sharing flag. In static_offsets mode positions come from fixed
/// strictly-negative offsets instead of phi_p.
struct AdaptorTParams {
    std::size_t k = 4;          // selected states per sequence
    std::size_t sequences = 1;  // S
    SelectionMode mode = SelectionMode::learnable;
    bool causal = true;
    bool weight_sharing = false;

    Tensor phi_p_w;  // [N x K*S]
    Tensor phi_p_b;  // [K*S]
    Tensor phi_c_w;  // [N x K*S], active iff !weight_sharing
    Tensor phi_c_b;  // [K*S]
    Tensor shared_c;  // [S x K], active iff weight_sharing

    std::vector<long> static_offsets;  // length K, entries < 0

    void validate(std::size_t state_dim) const;
};

/// Zero-initialized parameters (positions mid-range, coefficients uniform).
/// Default static offsets are {-1, ..., -K}.
AdaptorTParams make_adaptor_t(std::size_t k, std::size_t sequences, std::size_t state_dim,
                              SelectionMode mode = SelectionMode::learnable, bool causal = true,
                              bool weight_sharing = false, std::vector<long> static_offsets = {});

/// Positions for step t of sequence `seq_index` from the state vector h_t:
/// p = sigmoid(phi_p(h_t)) * t when causal, else * (len - 1).
Tensor predict_positions(const Tensor& h_t, const AdaptorTParams& params, std::size_t seq_index,
                         std::size_t t, std::size_t len);

/// Softmax coefficients over the K logits of sequence `seq_index`; sums to 1.
/// With weight sharing the result is independent of h_t.
Tensor predict_coeffs(const Tensor& h_t, const AdaptorTParams& params, std::size_t seq_index);

/// Linear interpolation between the two neighboring rows of h_seq [L x N];
/// exact gather at integral positions. Out-of-range positions clamp to
/// [0, L-1].
Tensor sample_state(const Tensor& h_seq, double pos);

/// Residual memory retention over one scan sequence:
///   out_t = h_t + sum_k c_k * sample_state(h_seq, p_k)
/// with positions and coefficients predicted per step (or taken from the
/// static offsets). h_seq is [L x N].
Tensor retain(const Tensor& h_seq, const AdaptorTParams& params, std::size_t seq_index = 0);

/// Applies `retain` to every channel slice of a raw hidden-state tensor
/// [L x D x N], as produced by phase 1 of the decoupled solver.
Tensor retain_hidden(const Tensor& h, const AdaptorTParams& params, std::size_t seq_index = 0);

}  // namespace vssm
