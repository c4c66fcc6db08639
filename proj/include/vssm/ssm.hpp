#pragma once

#include <functional>
#include <utility>

#include "vssm/tensor.hpp"

namespace vssm {

/// Discretization rule for turning the continuous system into a step
/// recurrence. `exact` applies the zero-order-hold closed form; `euler` is
/// the simplified rule bbar = delta * b used by practical Mamba code.
enum class ZohMode { exact, euler };

/// Continuous selective state-space model for sequences of D-channel inputs
/// with an N-dimensional state per channel.
///
/// a_diag holds the diagonal state matrix per channel (entries strictly
/// negative). The projections generate the per-step parameters from the
/// input; they are stored input-major, i.e. b_proj is [D x N] and maps a
/// channel row u_t to the state-space vector b_t = u_t . b_proj.
struct ContinuousSsm {
    Tensor a_diag;      // [D x N], entries < 0
    Tensor b_proj;      // [D x N]
    Tensor c_proj;      // [D x N]
    Tensor delta_proj;  // [D x D]
    Tensor delta_bias;  // [D]
    Tensor d_skip;      // [D]

    std::size_t channels() const { return a_diag.extent(0); }
    std::size_t state_dim() const { return a_diag.extent(1); }

    /// Throws DomainError for non-negative a_diag entries and ShapeError for
    /// inconsistent projection extents.
    void validate() const;
};

/// Per-timestep discretized parameters for one scan direction. The forcing
/// term bu already folds the input: bu[t,d,n] = bbar[t,d,n] * u[t,d].
/// c_seq is [L x N] (shared across channels) or [L x D x N] per-channel.
struct DiscreteSsm {
    Tensor abar;    // [L x D x N]
    Tensor bu;      // [L x D x N]
    Tensor c_seq;   // [L x N] or [L x D x N]
    Tensor d_skip;  // [D]
    Tensor delta;   // [L x D]
};

struct SelectiveParams {
    Tensor b_seq;      // [L x N]
    Tensor c_seq;      // [L x N]
    Tensor delta_seq;  // [L x D], strictly positive
};

/// Generates the input-dependent parameters b_t, c_t, delta_t from the
/// input sequence u [L x D]. delta is passed through softplus plus the
/// per-channel bias so it is positive.
SelectiveParams selective_params(const Tensor& u, const ContinuousSsm& model);

/// Zero-order-hold discretization, elementwise over the diagonal system:
///   abar = exp(delta * a)
///   bbar = (delta*a)^-1 (exp(delta*a) - 1) * delta * b
/// with the analytic limit bbar = delta * b used when |delta*a| < 1e-8.
/// Returns (abar, bbar), both [L x D x N]. Throws DomainError if any delta
/// is not positive.
std::pair<Tensor, Tensor> zoh_discretize(const Tensor& a_diag, const Tensor& b_seq,
                                         const Tensor& delta_seq, ZohMode mode = ZohMode::exact);

/// Threshold below which the zoh closed form switches to its series limit.
inline constexpr double kZohLimitThreshold = 1e-8;

/// (e^z - 1) / z with the limit value 1 below the threshold.
double zoh_phi1_scalar(double z);

/// Full discretization pipeline: selective parameters, zoh, and the forcing
/// term bu[t,d,n] = bbar[t,d,n] * u[t,d].
DiscreteSsm discretize(const Tensor& u, const ContinuousSsm& model,
                       ZohMode mode = ZohMode::exact);

/// Left-to-right recurrence h_t = abar_t * h_{t-1} + bu_t with h_0 empty.
/// This is the ground-truth oracle for the other solvers.
Tensor scan_sequential(const Tensor& abar, const Tensor& bu);

/// One element of the scan monoid: x -> a * x + b.
struct ScanElement {
    double a;
    double b;
};

/// Associative combine: applying e1 then e2.
inline ScanElement scan_combine(const ScanElement& e1, const ScanElement& e2) {
    return {e2.a * e1.a, e2.a * e1.b + e2.b};
}

/// Same result as scan_sequential via a chunked Blelloch-style tree scan:
/// chunk-local scans, an upsweep/downsweep over chunk summaries, then a
/// local fix-up. The combine tree fixes the reduction order, so the result
/// does not depend on `workers`. `chunk` must be positive.
Tensor scan_parallel(const Tensor& abar, const Tensor& bu, std::size_t chunk = 64,
                     unsigned workers = 1);

/// y_t = c_t . h_t + d_skip * u_t, contracting over the state dimension.
/// c_seq may be [L x N] or [L x D x N].
Tensor output_project(const Tensor& h, const Tensor& c_seq, const Tensor& d_skip,
                      const Tensor& u);

/// Single-phase reference pipeline: discretize, sequential scan, project.
Tensor solve_fused(const Tensor& u, const ContinuousSsm& model, ZohMode mode = ZohMode::exact);

using HiddenHook = std::function<Tensor(const Tensor&)>;  // [L x D x N] -> same shape
using OutputHook = std::function<Tensor(const Tensor&)>;  // [L x D] -> same shape

struct ScanOptions {
    bool use_parallel = false;
    std::size_t chunk = 64;
    unsigned workers = 1;
};

/// Two-phase solver. Phase 1 runs the recurrence with the output stage
/// replaced by the identity selector and zero skip, yielding the raw hidden
/// states; `hidden_hook` transforms them. Phase 2 forms
/// y = c . h + d_skip * u by matrix multiplication; `output_hook` transforms
/// the result. With both hooks absent this equals solve_fused.
/// A hook returning the wrong shape raises ContractError.
Tensor solve_decoupled(const Tensor& u, const ContinuousSsm& model,
                       const HiddenHook& hidden_hook = {}, const OutputHook& output_hook = {},
                       ZohMode mode = ZohMode::exact, const ScanOptions& scan = {});

}  // namespace vssm
