#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "vssm/adaptor_t.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

// ---- parameter registry ------------------------------------------------

/// Named parameters with gradient accumulators. Entries keep registration
/// order; every loop over the store iterates in that order so updates and
/// accumulation are deterministic.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor value;
        Tensor grad;
        bool trainable = true;
    };

    std::size_t add(const std::string& name, Tensor init, bool trainable = true);
    std::size_t find(const std::string& name) const;
    bool has(const std::string& name) const;
    Entry& at(const std::string& name);
    const Entry& at(const std::string& name) const;
    Entry& entry(std::size_t index) { return entries_[index]; }
    const Entry& entry(std::size_t index) const { return entries_[index]; }
    std::size_t count() const { return entries_.size(); }

    void zero_grads();
    /// Total scalar count, optionally restricted to trainable entries.
    std::size_t scalar_count(bool trainable_only = false) const;

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---- standalone vector-Jacobian products --------------------------------

std::pair<Tensor, Tensor> vjp_matmul(const Tensor& a, const Tensor& b, const Tensor& gy);
Tensor vjp_softmax(const Tensor& y, const Tensor& gy, std::size_t axis);
std::tuple<Tensor, Tensor, Tensor> vjp_layer_norm(const Tensor& x, const Tensor& gain, double eps,
                                                  const Tensor& gy);

/// Adjoint of the scan recurrence: lambda_t = gh_t + abar_{t+1} * lambda_{t+1};
/// g_bu = lambda; g_abar_t = lambda_t * h_{t-1} (h_{-1} = 0).
std::pair<Tensor, Tensor> vjp_scan(const Tensor& abar, const Tensor& bu, const Tensor& h,
                                   const Tensor& gh);

std::tuple<Tensor, Tensor, Tensor, Tensor> vjp_output_project(const Tensor& h, const Tensor& c_seq,
                                                              const Tensor& d_skip, const Tensor& u,
                                                              const Tensor& gy);

std::pair<Tensor, Tensor> vjp_depthwise_conv2d(const Tensor& x, const Tensor& weights,
                                               std::size_t dilation, const Tensor& gy);

/// Backpropagates into both interpolation endpoints and into the position:
/// g_pos = (h_ceil - h_floor) . gout, zero at integral or clamped positions.
std::pair<Tensor, double> vjp_sample_state(const Tensor& h_seq, double pos, const Tensor& gout);

struct RetainGrads {
    Tensor h_seq;
    Tensor phi_p_w, phi_p_b;    // learnable mode only
    Tensor phi_c_w, phi_c_b;    // when not weight-sharing
    Tensor shared_c;            // when weight-sharing
};

RetainGrads vjp_retain(const Tensor& h_seq, const AdaptorTParams& params, std::size_t seq_index,
                       const Tensor& gout);

// Scalar derivatives of the elementwise maps.
double silu_grad_scalar(double x);
double gelu_grad_scalar(double x);
double softplus_grad_scalar(double x);
double zoh_phi1_grad_scalar(double z);

// ---- tape ----------------------------------------------------------------

class Tape;

/// Handle to a node on a tape. Cheap to copy.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }
    const Tensor& value() const;
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Ordered record of executed primitive operations with the values needed
/// for their vector-Jacobian products. Replaying backward visits nodes in
/// exact reverse execution order; gradient accumulation is plain addition in
/// deterministic (parent-list) order, so two backward passes over the same
/// tape produce bit-identical gradients. A tape is confined to one thread.
class Tape {
public:
    struct Node {
        const char* op;
        std::vector<std::size_t> parents;
        Tensor value;
        Tensor grad;  // empty until touched by backward
        int param_index = -1;
        std::function<void(Tape&, const Node&)> backward;
    };

    /// Constant input; receives a gradient slot but is not tied to a parameter.
    Var leaf(Tensor value);
    /// Leaf bound to a ParamStore entry; accumulate_param_grads targets it.
    Var param(const ParamStore& store, std::size_t index);
    Var param(const ParamStore& store, const std::string& name);

    Var emplace(const char* op, std::vector<std::size_t> parents, Tensor value,
                std::function<void(Tape&, const Node&)> backward);

    const Node& node(std::size_t id) const { return nodes_[id]; }
    const Tensor& value(std::size_t id) const { return nodes_[id].value; }
    std::size_t size() const { return nodes_.size(); }

    /// Accumulates `g` into the gradient slot of node `id`.
    void add_grad(std::size_t id, const Tensor& g);

    /// Reverse replay from `root` (a scalar node). Clears all gradient slots
    /// first, so calling twice yields identical results.
    void backward(const Var& root);

    /// Adds the gradients of parameter leaves into their store accumulators,
    /// in leaf creation order.
    void accumulate_param_grads(ParamStore& store) const;

    const Tensor& grad(const Var& v) const { return nodes_[v.id()].grad; }

private:
    std::vector<Node> nodes_;
};

// ---- tape ops --------------------------------------------------------------

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
/// x [R x C] + row vector b [C].
Var add_rowvec(Var x, Var b);
Var softmax(Var x, std::size_t axis);
Var layer_norm(Var x, Var gain, Var bias, double eps);
Var exp(Var a);
Var softplus(Var a);
Var silu(Var a);
Var gelu(Var a);
Var zoh_phi1(Var z);

/// out[l,d,n] = lhs[l,d] * rhs[d,n]
Var bcast_mul_ld_dn(Var lhs, Var rhs);
/// out[l,d,n] = lhs[l,d] * rhs[l,n]
Var bcast_mul_ld_ln(Var lhs, Var rhs);
/// out[l,d,n] = lhs[l,d,n] * rhs[l,d]
Var bcast_mul_ldn_ld(Var lhs, Var rhs);

Var scan(Var abar, Var bu);
Var output_project(Var h, Var c_seq, Var d_skip, Var u);
Var depthwise_conv2d(Var x, Var weights, std::size_t dilation);

/// Bijective element gather: out.data[i] = in.data[(*map)[i]].
Var reindex(Var x, std::shared_ptr<const std::vector<std::size_t>> map, Shape out_shape);
Var reshape(Var x, Shape shape);

/// h [L x D x N] -> channel slice [L x N].
Var select_channel(Var h, std::size_t channel);
/// Inverse of select_channel over all channels.
Var stack_channels(const std::vector<Var>& slices);
/// Stacks length-N vectors into [B x N].
Var stack_rows(const std::vector<Var>& rows);
/// Column means: [R x C] -> [C].
Var mean_rows(Var x);
Var sum_all(Var x);

Var sample_state(Var h_seq, Var pos);

/// Parameter handles for the retention tape op; presence matches the
/// mode/weight-sharing flags of the prototype config.
struct AdaptorTVars {
    std::optional<Var> phi_p_w, phi_p_b, phi_c_w, phi_c_b, shared_c;
};

/// `proto` supplies k/sequences/mode/causal/weight_sharing/static_offsets;
/// tensors are taken from `vars`.
Var retain(Var h_seq, const AdaptorTVars& vars, const AdaptorTParams& proto,
           std::size_t seq_index);

/// Mean cross-entropy over a batch of logits [B x C] with integer labels.
Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels);

// ---- finite-difference checking ---------------------------------------------

struct FdOptions {
    double step = 1e-6;
    std::size_t max_coords = 64;  // per parameter
    std::uint64_t seed = 0;
    bool trainable_only = false;
};

/// Central-difference check of a scalar composite against its accumulated
/// analytic gradients. `loss_fn(true)` must compute the loss and add
/// gradients into `store`; `loss_fn(false)` just evaluates the loss.
/// Returns the worst relative deviation, with denominator
/// max(|analytic|, |numeric|, 1e-8). Throws DomainError on non-finite loss.
double fd_check(const std::function<double(bool)>& loss_fn, ParamStore& store,
                const FdOptions& opts = {});

// ---- optimizers --------------------------------------------------------------

void sgd_step(ParamStore& store, double lr);

struct AdamWConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

/// Decoupled weight decay Adam. Moment buffers are lazily created per entry;
/// updates run in registration order.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}
    void step(ParamStore& store);
    long step_count() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

}  // namespace vssm
