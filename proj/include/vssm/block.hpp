#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vssm/adaptor_s.hpp"
#include "vssm/adaptor_t.hpp"
#include "vssm/grad.hpp"
#include "vssm/scan_routes.hpp"
#include "vssm/ssm.hpp"
#include "vssm/tensor.hpp"

namespace vssm {

enum class Insertion { none, sequential, parallel };

Insertion insertion_from_string(const std::string& name);
const char* insertion_name(Insertion form);

struct AdaptorTConfig {
    std::size_t k = 4;
    SelectionMode mode = SelectionMode::learnable;
    bool causal = true;
    bool weight_sharing = false;
    std::vector<long> static_offsets;  // empty -> {-1, ..., -K}
};

struct AdaptorSConfig {
    struct ScaleSpec {
        std::size_t size = 3;
        std::size_t dilation = 1;
    };
    std::vector<ScaleSpec> scales{{3, 1}, {3, 2}};
    CombineRule combine = CombineRule::sum;
    bool residual = true;
};

/// Composition descriptor for one vision layer: scan routes, adaptors,
/// insertion form, normalization and FFN sizes.
struct BlockConfig {
    std::size_t dim = 0;
    std::size_t state = 8;
    std::vector<RouteKind> routes{RouteKind::row_forward, RouteKind::row_backward};
    MergeRule merge = MergeRule::mean;
    std::optional<AdaptorTConfig> adaptor_t;
    std::optional<AdaptorSConfig> adaptor_s;
    Insertion insertion = Insertion::none;
    std::size_t ffn_ratio = 4;
    double norm_eps = 1e-5;
    ZohMode zoh = ZohMode::exact;

    /// Enforces: insertion == none iff both adaptors absent.
    void validate() const;
};

/// Returns `block` with the requested insertion form. The adaptors must be
/// configured; ConfigError otherwise.
BlockConfig insert_adaptor(BlockConfig block, Insertion form);

struct BackboneConfig {
    std::size_t in_channels = 3;
    std::size_t patch_size = 4;
    std::size_t num_classes = 2;
    std::vector<std::size_t> stage_dims{48, 96, 192, 384};
    std::vector<std::size_t> stage_depths{2, 2, 6, 2};
    // Settings shared by the blocks of every stage.
    std::size_t state = 8;
    std::vector<RouteKind> routes{RouteKind::row_forward, RouteKind::row_backward};
    MergeRule merge = MergeRule::mean;
    std::optional<AdaptorTConfig> adaptor_t;
    std::optional<AdaptorSConfig> adaptor_s;
    Insertion insertion = Insertion::none;
    std::size_t ffn_ratio = 4;
    double norm_eps = 1e-5;
    ZohMode zoh = ZohMode::exact;

    /// Four stages; each downsampling halves H,W and doubles the channels.
    void validate() const;
    BlockConfig block_config(std::size_t stage) const;
};

// ---- parameters ------------------------------------------------------------

enum class InitMode { zero, random };

InitMode init_mode_from_string(const std::string& name);
const char* init_mode_name(InitMode mode);

/// Registers (and initializes) the parameters of one block under
/// "<prefix>." names. `adaptor_init` selects zero vs Kaiming/Xavier random
/// initialization for the adaptor tensors; the base weights are always
/// randomly initialized (except the structured pieces: a_diag = -(n+1),
/// delta bias so softplus(bias) ~ 0.1, layer-norm gains 1, d_skip 1).
/// Every tensor draws from a splitmix64 stream keyed by (seed, name), so
/// initialization does not depend on registration order.
void register_block_params(ParamStore& store, const std::string& prefix, const BlockConfig& cfg,
                           std::uint64_t seed, InitMode adaptor_init);

void register_backbone_params(ParamStore& store, const BackboneConfig& cfg, std::uint64_t seed,
                              InitMode adaptor_init);

/// True for parameters belonging to either adaptor ("/at." or "/as."
/// name segments).
bool is_adaptor_param(const std::string& name);
bool is_head_param(const std::string& name);

// ---- forward ----------------------------------------------------------------

/// SS2D: for each route, permute to a sequence, generate selective
/// parameters, discretize, solve the two-phase recurrence (with adaptor
/// hooks when sequential insertion engages them), restore the 2D layout,
/// then merge the per-route outputs. With parallel insertion the adaptors
/// do not run here; block_forward adds them as a separate branch.
Tensor ss2d_forward(const Tensor& x2d, const ParamStore& store, const std::string& prefix,
                    const BlockConfig& cfg);

/// Pre-norm residual layer: y = x + SS2D(LN(x)); out = y + FFN(LN(y)).
/// Parallel insertion adds the zero-initialized adaptor branch to y.
Tensor block_forward(const Tensor& x2d, const ParamStore& store, const std::string& prefix,
                     const BlockConfig& cfg);

/// Patch embedding, four block stages with 2x2 patch-merge downsampling
/// between them, global average pooling and the linear head.
Tensor backbone_forward(const Tensor& image, const ParamStore& store, const BackboneConfig& cfg);

// Tape versions used for training; the plain functions above wrap these.
Var ss2d_forward_t(Tape& tape, Var x2d, const ParamStore& store, const std::string& prefix,
                   const BlockConfig& cfg);
Var block_forward_t(Tape& tape, Var x2d, const ParamStore& store, const std::string& prefix,
                    const BlockConfig& cfg);
Var backbone_forward_t(Tape& tape, Var image, const ParamStore& store, const BackboneConfig& cfg);

}  // namespace vssm
