#include "vssm/adaptor_t.hpp"

#include <algorithm>
#include <cmath>

namespace vssm {

SelectionMode selection_mode_from_string(const std::string& name) {
    if (name == "learnable") return SelectionMode::learnable;
    if (name == "static") return SelectionMode::static_offsets;
    throw ConfigError("unknown adaptor_t mode: " + name);
}

const char* selection_mode_name(SelectionMode mode) {
    return mode == SelectionMode::learnable ? "learnable" : "static";
}

void AdaptorTParams::validate(std::size_t state_dim) const {
    if (k == 0 || sequences == 0) throw ConfigError("adaptor_t: k and sequences must be >= 1");
    const std::size_t ks = k * sequences;
    auto expect = [&](const Tensor& t, const Shape& s, const char* name) {
        if (t.shape() != s) {
            throw ShapeError(std::string("adaptor_t: ") + name + " has shape " + t.shape_str() +
                             ", expected " + shape_to_string(s));
        }
    };
    if (mode == SelectionMode::learnable) {
        expect(phi_p_w, {state_dim, ks}, "phi_p_w");
        expect(phi_p_b, {ks}, "phi_p_b");
    } else {
        if (static_offsets.size() != k) {
            throw ConfigError("adaptor_t: static_offsets must have length k");
        }
        for (long o : static_offsets) {
            if (o >= 0) throw ConfigError("adaptor_t: static offsets must be strictly negative");
        }
    }
    if (weight_sharing) {
        expect(shared_c, {sequences, k}, "shared_c");
    } else {
        expect(phi_c_w, {state_dim, ks}, "phi_c_w");
        expect(phi_c_b, {ks}, "phi_c_b");
    }
}

AdaptorTParams make_adaptor_t(std::size_t k, std::size_t sequences, std::size_t state_dim,
                              SelectionMode mode, bool causal, bool weight_sharing,
                              std::vector<long> static_offsets) {
    AdaptorTParams p;
    p.k = k;
    p.sequences = sequences;
    p.mode = mode;
    p.causal = causal;
    p.weight_sharing = weight_sharing;
    const std::size_t ks = k * sequences;
    if (mode == SelectionMode::learnable) {
        p.phi_p_w = Tensor({state_dim, ks});
        p.phi_p_b = Tensor({ks});
    } else {
        if (static_offsets.empty()) {
            for (std::size_t i = 0; i < k; ++i) static_offsets.push_back(-static_cast<long>(i) - 1);
        }
        p.static_offsets = std::move(static_offsets);
    }
    if (weight_sharing) {
        p.shared_c = Tensor({sequences, k});
    } else {
        p.phi_c_w = Tensor({state_dim, ks});
        p.phi_c_b = Tensor({ks});
    }
    p.validate(state_dim);
    return p;
}

namespace {

void check_state_vec(const Tensor& h_t, const AdaptorTParams& params, std::size_t seq_index,
                     const char* what) {
    if (h_t.rank() != 1) throw ShapeError(std::string(what) + ": state must be a vector");
    if (seq_index >= params.sequences) {
        throw ShapeError(std::string(what) + ": sequence index " + std::to_string(seq_index) +
                         " out of range for S=" + std::to_string(params.sequences));
    }
}

// logits[j] = h_t . w[:, s*K + j] + b[s*K + j]
void linear_slice(const Tensor& h_t, const Tensor& w, const Tensor& b, std::size_t offset,
                  std::size_t count, double* out) {
    const std::size_t n = h_t.extent(0), cols = w.extent(1);
    for (std::size_t j = 0; j < count; ++j) {
        double acc = b[offset + j];
        for (std::size_t i = 0; i < n; ++i) acc += h_t[i] * w.data()[i * cols + offset + j];
        out[j] = acc;
    }
}

}  // namespace

Tensor predict_positions(const Tensor& h_t, const AdaptorTParams& params, std::size_t seq_index,
                         std::size_t t, std::size_t len) {
    check_state_vec(h_t, params, seq_index, "predict_positions");
    if (t >= len) throw DomainError("predict_positions: t out of range");
    params.validate(h_t.extent(0));
    if (params.mode != SelectionMode::learnable) {
        throw ContractError("predict_positions: requires learnable mode");
    }
    Tensor p({params.k});
    linear_slice(h_t, params.phi_p_w, params.phi_p_b, seq_index * params.k, params.k, p.data());
    const double range = params.causal ? static_cast<double>(t) : static_cast<double>(len - 1);
    for (std::size_t j = 0; j < params.k; ++j) p[j] = sigmoid_scalar(p[j]) * range;
    ensure_finite(p, "predict_positions");
    return p;
}

Tensor predict_coeffs(const Tensor& h_t, const AdaptorTParams& params, std::size_t seq_index) {
    check_state_vec(h_t, params, seq_index, "predict_coeffs");
    Tensor logits({params.k});
    if (params.weight_sharing) {
        for (std::size_t j = 0; j < params.k; ++j) logits[j] = params.shared_c(seq_index, j);
    } else {
        linear_slice(h_t, params.phi_c_w, params.phi_c_b, seq_index * params.k, params.k,
                     logits.data());
    }
    return softmax(logits, 0);
}

Tensor sample_state(const Tensor& h_seq, double pos) {
    if (h_seq.rank() != 2) throw ShapeError("sample_state: h_seq must be [L x N]");
    const std::size_t l = h_seq.extent(0), n = h_seq.extent(1);
    const double clamped = std::clamp(pos, 0.0, static_cast<double>(l - 1));
    const std::size_t lo = static_cast<std::size_t>(clamped);
    const double frac = clamped - static_cast<double>(lo);
    Tensor out({n});
    if (frac == 0.0) {
        for (std::size_t i = 0; i < n; ++i) out[i] = h_seq(lo, i);
        return out;
    }
    const std::size_t hi = lo + 1;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = (1.0 - frac) * h_seq(lo, i) + frac * h_seq(hi, i);
    }
    return out;
}

Tensor retain(const Tensor& h_seq, const AdaptorTParams& params, std::size_t seq_index) {
    if (h_seq.rank() != 2) throw ShapeError("retain: h_seq must be [L x N]");
    params.validate(h_seq.extent(1));
    if (seq_index >= params.sequences) {
        throw ShapeError("retain: sequence index out of range");
    }
    const std::size_t l = h_seq.extent(0), n = h_seq.extent(1);
    Tensor out(h_seq.shape());
    Tensor h_t({n});
    for (std::size_t t = 0; t < l; ++t) {
        for (std::size_t i = 0; i < n; ++i) h_t[i] = h_seq(t, i);
        const Tensor coeffs = predict_coeffs(h_t, params, seq_index);
        Tensor positions({params.k});
        if (params.mode == SelectionMode::learnable) {
            positions = predict_positions(h_t, params, seq_index, t, l);
        } else {
            for (std::size_t j = 0; j < params.k; ++j) {
                const double raw = static_cast<double>(t) +
                                   static_cast<double>(params.static_offsets[j]);
                positions[j] = std::clamp(raw, 0.0, static_cast<double>(t));
            }
        }
        for (std::size_t i = 0; i < n; ++i) out(t, i) = h_t[i];
        for (std::size_t j = 0; j < params.k; ++j) {
            const Tensor sampled = sample_state(h_seq, positions[j]);
            for (std::size_t i = 0; i < n; ++i) out(t, i) += coeffs[j] * sampled[i];
        }
    }
    ensure_finite(out, "retain");
    return out;
}

Tensor retain_hidden(const Tensor& h, const AdaptorTParams& params, std::size_t seq_index) {
    if (h.rank() != 3) throw ShapeError("retain_hidden: expected [L x D x N], got " + h.shape_str());
    const std::size_t l = h.extent(0), d = h.extent(1), n = h.extent(2);
    Tensor out(h.shape());
    Tensor slice({l, n});
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t t = 0; t < l; ++t)
            for (std::size_t i = 0; i < n; ++i) slice(t, i) = h(t, c, i);
        const Tensor retained = retain(slice, params, seq_index);
        for (std::size_t t = 0; t < l; ++t)
            for (std::size_t i = 0; i < n; ++i) out(t, c, i) = retained(t, i);
    }
    return out;
}

}  // namespace vssm
