#include "vssm/grad.hpp"

#include <algorithm>
#include <cmath>

#include "vssm/adaptor_s.hpp"
#include "vssm/rng.hpp"
#include "vssm/ssm.hpp"

namespace vssm {

// ---- parameter registry ------------------------------------------------

std::size_t ParamStore::add(const std::string& name, Tensor init, bool trainable) {
    if (index_.count(name)) throw ContractError("param registered twice: " + name);
    const std::size_t id = entries_.size();
    Entry e;
    e.name = name;
    e.grad = Tensor(init.shape());
    e.value = std::move(init);
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    index_.emplace(name, id);
    return id;
}

std::size_t ParamStore::find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) != 0; }

ParamStore::Entry& ParamStore::at(const std::string& name) { return entries_[find(name)]; }
const ParamStore::Entry& ParamStore::at(const std::string& name) const {
    return entries_[find(name)];
}

void ParamStore::zero_grads() {
    for (auto& e : entries_) std::fill(e.grad.data(), e.grad.data() + e.grad.size(), 0.0);
}

std::size_t ParamStore::scalar_count(bool trainable_only) const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
        if (!trainable_only || e.trainable) n += e.value.size();
    }
    return n;
}

// ---- standalone vjps -----------------------------------------------------

std::pair<Tensor, Tensor> vjp_matmul(const Tensor& a, const Tensor& b, const Tensor& gy) {
    return {matmul(gy, transpose(b)), matmul(transpose(a), gy)};
}

Tensor vjp_softmax(const Tensor& y, const Tensor& gy, std::size_t axis) {
    ensure_same_shape(y, gy, "vjp_softmax");
    const std::size_t k = y.extent(axis);
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < y.rank(); ++d) inner *= y.extent(d);
    const std::size_t outer = y.size() / (k * inner);
    Tensor gx(y.shape());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * k * inner + i;
            double dot = 0.0;
            for (std::size_t j = 0; j < k; ++j) dot += gy[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < k; ++j) {
                const std::size_t idx = base + j * inner;
                gx[idx] = y[idx] * (gy[idx] - dot);
            }
        }
    }
    return gx;
}

std::tuple<Tensor, Tensor, Tensor> vjp_layer_norm(const Tensor& x, const Tensor& gain, double eps,
                                                  const Tensor& gy) {
    const std::size_t d = x.extent(x.rank() - 1);
    const std::size_t rows = x.size() / d;
    Tensor gx(x.shape()), ggain({d}), gbias({d});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * d;
        const double* gr = gy.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);

        double mean_gxhat = 0.0, mean_gxhat_xhat = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (xr[j] - mean) * inv;
            const double gxhat = gr[j] * gain[j];
            mean_gxhat += gxhat;
            mean_gxhat_xhat += gxhat * xhat;
            ggain[j] += gr[j] * xhat;
            gbias[j] += gr[j];
        }
        mean_gxhat /= static_cast<double>(d);
        mean_gxhat_xhat /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            const double xhat = (xr[j] - mean) * inv;
            const double gxhat = gr[j] * gain[j];
            gx[r * d + j] = inv * (gxhat - mean_gxhat - xhat * mean_gxhat_xhat);
        }
    }
    return {std::move(gx), std::move(ggain), std::move(gbias)};
}

std::pair<Tensor, Tensor> vjp_scan(const Tensor& abar, const Tensor& bu, const Tensor& h,
                                   const Tensor& gh) {
    ensure_same_shape(abar, gh, "vjp_scan");
    const std::size_t l = abar.extent(0);
    const std::size_t dn = abar.size() / l;
    Tensor gabar(abar.shape()), gbu(bu.shape());
    std::vector<double> lambda(dn, 0.0);
    for (std::size_t t = l; t-- > 0;) {
        const std::size_t o = t * dn;
        for (std::size_t i = 0; i < dn; ++i) {
            // lambda currently holds abar_{t+1} * lambda_{t+1} (zero at t = L-1)
            lambda[i] += gh[o + i];
            gbu[o + i] = lambda[i];
            gabar[o + i] = (t == 0) ? 0.0 : lambda[i] * h[o - dn + i];
        }
        if (t > 0) {
            for (std::size_t i = 0; i < dn; ++i) lambda[i] *= abar[o + i];
        }
    }
    return {std::move(gabar), std::move(gbu)};
}

std::tuple<Tensor, Tensor, Tensor, Tensor> vjp_output_project(const Tensor& h, const Tensor& c_seq,
                                                              const Tensor& d_skip, const Tensor& u,
                                                              const Tensor& gy) {
    const std::size_t l = h.extent(0), d = h.extent(1), n = h.extent(2);
    const bool per_channel = c_seq.rank() == 3;
    Tensor gh(h.shape()), gc(c_seq.shape()), gd(d_skip.shape()), gu(u.shape());
    for (std::size_t t = 0; t < l; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            const double g = gy(t, j);
            for (std::size_t k = 0; k < n; ++k) {
                const double c = per_channel ? c_seq(t, j, k) : c_seq(t, k);
                gh(t, j, k) = g * c;
                if (per_channel) {
                    gc(t, j, k) = g * h(t, j, k);
                } else {
                    gc(t, k) += g * h(t, j, k);
                }
            }
            gd[j] += g * u(t, j);
            gu(t, j) = g * d_skip[j];
        }
    }
    return {std::move(gh), std::move(gc), std::move(gd), std::move(gu)};
}

std::pair<Tensor, Tensor> vjp_depthwise_conv2d(const Tensor& x, const Tensor& weights,
                                               std::size_t dilation, const Tensor& gy) {
    const std::size_t h = x.extent(0), w = x.extent(1), d = x.extent(2);
    const std::size_t kh = weights.extent(1), kw = weights.extent(2);
    const long ch = static_cast<long>(kh / 2), cw = static_cast<long>(kw / 2);
    const long dil = static_cast<long>(dilation);
    Tensor gx(x.shape()), gw(weights.shape());
    for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
            for (std::size_t c = 0; c < d; ++c) {
                const double g = gy(i, j, c);
                for (std::size_t ki = 0; ki < kh; ++ki) {
                    const long si = static_cast<long>(i) + (static_cast<long>(ki) - ch) * dil;
                    if (si < 0 || si >= static_cast<long>(h)) continue;
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                        const long sj = static_cast<long>(j) + (static_cast<long>(kj) - cw) * dil;
                        if (sj < 0 || sj >= static_cast<long>(w)) continue;
                        const std::size_t ui = static_cast<std::size_t>(si);
                        const std::size_t uj = static_cast<std::size_t>(sj);
                        gw(c, ki, kj) += g * x(ui, uj, c);
                        gx(ui, uj, c) += g * weights(c, ki, kj);
                    }
                }
            }
        }
    }
    return {std::move(gx), std::move(gw)};
}

std::pair<Tensor, double> vjp_sample_state(const Tensor& h_seq, double pos, const Tensor& gout) {
    const std::size_t l = h_seq.extent(0), n = h_seq.extent(1);
    Tensor gh(h_seq.shape());
    const double clamped = std::clamp(pos, 0.0, static_cast<double>(l - 1));
    const bool was_clamped = clamped != pos;
    const std::size_t lo = static_cast<std::size_t>(clamped);
    const double frac = clamped - static_cast<double>(lo);
    double gpos = 0.0;
    if (frac == 0.0) {
        for (std::size_t i = 0; i < n; ++i) gh(lo, i) += gout[i];
        // ceil == floor at an integral position, so the position gradient is 0.
    } else {
        const std::size_t hi = lo + 1;
        for (std::size_t i = 0; i < n; ++i) {
            gh(lo, i) += (1.0 - frac) * gout[i];
            gh(hi, i) += frac * gout[i];
            gpos += (h_seq(hi, i) - h_seq(lo, i)) * gout[i];
        }
        if (was_clamped) gpos = 0.0;
    }
    return {std::move(gh), gpos};
}

RetainGrads vjp_retain(const Tensor& h_seq, const AdaptorTParams& params, std::size_t seq_index,
                       const Tensor& gout) {
    params.validate(h_seq.extent(1));
    ensure_same_shape(h_seq, gout, "vjp_retain");
    const std::size_t l = h_seq.extent(0), n = h_seq.extent(1), k = params.k;
    const std::size_t off = seq_index * k;
    const bool learnable = params.mode == SelectionMode::learnable;

    RetainGrads g;
    g.h_seq = Tensor(h_seq.shape());
    if (learnable) {
        g.phi_p_w = Tensor(params.phi_p_w.shape());
        g.phi_p_b = Tensor(params.phi_p_b.shape());
    }
    if (params.weight_sharing) {
        g.shared_c = Tensor(params.shared_c.shape());
    } else {
        g.phi_c_w = Tensor(params.phi_c_w.shape());
        g.phi_c_b = Tensor(params.phi_c_b.shape());
    }

    Tensor h_t({n}), gout_t({n});
    const std::size_t cols = learnable ? params.phi_p_w.extent(1) : 0;
    for (std::size_t t = 0; t < l; ++t) {
        for (std::size_t i = 0; i < n; ++i) {
            h_t[i] = h_seq(t, i);
            gout_t[i] = gout(t, i);
        }
        // Recompute the forward intermediates for step t.
        const Tensor coeffs = predict_coeffs(h_t, params, seq_index);
        std::vector<double> raw_logits(k, 0.0), sig(k, 0.0), positions(k, 0.0);
        const double range =
            params.causal ? static_cast<double>(t) : static_cast<double>(l - 1);
        if (learnable) {
            for (std::size_t j = 0; j < k; ++j) {
                double acc = params.phi_p_b[off + j];
                for (std::size_t i = 0; i < n; ++i)
                    acc += h_t[i] * params.phi_p_w.data()[i * cols + off + j];
                raw_logits[j] = acc;
                sig[j] = sigmoid_scalar(acc);
                positions[j] = sig[j] * range;
            }
        } else {
            for (std::size_t j = 0; j < k; ++j) {
                const double raw =
                    static_cast<double>(t) + static_cast<double>(params.static_offsets[j]);
                positions[j] = std::clamp(raw, 0.0, static_cast<double>(t));
            }
        }

        // Residual term.
        for (std::size_t i = 0; i < n; ++i) g.h_seq(t, i) += gout_t[i];

        Tensor gcoeff({k});
        for (std::size_t j = 0; j < k; ++j) {
            const Tensor sampled = sample_state(h_seq, positions[j]);
            for (std::size_t i = 0; i < n; ++i) gcoeff[j] += gout_t[i] * sampled[i];
            // Upstream for this sample is coeff_j * gout_t.
            Tensor gsample({n});
            for (std::size_t i = 0; i < n; ++i) gsample[i] = coeffs[j] * gout_t[i];
            auto [gh_sample, gpos] = vjp_sample_state(h_seq, positions[j], gsample);
            for (std::size_t i = 0; i < g.h_seq.size(); ++i) g.h_seq[i] += gh_sample[i];
            if (learnable && gpos != 0.0) {
                const double gr = gpos * sig[j] * (1.0 - sig[j]) * range;
                g.phi_p_b[off + j] += gr;
                for (std::size_t i = 0; i < n; ++i) {
                    g.phi_p_w.data()[i * cols + off + j] += gr * h_t[i];
                    g.h_seq(t, i) += gr * params.phi_p_w.data()[i * cols + off + j];
                }
            }
        }

        // Coefficients came through a softmax.
        const Tensor glogits = vjp_softmax(coeffs, gcoeff, 0);
        if (params.weight_sharing) {
            for (std::size_t j = 0; j < k; ++j) g.shared_c(seq_index, j) += glogits[j];
        } else {
            const std::size_t ccols = params.phi_c_w.extent(1);
            for (std::size_t j = 0; j < k; ++j) {
                g.phi_c_b[off + j] += glogits[j];
                for (std::size_t i = 0; i < n; ++i) {
                    g.phi_c_w.data()[i * ccols + off + j] += glogits[j] * h_t[i];
                    g.h_seq(t, i) += glogits[j] * params.phi_c_w.data()[i * ccols + off + j];
                }
            }
        }
    }
    return g;
}

double silu_grad_scalar(double x) {
    const double s = sigmoid_scalar(x);
    return s + x * s * (1.0 - s);
}

double gelu_grad_scalar(double x) {
    const double phi = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
    const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
    return cdf + x * phi;
}

double softplus_grad_scalar(double x) { return sigmoid_scalar(x); }

double zoh_phi1_grad_scalar(double z) {
    const double az = std::fabs(z);
    if (az < kZohLimitThreshold) return 0.0;  // constant limit branch
    if (az < 1e-4) {
        // series: 1/2 + z/3 + z^2/8 + z^3/30, avoids cancellation
        return 0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0;
    }
    return (std::exp(z) * (z - 1.0) + 1.0) / (z * z);
}

// ---- tape -------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor value) {
    nodes_.push_back(Node{"leaf", {}, std::move(value), Tensor(), -1, nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(const ParamStore& store, std::size_t index) {
    nodes_.push_back(
        Node{"param", {}, store.entry(index).value, Tensor(), static_cast<int>(index), nullptr});
    return Var(this, nodes_.size() - 1);
}

Var Tape::param(const ParamStore& store, const std::string& name) {
    return param(store, store.find(name));
}

Var Tape::emplace(const char* op, std::vector<std::size_t> parents, Tensor value,
                  std::function<void(Tape&, const Node&)> backward) {
    nodes_.push_back(Node{op, std::move(parents), std::move(value), Tensor(), -1, std::move(backward)});
    return Var(this, nodes_.size() - 1);
}

void Tape::add_grad(std::size_t id, const Tensor& g) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    ensure_same_shape(n.grad, g, "tape gradient");
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
}

void Tape::backward(const Var& root) {
    if (root.tape() != this) throw ContractError("backward: var belongs to another tape");
    if (nodes_[root.id()].value.size() != 1) {
        throw ContractError("backward: root must be scalar");
    }
    for (auto& n : nodes_) n.grad = Tensor();
    add_grad(root.id(), Tensor::full(nodes_[root.id()].value.shape(), 1.0));
    for (std::size_t id = root.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(*this, n);
    }
}

void Tape::accumulate_param_grads(ParamStore& store) const {
    for (const auto& n : nodes_) {
        if (n.param_index < 0 || n.grad.empty()) continue;
        auto& acc = store.entry(static_cast<std::size_t>(n.param_index)).grad;
        ensure_same_shape(acc, n.grad, "param gradient");
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += n.grad[i];
    }
}

// ---- tape ops -----------------------------------------------------------------

namespace {

Tape* require_same_tape(std::initializer_list<Var> vars) {
    Tape* t = nullptr;
    for (const Var& v : vars) {
        if (!v.valid()) throw ContractError("op on default-constructed Var");
        if (t == nullptr) t = v.tape();
        if (v.tape() != t) throw ContractError("op mixes vars from different tapes");
    }
    return t;
}

}  // namespace

Var matmul(Var a, Var b) {
    Tape* t = require_same_tape({a, b});
    Tensor y = matmul(a.value(), b.value());
    return t->emplace("matmul", {a.id(), b.id()}, std::move(y),
                      [](Tape& tp, const Tape::Node& n) {
                          auto [ga, gb] = vjp_matmul(tp.value(n.parents[0]), tp.value(n.parents[1]),
                                                     n.grad);
                          tp.add_grad(n.parents[0], ga);
                          tp.add_grad(n.parents[1], gb);
                      });
}

Var transpose(Var a) {
    Tape* t = require_same_tape({a});
    return t->emplace("transpose", {a.id()}, transpose(a.value()),
                      [](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], transpose(n.grad));
                      });
}

Var add(Var a, Var b) {
    Tape* t = require_same_tape({a, b});
    ensure_same_shape(a.value(), b.value(), "add");
    return t->emplace("add", {a.id(), b.id()}, add(a.value(), b.value()),
                      [](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], n.grad);
                          tp.add_grad(n.parents[1], n.grad);
                      });
}

Var sub(Var a, Var b) {
    Tape* t = require_same_tape({a, b});
    ensure_same_shape(a.value(), b.value(), "sub");
    return t->emplace("sub", {a.id(), b.id()}, sub(a.value(), b.value()),
                      [](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], n.grad);
                          tp.add_grad(n.parents[1], scale(n.grad, -1.0));
                      });
}

Var mul(Var a, Var b) {
    Tape* t = require_same_tape({a, b});
    ensure_same_shape(a.value(), b.value(), "mul");
    return t->emplace("mul", {a.id(), b.id()}, mul(a.value(), b.value()),
                      [](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], mul(n.grad, tp.value(n.parents[1])));
                          tp.add_grad(n.parents[1], mul(n.grad, tp.value(n.parents[0])));
                      });
}

Var scale(Var a, double c) {
    Tape* t = require_same_tape({a});
    return t->emplace("scale", {a.id()}, scale(a.value(), c),
                      [c](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], scale(n.grad, c));
                      });
}

Var add_rowvec(Var x, Var b) {
    Tape* t = require_same_tape({x, b});
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (xv.rank() != 2 || bv.rank() != 1 || bv.extent(0) != xv.extent(1)) {
        throw ShapeError("add_rowvec: got " + xv.shape_str() + " and " + bv.shape_str());
    }
    Tensor y(xv.shape());
    for (std::size_t r = 0; r < xv.extent(0); ++r)
        for (std::size_t c = 0; c < xv.extent(1); ++c) y(r, c) = xv(r, c) + bv[c];
    ensure_finite(y, "add_rowvec");
    return t->emplace("add_rowvec", {x.id(), b.id()}, std::move(y),
                      [](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], n.grad);
                          const Tensor& g = n.grad;
                          Tensor gb({g.extent(1)});
                          for (std::size_t r = 0; r < g.extent(0); ++r)
                              for (std::size_t c = 0; c < g.extent(1); ++c) gb[c] += g(r, c);
                          tp.add_grad(n.parents[1], gb);
                      });
}

Var softmax(Var x, std::size_t axis) {
    Tape* t = require_same_tape({x});
    return t->emplace("softmax", {x.id()}, softmax(x.value(), axis),
                      [axis](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], vjp_softmax(n.value, n.grad, axis));
                      });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Tape* t = require_same_tape({x, gain, bias});
    return t->emplace("layer_norm", {x.id(), gain.id(), bias.id()},
                      layer_norm(x.value(), gain.value(), bias.value(), eps),
                      [eps](Tape& tp, const Tape::Node& n) {
                          auto [gx, ggain, gbias] = vjp_layer_norm(
                              tp.value(n.parents[0]), tp.value(n.parents[1]), eps, n.grad);
                          tp.add_grad(n.parents[0], gx);
                          tp.add_grad(n.parents[1], ggain);
                          tp.add_grad(n.parents[2], gbias);
                      });
}

namespace {

template <typename Fwd, typename Deriv>
Var unary_op(const char* name, Var a, Fwd fwd, Deriv deriv) {
    Tape* t = require_same_tape({a});
    return t->emplace(name, {a.id()}, fwd(a.value()),
                      [deriv](Tape& tp, const Tape::Node& n) {
                          const Tensor& x = tp.value(n.parents[0]);
                          Tensor gx(x.shape());
                          for (std::size_t i = 0; i < x.size(); ++i)
                              gx[i] = deriv(x[i]) * n.grad[i];
                          tp.add_grad(n.parents[0], gx);
                      });
}

}  // namespace

Var exp(Var a) {
    Tape* t = require_same_tape({a});
    return t->emplace("exp", {a.id()}, exp(a.value()),
                      [](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], mul(n.grad, n.value));
                      });
}

Var softplus(Var a) {
    return unary_op("softplus", a, [](const Tensor& x) { return softplus(x); },
                    softplus_grad_scalar);
}

Var silu(Var a) {
    return unary_op("silu", a, [](const Tensor& x) { return silu(x); }, silu_grad_scalar);
}

Var gelu(Var a) {
    return unary_op("gelu", a, [](const Tensor& x) { return gelu(x); }, gelu_grad_scalar);
}

Var zoh_phi1(Var z) {
    return unary_op("zoh_phi1", z,
                    [](const Tensor& x) {
                        Tensor y(x.shape());
                        for (std::size_t i = 0; i < x.size(); ++i) y[i] = zoh_phi1_scalar(x[i]);
                        ensure_finite(y, "zoh_phi1");
                        return y;
                    },
                    zoh_phi1_grad_scalar);
}

Var bcast_mul_ld_dn(Var lhs, Var rhs) {
    Tape* t = require_same_tape({lhs, rhs});
    const Tensor& a = lhs.value();
    const Tensor& b = rhs.value();
    if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
        throw ShapeError("bcast_mul_ld_dn: got " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t l = a.extent(0), d = a.extent(1), n = b.extent(1);
    Tensor y({l, d, n});
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < n; ++k) y(i, j, k) = a(i, j) * b(j, k);
    ensure_finite(y, "bcast_mul_ld_dn");
    return t->emplace("bcast_mul_ld_dn", {lhs.id(), rhs.id()}, std::move(y),
                      [](Tape& tp, const Tape::Node& n2) {
                          const Tensor& a2 = tp.value(n2.parents[0]);
                          const Tensor& b2 = tp.value(n2.parents[1]);
                          const std::size_t l2 = a2.extent(0), d2 = a2.extent(1),
                                            n3 = b2.extent(1);
                          Tensor ga(a2.shape()), gb(b2.shape());
                          for (std::size_t i = 0; i < l2; ++i)
                              for (std::size_t j = 0; j < d2; ++j)
                                  for (std::size_t k = 0; k < n3; ++k) {
                                      const double g = n2.grad(i, j, k);
                                      ga(i, j) += g * b2(j, k);
                                      gb(j, k) += g * a2(i, j);
                                  }
                          tp.add_grad(n2.parents[0], ga);
                          tp.add_grad(n2.parents[1], gb);
                      });
}

Var bcast_mul_ld_ln(Var lhs, Var rhs) {
    Tape* t = require_same_tape({lhs, rhs});
    const Tensor& a = lhs.value();
    const Tensor& b = rhs.value();
    if (a.rank() != 2 || b.rank() != 2 || a.extent(0) != b.extent(0)) {
        throw ShapeError("bcast_mul_ld_ln: got " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t l = a.extent(0), d = a.extent(1), n = b.extent(1);
    Tensor y({l, d, n});
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < n; ++k) y(i, j, k) = a(i, j) * b(i, k);
    ensure_finite(y, "bcast_mul_ld_ln");
    return t->emplace("bcast_mul_ld_ln", {lhs.id(), rhs.id()}, std::move(y),
                      [](Tape& tp, const Tape::Node& n2) {
                          const Tensor& a2 = tp.value(n2.parents[0]);
                          const Tensor& b2 = tp.value(n2.parents[1]);
                          const std::size_t l2 = a2.extent(0), d2 = a2.extent(1),
                                            n3 = b2.extent(1);
                          Tensor ga(a2.shape()), gb(b2.shape());
                          for (std::size_t i = 0; i < l2; ++i)
                              for (std::size_t j = 0; j < d2; ++j)
                                  for (std::size_t k = 0; k < n3; ++k) {
                                      const double g = n2.grad(i, j, k);
                                      ga(i, j) += g * b2(i, k);
                                      gb(i, k) += g * a2(i, j);
                                  }
                          tp.add_grad(n2.parents[0], ga);
                          tp.add_grad(n2.parents[1], gb);
                      });
}

Var bcast_mul_ldn_ld(Var lhs, Var rhs) {
    Tape* t = require_same_tape({lhs, rhs});
    const Tensor& a = lhs.value();
    const Tensor& b = rhs.value();
    if (a.rank() != 3 || b.rank() != 2 || a.extent(0) != b.extent(0) ||
        a.extent(1) != b.extent(1)) {
        throw ShapeError("bcast_mul_ldn_ld: got " + a.shape_str() + " and " + b.shape_str());
    }
    const std::size_t l = a.extent(0), d = a.extent(1), n = a.extent(2);
    Tensor y(a.shape());
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < n; ++k) y(i, j, k) = a(i, j, k) * b(i, j);
    ensure_finite(y, "bcast_mul_ldn_ld");
    return t->emplace("bcast_mul_ldn_ld", {lhs.id(), rhs.id()}, std::move(y),
                      [](Tape& tp, const Tape::Node& n2) {
                          const Tensor& a2 = tp.value(n2.parents[0]);
                          const Tensor& b2 = tp.value(n2.parents[1]);
                          const std::size_t l2 = a2.extent(0), d2 = a2.extent(1),
                                            n3 = a2.extent(2);
                          Tensor ga(a2.shape()), gb(b2.shape());
                          for (std::size_t i = 0; i < l2; ++i)
                              for (std::size_t j = 0; j < d2; ++j)
                                  for (std::size_t k = 0; k < n3; ++k) {
                                      const double g = n2.grad(i, j, k);
                                      ga(i, j, k) = g * b2(i, j);
                                      gb(i, j) += g * a2(i, j, k);
                                  }
                          tp.add_grad(n2.parents[0], ga);
                          tp.add_grad(n2.parents[1], gb);
                      });
}

Var scan(Var abar, Var bu) {
    Tape* t = require_same_tape({abar, bu});
    Tensor h = scan_sequential(abar.value(), bu.value());
    return t->emplace("scan", {abar.id(), bu.id()}, std::move(h),
                      [](Tape& tp, const Tape::Node& n) {
                          auto [ga, gb] = vjp_scan(tp.value(n.parents[0]), tp.value(n.parents[1]),
                                                   n.value, n.grad);
                          tp.add_grad(n.parents[0], ga);
                          tp.add_grad(n.parents[1], gb);
                      });
}

Var output_project(Var h, Var c_seq, Var d_skip, Var u) {
    Tape* t = require_same_tape({h, c_seq, d_skip, u});
    Tensor y = output_project(h.value(), c_seq.value(), d_skip.value(), u.value());
    return t->emplace("output_project", {h.id(), c_seq.id(), d_skip.id(), u.id()}, std::move(y),
                      [](Tape& tp, const Tape::Node& n) {
                          auto [gh, gc, gd, gu] = vjp_output_project(
                              tp.value(n.parents[0]), tp.value(n.parents[1]),
                              tp.value(n.parents[2]), tp.value(n.parents[3]), n.grad);
                          tp.add_grad(n.parents[0], gh);
                          tp.add_grad(n.parents[1], gc);
                          tp.add_grad(n.parents[2], gd);
                          tp.add_grad(n.parents[3], gu);
                      });
}

Var depthwise_conv2d(Var x, Var weights, std::size_t dilation) {
    Tape* t = require_same_tape({x, weights});
    Tensor y = depthwise_conv2d(x.value(), weights.value(), dilation);
    return t->emplace("depthwise_conv2d", {x.id(), weights.id()}, std::move(y),
                      [dilation](Tape& tp, const Tape::Node& n) {
                          auto [gx, gw] = vjp_depthwise_conv2d(
                              tp.value(n.parents[0]), tp.value(n.parents[1]), dilation, n.grad);
                          tp.add_grad(n.parents[0], gx);
                          tp.add_grad(n.parents[1], gw);
                      });
}

Var reindex(Var x, std::shared_ptr<const std::vector<std::size_t>> map, Shape out_shape) {
    Tape* t = require_same_tape({x});
    const Tensor& xv = x.value();
    if (map->size() != shape_product(out_shape) || map->size() != xv.size()) {
        throw ShapeError("reindex: map size does not match shapes");
    }
    Tensor y(out_shape);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[(*map)[i]];
    return t->emplace("reindex", {x.id()}, std::move(y),
                      [map](Tape& tp, const Tape::Node& n) {
                          const Tensor& xin = tp.value(n.parents[0]);
                          Tensor gx(xin.shape());
                          for (std::size_t i = 0; i < n.grad.size(); ++i)
                              gx[(*map)[i]] += n.grad[i];
                          tp.add_grad(n.parents[0], gx);
                      });
}

Var reshape(Var x, Shape shape) {
    Tape* t = require_same_tape({x});
    return t->emplace("reshape", {x.id()}, reshape(x.value(), shape),
                      [](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0], reshape(n.grad, tp.value(n.parents[0]).shape()));
                      });
}

Var select_channel(Var h, std::size_t channel) {
    Tape* t = require_same_tape({h});
    const Tensor& hv = h.value();
    if (hv.rank() != 3) throw ShapeError("select_channel: expected rank-3 input");
    const std::size_t l = hv.extent(0), d = hv.extent(1), n = hv.extent(2);
    if (channel >= d) throw ShapeError("select_channel: channel out of range");
    Tensor y({l, n});
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t k = 0; k < n; ++k) y(i, k) = hv(i, channel, k);
    return t->emplace("select_channel", {h.id()}, std::move(y),
                      [channel](Tape& tp, const Tape::Node& node) {
                          const Tensor& hin = tp.value(node.parents[0]);
                          Tensor gh(hin.shape());
                          const std::size_t l2 = hin.extent(0), n2 = hin.extent(2);
                          for (std::size_t i = 0; i < l2; ++i)
                              for (std::size_t k = 0; k < n2; ++k)
                                  gh(i, channel, k) = node.grad(i, k);
                          tp.add_grad(node.parents[0], gh);
                      });
}

Var stack_channels(const std::vector<Var>& slices) {
    if (slices.empty()) throw ShapeError("stack_channels: empty input");
    Tape* t = slices.front().tape();
    std::vector<std::size_t> parents;
    for (const Var& v : slices) {
        if (v.tape() != t) throw ContractError("stack_channels: mixed tapes");
        ensure_same_shape(v.value(), slices.front().value(), "stack_channels");
        parents.push_back(v.id());
    }
    const std::size_t l = slices.front().value().extent(0);
    const std::size_t n = slices.front().value().extent(1);
    const std::size_t d = slices.size();
    Tensor y({l, d, n});
    for (std::size_t j = 0; j < d; ++j) {
        const Tensor& s = slices[j].value();
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t k = 0; k < n; ++k) y(i, j, k) = s(i, k);
    }
    return t->emplace("stack_channels", std::move(parents), std::move(y),
                      [](Tape& tp, const Tape::Node& node) {
                          const std::size_t l2 = node.value.extent(0);
                          const std::size_t d2 = node.value.extent(1);
                          const std::size_t n2 = node.value.extent(2);
                          for (std::size_t j = 0; j < d2; ++j) {
                              Tensor g({l2, n2});
                              for (std::size_t i = 0; i < l2; ++i)
                                  for (std::size_t k = 0; k < n2; ++k) g(i, k) = node.grad(i, j, k);
                              tp.add_grad(node.parents[j], g);
                          }
                      });
}

Var stack_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: empty input");
    Tape* t = rows.front().tape();
    std::vector<std::size_t> parents;
    for (const Var& v : rows) {
        if (v.tape() != t) throw ContractError("stack_rows: mixed tapes");
        if (v.value().rank() != 1) throw ShapeError("stack_rows: expected vectors");
        ensure_same_shape(v.value(), rows.front().value(), "stack_rows");
        parents.push_back(v.id());
    }
    const std::size_t b = rows.size(), n = rows.front().value().extent(0);
    Tensor y({b, n});
    for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < n; ++c) y(r, c) = rows[r].value()[c];
    return t->emplace("stack_rows", std::move(parents), std::move(y),
                      [](Tape& tp, const Tape::Node& node) {
                          const std::size_t n2 = node.value.extent(1);
                          for (std::size_t r = 0; r < node.parents.size(); ++r) {
                              Tensor g({n2});
                              for (std::size_t c = 0; c < n2; ++c) g[c] = node.grad(r, c);
                              tp.add_grad(node.parents[r], g);
                          }
                      });
}

Var mean_rows(Var x) {
    Tape* t = require_same_tape({x});
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw ShapeError("mean_rows: expected rank-2 input");
    const std::size_t r = xv.extent(0), c = xv.extent(1);
    Tensor y({c});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y[j] += xv(i, j);
    for (std::size_t j = 0; j < c; ++j) y[j] /= static_cast<double>(r);
    return t->emplace("mean_rows", {x.id()}, std::move(y),
                      [](Tape& tp, const Tape::Node& n) {
                          const Tensor& xin = tp.value(n.parents[0]);
                          const std::size_t r2 = xin.extent(0), c2 = xin.extent(1);
                          Tensor gx(xin.shape());
                          for (std::size_t i = 0; i < r2; ++i)
                              for (std::size_t j = 0; j < c2; ++j)
                                  gx(i, j) = n.grad[j] / static_cast<double>(r2);
                          tp.add_grad(n.parents[0], gx);
                      });
}

Var sum_all(Var x) {
    Tape* t = require_same_tape({x});
    return t->emplace("sum_all", {x.id()}, Tensor::scalar(sum(x.value())),
                      [](Tape& tp, const Tape::Node& n) {
                          tp.add_grad(n.parents[0],
                                      Tensor::full(tp.value(n.parents[0]).shape(), n.grad[0]));
                      });
}

Var sample_state(Var h_seq, Var pos) {
    Tape* t = require_same_tape({h_seq, pos});
    if (pos.value().size() != 1) throw ShapeError("sample_state: pos must be a scalar tensor");
    Tensor y = sample_state(h_seq.value(), pos.value()[0]);
    return t->emplace("sample_state", {h_seq.id(), pos.id()}, std::move(y),
                      [](Tape& tp, const Tape::Node& n) {
                          auto [gh, gp] = vjp_sample_state(tp.value(n.parents[0]),
                                                           tp.value(n.parents[1])[0], n.grad);
                          tp.add_grad(n.parents[0], gh);
                          tp.add_grad(n.parents[1], Tensor::scalar(gp));
                      });
}

Var retain(Var h_seq, const AdaptorTVars& vars, const AdaptorTParams& proto,
           std::size_t seq_index) {
    std::vector<Var> used{h_seq};
    AdaptorTParams p = proto;
    const bool learnable = proto.mode == SelectionMode::learnable;
    if (learnable) {
        if (!vars.phi_p_w || !vars.phi_p_b) throw ContractError("retain: missing phi_p vars");
        used.push_back(*vars.phi_p_w);
        used.push_back(*vars.phi_p_b);
        p.phi_p_w = vars.phi_p_w->value();
        p.phi_p_b = vars.phi_p_b->value();
    }
    if (proto.weight_sharing) {
        if (!vars.shared_c) throw ContractError("retain: missing shared_c var");
        used.push_back(*vars.shared_c);
        p.shared_c = vars.shared_c->value();
    } else {
        if (!vars.phi_c_w || !vars.phi_c_b) throw ContractError("retain: missing phi_c vars");
        used.push_back(*vars.phi_c_w);
        used.push_back(*vars.phi_c_b);
        p.phi_c_w = vars.phi_c_w->value();
        p.phi_c_b = vars.phi_c_b->value();
    }
    Tape* t = h_seq.tape();
    std::vector<std::size_t> parents;
    for (const Var& v : used) {
        if (v.tape() != t) throw ContractError("retain: mixed tapes");
        parents.push_back(v.id());
    }
    Tensor y = retain(h_seq.value(), p, seq_index);
    const bool sharing = proto.weight_sharing;
    AdaptorTParams cfg = proto;  // carries mode / offsets / k / s flags
    return t->emplace("retain", std::move(parents), std::move(y),
                      [cfg, seq_index, learnable, sharing](Tape& tp, const Tape::Node& n) {
                          AdaptorTParams p2 = cfg;
                          std::size_t next = 1;
                          std::size_t id_pw = 0, id_pb = 0, id_c0 = 0, id_c1 = 0;
                          if (learnable) {
                              id_pw = n.parents[next++];
                              id_pb = n.parents[next++];
                              p2.phi_p_w = tp.value(id_pw);
                              p2.phi_p_b = tp.value(id_pb);
                          }
                          if (sharing) {
                              id_c0 = n.parents[next++];
                              p2.shared_c = tp.value(id_c0);
                          } else {
                              id_c0 = n.parents[next++];
                              id_c1 = n.parents[next++];
                              p2.phi_c_w = tp.value(id_c0);
                              p2.phi_c_b = tp.value(id_c1);
                          }
                          RetainGrads g = vjp_retain(tp.value(n.parents[0]), p2, seq_index, n.grad);
                          tp.add_grad(n.parents[0], g.h_seq);
                          if (learnable) {
                              tp.add_grad(id_pw, g.phi_p_w);
                              tp.add_grad(id_pb, g.phi_p_b);
                          }
                          if (sharing) {
                              tp.add_grad(id_c0, g.shared_c);
                          } else {
                              tp.add_grad(id_c0, g.phi_c_w);
                              tp.add_grad(id_c1, g.phi_c_b);
                          }
                      });
}

Var softmax_cross_entropy(Var logits, std::vector<std::size_t> labels) {
    Tape* t = require_same_tape({logits});
    const Tensor& lv = logits.value();
    if (lv.rank() != 2 || lv.extent(0) != labels.size()) {
        throw ShapeError("softmax_cross_entropy: logits " + lv.shape_str() + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t b = lv.extent(0), c = lv.extent(1);
    for (std::size_t r = 0; r < b; ++r) {
        if (labels[r] >= c) throw DomainError("softmax_cross_entropy: label out of range");
    }
    double loss = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        double m = lv(r, 0);
        for (std::size_t j = 1; j < c; ++j) m = std::max(m, lv(r, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(lv(r, j) - m);
        loss += m + std::log(denom) - lv(r, labels[r]);
    }
    loss /= static_cast<double>(b);
    if (!std::isfinite(loss)) throw DomainError("softmax_cross_entropy: non-finite loss");
    return t->emplace("softmax_cross_entropy", {logits.id()}, Tensor::scalar(loss),
                      [labels = std::move(labels)](Tape& tp, const Tape::Node& n) {
                          const Tensor& lv2 = tp.value(n.parents[0]);
                          const Tensor sm = softmax(lv2, 1);
                          const std::size_t b2 = lv2.extent(0), c2 = lv2.extent(1);
                          Tensor g(lv2.shape());
                          const double s = n.grad[0] / static_cast<double>(b2);
                          for (std::size_t r = 0; r < b2; ++r)
                              for (std::size_t j = 0; j < c2; ++j)
                                  g(r, j) = s * (sm(r, j) - (j == labels[r] ? 1.0 : 0.0));
                          tp.add_grad(n.parents[0], g);
                      });
}

// ---- finite differences ------------------------------------------------------

double fd_check(const std::function<double(bool)>& loss_fn, ParamStore& store,
                const FdOptions& opts) {
    store.zero_grads();
    const double base = loss_fn(true);
    if (!std::isfinite(base)) throw DomainError("fd_check: non-finite loss");

    std::vector<Tensor> analytic;
    analytic.reserve(store.count());
    for (std::size_t i = 0; i < store.count(); ++i) analytic.push_back(store.entry(i).grad);

    SplitMix64 rng(opts.seed);
    double worst = 0.0;
    for (std::size_t i = 0; i < store.count(); ++i) {
        auto& e = store.entry(i);
        if (opts.trainable_only && !e.trainable) continue;
        const std::size_t size = e.value.size();
        std::vector<std::size_t> coords;
        if (size <= opts.max_coords) {
            for (std::size_t j = 0; j < size; ++j) coords.push_back(j);
        } else {
            for (std::size_t j = 0; j < opts.max_coords; ++j)
                coords.push_back(static_cast<std::size_t>(rng.next_below(size)));
        }
        for (std::size_t j : coords) {
            const double saved = e.value[j];
            e.value[j] = saved + opts.step;
            const double fp = loss_fn(false);
            e.value[j] = saved - opts.step;
            const double fm = loss_fn(false);
            e.value[j] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw DomainError("fd_check: non-finite loss during perturbation");
            }
            const double numeric = (fp - fm) / (2.0 * opts.step);
            const double a = analytic[i][j];
            const double rel =
                std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

// ---- optimizers ----------------------------------------------------------------

void sgd_step(ParamStore& store, double lr) {
    for (std::size_t i = 0; i < store.count(); ++i) {
        auto& e = store.entry(i);
        if (!e.trainable) continue;
        for (std::size_t j = 0; j < e.value.size(); ++j) e.value[j] -= lr * e.grad[j];
    }
}

void AdamW::step(ParamStore& store) {
    if (m_.size() < store.count()) {
        m_.resize(store.count());
        v_.resize(store.count());
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < store.count(); ++i) {
        auto& e = store.entry(i);
        if (!e.trainable) continue;
        if (m_[i].empty()) {
            m_[i] = Tensor(e.value.shape());
            v_[i] = Tensor(e.value.shape());
        }
        for (std::size_t j = 0; j < e.value.size(); ++j) {
            const double g = e.grad[j];
            m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
            v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            e.value[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                     cfg_.weight_decay * e.value[j]);
        }
    }
}

}  // namespace vssm
