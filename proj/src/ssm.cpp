#include "vssm/ssm.hpp"

#include <cmath>
#include <thread>
#include <vector>

namespace vssm {

void ContinuousSsm::validate() const {
    if (a_diag.rank() != 2) throw ShapeError("ssm: a_diag must be [D x N], got " + a_diag.shape_str());
    const std::size_t d = channels(), n = state_dim();
    for (std::size_t i = 0; i < a_diag.size(); ++i) {
        if (!(a_diag[i] < 0.0)) {
            throw DomainError("ssm: a_diag entries must be strictly negative, found " +
                              std::to_string(a_diag[i]));
        }
    }
    auto expect = [](const Tensor& t, const Shape& s, const char* name) {
        if (t.shape() != s) {
            throw ShapeError(std::string("ssm: ") + name + " has shape " + t.shape_str() +
                             ", expected " + shape_to_string(s));
        }
    };
    expect(b_proj, {d, n}, "b_proj");
    expect(c_proj, {d, n}, "c_proj");
    expect(delta_proj, {d, d}, "delta_proj");
    expect(delta_bias, {d}, "delta_bias");
    expect(d_skip, {d}, "d_skip");
}

SelectiveParams selective_params(const Tensor& u, const ContinuousSsm& model) {
    model.validate();
    ensure_finite(u, "selective_params");
    if (u.rank() != 2 || u.extent(1) != model.channels()) {
        throw ShapeError("selective_params: input must be [L x " +
                         std::to_string(model.channels()) + "], got " + u.shape_str());
    }
    SelectiveParams out;
    out.b_seq = matmul(u, model.b_proj);
    out.c_seq = matmul(u, model.c_proj);
    Tensor raw = matmul(u, model.delta_proj);
    const std::size_t l = u.extent(0), d = model.channels();
    for (std::size_t t = 0; t < l; ++t)
        for (std::size_t j = 0; j < d; ++j) raw(t, j) = softplus_scalar(raw(t, j) + model.delta_bias[j]);
    ensure_finite(raw, "selective_params");
    out.delta_seq = std::move(raw);
    return out;
}

double zoh_phi1_scalar(double z) {
    if (std::fabs(z) < kZohLimitThreshold) return 1.0;
    return std::expm1(z) / z;
}

std::pair<Tensor, Tensor> zoh_discretize(const Tensor& a_diag, const Tensor& b_seq,
                                         const Tensor& delta_seq, ZohMode mode) {
    if (a_diag.rank() != 2 || b_seq.rank() != 2 || delta_seq.rank() != 2) {
        throw ShapeError("zoh_discretize: expected a [D x N], b [L x N], delta [L x D]");
    }
    const std::size_t d = a_diag.extent(0), n = a_diag.extent(1), l = b_seq.extent(0);
    if (b_seq.extent(1) != n || delta_seq.extent(0) != l || delta_seq.extent(1) != d) {
        throw ShapeError("zoh_discretize: inconsistent extents a=" + a_diag.shape_str() +
                         " b=" + b_seq.shape_str() + " delta=" + delta_seq.shape_str());
    }
    for (std::size_t i = 0; i < delta_seq.size(); ++i) {
        if (!(delta_seq[i] > 0.0)) {
            throw DomainError("zoh_discretize: delta must be strictly positive, found " +
                              std::to_string(delta_seq[i]));
        }
    }
    Tensor abar({l, d, n}), bbar({l, d, n});
    for (std::size_t t = 0; t < l; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            const double dt = delta_seq(t, j);
            for (std::size_t k = 0; k < n; ++k) {
                const double z = dt * a_diag(j, k);
                abar(t, j, k) = std::exp(z);
                const double db = dt * b_seq(t, k);
                bbar(t, j, k) = (mode == ZohMode::euler) ? db : zoh_phi1_scalar(z) * db;
            }
        }
    }
    ensure_finite(abar, "zoh_discretize");
    ensure_finite(bbar, "zoh_discretize");
    return {std::move(abar), std::move(bbar)};
}

DiscreteSsm discretize(const Tensor& u, const ContinuousSsm& model, ZohMode mode) {
    SelectiveParams sp = selective_params(u, model);
    auto [abar, bbar] = zoh_discretize(model.a_diag, sp.b_seq, sp.delta_seq, mode);
    const std::size_t l = u.extent(0), d = model.channels(), n = model.state_dim();
    Tensor bu({l, d, n});
    for (std::size_t t = 0; t < l; ++t)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < n; ++k) bu(t, j, k) = bbar(t, j, k) * u(t, j);
    DiscreteSsm out;
    out.abar = std::move(abar);
    out.bu = std::move(bu);
    out.c_seq = std::move(sp.c_seq);
    out.d_skip = model.d_skip;
    out.delta = std::move(sp.delta_seq);
    return out;
}

namespace {

void check_scan_shapes(const Tensor& abar, const Tensor& bu) {
    if (abar.rank() != 3) throw ShapeError("scan: abar must be [L x D x N], got " + abar.shape_str());
    ensure_same_shape(abar, bu, "scan");
}

}  // namespace

Tensor scan_sequential(const Tensor& abar, const Tensor& bu) {
    check_scan_shapes(abar, bu);
    const std::size_t l = abar.extent(0);
    const std::size_t dn = abar.size() / l;
    Tensor h(abar.shape());
    const double* a = abar.data();
    const double* b = bu.data();
    double* out = h.data();
    for (std::size_t i = 0; i < dn; ++i) out[i] = b[i];
    for (std::size_t t = 1; t < l; ++t) {
        const std::size_t o = t * dn, p = (t - 1) * dn;
        for (std::size_t i = 0; i < dn; ++i) out[o + i] = a[o + i] * out[p + i] + b[o + i];
    }
    ensure_finite(h, "scan_sequential");
    return h;
}

namespace {

// Runs fn(i) for i in [0, count), split across `workers` threads. Each index
// writes disjoint output, so no synchronization is required and the result is
// identical for any worker count.
void parallel_for(std::size_t count, unsigned workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || count <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    const unsigned nt = static_cast<unsigned>(std::min<std::size_t>(workers, count));
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (unsigned w = 0; w < nt; ++w) {
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < count; i += nt) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

}  // namespace

Tensor scan_parallel(const Tensor& abar, const Tensor& bu, std::size_t chunk, unsigned workers) {
    check_scan_shapes(abar, bu);
    if (chunk == 0) throw DomainError("scan_parallel: chunk must be positive");
    const std::size_t l = abar.extent(0);
    const std::size_t dn = abar.size() / l;
    const std::size_t num_chunks = (l + chunk - 1) / chunk;

    // Per-position local cumulative pairs (a_t, b_t) relative to the chunk
    // start: h_t = b_t + a_t * h_entering.
    Tensor local_a(abar.shape()), h(abar.shape());
    const double* a = abar.data();
    const double* b = bu.data();
    double* la = local_a.data();
    double* lb = h.data();  // local scan lands in h, fixed up in place below

    parallel_for(num_chunks, workers, [&](std::size_t c) {
        const std::size_t begin = c * chunk;
        const std::size_t end = std::min(l, begin + chunk);
        for (std::size_t i = 0; i < dn; ++i) {
            la[begin * dn + i] = a[begin * dn + i];
            lb[begin * dn + i] = b[begin * dn + i];
        }
        for (std::size_t t = begin + 1; t < end; ++t) {
            const std::size_t o = t * dn, p = (t - 1) * dn;
            for (std::size_t i = 0; i < dn; ++i) {
                la[o + i] = a[o + i] * la[p + i];
                lb[o + i] = a[o + i] * lb[p + i] + b[o + i];
            }
        }
    });

    if (num_chunks > 1) {
        // Chunk summaries are the last local pairs; pad to a power of two with
        // the identity element and run a Blelloch exclusive scan over them.
        std::size_t width = 1;
        while (width < num_chunks) width <<= 1;
        std::vector<double> sum_a(width * dn, 1.0), sum_b(width * dn, 0.0);
        for (std::size_t c = 0; c < num_chunks; ++c) {
            const std::size_t last = std::min(l, (c + 1) * chunk) - 1;
            for (std::size_t i = 0; i < dn; ++i) {
                sum_a[c * dn + i] = la[last * dn + i];
                sum_b[c * dn + i] = lb[last * dn + i];
            }
        }
        // Upsweep.
        for (std::size_t stride = 1; stride < width; stride <<= 1) {
            for (std::size_t j = 2 * stride - 1; j < width; j += 2 * stride) {
                const std::size_t lo = (j - stride) * dn, hi = j * dn;
                for (std::size_t i = 0; i < dn; ++i) {
                    sum_b[hi + i] = sum_a[hi + i] * sum_b[lo + i] + sum_b[hi + i];
                    sum_a[hi + i] = sum_a[hi + i] * sum_a[lo + i];
                }
            }
        }
        // Downsweep with the identity at the root.
        for (std::size_t i = 0; i < dn; ++i) {
            sum_a[(width - 1) * dn + i] = 1.0;
            sum_b[(width - 1) * dn + i] = 0.0;
        }
        for (std::size_t stride = width >> 1; stride >= 1; stride >>= 1) {
            for (std::size_t j = 2 * stride - 1; j < width; j += 2 * stride) {
                const std::size_t lo = (j - stride) * dn, hi = j * dn;
                for (std::size_t i = 0; i < dn; ++i) {
                    const double ta = sum_a[lo + i], tb = sum_b[lo + i];
                    sum_a[lo + i] = sum_a[hi + i];
                    sum_b[lo + i] = sum_b[hi + i];
                    sum_b[hi + i] = ta * sum_b[hi + i] + tb;
                    sum_a[hi + i] = ta * sum_a[hi + i];
                }
            }
        }
        // Fix-up: sum_b[c] now holds the state entering chunk c (h_0 = 0).
        parallel_for(num_chunks, workers, [&](std::size_t c) {
            const std::size_t begin = c * chunk;
            const std::size_t end = std::min(l, begin + chunk);
            for (std::size_t t = begin; t < end; ++t) {
                for (std::size_t i = 0; i < dn; ++i) {
                    lb[t * dn + i] += la[t * dn + i] * sum_b[c * dn + i];
                }
            }
        });
    }
    ensure_finite(h, "scan_parallel");
    return h;
}

Tensor output_project(const Tensor& h, const Tensor& c_seq, const Tensor& d_skip,
                      const Tensor& u) {
    if (h.rank() != 3) throw ShapeError("output_project: h must be [L x D x N], got " + h.shape_str());
    const std::size_t l = h.extent(0), d = h.extent(1), n = h.extent(2);
    if (u.rank() != 2 || u.extent(0) != l || u.extent(1) != d) {
        throw ShapeError("output_project: u must be [L x D], got " + u.shape_str());
    }
    if (d_skip.rank() != 1 || d_skip.extent(0) != d) {
        throw ShapeError("output_project: d_skip must be [D], got " + d_skip.shape_str());
    }
    const bool per_channel = c_seq.rank() == 3;
    if (per_channel) {
        if (c_seq.extent(0) != l || c_seq.extent(1) != d || c_seq.extent(2) != n) {
            throw ShapeError("output_project: per-channel c_seq must match h, got " +
                             c_seq.shape_str());
        }
    } else if (c_seq.rank() != 2 || c_seq.extent(0) != l || c_seq.extent(1) != n) {
        throw ShapeError("output_project: c_seq must be [L x N], got " + c_seq.shape_str());
    }
    Tensor y({l, d});
    for (std::size_t t = 0; t < l; ++t) {
        for (std::size_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                const double c = per_channel ? c_seq(t, j, k) : c_seq(t, k);
                acc += c * h(t, j, k);
            }
            y(t, j) = acc + d_skip[j] * u(t, j);
        }
    }
    ensure_finite(y, "output_project");
    return y;
}

Tensor solve_fused(const Tensor& u, const ContinuousSsm& model, ZohMode mode) {
    DiscreteSsm dssm = discretize(u, model, mode);
    Tensor h = scan_sequential(dssm.abar, dssm.bu);
    return output_project(h, dssm.c_seq, dssm.d_skip, u);
}

Tensor solve_decoupled(const Tensor& u, const ContinuousSsm& model, const HiddenHook& hidden_hook,
                       const OutputHook& output_hook, ZohMode mode, const ScanOptions& scan) {
    DiscreteSsm dssm = discretize(u, model, mode);
    // Phase 1: identity selector and zero skip, i.e. the solver emits the raw
    // hidden states.
    Tensor h = scan.use_parallel ? scan_parallel(dssm.abar, dssm.bu, scan.chunk, scan.workers)
                                 : scan_sequential(dssm.abar, dssm.bu);
    if (hidden_hook) {
        Tensor transformed = hidden_hook(h);
        if (!transformed.same_shape(h)) {
            throw ContractError("solve_decoupled: hidden hook changed shape " + h.shape_str() +
                                " -> " + transformed.shape_str());
        }
        h = std::move(transformed);
    }
    // Phase 2: the output stage as plain matrix multiplication.
    Tensor y = output_project(h, dssm.c_seq, dssm.d_skip, u);
    if (output_hook) {
        Tensor transformed = output_hook(y);
        if (!transformed.same_shape(y)) {
            throw ContractError("solve_decoupled: output hook changed shape " + y.shape_str() +
                                " -> " + transformed.shape_str());
        }
        y = std::move(transformed);
    }
    return y;
}

}  // namespace vssm
