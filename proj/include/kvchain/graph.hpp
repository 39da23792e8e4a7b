// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "kvchain/rope.hpp"
#include "kvchain/tensor.hpp"

namespace kvchain {

/// Tape-based reverse-mode autodiff. Nodes are recorded in execution order;
/// backward() walks them in exact reverse. Only nodes downstream of a
/// registered parameter carry a backward closure, so frozen weights cost no
/// gradient work.
template <typename T>
class Graph {
public:
    struct Var {
        std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
        const Graph* owner = nullptr;
        bool valid() const noexcept { return owner != nullptr; }
    };

    using BackwardFn = std::function<void(Graph&, const Tensor<T>& out_grad)>;

    /// With record == false no closures are kept (inference).
    explicit Graph(bool record = true) : m_record(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const noexcept { return m_record; }

    Var constant(Tensor<T> value) { return push(std::move(value), nullptr, false, false); }

    /// Borrowed constant; `value` must outlive the graph.
    Var constant_ref(const Tensor<T>& value) { return push({}, &value, false, false); }
    Var constant_ref(Tensor<T>&&) = delete;

    /// Registered parameter (borrowed); its gradient is available after backward().
    Var parameter(const Tensor<T>& value) {
        Var v = push({}, &value, m_record, true);
        m_params.push_back(v.id);
        return v;
    }

    /// Owning overload so a temporary cannot dangle.
    Var parameter(Tensor<T>&& value) {
        Var v = push(std::move(value), nullptr, m_record, true);
        m_params.push_back(v.id);
        return v;
    }

    const Tensor<T>& value(Var v) const {
        check(v);
        const Node& n = m_nodes[v.id];
        return n.borrowed ? *n.borrowed : n.owned;
    }

    bool requires_grad(Var v) const {
        check(v);
        return m_nodes[v.id].requires_grad;
    }

    /// Gradient of the last backward() target. Nodes the loss never reached
    /// report an all-zero tensor of the right shape.
    Tensor<T> grad(Var v) const {
        check(v);
        const Node& n = m_nodes[v.id];
        if (n.grad.empty()) return Tensor<T>(value(v).shape());
        return n.grad;
    }

    std::span<const std::uint32_t> parameter_ids() const noexcept { return m_params; }
    std::size_t size() const noexcept { return m_nodes.size(); }

    void backward(Var loss) {
        KVCHAIN_CHECK(loss.owner == this && loss.id < m_nodes.size(), ErrorCode::kPrecondition,
                      "backward: loss is not a node of this graph");
        KVCHAIN_CHECK(value(loss).size() == 1, ErrorCode::kPrecondition, "backward: loss must be a scalar");
        for (Node& n : m_nodes) n.grad = Tensor<T>();
        m_nodes[loss.id].grad = Tensor<T>(value(loss).shape(), T(1));
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = m_nodes[i];
            if (!n.backward || n.grad.empty()) continue;
            // Closures only touch grads of earlier nodes; n.grad stays put.
            n.backward(*this, n.grad);
        }
    }

    // --- op-author interface -------------------------------------------

    Var emit(Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn fn) {
        bool needs = false;
        if (m_record) {
            for (const Var& in : inputs) {
                check(in);
                needs = needs || m_nodes[in.id].requires_grad;
            }
        }
        Var v = push(std::move(value), nullptr, needs, false);
        if (needs) m_nodes[v.id].backward = std::move(fn);
        return v;
    }

    Var emit(Tensor<T> value, const std::vector<Var>& inputs, BackwardFn fn) {
        bool needs = false;
        if (m_record) {
            for (const Var& in : inputs) {
                check(in);
                needs = needs || m_nodes[in.id].requires_grad;
            }
        }
        Var v = push(std::move(value), nullptr, needs, false);
        if (needs) m_nodes[v.id].backward = std::move(fn);
        return v;
    }

    /// Mutable gradient buffer, allocated zeroed on first touch. Returns
    /// nullptr for nodes that do not require gradients.
    Tensor<T>* grad_buffer(Var v) {
        Node& n = m_nodes[v.id];
        if (!n.requires_grad) return nullptr;
        if (n.grad.empty()) n.grad = Tensor<T>(value(v).shape());
        return &n.grad;
    }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* borrowed = nullptr;
        Tensor<T> grad;
        bool requires_grad = false;
        bool is_param = false;
        BackwardFn backward;
    };

    Var push(Tensor<T> owned, const Tensor<T>* borrowed, bool requires_grad, bool is_param) {
        Node n;
        n.owned = std::move(owned);
        n.borrowed = borrowed;
        n.requires_grad = requires_grad;
        n.is_param = is_param;
        m_nodes.push_back(std::move(n));
        return Var{static_cast<std::uint32_t>(m_nodes.size() - 1), this};
    }

    void check(Var v) const {
        KVCHAIN_CHECK(v.owner == this && v.id < m_nodes.size(), ErrorCode::kPrecondition,
                      "variable does not belong to this graph");
    }

    bool m_record;
    std::vector<Node> m_nodes;
    std::vector<std::uint32_t> m_params;
};

/// Plain masked row softmax. Masked entries are treated as -inf and come out
/// exactly 0; the row maximum and the normaliser run over unmasked entries
/// left to right.
template <typename T>
void softmax_row_inplace(T* row, std::size_t n, const BoolMatrix* mask, std::size_t mask_row) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
        if (mask && !(*mask)(mask_row, j)) continue;
        any = true;
        mx = std::max(mx, row[j]);
    }
    KVCHAIN_CHECK(any, ErrorCode::kPrecondition, "softmax: row ", mask_row, " is fully masked");
    T sum = T(0);
    for (std::size_t j = 0; j < n; ++j) {
        if (mask && !(*mask)(mask_row, j)) {
            row[j] = T(0);
            continue;
        }
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
    }
    const T inv = T(1) / sum;
    for (std::size_t j = 0; j < n; ++j) row[j] *= inv;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a, const BoolMatrix* mask = nullptr) {
    KVCHAIN_CHECK(a.rank() == 2, ErrorCode::kShapeMismatch, "softmax_rows expects a matrix");
    if (mask) {
        KVCHAIN_CHECK(mask->rows() == a.shape()[0] && mask->cols() == a.shape()[1], ErrorCode::kShapeMismatch,
                      "softmax mask shape mismatch");
    }
    Tensor<T> out = a;
    for (std::size_t r = 0; r < a.rows(); ++r) softmax_row_inplace(out.data() + r * a.cols(), a.cols(), mask, r);
    return out;
}

namespace ops {

template <typename T>
using Var = typename Graph<T>::Var;

template <typename T>
Var<T> matmul(Graph<T>& g, Var<T> a, Var<T> b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    KVCHAIN_CHECK(av.rank() == 2 && bv.rank() == 2, ErrorCode::kShapeMismatch, "matmul expects matrices");
    KVCHAIN_CHECK(av.shape()[1] == bv.shape()[0], ErrorCode::kShapeMismatch, "matmul inner dimension mismatch: ",
                  shape_str(av.shape()), " x ", shape_str(bv.shape()));
    const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
    Tensor<T> out({m, n});
    kernels::gemm_nn(av.data(), bv.data(), out.data(), m, k, n, false);
    return g.emit(std::move(out), {a, b}, [a, b, m, k, n](Graph<T>& gr, const Tensor<T>& dout) {
        if (Tensor<T>* da = gr.grad_buffer(a)) {
            kernels::gemm_nt(dout.data(), gr.value(b).data(), da->data(), m, n, k, true);
        }
        if (Tensor<T>* db = gr.grad_buffer(b)) {
            kernels::gemm_tn(gr.value(a).data(), dout.data(), db->data(), m, k, n, true);
        }
    });
}

template <typename T>
Var<T> add(Graph<T>& g, Var<T> a, Var<T> b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    KVCHAIN_CHECK(av.shape() == bv.shape(), ErrorCode::kShapeMismatch, "add shape mismatch");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return g.emit(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& dout) {
        for (Var<T> v : {a, b}) {
            if (Tensor<T>* d = gr.grad_buffer(v)) {
                for (std::size_t i = 0; i < dout.size(); ++i) (*d)[i] += dout[i];
            }
        }
    });
}

template <typename T>
Var<T> mul(Graph<T>& g, Var<T> a, Var<T> b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    KVCHAIN_CHECK(av.shape() == bv.shape(), ErrorCode::kShapeMismatch, "mul shape mismatch");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return g.emit(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& dout) {
        if (Tensor<T>* da = gr.grad_buffer(a)) {
            const Tensor<T>& bv2 = gr.value(b);
            for (std::size_t i = 0; i < dout.size(); ++i) (*da)[i] += dout[i] * bv2[i];
        }
        if (Tensor<T>* db = gr.grad_buffer(b)) {
            const Tensor<T>& av2 = gr.value(a);
            for (std::size_t i = 0; i < dout.size(); ++i) (*db)[i] += dout[i] * av2[i];
        }
    });
}

template <typename T>
Var<T> scale(Graph<T>& g, Var<T> a, T s) {
    Tensor<T> out = g.value(a);
    for (T& v : out.values()) v *= s;
    return g.emit(std::move(out), {a}, [a, s](Graph<T>& gr, const Tensor<T>& dout) {
        if (Tensor<T>* da = gr.grad_buffer(a)) {
            for (std::size_t i = 0; i < dout.size(); ++i) (*da)[i] += dout[i] * s;
        }
    });
}

template <typename T>
Var<T> sum(Graph<T>& g, Var<T> a) {
    T acc = T(0);
    for (T v : g.value(a).values()) acc += v;
    return g.emit(Tensor<T>::scalar(acc), {a}, [a](Graph<T>& gr, const Tensor<T>& dout) {
        if (Tensor<T>* da = gr.grad_buffer(a)) {
            for (T& v : da->values()) v += dout[0];
        }
    });
}

/// Masked row softmax; gradients use the saved probabilities.
template <typename T>
Var<T> softmax_rows(Graph<T>& g, Var<T> a, const BoolMatrix* mask = nullptr) {
    Tensor<T> out = kvchain::softmax_rows(g.value(a), mask);
    Tensor<T> probs = g.recording() ? out : Tensor<T>();
    return g.emit(std::move(out), {a}, [a, probs = std::move(probs)](Graph<T>& gr, const Tensor<T>& dout) {
        Tensor<T>* da = gr.grad_buffer(a);
        if (!da) return;
        const std::size_t c = probs.cols();
        for (std::size_t r = 0; r < probs.rows(); ++r) {
            const T* p = probs.data() + r * c;
            const T* dy = dout.data() + r * c;
            T dot = T(0);
            for (std::size_t j = 0; j < c; ++j) dot += p[j] * dy[j];
            T* dx = da->data() + r * c;
            for (std::size_t j = 0; j < c; ++j) dx[j] += p[j] * (dy[j] - dot);
        }
    });
}

template <typename T>
Var<T> rmsnorm(Graph<T>& g, Var<T> x, Var<T> w, T eps) {
    const Tensor<T>& xv = g.value(x);
    const Tensor<T>& wv = g.value(w);
    const std::size_t d = xv.cols();
    KVCHAIN_CHECK(wv.size() == d, ErrorCode::kShapeMismatch, "rmsnorm weight length ", wv.size(),
                  " does not match row width ", d);
    const std::size_t rows = xv.rows();
    Tensor<T> out(xv.shape());
    std::vector<T> inv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xv.data() + r * d;
        T ss = T(0);
        for (std::size_t j = 0; j < d; ++j) ss += xr[j] * xr[j];
        inv[r] = T(1) / std::sqrt(ss / static_cast<T>(d) + eps);
        T* yr = out.data() + r * d;
        for (std::size_t j = 0; j < d; ++j) yr[j] = xr[j] * inv[r] * wv[j];
    }
    return g.emit(std::move(out), {x, w}, [x, w, inv = std::move(inv), d, rows](Graph<T>& gr, const Tensor<T>& dout) {
        const Tensor<T>& xv2 = gr.value(x);
        const Tensor<T>& wv2 = gr.value(w);
        Tensor<T>* dx = gr.grad_buffer(x);
        Tensor<T>* dw = gr.grad_buffer(w);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* xr = xv2.data() + r * d;
            const T* dy = dout.data() + r * d;
            if (dw) {
                for (std::size_t j = 0; j < d; ++j) (*dw)[j] += dy[j] * xr[j] * inv[r];
            }
            if (dx) {
                T dot = T(0);
                for (std::size_t j = 0; j < d; ++j) dot += dy[j] * wv2[j] * xr[j] * inv[r];
                T* dxr = dx->data() + r * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dxr[j] += inv[r] * (dy[j] * wv2[j] - xr[j] * inv[r] * dot / static_cast<T>(d));
                }
            }
        }
    });
}

/// silu(a) * b, elementwise.
template <typename T>
Var<T> silu_mul(Graph<T>& g, Var<T> a, Var<T> b) {
    const Tensor<T>& av = g.value(a);
    const Tensor<T>& bv = g.value(b);
    KVCHAIN_CHECK(av.shape() == bv.shape(), ErrorCode::kShapeMismatch, "silu_mul shape mismatch");
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T sig = T(1) / (T(1) + std::exp(-av[i]));
        out[i] = av[i] * sig * bv[i];
    }
    return g.emit(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& dout) {
        const Tensor<T>& av2 = gr.value(a);
        const Tensor<T>& bv2 = gr.value(b);
        Tensor<T>* da = gr.grad_buffer(a);
        Tensor<T>* db = gr.grad_buffer(b);
        for (std::size_t i = 0; i < dout.size(); ++i) {
            const T sig = T(1) / (T(1) + std::exp(-av2[i]));
            const T silu = av2[i] * sig;
            if (da) (*da)[i] += dout[i] * bv2[i] * (sig + silu * (T(1) - sig));
            if (db) (*db)[i] += dout[i] * silu;
        }
    });
}

/// w_down . (silu(x . w_gate) * (x . w_up))
template <typename T>
Var<T> swiglu(Graph<T>& g, Var<T> x, Var<T> w_gate, Var<T> w_up, Var<T> w_down) {
    return matmul(g, silu_mul(g, matmul(g, x, w_gate), matmul(g, x, w_up)), w_down);
}

/// Mean negative log-likelihood over rows with loss_mask == 1.
template <typename T>
Var<T> cross_entropy(Graph<T>& g, Var<T> logits, std::span<const int> targets, std::span<const std::uint8_t> loss_mask) {
    const Tensor<T>& lv = g.value(logits);
    KVCHAIN_CHECK(lv.rank() == 2, ErrorCode::kShapeMismatch, "cross_entropy expects [t x vocab] logits");
    const std::size_t t = lv.shape()[0], vocab = lv.shape()[1];
    KVCHAIN_CHECK(targets.size() == t && loss_mask.size() == t, ErrorCode::kShapeMismatch,
                  "cross_entropy: targets/mask length must equal ", t);
    std::size_t count = 0;
    for (std::size_t r = 0; r < t; ++r) {
        if (!loss_mask[r]) continue;
        ++count;
        KVCHAIN_CHECK(targets[r] >= 0 && static_cast<std::size_t>(targets[r]) < vocab, ErrorCode::kInvalidArgument,
                      "cross_entropy: target ", targets[r], " out of range [0,", vocab, ")");
    }
    KVCHAIN_CHECK(count > 0, ErrorCode::kPrecondition, "cross_entropy: every position is masked");
    Tensor<T> probs({t, vocab});
    T total = T(0);
    for (std::size_t r = 0; r < t; ++r) {
        if (!loss_mask[r]) continue;
        T* p = probs.data() + r * vocab;
        std::copy_n(lv.data() + r * vocab, vocab, p);
        softmax_row_inplace<T>(p, vocab, nullptr, r);
        const T* lr = lv.data() + r * vocab;
        T mx = lr[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, lr[j]);
        T se = T(0);
        for (std::size_t j = 0; j < vocab; ++j) se += std::exp(lr[j] - mx);
        total += (mx + std::log(se)) - lr[targets[r]];
    }
    const T inv_count = T(1) / static_cast<T>(count);
    std::vector<int> tg(targets.begin(), targets.end());
    std::vector<std::uint8_t> mk(loss_mask.begin(), loss_mask.end());
    return g.emit(Tensor<T>::scalar(total * inv_count), {logits},
                  [logits, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), inv_count, vocab](
                      Graph<T>& gr, const Tensor<T>& dout) {
                      Tensor<T>* dl = gr.grad_buffer(logits);
                      if (!dl) return;
                      const T s = dout[0] * inv_count;
                      for (std::size_t r = 0; r < mk.size(); ++r) {
                          if (!mk[r]) continue;
                          T* d = dl->data() + r * vocab;
                          const T* p = probs.data() + r * vocab;
                          for (std::size_t j = 0; j < vocab; ++j) d[j] += s * p[j];
                          d[tg[r]] -= s;
                      }
                  });
}

template <typename T>
Var<T> rope(Graph<T>& g, Var<T> x, std::span<const std::int64_t> positions, const RopeFrequencies& freqs) {
    Tensor<T> out = rope_apply(g.value(x), positions, freqs);
    std::vector<std::int64_t> pos(positions.begin(), positions.end());
    return g.emit(std::move(out), {x}, [x, pos = std::move(pos), freqs](Graph<T>& gr, const Tensor<T>& dout) {
        Tensor<T>* dx = gr.grad_buffer(x);
        if (!dx) return;
        const Tensor<T> back = rope_apply(dout, pos, freqs, /*inverse=*/true);
        for (std::size_t i = 0; i < back.size(); ++i) (*dx)[i] += back[i];
    });
}

/// Query and key positions for attention that applies rotary embeddings
/// itself. Each score rotates the (q, k) pair by the offset q_pos - k_pos in
/// double, so a uniform shift of all positions leaves scores bitwise equal.
struct RotaryPositions {
    std::vector<std::int64_t> q_pos;
    std::vector<std::int64_t> k_pos;
    RopeFrequencies freqs;
};

namespace rope_detail {

// cos/sin of (offset * theta_f) for every offset in [lo, hi], row-major by
// offset then frequency.
struct OffsetTable {
    std::int64_t lo = 0;
    std::size_t half = 0;
    std::vector<double> cos, sin;

    OffsetTable(const RotaryPositions& rp) : half(rp.freqs.head_dim / 2) {
        if (rp.q_pos.empty() || rp.k_pos.empty()) return;
        const auto [qmin, qmax] = std::minmax_element(rp.q_pos.begin(), rp.q_pos.end());
        const auto [kmin, kmax] = std::minmax_element(rp.k_pos.begin(), rp.k_pos.end());
        lo = *qmin - *kmax;
        const std::size_t span = static_cast<std::size_t>(*qmax - *kmin - lo + 1);
        cos.resize(span * half);
        sin.resize(span * half);
        for (std::size_t o = 0; o < span; ++o) {
            for (std::size_t f = 0; f < half; ++f) {
                const double angle = static_cast<double>(lo + static_cast<std::int64_t>(o)) * rp.freqs.thetas[f];
                cos[o * half + f] = std::cos(angle);
                sin[o * half + f] = std::sin(angle);
            }
        }
    }

    std::size_t row(std::int64_t offset) const { return static_cast<std::size_t>(offset - lo) * half; }
};

// Rotated score Re(sum q_f conj(k_f) e^{i phi_f}) with (x0 + i x1) pairs.
template <typename T>
double rotary_dot(const T* q, const T* k, const double* c, const double* s, std::size_t half) {
    double acc = 0.0;
    for (std::size_t f = 0; f < half; ++f) {
        const double q0 = q[2 * f], q1 = q[2 * f + 1], k0 = k[2 * f], k1 = k[2 * f + 1];
        acc += (q0 * k0 + q1 * k1) * c[f] - (q1 * k0 - q0 * k1) * s[f];
    }
    return acc;
}

}  // namespace rope_detail

/// Multi-head masked attention. q is [t x D]; k and v are [n x D]; mask is
/// [t x n]. Scores are scaled by 1/sqrt(head_dim). With `rotary`, q and k
/// are unrotated and the score of each pair is rotated by its offset.
template <typename T>
Var<T> attention(Graph<T>& g, Var<T> q, Var<T> k, Var<T> v, const BoolMatrix& mask, std::size_t n_heads,
                 Tensor<T>* probs_out = nullptr, const RotaryPositions* rotary = nullptr) {
    const Tensor<T>& qv = g.value(q);
    const Tensor<T>& kv = g.value(k);
    const Tensor<T>& vv = g.value(v);
    const std::size_t t = qv.rows(), n = kv.rows(), width = qv.cols();
    KVCHAIN_CHECK(kv.cols() == width && vv.cols() == width && vv.rows() == n, ErrorCode::kShapeMismatch,
                  "attention: q/k/v width mismatch");
    KVCHAIN_CHECK(mask.rows() == t && mask.cols() == n, ErrorCode::kShapeMismatch, "attention: mask is ",
                  mask.rows(), "x", mask.cols(), ", expected ", t, "x", n);
    KVCHAIN_CHECK(n_heads > 0 && width % n_heads == 0, ErrorCode::kShapeMismatch, "attention: bad head count");
    const std::size_t hd = width / n_heads;
    if (rotary) {
        KVCHAIN_CHECK(rotary->q_pos.size() == t && rotary->k_pos.size() == n && rotary->freqs.head_dim == hd,
                      ErrorCode::kShapeMismatch, "attention: rotary positions do not match q/k");
    }
    const std::shared_ptr<const RotaryPositions> rot =
        rotary ? std::make_shared<const RotaryPositions>(*rotary) : nullptr;
    const auto table = rot ? std::make_shared<const rope_detail::OffsetTable>(*rot) : nullptr;
    const T sc = T(1) / std::sqrt(static_cast<T>(hd));
    Tensor<T> probs({n_heads, t, n});
    Tensor<T> out({t, width});
    for (std::size_t h = 0; h < n_heads; ++h) {
        for (std::size_t i = 0; i < t; ++i) {
            T* p = probs.data() + (h * t + i) * n;
            const T* qi = qv.data() + i * width + h * hd;
            for (std::size_t j = 0; j < n; ++j) {
                if (!mask(i, j)) {
                    p[j] = T(0);
                    continue;
                }
                const T* kj = kv.data() + j * width + h * hd;
                if (table) {
                    const std::size_t r = table->row(rot->q_pos[i] - rot->k_pos[j]);
                    p[j] = static_cast<T>(rope_detail::rotary_dot(qi, kj, &table->cos[r], &table->sin[r], hd / 2)) * sc;
                    continue;
                }
                T acc = T(0);
                for (std::size_t e = 0; e < hd; ++e) acc += qi[e] * kj[e];
                p[j] = acc * sc;
            }
            softmax_row_inplace<T>(p, n, &mask, i);
            T* oi = out.data() + i * width + h * hd;
            for (std::size_t j = 0; j < n; ++j) {
                if (!mask(i, j)) continue;
                const T pj = p[j];
                const T* vj = vv.data() + j * width + h * hd;
                for (std::size_t e = 0; e < hd; ++e) oi[e] += pj * vj[e];
            }
        }
    }
    if (probs_out) *probs_out = probs;
    return g.emit(std::move(out), {q, k, v},
                  [q, k, v, probs = std::move(probs), mask, n_heads, t, n, width, hd, sc, rot, table](
                      Graph<T>& gr, const Tensor<T>& dout) {
                      const Tensor<T>& qv2 = gr.value(q);
                      const Tensor<T>& kv2 = gr.value(k);
                      const Tensor<T>& vv2 = gr.value(v);
                      Tensor<T>* dq = gr.grad_buffer(q);
                      Tensor<T>* dk = gr.grad_buffer(k);
                      Tensor<T>* dv = gr.grad_buffer(v);
                      const std::size_t half = hd / 2;
                      std::vector<T> ds(n);
                      for (std::size_t h = 0; h < n_heads; ++h) {
                          for (std::size_t i = 0; i < t; ++i) {
                              const T* p = probs.data() + (h * t + i) * n;
                              const T* doi = dout.data() + i * width + h * hd;
                              T dot = T(0);
                              for (std::size_t j = 0; j < n; ++j) {
                                  if (!mask(i, j)) {
                                      ds[j] = T(0);
                                      continue;
                                  }
                                  const T* vj = vv2.data() + j * width + h * hd;
                                  T dp = T(0);
                                  for (std::size_t e = 0; e < hd; ++e) dp += doi[e] * vj[e];
                                  ds[j] = dp;
                                  dot += p[j] * dp;
                                  if (dv) {
                                      T* dvj = dv->data() + j * width + h * hd;
                                      for (std::size_t e = 0; e < hd; ++e) dvj[e] += p[j] * doi[e];
                                  }
                              }
                              const T* qi = qv2.data() + i * width + h * hd;
                              T* dqi = dq ? dq->data() + i * width + h * hd : nullptr;
                              for (std::size_t j = 0; j < n; ++j) {
                                  if (!mask(i, j)) continue;
                                  const T s = p[j] * (ds[j] - dot) * sc;
                                  const T* kj = kv2.data() + j * width + h * hd;
                                  T* dkj = dk ? dk->data() + j * width + h * hd : nullptr;
                                  if (table) {
                                      // d/dq and d/dk of the rotated pair score.
                                      const std::size_t r = table->row(rot->q_pos[i] - rot->k_pos[j]);
                                      const double* c = &table->cos[r];
                                      const double* sn = &table->sin[r];
                                      const double sd = static_cast<double>(s);
                                      for (std::size_t f = 0; f < half; ++f) {
                                          const double q0 = qi[2 * f], q1 = qi[2 * f + 1];
                                          const double k0 = kj[2 * f], k1 = kj[2 * f + 1];
                                          if (dqi) {
                                              dqi[2 * f] += static_cast<T>(sd * (k0 * c[f] + k1 * sn[f]));
                                              dqi[2 * f + 1] += static_cast<T>(sd * (k1 * c[f] - k0 * sn[f]));
                                          }
                                          if (dkj) {
                                              dkj[2 * f] += static_cast<T>(sd * (q0 * c[f] - q1 * sn[f]));
                                              dkj[2 * f + 1] += static_cast<T>(sd * (q1 * c[f] + q0 * sn[f]));
                                          }
                                      }
                                      continue;
                                  }
                                  if (dqi) {
                                      for (std::size_t e = 0; e < hd; ++e) dqi[e] += s * kj[e];
                                  }
                                  if (dkj) {
                                      for (std::size_t e = 0; e < hd; ++e) dkj[e] += s * qi[e];
                                  }
                              }
                          }
                      }
                  });
}

/// Stacks matrices with equal column counts.
template <typename T>
Var<T> concat_rows(Graph<T>& g, const std::vector<Var<T>>& parts) {
    KVCHAIN_CHECK(!parts.empty(), ErrorCode::kInvalidArgument, "concat_rows: no inputs");
    const std::size_t cols = g.value(parts.front()).cols();
    std::size_t rows = 0;
    for (const Var<T>& p : parts) {
        KVCHAIN_CHECK(g.value(p).cols() == cols, ErrorCode::kShapeMismatch, "concat_rows: width mismatch");
        rows += g.value(p).rows();
    }
    Tensor<T> out({rows, cols});
    std::vector<std::size_t> offsets;
    std::size_t at = 0;
    for (const Var<T>& p : parts) {
        const Tensor<T>& pv = g.value(p);
        offsets.push_back(at);
        std::copy(pv.values().begin(), pv.values().end(), out.data() + at * cols);
        at += pv.rows();
    }
    return g.emit(std::move(out), parts, [parts, offsets, cols](Graph<T>& gr, const Tensor<T>& dout) {
        for (std::size_t i = 0; i < parts.size(); ++i) {
            Tensor<T>* d = gr.grad_buffer(parts[i]);
            if (!d) continue;
            const T* src = dout.data() + offsets[i] * cols;
            for (std::size_t e = 0; e < d->size(); ++e) (*d)[e] += src[e];
        }
    });
}

template <typename T>
Var<T> slice_rows(Graph<T>& g, Var<T> x, std::size_t begin, std::size_t count) {
    const Tensor<T>& xv = g.value(x);
    KVCHAIN_CHECK(begin + count <= xv.rows(), ErrorCode::kShapeMismatch, "slice_rows out of range");
    const std::size_t cols = xv.cols();
    Tensor<T> out({count, cols});
    std::copy_n(xv.data() + begin * cols, count * cols, out.data());
    return g.emit(std::move(out), {x}, [x, begin, cols](Graph<T>& gr, const Tensor<T>& dout) {
        Tensor<T>* d = gr.grad_buffer(x);
        if (!d) return;
        T* dst = d->data() + begin * cols;
        for (std::size_t e = 0; e < dout.size(); ++e) dst[e] += dout[e];
    });
}

/// Embedding lookup: rows of `table` selected by ids.
template <typename T>
Var<T> gather_rows(Graph<T>& g, Var<T> table, std::span<const int> ids) {
    const Tensor<T>& tv = g.value(table);
    const std::size_t cols = tv.cols();
    Tensor<T> out({ids.size(), cols});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        KVCHAIN_CHECK(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < tv.rows(), ErrorCode::kInvalidArgument,
                      "gather_rows: id ", ids[i], " out of range");
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * cols, cols, out.data() + i * cols);
    }
    std::vector<int> idv(ids.begin(), ids.end());
    return g.emit(std::move(out), {table}, [table, idv = std::move(idv), cols](Graph<T>& gr, const Tensor<T>& dout) {
        Tensor<T>* d = gr.grad_buffer(table);
        if (!d) return;
        for (std::size_t i = 0; i < idv.size(); ++i) {
            T* dst = d->data() + static_cast<std::size_t>(idv[i]) * cols;
            for (std::size_t e = 0; e < cols; ++e) dst[e] += dout[i * cols + e];
        }
    });
}

}  // namespace ops
}  // namespace kvchain
