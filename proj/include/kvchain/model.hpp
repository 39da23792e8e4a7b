// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "kvchain/graph.hpp"
#include "kvchain/layout.hpp"
#include "kvchain/rope.hpp"
#include "kvchain/tensor.hpp"

namespace kvchain {

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t head_dim = 16;
    std::size_t ffn_dim = 256;
    std::size_t vocab_size = 64;
    double rope_base = 10000.0;
    double norm_eps = 1e-5;
    std::size_t max_seq = 256;

    void validate() const {
        KVCHAIN_CHECK(d_model > 0 && n_layers > 0 && n_heads > 0 && head_dim > 0 && ffn_dim > 0 && vocab_size > 0 &&
                          max_seq > 0,
                      ErrorCode::kInvalidArgument, "model config: every dimension must be positive");
        KVCHAIN_CHECK(d_model == n_heads * head_dim, ErrorCode::kInvalidArgument,
                      "model config: d_model must equal n_heads * head_dim");
        KVCHAIN_CHECK(head_dim % 2 == 0, ErrorCode::kInvalidArgument, "model config: head_dim must be even");
        KVCHAIN_CHECK(rope_base > 1.0 && norm_eps >= 0.0, ErrorCode::kInvalidArgument,
                      "model config: bad rope_base or norm_eps");
    }

    /// FNV-1a over every field; tags cache files to the model shape they fit.
    std::uint64_t hash() const {
        std::uint64_t h = 1469598103934665603ull;
        auto mix = [&h](std::uint64_t v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (8 * i)) & 0xffu;
                h *= 1099511628211ull;
            }
        };
        for (std::size_t v : {d_model, n_layers, n_heads, head_dim, ffn_dim, vocab_size, max_seq}) mix(v);
        std::uint64_t bits = 0;
        std::memcpy(&bits, &rope_base, sizeof(bits));
        mix(bits);
        std::memcpy(&bits, &norm_eps, sizeof(bits));
        mix(bits);
        return h;
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerWeights {
    Tensor<T> attn_norm, wq, wk, wv, wo;
    Tensor<T> mlp_norm, w_gate, w_up, w_down;
};

/// Frozen base parameters. Projections are stored [in x out] so y = x . W.
template <typename T>
struct ModelWeights {
    ModelConfig config;
    Tensor<T> embedding;  // [vocab x d_model]
    std::vector<LayerWeights<T>> layers;
    Tensor<T> final_norm;  // [d_model]
    Tensor<T> lm_head;     // [d_model x vocab]

    static ModelWeights init(const ModelConfig& config, std::uint64_t seed) {
        config.validate();
        std::mt19937_64 rng(seed);
        auto gaussian = [&rng](Shape shape, double stddev) {
            Tensor<T> t(std::move(shape));
            std::normal_distribution<double> dist(0.0, stddev);
            for (T& v : t.values()) v = static_cast<T>(dist(rng));
            return t;
        };
        const std::size_t d = config.d_model, f = config.ffn_dim;
        const double proj = 1.0 / std::sqrt(static_cast<double>(d));
        const double resid = proj / std::sqrt(2.0 * static_cast<double>(config.n_layers));
        ModelWeights w;
        w.config = config;
        w.embedding = gaussian({config.vocab_size, d}, 1.0);
        for (std::size_t l = 0; l < config.n_layers; ++l) {
            LayerWeights<T> lw;
            lw.attn_norm = Tensor<T>({d}, T(1));
            lw.wq = gaussian({d, d}, proj);
            lw.wk = gaussian({d, d}, proj);
            lw.wv = gaussian({d, d}, proj);
            lw.wo = gaussian({d, d}, resid);
            lw.mlp_norm = Tensor<T>({d}, T(1));
            lw.w_gate = gaussian({d, f}, proj);
            lw.w_up = gaussian({d, f}, proj);
            lw.w_down = gaussian({f, d}, resid * std::sqrt(static_cast<double>(d) / static_cast<double>(f)));
            w.layers.push_back(std::move(lw));
        }
        w.final_norm = Tensor<T>({d}, T(1));
        w.lm_head = gaussian({d, config.vocab_size}, proj);
        return w;
    }

    /// Visits every tensor in checkpoint order.
    template <typename F>
    void for_each_tensor(F&& f) {
        f("embedding", embedding);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            LayerWeights<T>& lw = layers[l];
            f(p + "attn_norm", lw.attn_norm);
            f(p + "wq", lw.wq);
            f(p + "wk", lw.wk);
            f(p + "wv", lw.wv);
            f(p + "wo", lw.wo);
            f(p + "mlp_norm", lw.mlp_norm);
            f(p + "w_gate", lw.w_gate);
            f(p + "w_up", lw.w_up);
            f(p + "w_down", lw.w_down);
        }
        f("final_norm", final_norm);
        f("lm_head", lm_head);
    }

    template <typename F>
    void for_each_tensor(F&& f) const {
        const_cast<ModelWeights*>(this)->for_each_tensor(
            [&f](const std::string& name, Tensor<T>& t) { f(name, static_cast<const Tensor<T>&>(t)); });
    }

    template <typename U>
    ModelWeights<U> cast() const {
        ModelWeights<U> out;
        out.config = config;
        out.embedding = embedding.template cast<U>();
        for (const LayerWeights<T>& lw : layers) {
            out.layers.push_back({lw.attn_norm.template cast<U>(), lw.wq.template cast<U>(), lw.wk.template cast<U>(),
                                  lw.wv.template cast<U>(), lw.wo.template cast<U>(), lw.mlp_norm.template cast<U>(),
                                  lw.w_gate.template cast<U>(), lw.w_up.template cast<U>(),
                                  lw.w_down.template cast<U>()});
        }
        out.final_norm = final_norm.template cast<U>();
        out.lm_head = lm_head.template cast<U>();
        return out;
    }

    friend bool operator==(const ModelWeights& a, const ModelWeights& b) {
        bool same = a.config == b.config && a.layers.size() == b.layers.size();
        if (!same) return false;
        std::vector<const Tensor<T>*> ta, tb;
        a.for_each_tensor([&ta](const std::string&, const Tensor<T>& t) { ta.push_back(&t); });
        b.for_each_tensor([&tb](const std::string&, const Tensor<T>& t) { tb.push_back(&t); });
        for (std::size_t i = 0; i < ta.size(); ++i) {
            if (!(*ta[i] == *tb[i])) return false;
        }
        return true;
    }
};

struct CacheEntryMeta {
    std::int64_t position = 0;
    SegmentRole role;

    friend bool operator==(const CacheEntryMeta&, const CacheEntryMeta&) = default;
};

/// Per-layer post-RoPE keys and values in arrival order, with the position
/// and role of every entry. Entries written by prefill and by decode look the
/// same; only how they were produced differs.
template <typename T>
class KvCache {
public:
    KvCache() = default;
    KvCache(std::size_t n_layers, std::size_t width, std::uint64_t config_hash = 0)
        : m_width(width), m_config_hash(config_hash) {
        for (std::size_t l = 0; l < n_layers; ++l) {
            m_keys.emplace_back(Shape{0, width});
            m_values.emplace_back(Shape{0, width});
        }
    }

    static KvCache for_config(const ModelConfig& c) { return KvCache(c.n_layers, c.d_model, c.hash()); }

    std::size_t size() const noexcept { return m_meta.size(); }
    bool empty() const noexcept { return m_meta.empty(); }
    std::size_t n_layers() const noexcept { return m_keys.size(); }
    std::size_t width() const noexcept { return m_width; }
    std::uint64_t config_hash() const noexcept { return m_config_hash; }

    const Tensor<T>& keys(std::size_t layer) const { return m_keys.at(layer); }
    const Tensor<T>& values(std::size_t layer) const { return m_values.at(layer); }
    const std::vector<CacheEntryMeta>& meta() const noexcept { return m_meta; }

    std::vector<SegmentRole> roles() const {
        std::vector<SegmentRole> r;
        r.reserve(m_meta.size());
        for (const CacheEntryMeta& m : m_meta) r.push_back(m.role);
        return r;
    }

    /// Smallest position the next appended entry may take.
    std::int64_t next_position() const noexcept { return m_next_position; }

    /// Reserves a position gap (e.g. entries filtered out of a stored cache).
    void set_next_position(std::int64_t p) {
        KVCHAIN_CHECK(p >= m_next_position, ErrorCode::kPrecondition, "cache next position cannot move back");
        m_next_position = p;
    }

    /// Appends rows to every layer. `keys[l]`/`values[l]` are [t x width].
    void append(std::span<const Tensor<T>> keys, std::span<const Tensor<T>> values,
                std::span<const SegmentRole> roles, std::span<const std::int64_t> positions) {
        const std::size_t t = roles.size();
        KVCHAIN_CHECK(keys.size() == n_layers() && values.size() == n_layers(), ErrorCode::kShapeMismatch,
                      "cache append: layer count mismatch");
        KVCHAIN_CHECK(positions.size() == t, ErrorCode::kShapeMismatch, "cache append: positions/roles mismatch");
        for (std::size_t i = 0; i < t; ++i) {
            const std::int64_t floor = i == 0 ? m_next_position : positions[i - 1] + 1;
            KVCHAIN_CHECK(positions[i] >= floor, ErrorCode::kPrecondition, "cache append: position ", positions[i],
                          " does not continue after ", floor - 1);
        }
        for (std::size_t l = 0; l < n_layers(); ++l) {
            KVCHAIN_CHECK(keys[l].rows() == t && values[l].rows() == t && keys[l].cols() == m_width,
                          ErrorCode::kShapeMismatch, "cache append: tensor shape mismatch");
            m_keys[l].append_rows(keys[l].values(), t);
            m_values[l].append_rows(values[l].values(), t);
        }
        for (std::size_t i = 0; i < t; ++i) m_meta.push_back({positions[i], roles[i]});
        if (t > 0) m_next_position = positions.back() + 1;
    }

    /// Copy keeping entries whose role passes `keep`. Positions are kept as
    /// they are; RoPE already baked them into the keys.
    KvCache filtered(const std::function<bool(const SegmentRole&)>& keep) const {
        KvCache out(n_layers(), m_width, m_config_hash);
        for (std::size_t i = 0; i < size(); ++i) {
            if (!keep(m_meta[i].role)) continue;
            for (std::size_t l = 0; l < n_layers(); ++l) {
                out.m_keys[l].append_rows(m_keys[l].row(i), 1);
                out.m_values[l].append_rows(m_values[l].row(i), 1);
            }
            out.m_meta.push_back(m_meta[i]);
        }
        out.m_next_position = m_next_position;
        return out;
    }

    /// Used by deserialisation; validates shape and position invariants.
    static KvCache from_parts(std::vector<Tensor<T>> keys, std::vector<Tensor<T>> values,
                              std::vector<CacheEntryMeta> meta, std::int64_t next_position, std::uint64_t config_hash) {
        KVCHAIN_CHECK(keys.size() == values.size() && !keys.empty(), ErrorCode::kCorrupt, "cache: layer mismatch");
        KvCache out;
        out.m_width = keys.front().cols();
        out.m_config_hash = config_hash;
        for (std::size_t l = 0; l < keys.size(); ++l) {
            KVCHAIN_CHECK(keys[l].rows() == meta.size() && values[l].rows() == meta.size() &&
                              keys[l].cols() == out.m_width && values[l].cols() == out.m_width,
                          ErrorCode::kCorrupt, "cache: layer ", l, " shape does not match entry count");
        }
        for (std::size_t i = 1; i < meta.size(); ++i) {
            KVCHAIN_CHECK(meta[i].position > meta[i - 1].position, ErrorCode::kCorrupt,
                          "cache: positions not strictly increasing");
        }
        KVCHAIN_CHECK(meta.empty() || next_position > meta.back().position, ErrorCode::kCorrupt,
                      "cache: next position precedes last entry");
        out.m_keys = std::move(keys);
        out.m_values = std::move(values);
        out.m_meta = std::move(meta);
        out.m_next_position = next_position;
        return out;
    }

    friend bool operator==(const KvCache& a, const KvCache& b) {
        return a.m_width == b.m_width && a.m_config_hash == b.m_config_hash && a.m_keys == b.m_keys &&
               a.m_values == b.m_values && a.m_meta == b.m_meta && a.m_next_position == b.m_next_position;
    }

private:
    std::size_t m_width = 0;
    std::uint64_t m_config_hash = 0;
    std::vector<Tensor<T>> m_keys;
    std::vector<Tensor<T>> m_values;
    std::vector<CacheEntryMeta> m_meta;
    std::int64_t m_next_position = 0;
};

template <typename T>
KvCache<T> filter_cache(const KvCache<T>& cache, const std::function<bool(const SegmentRole&)>& keep) {
    return cache.filtered(keep);
}

// ---------------------------------------------------------------------------
// Graph-level forward

template <typename T>
struct BoundWeights {
    using Var = typename Graph<T>::Var;
    struct Layer {
        Var attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down;
    };
    Var embedding;
    std::vector<Layer> layers;
    Var final_norm, lm_head;
};

/// Places the weights into `g`, as registered parameters when `trainable`.
template <typename T>
BoundWeights<T> bind_weights(Graph<T>& g, const ModelWeights<T>& w, bool trainable) {
    auto put = [&g, trainable](const Tensor<T>& t) { return trainable ? g.parameter(t) : g.constant_ref(t); };
    BoundWeights<T> b;
    b.embedding = put(w.embedding);
    for (const LayerWeights<T>& lw : w.layers) {
        b.layers.push_back({put(lw.attn_norm), put(lw.wq), put(lw.wk), put(lw.wv), put(lw.wo), put(lw.mlp_norm),
                            put(lw.w_gate), put(lw.w_up), put(lw.w_down)});
    }
    b.final_norm = put(w.final_norm);
    b.lm_head = put(w.lm_head);
    return b;
}

template <typename T>
struct GraphForward {
    using Var = typename Graph<T>::Var;
    Var hidden;  // final-norm output, [t x d_model]
    Var logits;  // [t x vocab]
    std::vector<Var> keys;    // per layer, new rows only, post-RoPE
    std::vector<Var> values;  // per layer, new rows only
};

/// One pass over `t` incoming rows that may attend to `past` entries. Masks
/// come from layout.visible over past roles followed by incoming roles.
template <typename T>
GraphForward<T> forward_graph(Graph<T>& g, const ModelConfig& cfg, const BoundWeights<T>& w,
                              typename Graph<T>::Var x, std::span<const SegmentRole> roles,
                              std::span<const std::int64_t> positions, const KvCache<T>* past, const MaskRule& rule,
                              std::vector<Tensor<T>>* attention_probs = nullptr) {
    using Var = typename Graph<T>::Var;
    const std::size_t t = roles.size();
    KVCHAIN_CHECK(g.value(x).rows() == t && g.value(x).cols() == cfg.d_model, ErrorCode::kShapeMismatch,
                  "forward: input is ", shape_str(g.value(x).shape()), ", expected ", t, "x", cfg.d_model);
    KVCHAIN_CHECK(positions.size() == t, ErrorCode::kShapeMismatch, "forward: positions length mismatch");
    const std::size_t n_past = past ? past->size() : 0;
    KVCHAIN_CHECK(n_past + t <= cfg.max_seq, ErrorCode::kPrecondition, "sequence overflow: ", n_past + t,
                  " tokens exceed max_seq ", cfg.max_seq);
    const std::vector<SegmentRole> past_roles = past ? past->roles() : std::vector<SegmentRole>{};
    const BoolMatrix mask = build_mask_after(past_roles, roles, rule);
    // Keys enter the cache unrotated; attention rotates each pair by its
    // position offset.
    ops::RotaryPositions rotary{{positions.begin(), positions.end()}, {}, rope_freqs(cfg.head_dim, cfg.rope_base)};
    if (past) {
        for (const CacheEntryMeta& m : past->meta()) rotary.k_pos.push_back(m.position);
    }
    rotary.k_pos.insert(rotary.k_pos.end(), positions.begin(), positions.end());
    const T eps = static_cast<T>(cfg.norm_eps);

    GraphForward<T> out;
    Var h = x;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const auto& lw = w.layers[l];
        Var n1 = ops::rmsnorm(g, h, lw.attn_norm, eps);
        Var q = ops::matmul(g, n1, lw.wq);
        Var k = ops::matmul(g, n1, lw.wk);
        Var v = ops::matmul(g, n1, lw.wv);
        out.keys.push_back(k);
        out.values.push_back(v);
        Var k_all = k, v_all = v;
        if (n_past > 0) {
            k_all = ops::concat_rows<T>(g, {g.constant_ref(past->keys(l)), k});
            v_all = ops::concat_rows<T>(g, {g.constant_ref(past->values(l)), v});
        }
        Tensor<T> probs;
        Var att = ops::attention(g, q, k_all, v_all, mask, cfg.n_heads, attention_probs ? &probs : nullptr, &rotary);
        if (attention_probs) attention_probs->push_back(std::move(probs));
        h = ops::add(g, h, ops::matmul(g, att, lw.wo));
        Var n2 = ops::rmsnorm(g, h, lw.mlp_norm, eps);
        h = ops::add(g, h, ops::swiglu(g, n2, lw.w_gate, lw.w_up, lw.w_down));
    }
    out.hidden = ops::rmsnorm(g, h, w.final_norm, eps);
    out.logits = ops::matmul(g, out.hidden, w.lm_head);
    return out;
}

// ---------------------------------------------------------------------------
// Tensor-level entry points

template <typename T>
Tensor<T> embed_tokens(const ModelWeights<T>& w, std::span<const int> ids) {
    const std::size_t d = w.config.d_model;
    Tensor<T> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        KVCHAIN_CHECK(ids[i] >= 0 && static_cast<std::size_t>(ids[i]) < w.config.vocab_size,
                      ErrorCode::kInvalidArgument, "token id ", ids[i], " outside vocabulary");
        std::copy_n(w.embedding.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    return out;
}

template <typename T>
struct FullForward {
    Tensor<T> hidden;
    Tensor<T> logits;
    std::vector<Tensor<T>> keys;
    std::vector<Tensor<T>> values;
};

/// Single pass over a whole layout with build_mask(layout). Training path and
/// the oracle for cache equivalence.
template <typename T>
FullForward<T> forward_full(const ModelWeights<T>& w, const Tensor<T>& embeddings, const SegmentLayout& layout,
                            const MaskRule& rule = {}) {
    KVCHAIN_CHECK(layout.total_length() == embeddings.rows(), ErrorCode::kShapeMismatch,
                  "forward_full: layout length ", layout.total_length(), " != embedding rows ", embeddings.rows());
    Graph<T> g(false);
    const BoundWeights<T> bw = bind_weights(g, w, false);
    const std::vector<SegmentRole> roles = layout.roles();
    const std::vector<std::int64_t> positions = assign_positions(layout);
    const GraphForward<T> f =
        forward_graph(g, w.config, bw, g.constant_ref(embeddings), roles, positions, static_cast<const KvCache<T>*>(nullptr), rule);
    FullForward<T> out{g.value(f.hidden), g.value(f.logits), {}, {}};
    for (std::size_t l = 0; l < f.keys.size(); ++l) {
        out.keys.push_back(g.value(f.keys[l]));
        out.values.push_back(g.value(f.values[l]));
    }
    return out;
}

template <typename T>
struct PrefillResult {
    Tensor<T> hidden;
    Tensor<T> logits;
};

/// Computes K/V for `embeddings` attending to everything already cached
/// (subject to causality and visibility) and appends them.
template <typename T>
PrefillResult<T> prefill(const ModelWeights<T>& w, const Tensor<T>& embeddings, std::span<const SegmentRole> roles,
                         std::span<const std::int64_t> positions, KvCache<T>& cache, const MaskRule& rule = {},
                         std::vector<Tensor<T>>* attention_probs = nullptr) {
    KVCHAIN_CHECK(embeddings.rows() == roles.size(), ErrorCode::kShapeMismatch, "prefill: ", embeddings.rows(),
                  " rows but ", roles.size(), " roles");
    KVCHAIN_CHECK(cache.n_layers() == w.config.n_layers && cache.width() == w.config.d_model,
                  ErrorCode::kShapeMismatch, "prefill: cache does not match model shape");
    for (std::size_t i = 0; i < positions.size(); ++i) {
        const std::int64_t floor = i == 0 ? cache.next_position() : positions[i - 1] + 1;
        KVCHAIN_CHECK(positions[i] >= floor, ErrorCode::kPrecondition, "prefill: position ", positions[i],
                      " regresses (expected >= ", floor, ")");
    }
    Graph<T> g(false);
    const BoundWeights<T> bw = bind_weights(g, w, false);
    const GraphForward<T> f =
        forward_graph(g, w.config, bw, g.constant_ref(embeddings), roles, positions, &cache, rule, attention_probs);
    std::vector<Tensor<T>> keys, values;
    for (std::size_t l = 0; l < f.keys.size(); ++l) {
        keys.push_back(g.value(f.keys[l]));
        values.push_back(g.value(f.values[l]));
    }
    PrefillResult<T> out{g.value(f.hidden), g.value(f.logits)};
    cache.append(keys, values, roles, positions);
    return out;
}

template <typename T>
PrefillResult<T> prefill(const ModelWeights<T>& w, const Tensor<T>& embeddings, const SegmentLayout& layout,
                         KvCache<T>& cache, const MaskRule& rule = {}) {
    const std::vector<SegmentRole> roles = layout.roles();
    const std::vector<std::int64_t> positions = assign_positions(layout);
    return prefill(w, embeddings, roles, positions, cache, rule);
}

/// One autoregressive step: appends exactly one entry tagged with
/// (position, role) and returns next-token logits.
template <typename T>
Tensor<T> decode_step(const ModelWeights<T>& w, std::span<const T> embedding, std::int64_t position,
                      const SegmentRole& role, KvCache<T>& cache, const MaskRule& rule = {},
                      std::vector<Tensor<T>>* attention_probs = nullptr) {
    KVCHAIN_CHECK(position == cache.next_position(), ErrorCode::kPrecondition, "decode_step: position ", position,
                  " != cache next position ", cache.next_position());
    KVCHAIN_CHECK(embedding.size() == w.config.d_model, ErrorCode::kShapeMismatch, "decode_step: bad embedding");
    Tensor<T> x({1, w.config.d_model}, std::vector<T>(embedding.begin(), embedding.end()));
    const SegmentRole roles[1] = {role};
    const std::int64_t positions[1] = {position};
    PrefillResult<T> r = prefill<T>(w, x, roles, positions, cache, rule, attention_probs);
    r.logits.reshape({w.config.vocab_size});
    return std::move(r.logits);
}

template <typename T>
int argmax(std::span<const T> v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) best = i;
    }
    return static_cast<int>(best);
}

}  // namespace kvchain
