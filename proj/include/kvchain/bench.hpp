// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Cost accounting from traces (prefill tokens, attention FLOPs, KV bytes)
// and wall-clock timing of the downstream model against intermediate length.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "kvchain/chain.hpp"

namespace kvchain {

enum class CacheMode { kText, kShared };

inline const char* to_string(CacheMode m) { return m == CacheMode::kShared ? "fthss" : "text"; }

/// KV storage for `positions` tokens: C = 2 * layers * kv_heads * head_dim *
/// positions * bytes_per_scalar. The text-passing chain keeps one copy per
/// model (n_models * C), the shared-cache chain one (C).
inline std::uint64_t kv_bytes(std::uint64_t layers, std::uint64_t kv_heads, std::uint64_t head_dim,
                              std::uint64_t positions, std::uint64_t bytes_per_scalar, std::uint64_t n_models,
                              CacheMode mode) {
    KVCHAIN_CHECK(n_models >= 1, ErrorCode::kInvalidArgument, "kv_bytes: n_models must be >= 1");
    const std::uint64_t c = 2 * layers * kv_heads * head_dim * positions * bytes_per_scalar;
    return mode == CacheMode::kText ? n_models * c : c;
}

struct FlopEstimate {
    double attention = 0.0;   // QK^T scores plus probability-weighted values
    double projection = 0.0;  // q/k/v/o, MLP and LM head
    double total() const { return attention + projection; }
};

/// Keys seen by `q` causal queries appended after `past` entries.
inline double causal_keys(double q, double past) { return q * past + q * (q + 1.0) / 2.0; }

/// Score and value FLOPs: 2 * q_len * kv_len * head_dim each, per head and
/// layer, with kv_len counted exactly under causality.
inline double attention_flops_for(const ModelConfig& c, double q, double past) {
    return 4.0 * static_cast<double>(c.head_dim * c.n_heads * c.n_layers) * causal_keys(q, past);
}

inline double projection_flops_per_token(const ModelConfig& c) {
    const double d = static_cast<double>(c.d_model), f = static_cast<double>(c.ffn_dim);
    return 2.0 * static_cast<double>(c.n_layers) * (4.0 * d * d + 3.0 * d * f) +
           2.0 * d * static_cast<double>(c.vocab_size);
}

inline FlopEstimate attention_flops(const ModelConfig& c, const ChainTrace& trace) {
    FlopEstimate f;
    for (const TraceStep& s : trace.steps) {
        const double q = static_cast<double>(s.prefill_tokens);
        const double d = static_cast<double>(s.decode_tokens);
        f.attention += attention_flops_for(c, q, static_cast<double>(s.prefill_past));
        f.attention += attention_flops_for(c, d, static_cast<double>(s.prefill_past) + q);
        f.projection += (q + d) * projection_flops_per_token(c);
    }
    return f;
}

/// Prefill tokens of one trace, summed per model (-1 = shared prefill).
inline std::map<int, std::size_t> count_prefill_tokens(const ChainTrace& trace) {
    std::map<int, std::size_t> out;
    for (const TraceStep& s : trace.steps) out[s.model_id] += s.prefill_tokens;
    return out;
}

// ---------------------------------------------------------------------------
// Reports

struct CostRow {
    std::string mode;
    std::size_t intermediate_tokens = 0;
    std::size_t prefill_tokens = 0;
    double attn_flops = 0.0;
    std::uint64_t kv_bytes = 0;
    double mean_s = 0.0;
    double std_s = 0.0;

    friend bool operator==(const CostRow&, const CostRow&) = default;
};

struct CostReport {
    std::vector<CostRow> rows;
};

inline constexpr const char* kCostHeader = "mode,intermediate_tokens,prefill_tokens,attn_flops,kv_bytes,mean_s,std_s";

inline std::string report_render(const CostReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << kCostHeader << '\n';
    for (const CostRow& row : r.rows) {
        os << row.mode << ',' << row.intermediate_tokens << ',' << row.prefill_tokens << ',' << row.attn_flops << ','
           << row.kv_bytes << ',' << row.mean_s << ',' << row.std_s << '\n';
    }
    return os.str();
}

inline CostReport report_parse(const std::string& csv) {
    std::istringstream in(csv);
    std::string line;
    KVCHAIN_CHECK(std::getline(in, line) && line == kCostHeader, ErrorCode::kCorrupt, "cost csv: bad header");
    CostReport r;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::istringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        KVCHAIN_CHECK(f.size() == 7, ErrorCode::kCorrupt, "cost csv: expected 7 columns, got ", f.size());
        try {
            r.rows.push_back({f[0], std::stoull(f[1]), std::stoull(f[2]), std::stod(f[3]), std::stoull(f[4]),
                              std::stod(f[5]), std::stod(f[6])});
        } catch (const std::exception& e) {
            detail::fail(ErrorCode::kCorrupt, "cost csv: ", e.what());
        }
    }
    return r;
}

/// Least-squares quadratic y = a x^2 + b x + c and its R^2.
struct QuadraticFit {
    double a = 0.0, b = 0.0, c = 0.0, r2 = 0.0;
};

inline QuadraticFit fit_quadratic(const std::vector<double>& x, const std::vector<double>& y) {
    KVCHAIN_CHECK(x.size() == y.size() && x.size() >= 3, ErrorCode::kInvalidArgument,
                  "fit_quadratic needs >= 3 paired points");
    // Normal equations on [x^2, x, 1], solved by Gaussian elimination.
    std::array<std::array<double, 4>, 3> m{};
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::array<double, 3> phi{x[i] * x[i], x[i], 1.0};
        for (int r = 0; r < 3; ++r) {
            for (int c = 0; c < 3; ++c) m[r][c] += phi[r] * phi[c];
            m[r][3] += phi[r] * y[i];
        }
    }
    for (int col = 0; col < 3; ++col) {
        int piv = col;
        for (int r = col + 1; r < 3; ++r) {
            if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
        }
        std::swap(m[col], m[piv]);
        KVCHAIN_CHECK(std::abs(m[col][col]) > 1e-300, ErrorCode::kNumeric, "fit_quadratic: singular system");
        for (int r = 0; r < 3; ++r) {
            if (r == col) continue;
            const double f = m[r][col] / m[col][col];
            for (int c = col; c < 4; ++c) m[r][c] -= f * m[col][c];
        }
    }
    QuadraticFit fit{m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2], 0.0};
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double ss_res = 0.0, ss_tot = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double pred = fit.a * x[i] * x[i] + fit.b * x[i] + fit.c;
        ss_res += (y[i] - pred) * (y[i] - pred);
        ss_tot += (y[i] - mean) * (y[i] - mean);
    }
    fit.r2 = ss_tot == 0.0 ? 1.0 : 1.0 - ss_res / ss_tot;
    return fit;
}

// ---------------------------------------------------------------------------
// Timing

struct TimingStats {
    double mean = 0.0;
    double stddev = 0.0;
};

inline TimingStats summarise(const std::vector<double>& xs) {
    TimingStats s;
    if (xs.empty()) return s;
    s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - s.mean) * (x - s.mean);
    s.stddev = xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0;
    return s;
}

/// Inputs for the downstream-latency sweep: shared content, the two prompts,
/// intermediate lengths and how many tokens the downstream model decodes.
template <typename T>
struct LatencySetup {
    std::vector<int> shared;
    PromptParams<T> upstream;
    PromptParams<T> downstream;
    std::vector<std::size_t> intermediate_lengths;
    std::size_t decode_tokens = 4;
    std::size_t trials = 10;
    std::uint64_t seed = 0;
};

namespace detail {

/// Feeds fixed tokens through decode with `model`'s output role, as if the
/// model had generated them.
template <typename T>
void forced_decode(const ModelWeights<T>& w, KvCache<T>& cache, int model, const std::vector<int>& tokens,
                   const MaskRule& rule) {
    for (int tok : tokens) {
        const int ids[1] = {tok};
        const Tensor<T> e = embed_tokens(w, std::span<const int>(ids));
        decode_step<T>(w, e.row(0), cache.next_position(), SegmentRole::output(model), cache, rule);
    }
}

}  // namespace detail

/// Downstream latency against intermediate length, text-passing vs shared
/// cache. The upstream output is a fixed random token string of each length
/// (identical in both modes); only the downstream invocation is timed: in
/// text mode a fresh cache prefilled with shared + intermediate text +
/// prompt, in shared mode a prompt prefill on top of the upstream state.
/// Both then decode `decode_tokens` tokens. One warmup run per point is
/// discarded.
template <typename T>
CostReport time_intermediate_lengths(const ModelWeights<T>& w, const LatencySetup<T>& setup,
                                     const MaskRule& rule = {}) {
    KVCHAIN_CHECK(setup.trials >= 3, ErrorCode::kInvalidArgument, "timing needs >= 3 trials");
    const int up = setup.upstream.model_id, down = setup.downstream.model_id;
    const MaskRule text_rule{false};
    CostReport rep;
    std::mt19937_64 rng(setup.seed);
    for (std::size_t len : setup.intermediate_lengths) {
        std::vector<int> inter(len);
        for (int& t : inter) t = std::uniform_int_distribution<int>(vocab::kKeyBase, vocab::kSize - 1)(rng);
        std::vector<int> decode_in{vocab::kStart};
        for (std::size_t i = 1; i < setup.decode_tokens; ++i) decode_in.push_back(inter[i % std::max<std::size_t>(len, 1)]);

        // Upstream state of the shared cache: shared, upstream prompt, then the
        // intermediate produced by decode.
        KvCache<T> upstream_state = KvCache<T>::for_config(w.config);
        detail::prefill_tokens(w, upstream_state, setup.shared, SegmentRole::shared(), rule);
        detail::prefill_prompt(w, upstream_state, setup.upstream, rule);
        std::vector<int> produced{vocab::kStart};
        produced.insert(produced.end(), inter.begin(), inter.end());
        detail::forced_decode(w, upstream_state, up, produced, rule);

        std::vector<double> t_text, t_shared;
        std::size_t prefill_text = 0, prefill_shared = 0, entries_text = 0, entries_shared = 0;
        ChainTrace tr_text, tr_shared;
        for (std::size_t trial = 0; trial <= setup.trials; ++trial) {
            {
                const auto t0 = detail::Clock::now();
                KvCache<T> cache = KvCache<T>::for_config(w.config);
                detail::prefill_tokens(w, cache, setup.shared, SegmentRole::shared(), text_rule);
                detail::prefill_tokens(w, cache, inter, SegmentRole::input(down), text_rule);
                detail::prefill_prompt(w, cache, setup.downstream, text_rule);
                prefill_text = cache.size();
                detail::forced_decode(w, cache, down, decode_in, text_rule);
                const double s = detail::seconds_since(t0);
                entries_text = cache.size();
                if (trial > 0) t_text.push_back(s);
            }
            {
                KvCache<T> cache = upstream_state;
                const auto t0 = detail::Clock::now();
                const std::size_t before = cache.size();
                detail::prefill_prompt(w, cache, setup.downstream, rule);
                prefill_shared = cache.size() - before;
                detail::forced_decode(w, cache, down, decode_in, rule);
                const double s = detail::seconds_since(t0);
                entries_shared = cache.size();
                if (trial > 0) t_shared.push_back(s);
            }
        }
        TraceStep text_step;
        text_step.model_id = down;
        text_step.prefill_tokens = prefill_text;
        text_step.decode_tokens = decode_in.size();
        TraceStep shared_step;
        shared_step.model_id = down;
        shared_step.prefill_past = upstream_state.size();
        shared_step.prefill_tokens = prefill_shared;
        shared_step.decode_tokens = decode_in.size();
        tr_text.steps = {text_step};
        tr_shared.steps = {shared_step};

        const std::size_t entry = detail::entry_bytes<T>(w.config);
        const TimingStats st = summarise(t_text), ss = summarise(t_shared);
        rep.rows.push_back({"text", len, prefill_text, attention_flops(w.config, tr_text).attention,
                            static_cast<std::uint64_t>(entries_text * entry), st.mean, st.stddev});
        rep.rows.push_back({"fthss", len, prefill_shared, attention_flops(w.config, tr_shared).attention,
                            static_cast<std::uint64_t>(entries_shared * entry), ss.mean, ss.stddev});
    }
    return rep;
}

/// Whole-chain timing over an eval subset: one warmup pass, then `trials`
/// timed passes per mode. Token counts come from the traces.
template <typename T>
CostReport time_chain(const ModelWeights<T>& w, const ChainSpec<T>& text_spec, const ChainSpec<T>& fthss_spec,
                      const Dataset& data, std::size_t trials) {
    KVCHAIN_CHECK(trials >= 3, ErrorCode::kInvalidArgument, "timing needs >= 3 trials");
    CostReport rep;
    for (const bool shared : {false, true}) {
        const ChainSpec<T>& spec = shared ? fthss_spec : text_spec;
        std::vector<double> times;
        std::size_t prefill = 0, inter = 0;
        double flops = 0.0;
        std::uint64_t bytes = 0;
        for (std::size_t trial = 0; trial <= trials; ++trial) {
            const auto t0 = detail::Clock::now();
            prefill = inter = 0;
            flops = 0.0;
            bytes = 0;
            for (const SyntheticExample& ex : data.examples) {
                const ChainRequest req{ex.id, ex.shared, &ex};
                const ChainResult r = shared ? run_chain_fthss(w, spec, req) : run_chain_text(w, spec, req);
                prefill += r.trace.total_prefill();
                flops += attention_flops(w.config, r.trace).attention;
                bytes = std::max<std::uint64_t>(bytes, r.trace.peak_kv_bytes());
                for (std::size_t s = 0; s + 1 < r.transcript.size(); ++s) inter += r.transcript[s].output.size();
            }
            if (trial > 0) times.push_back(detail::seconds_since(t0));
        }
        const TimingStats st = summarise(times);
        const std::size_t n = std::max<std::size_t>(data.examples.size(), 1);
        rep.rows.push_back({shared ? "fthss" : "text", inter / n, prefill, flops, bytes, st.mean, st.stddev});
    }
    return rep;
}

}  // namespace kvchain
