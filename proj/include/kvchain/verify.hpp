// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Self-check suites run by `kvchain verify`: each rebuilds a property from a
// slow or first-principles computation and compares it with the fast path.

#include <chrono>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "kvchain/chain.hpp"
#include "kvchain/trainer.hpp"

namespace kvchain {

struct SuiteResult {
    std::string name;
    bool passed = false;
    double metric = 0.0;     // worst observed error (or mismatch count)
    double threshold = 0.0;  // pass when metric <= threshold
    std::size_t cases = 0;
    double seconds = 0.0;
};

struct VerifyOptions {
    std::uint64_t seed = 0;
    bool mask_foreign_prompts = true;
    std::filesystem::path scratch;  // offline caches for the equivalence suite
};

namespace detail {

inline ModelConfig verify_config() {
    ModelConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 2;
    c.head_dim = 8;
    c.ffn_dim = 32;
    c.vocab_size = vocab::kSize;
    c.max_seq = 128;
    return c;
}

inline SegmentRole random_role(std::mt19937_64& rng, int n_models) {
    const int kind = std::uniform_int_distribution<int>(0, 3)(rng);
    const int m = std::uniform_int_distribution<int>(0, n_models - 1)(rng);
    switch (kind) {
        case 0: return SegmentRole::shared();
        case 1: return SegmentRole::prompt(m);
        case 2: return SegmentRole::input(m);
        default: return SegmentRole::output(m);
    }
}

template <typename T>
Tensor<T> uniform_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::uniform_real_distribution<double> u(-scale, scale);
    Tensor<T> t(std::move(shape));
    for (T& v : t.values()) v = static_cast<T>(u(rng));
    return t;
}

template <typename F>
SuiteResult timed(const std::string& name, double threshold, F&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteResult r;
    r.name = name;
    r.threshold = threshold;
    body(r);
    r.passed = r.metric <= threshold;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

}  // namespace detail

/// Mask against a direct reading of the visibility rule, plus prompt
/// isolation, on random layouts of up to 12 tokens.
inline SuiteResult verify_mask(const VerifyOptions& opt, std::size_t n_sequences = 500) {
    return detail::timed("mask-brute-force", 0.0, [&](SuiteResult& r) {
        std::mt19937_64 rng(opt.seed ^ 0x6d61736bull);
        const MaskRule rule{opt.mask_foreign_prompts};
        for (std::size_t s = 0; s < n_sequences; ++s) {
            SegmentLayout layout(0);
            const std::size_t n = std::uniform_int_distribution<std::size_t>(1, 12)(rng);
            for (std::size_t i = 0; i < n; ++i) layout.append(detail::random_role(rng, 3), 1);
            const auto roles = layout.roles();
            const AttentionMask mask = build_mask(layout, rule);
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) {
                    bool want = j <= i;
                    if (want && rule.mask_foreign_prompts && roles[j].is_prompt()) {
                        want = roles[i].kind != SegmentRole::Kind::kShared && roles[i].model == roles[j].model;
                    }
                    r.metric += mask(i, j) != want ? 1.0 : 0.0;
                    // Isolation: a prompt is seen only by its own model's tokens.
                    if (rule.mask_foreign_prompts && mask(i, j) && roles[j].is_prompt() &&
                        (roles[i].model != roles[j].model || roles[i].kind == SegmentRole::Kind::kShared)) {
                        r.metric += 1.0;
                    }
                }
            }
            ++r.cases;
        }
    });
}

/// Prefill of a random prefix followed by token-by-token decode reproduces
/// the full-sequence logits.
template <typename T>
SuiteResult verify_cache(const VerifyOptions& opt, std::size_t n_layouts = 100) {
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-10;
    return detail::timed("cache-equivalence", tol, [&](SuiteResult& r) {
        const ModelConfig cfg = detail::verify_config();
        const auto w = ModelWeights<T>::init(cfg, opt.seed + 1);
        std::mt19937_64 rng(opt.seed ^ 0x6361636865ull);
        const MaskRule rule{opt.mask_foreign_prompts};
        for (std::size_t s = 0; s < n_layouts; ++s) {
            SegmentLayout layout(static_cast<std::int64_t>(std::uniform_int_distribution<int>(0, 20)(rng)));
            const std::size_t n = std::uniform_int_distribution<std::size_t>(2, 64)(rng);
            std::size_t placed = 0;
            while (placed < n) {
                const std::size_t len = std::min(n - placed, std::uniform_int_distribution<std::size_t>(1, 8)(rng));
                layout.append(detail::random_role(rng, 2), len);
                placed += len;
            }
            const Tensor<T> x = detail::uniform_tensor<T>({n, cfg.d_model}, rng);
            const auto full = forward_full(w, x, layout, rule);
            const auto roles = layout.roles();
            const auto positions = assign_positions(layout);
            const std::size_t split = std::uniform_int_distribution<std::size_t>(1, n - 1)(rng);
            KvCache<T> cache = KvCache<T>::for_config(cfg);
            Tensor<T> head({split, cfg.d_model});
            std::copy(x.values().begin(), x.values().begin() + static_cast<std::ptrdiff_t>(split * cfg.d_model),
                      head.values().begin());
            const auto pre = prefill<T>(w, head, std::span(roles).first(split), std::span(positions).first(split),
                                        cache, rule);
            for (std::size_t i = 0; i < split; ++i) {
                for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
                    r.metric = std::max(r.metric, std::abs(static_cast<double>(pre.logits.at(i, v)) -
                                                           static_cast<double>(full.logits.at(i, v))));
                }
            }
            for (std::size_t i = split; i < n; ++i) {
                const Tensor<T> logits = decode_step<T>(w, x.row(i), positions[i], roles[i], cache, rule);
                for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
                    r.metric = std::max(r.metric, std::abs(static_cast<double>(logits[v]) -
                                                           static_cast<double>(full.logits.at(i, v))));
                }
            }
            ++r.cases;
        }
    });
}

/// score(m, n) == score(m + s, n + s) over random vectors and offsets.
template <typename T>
SuiteResult verify_rope(const VerifyOptions& opt, std::size_t n_tuples = 1000) {
    const double tol = std::is_same_v<T, float> ? 1e-5 : 1e-10;
    return detail::timed("rope-shift", tol, [&](SuiteResult& r) {
        const RopeFrequencies freqs = rope_freqs(16);
        std::mt19937_64 rng(opt.seed ^ 0x726f7065ull);
        std::uniform_int_distribution<std::int64_t> pos(0, 200), shift(0, 300);
        for (std::size_t i = 0; i < n_tuples; ++i) {
            const Tensor<T> q = detail::uniform_tensor<T>({16}, rng), k = detail::uniform_tensor<T>({16}, rng);
            r.metric = std::max(
                r.metric, static_cast<double>(score_shift_invariance_check(q, k, pos(rng), pos(rng), shift(rng), freqs)));
            ++r.cases;
        }
    });
}

/// Central differences of the downstream training loss (upstream prompt
/// frozen) against the analytic prompt gradient, 64-bit.
inline SuiteResult verify_grad(const VerifyOptions& opt, std::size_t n_coords = 48) {
    return detail::timed("grad-check", 1e-4, [&](SuiteResult& r) {
        const ModelConfig cfg = detail::verify_config();
        const auto w = ModelWeights<double>::init(cfg, opt.seed + 2);
        auto a = PromptParams<double>::init(0, 3, cfg.d_model, opt.seed + 3, 0.5);
        a.trained = true;
        auto b = PromptParams<double>::init(1, 3, cfg.d_model, opt.seed + 4, 0.5);
        const auto ex = gen_compress_qa(opt.seed, 1).examples[0];
        const Sequence seq = single_round_sequence(ex, 1, {{0, 3}, {1, 3}});
        const MaskRule rule{opt.mask_foreign_prompts};
        std::vector<Tensor<double>> grads{Tensor<double>(b.embeddings.shape())};
        prompt_sequence_grad<double>(w, seq, {&b}, {&a}, {1}, rule, grads);
        const auto loss = [&]() {
            std::vector<Tensor<double>> scratch{Tensor<double>(b.embeddings.shape())};
            return prompt_sequence_grad<double>(w, seq, {&b}, {&a}, {1}, rule, scratch);
        };
        const GradCheckResult g = grad_check(loss, b.embeddings, grads[0], n_coords, 1e-5, opt.seed);
        r.metric = g.max_rel_error;
        r.cases = g.coordinates;
    });
}

/// Stored-cache and recompute training from the same seed give identical
/// per-step losses and prompts.
template <typename T>
SuiteResult verify_offline_online(const VerifyOptions& opt, long steps = 6) {
    return detail::timed("offline-online", 0.0, [&](SuiteResult& r) {
        const ModelConfig cfg = detail::verify_config();
        const auto w = ModelWeights<T>::init(cfg, opt.seed + 5);
        auto a = PromptParams<T>::init(0, 3, cfg.d_model, opt.seed + 6, 0.5);
        a.trained = true;
        const Dataset data = gen_compress_qa(opt.seed + 7, 6);
        TrainConfig tc;
        tc.lr = 1e-2;
        tc.steps = steps;
        tc.batch_size = 2;
        tc.seed = opt.seed;
        tc.n_prompt_tokens = 3;
        tc.mask_rule = MaskRule{opt.mask_foreign_prompts};
        const auto online = train_fthss_online(w, {&a}, data, 1, tc);
        tc.cache_dir = opt.scratch.empty() ? std::filesystem::temp_directory_path() / "kvchain-verify" : opt.scratch;
        std::filesystem::create_directories(tc.cache_dir);
        const auto offline = train_fthss_offline(w, {&a}, data, 1, tc);
        for (std::size_t s = 0; s < online.log.size(); ++s) {
            r.metric = std::max(r.metric, std::abs(online.log[s].loss - offline.log[s].loss));
            ++r.cases;
        }
        const auto& p = online.prompts[0].embeddings;
        const auto& q = offline.prompts[0].embeddings;
        for (std::size_t i = 0; i < p.size(); ++i) {
            r.metric = std::max(r.metric, std::abs(static_cast<double>(p[i]) - static_cast<double>(q[i])));
        }
    });
}

template <typename T>
std::vector<SuiteResult> run_verify(const VerifyOptions& opt) {
    return {verify_mask(opt), verify_cache<T>(opt), verify_rope<T>(opt), verify_grad(opt),
            verify_offline_online<T>(opt)};
}

}  // namespace kvchain
