// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <random>

#include "kvchain/tensor.hpp"

namespace kvchain {

/// Learnable continuous prompt of one model in the chain: n_tokens rows of
/// d_model-wide embeddings that bypass the vocabulary.
template <typename T>
struct PromptParams {
    int model_id = 0;
    Tensor<T> embeddings;  // [n_tokens x d_model]
    /// Set by the trainers once the prompt has been fitted. Downstream
    /// training refuses upstream prompts without it.
    bool trained = false;

    std::size_t n_tokens() const noexcept { return embeddings.rows(); }

    static PromptParams init(int model_id, std::size_t n_tokens, std::size_t d_model, std::uint64_t seed,
                             double stddev = 0.02) {
        KVCHAIN_CHECK(n_tokens >= 1, ErrorCode::kInvalidArgument, "prompt needs at least one token");
        PromptParams p;
        p.model_id = model_id;
        p.embeddings = Tensor<T>({n_tokens, d_model});
        std::mt19937_64 rng(seed ^ (0x9e3779b97f4a7c15ull * static_cast<std::uint64_t>(model_id + 1)));
        std::normal_distribution<double> dist(0.0, stddev);
        for (T& v : p.embeddings.values()) v = static_cast<T>(dist(rng));
        return p;
    }

    template <typename U>
    PromptParams<U> cast() const {
        return {model_id, embeddings.template cast<U>(), trained};
    }

    friend bool operator==(const PromptParams&, const PromptParams&) = default;
};

}  // namespace kvchain
