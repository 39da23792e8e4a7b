// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "kvchain/tensor.hpp"

namespace kvchain {

/// Per-subspace rotation rates. Subspace i rotates components (2i, 2i+1) by
/// position * thetas[i].
struct RopeFrequencies {
    std::size_t head_dim = 0;
    double base = 10000.0;
    std::vector<double> thetas;
};

inline RopeFrequencies rope_freqs(std::size_t head_dim, double base = 10000.0) {
    KVCHAIN_CHECK(head_dim > 0 && head_dim % 2 == 0, ErrorCode::kInvalidArgument,
                  "rope head_dim must be even and positive, got ", head_dim);
    KVCHAIN_CHECK(base > 1.0, ErrorCode::kInvalidArgument, "rope base must exceed 1, got ", base);
    RopeFrequencies f{head_dim, base, {}};
    f.thetas.resize(head_dim / 2);
    for (std::size_t i = 0; i < head_dim / 2; ++i) {
        f.thetas[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
    }
    return f;
}

namespace detail {

// Angles and the rotation itself are evaluated in double, so each rotated
// value is rounded to T exactly once. Shifting all positions then perturbs
// 32-bit scores by about one ulp of the inputs.
template <typename T>
void rotate_heads(T* row, std::size_t width, double position, const RopeFrequencies& freqs, double sign) {
    const std::size_t hd = freqs.head_dim;
    const std::size_t half = hd / 2;
    for (std::size_t i = 0; i < half; ++i) {
        const double angle = sign * position * freqs.thetas[i];
        const double c = std::cos(angle);
        const double s = std::sin(angle);
        for (std::size_t h = 0; h + hd <= width; h += hd) {
            T& x0 = row[h + 2 * i];
            T& x1 = row[h + 2 * i + 1];
            const double a = static_cast<double>(x0);
            const double b = static_cast<double>(x1);
            x0 = static_cast<T>(c * a - s * b);
            x1 = static_cast<T>(s * a + c * b);
        }
    }
}

}  // namespace detail

/// Rotates every head of every row by its position. `x` is [seq x heads x
/// head_dim] or any shape whose trailing width is a multiple of head_dim and
/// whose folded row count equals positions.size().
template <typename T>
Tensor<T> rope_apply(const Tensor<T>& x, std::span<const std::int64_t> positions, const RopeFrequencies& freqs,
                     bool inverse = false) {
    const std::size_t width = x.rank() >= 3 ? x.shape()[x.rank() - 2] * x.shape().back() : x.cols();
    const std::size_t rows = width == 0 ? 0 : x.size() / width;
    KVCHAIN_CHECK(rows == positions.size(), ErrorCode::kShapeMismatch, "rope_apply: ", rows, " rows but ",
                  positions.size(), " positions");
    KVCHAIN_CHECK(width % freqs.head_dim == 0, ErrorCode::kShapeMismatch, "rope_apply: width ", width,
                  " is not a multiple of head_dim ", freqs.head_dim);
    Tensor<T> out = x;
    for (std::size_t r = 0; r < rows; ++r) {
        detail::rotate_heads(out.data() + r * width, width, static_cast<double>(positions[r]), freqs,
                             inverse ? -1.0 : 1.0);
    }
    return out;
}

/// Score between q rotated to position m and k rotated to position n.
template <typename T>
T rope_score(const Tensor<T>& q, const Tensor<T>& k, std::int64_t m, std::int64_t n, const RopeFrequencies& freqs) {
    KVCHAIN_CHECK(q.size() == freqs.head_dim && k.size() == freqs.head_dim, ErrorCode::kShapeMismatch,
                  "rope_score expects head_dim vectors");
    Tensor<T> qm = q;
    Tensor<T> kn = k;
    detail::rotate_heads(qm.data(), qm.size(), static_cast<double>(m), freqs, 1.0);
    detail::rotate_heads(kn.data(), kn.size(), static_cast<double>(n), freqs, 1.0);
    T acc = T(0);
    for (std::size_t i = 0; i < qm.size(); ++i) acc += qm[i] * kn[i];
    return acc;
}

/// |score(m, n) - score(m + s, n + s)|. RoPE scores depend only on n - m, so
/// this is rounding noise.
template <typename T>
T score_shift_invariance_check(const Tensor<T>& q, const Tensor<T>& k, std::int64_t m, std::int64_t n,
                               std::int64_t s, const RopeFrequencies& freqs) {
    KVCHAIN_CHECK(m >= 0 && n >= 0 && m + s >= 0 && n + s >= 0, ErrorCode::kInvalidArgument,
                  "score_shift_invariance_check: negative position");
    return std::abs(rope_score(q, k, m, n, freqs) - rope_score(q, k, m + s, n + s, freqs));
}

}  // namespace kvchain
