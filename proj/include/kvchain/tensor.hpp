// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <vector>

#include "kvchain/common.hpp"

namespace kvchain {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

/// Dense row-major array. Rank-2 views are the common case; `rows()` folds
/// every leading dimension so a [seq x heads x head_dim] tensor reads as
/// [seq x heads*head_dim] when only the trailing dimension matters.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;

    explicit Tensor(Shape shape, T fill = T(0))
        : m_shape(std::move(shape)), m_data(shape_numel(m_shape), fill) {}

    Tensor(Shape shape, std::vector<T> data) : m_shape(std::move(shape)), m_data(std::move(data)) {
        KVCHAIN_CHECK(shape_numel(m_shape) == m_data.size(), ErrorCode::kShapeMismatch,
                      "tensor data length ", m_data.size(), " does not match shape ", shape_str(m_shape));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<T> values) {
        return Tensor({rows, cols}, std::vector<T>(values));
    }

    static Tensor vector(std::initializer_list<T> values) {
        return Tensor({values.size()}, std::vector<T>(values));
    }

    static Tensor scalar(T value) { return Tensor({1}, std::vector<T>{value}); }

    const Shape& shape() const noexcept { return m_shape; }
    std::size_t rank() const noexcept { return m_shape.size(); }
    std::size_t size() const noexcept { return m_data.size(); }
    bool empty() const noexcept { return m_data.empty(); }

    std::size_t cols() const noexcept { return m_shape.empty() ? 1 : m_shape.back(); }
    std::size_t rows() const noexcept {
        const std::size_t c = cols();
        return c == 0 ? 0 : m_data.size() / c;
    }

    T* data() noexcept { return m_data.data(); }
    const T* data() const noexcept { return m_data.data(); }
    std::span<T> values() noexcept { return m_data; }
    std::span<const T> values() const noexcept { return m_data; }
    std::vector<T>& storage() noexcept { return m_data; }
    const std::vector<T>& storage() const noexcept { return m_data; }

    T& operator[](std::size_t i) noexcept { return m_data[i]; }
    const T& operator[](std::size_t i) const noexcept { return m_data[i]; }

    T& at(std::size_t r, std::size_t c) noexcept { return m_data[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const noexcept { return m_data[r * cols() + c]; }

    std::span<T> row(std::size_t r) noexcept { return {m_data.data() + r * cols(), cols()}; }
    std::span<const T> row(std::size_t r) const noexcept { return {m_data.data() + r * cols(), cols()}; }

    void reshape(Shape shape) {
        KVCHAIN_CHECK(shape_numel(shape) == m_data.size(), ErrorCode::kShapeMismatch,
                      "cannot reshape ", shape_str(m_shape), " to ", shape_str(shape));
        m_shape = std::move(shape);
    }

    /// Appends rows of a matrix with the same column count (KV cache growth).
    void append_rows(std::span<const T> rows_data, std::size_t n_rows) {
        KVCHAIN_CHECK(rank() == 2, ErrorCode::kShapeMismatch, "append_rows needs a matrix");
        KVCHAIN_CHECK(rows_data.size() == n_rows * cols(), ErrorCode::kShapeMismatch,
                      "append_rows width mismatch");
        m_data.insert(m_data.end(), rows_data.begin(), rows_data.end());
        m_shape[0] += n_rows;
    }

    void fill(T value) { std::fill(m_data.begin(), m_data.end(), value); }

    bool all_finite() const {
        return std::all_of(m_data.begin(), m_data.end(), [](T v) { return std::isfinite(v); });
    }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(m_shape, std::vector<U>(m_data.begin(), m_data.end()));
    }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.m_shape == b.m_shape && a.m_data == b.m_data;
    }

private:
    Shape m_shape;
    std::vector<T> m_data;
};

/// Row-major boolean matrix. Used for attention masks (true = may attend).
class BoolMatrix {
public:
    BoolMatrix() = default;
    BoolMatrix(std::size_t rows, std::size_t cols, bool fill = false)
        : m_rows(rows), m_cols(cols), m_bits(rows * cols, fill ? 1 : 0) {}

    std::size_t rows() const noexcept { return m_rows; }
    std::size_t cols() const noexcept { return m_cols; }

    bool operator()(std::size_t r, std::size_t c) const noexcept { return m_bits[r * m_cols + c] != 0; }
    void set(std::size_t r, std::size_t c, bool v) noexcept { m_bits[r * m_cols + c] = v ? 1 : 0; }

    std::size_t row_count(std::size_t r) const noexcept {
        return static_cast<std::size_t>(
            std::count(m_bits.begin() + static_cast<std::ptrdiff_t>(r * m_cols),
                       m_bits.begin() + static_cast<std::ptrdiff_t>((r + 1) * m_cols), std::uint8_t{1}));
    }

    friend bool operator==(const BoolMatrix&, const BoolMatrix&) = default;

private:
    std::size_t m_rows = 0;
    std::size_t m_cols = 0;
    std::vector<std::uint8_t> m_bits;
};

// Raw kernels. Every output element accumulates over the shared dimension in
// ascending order regardless of matrix extents, so a row computed alone is
// bitwise identical to the same row computed inside a larger product.
namespace kernels {

/// c[m x n] (+)= a[m x k] * b[k x n]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        const T* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

/// c[m x n] (+)= a[m x k] * b[n x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            if (accumulate) c[i * n + j] += acc;
            else c[i * n + j] = acc;
        }
    }
}

/// c[k x n] (+)= a[m x k]^T * b[m x n]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + k * n, T(0));
    for (std::size_t r = 0; r < m; ++r) {
        const T* arow = a + r * k;
        const T* brow = b + r * n;
        for (std::size_t i = 0; i < k; ++i) {
            const T av = arow[i];
            T* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace kernels

/// Plain (non-graph) matrix product, shape-checked.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    KVCHAIN_CHECK(a.rank() == 2 && b.rank() == 2, ErrorCode::kShapeMismatch, "matmul expects matrices");
    KVCHAIN_CHECK(a.shape()[1] == b.shape()[0], ErrorCode::kShapeMismatch, "matmul inner dimension mismatch: ",
                  shape_str(a.shape()), " x ", shape_str(b.shape()));
    Tensor<T> c({a.shape()[0], b.shape()[1]});
    kernels::gemm_nn(a.data(), b.data(), c.data(), a.shape()[0], a.shape()[1], b.shape()[1], false);
    return c;
}

}  // namespace kvchain
