// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "kvchain/kvchain.hpp"

namespace kvchain::testing {

using Precisions = ::testing::Types<float, double>;

template <typename T>
constexpr double tol() {
    return std::is_same_v<T, float> ? 1e-5 : 1e-10;
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(u(rng));
    return t;
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const T> b) {
    EXPECT_EQ(a.size(), b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) {
        m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
    }
    return m;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
    return max_abs_diff<T>(a.values(), b.values());
}

/// Builds a scalar from one op applied to a parameter: sum(op(x) * r) with a
/// fixed random r, so every output element carries weight.
using OpFn = std::function<Graph<double>::Var(Graph<double>&, Graph<double>::Var)>;

inline double weighted_loss(const OpFn& op, const Tensor<double>& x, Tensor<double>* grad_out) {
    Graph<double> g(grad_out != nullptr);
    auto p = grad_out ? g.parameter(x) : g.constant_ref(x);
    auto y = op(g, p);
    const Tensor<double> r = random_tensor<double>(g.value(y).shape(), 4242);
    auto loss = ops::sum(g, ops::mul(g, y, g.constant(r)));
    if (grad_out) {
        g.backward(loss);
        *grad_out = g.grad(p);
    }
    return g.value(loss)[0];
}

/// Max relative error of the op's analytic gradient against central
/// differences over every coordinate of x.
inline double op_grad_error(const OpFn& op, Tensor<double> x, double h = 1e-5) {
    Tensor<double> analytic;
    weighted_loss(op, x, &analytic);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = weighted_loss(op, x, nullptr);
        x[i] = orig - h;
        const double fm = weighted_loss(op, x, nullptr);
        x[i] = orig;
        const double num = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(num), std::abs(analytic[i]), 1e-8});
        worst = std::max(worst, std::abs(num - analytic[i]) / denom);
    }
    return worst;
}

inline ModelConfig tiny_config() {
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

}  // namespace kvchain::testing
