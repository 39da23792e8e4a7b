// Copyright (C) 2026 The kvchain Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "kvchain/tensor.hpp"

namespace kvchain {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

/// Adam over a fixed list of tensors. Moments are kept in double so the
/// update does not depend on T beyond the final store.
template <typename T>
class Adam {
public:
    Adam(std::vector<Tensor<T>*> params, AdamConfig cfg) : m_params(std::move(params)), m_cfg(cfg) {
        for (Tensor<T>* p : m_params) {
            m_m.emplace_back(p->size(), 0.0);
            m_v.emplace_back(p->size(), 0.0);
        }
    }

    /// One update with learning rate `lr` (schedule applied by the caller).
    void step(const std::vector<const Tensor<T>*>& grads, double lr) {
        KVCHAIN_CHECK(grads.size() == m_params.size(), ErrorCode::kShapeMismatch, "adam: ", grads.size(),
                      " gradients for ", m_params.size(), " parameters");
        ++m_t;
        const double bc1 = 1.0 - std::pow(m_cfg.beta1, static_cast<double>(m_t));
        const double bc2 = 1.0 - std::pow(m_cfg.beta2, static_cast<double>(m_t));
        for (std::size_t p = 0; p < m_params.size(); ++p) {
            Tensor<T>& w = *m_params[p];
            const Tensor<T>& g = *grads[p];
            KVCHAIN_CHECK(g.size() == w.size(), ErrorCode::kShapeMismatch, "adam: gradient shape mismatch");
            std::vector<double>& m = m_m[p];
            std::vector<double>& v = m_v[p];
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m[i] = m_cfg.beta1 * m[i] + (1.0 - m_cfg.beta1) * gi;
                v[i] = m_cfg.beta2 * v[i] + (1.0 - m_cfg.beta2) * gi * gi;
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                double wi = static_cast<double>(w[i]);
                if (m_cfg.weight_decay > 0.0) wi -= lr * m_cfg.weight_decay * wi;
                wi -= lr * mh / (std::sqrt(vh) + m_cfg.eps);
                w[i] = static_cast<T>(wi);
            }
        }
    }

    long steps_taken() const noexcept { return m_t; }

private:
    std::vector<Tensor<T>*> m_params;
    AdamConfig m_cfg;
    std::vector<std::vector<double>> m_m, m_v;
    long m_t = 0;
};

/// Linear warmup over the first `warmup` fraction, then cosine decay to
/// `floor` x base.
inline double scheduled_lr(double base, long step, long total, double warmup, double floor = 0.1) {
    if (total <= 0) return base;
    const long warm = static_cast<long>(warmup * static_cast<double>(total));
    if (step < warm) return base * static_cast<double>(step + 1) / static_cast<double>(warm);
    const double span = static_cast<double>(std::max(1L, total - warm));
    const double progress = std::min(1.0, static_cast<double>(step - warm) / span);
    const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    return base * (floor + (1.0 - floor) * cosine);
}

}  // namespace kvchain
