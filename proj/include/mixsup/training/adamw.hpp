/*
 * Copyright 2026 The mixsup Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "mixsup/core/error.hpp"
#include "mixsup/numcore/tensor.hpp"

namespace mixsup::training {

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

template <class T>
struct AdamWState {
    std::uint64_t step = 0;
    std::vector<std::vector<T>> m, v;

    bool operator==(const AdamWState&) const = default;
};

template <class T>
struct AdamWTarget {
    num::Tensor<T> param;
    std::span<const T> grad;
    bool decay = false;
};

/// Decoupled-decay Adam on leaf tensors: p <- p (1 - lr wd) for decayed
/// params, then the bias-corrected Adam update. Returns false and leaves
/// everything untouched when any gradient is non-finite.
template <class T>
bool adamw_step(std::vector<AdamWTarget<T>>& targets, AdamWState<T>& state, const AdamWConfig& cfg)
{
    if (state.m.empty()) {
        for (const auto& t : targets) {
            state.m.emplace_back(t.param.numel(), T(0));
            state.v.emplace_back(t.param.numel(), T(0));
        }
    }
    if (state.m.size() != targets.size()) throw ShapeError("adamw: state holds " + std::to_string(state.m.size()) +
                                                           " slots for " + std::to_string(targets.size()) + " params");
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (targets[i].grad.size() != targets[i].param.numel() || state.m[i].size() != targets[i].param.numel()) {
            throw ShapeError("adamw: gradient/state size mismatch for parameter " + std::to_string(i));
        }
        for (T g : targets[i].grad) {
            if (!std::isfinite(static_cast<double>(g))) return false;
        }
    }
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(cfg.beta1, t);
    const double c2 = 1.0 - std::pow(cfg.beta2, t);
    const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
    for (std::size_t i = 0; i < targets.size(); ++i) {
        auto p = targets[i].param.mutable_values();
        auto& m = state.m[i];
        auto& v = state.v[i];
        const T shrink = targets[i].decay ? static_cast<T>(1.0 - cfg.lr * cfg.weight_decay) : T(1);
        for (std::size_t j = 0; j < p.size(); ++j) {
            const T g = targets[i].grad[j];
            p[j] *= shrink;
            m[j] = b1 * m[j] + (T(1) - b1) * g;
            v[j] = b2 * v[j] + (T(1) - b2) * g * g;
            const double mhat = static_cast<double>(m[j]) / c1;
            const double vhat = static_cast<double>(v[j]) / c2;
            p[j] -= static_cast<T>(cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
        }
    }
    return true;
}

} // namespace mixsup::training
