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

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mixsup/numcore/random.hpp"
#include "mixsup/numcore/tensor.hpp"

namespace mixsup::num {

/// The precision finite-difference checks run at.
using HighPrecision = long double;

struct GradCheckOptions {
    double denominator_floor = 1e-8;
    // A probe whose error exceeds tolerance is retried with step / 10 up to
    // this many times; it catches steps that straddle a ReLU/clamp kink.
    int refinements = 2;
    // Cap on probed elements per parameter tensor (0 = all), chosen by seed.
    std::size_t max_probes_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckProbe {
    std::size_t param = 0;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double relative_error = 0.0;
    double step = 0.0;
};

struct GradCheckReport {
    std::vector<double> max_relative_error; // per parameter tensor
    double worst = 0.0;
    std::size_t probes = 0;
    std::vector<GradCheckProbe> failures;
    std::optional<std::string> non_finite;
    bool passed() const { return failures.empty() && !non_finite; }
};

inline double relative_error(double analytic, double numeric, double floor)
{
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

/// Compares reverse-mode gradients of loss_builder() w.r.t. params against
/// central differences. loss_builder must be deterministic and must read the
/// current parameter values on every call.
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& loss_builder, std::vector<Tensor<T>> params,
                           double step, double tolerance, const GradCheckOptions& options = {})
{
    if (!(step > 0.0)) throw ConfigError("grad_check: step must be positive");
    GradCheckReport report;
    report.max_relative_error.assign(params.size(), 0.0);

    for (auto& p : params) p.zero_grad();
    const Tensor<T> loss = loss_builder();
    if (!std::isfinite(static_cast<double>(loss.item()))) {
        report.non_finite = "loss is non-finite at the unperturbed point";
        return report;
    }
    backward(loss);
    std::vector<std::vector<T>> analytic;
    for (auto& p : params) {
        analytic.emplace_back(p.grad().begin(), p.grad().end());
        if (analytic.back().empty()) analytic.back().assign(p.numel(), T(0));
    }

    NoGradGuard no_grad;
    Rng rng(options.seed);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto values = params[pi].mutable_values();
        std::vector<std::size_t> indices(values.size());
        for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
        if (options.max_probes_per_param && indices.size() > options.max_probes_per_param) {
            rng.shuffle(indices.begin(), indices.end());
            indices.resize(options.max_probes_per_param);
            std::sort(indices.begin(), indices.end());
        }
        for (std::size_t idx : indices) {
            const T original = values[idx];
            double h = step;
            GradCheckProbe probe{pi, idx, static_cast<double>(analytic[pi][idx]), 0.0, 0.0, h};
            for (int attempt = 0; attempt <= options.refinements; ++attempt, h /= 10.0) {
                values[idx] = original + static_cast<T>(h);
                const T plus = loss_builder().item();
                values[idx] = original - static_cast<T>(h);
                const T minus = loss_builder().item();
                values[idx] = original;
                if (!std::isfinite(static_cast<double>(plus)) || !std::isfinite(static_cast<double>(minus))) {
                    report.non_finite = "non-finite loss while probing parameter " + std::to_string(pi) +
                                        " element " + std::to_string(idx);
                    return report;
                }
                probe.numeric = static_cast<double>((plus - minus) / static_cast<T>(2.0 * h));
                probe.step = h;
                probe.relative_error = relative_error(probe.analytic, probe.numeric, options.denominator_floor);
                if (probe.relative_error <= tolerance) break;
            }
            ++report.probes;
            report.max_relative_error[pi] = std::max(report.max_relative_error[pi], probe.relative_error);
            report.worst = std::max(report.worst, probe.relative_error);
            if (probe.relative_error > tolerance) report.failures.push_back(probe);
        }
    }
    return report;
}

} // namespace mixsup::num
