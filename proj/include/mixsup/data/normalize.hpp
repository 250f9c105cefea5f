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
#include <string>
#include <vector>

#include "mixsup/core/error.hpp"
#include "mixsup/data/exam.hpp"
#include "mixsup/numcore/tensor.hpp"

namespace mixsup {

/// Percentile of sorted values with linear interpolation between order
/// statistics (rank = p/100 * (n - 1)).
inline double percentile_sorted(const std::vector<double>& sorted, double p)
{
    if (sorted.empty()) throw DataError("percentile of an empty set");
    const double rank = std::clamp(p, 0.0, 100.0) / 100.0 * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

namespace detail {

inline std::vector<double> gland_values(const Volume<float>& volume, const Mask& gland)
{
    require_extent("normalize", volume.extent, gland.extent);
    std::vector<double> values;
    for (std::size_t i = 0; i < volume.data.size(); ++i) {
        if (gland.data[i]) values.push_back(volume.data[i]);
    }
    if (values.empty()) throw DataError("normalize: gland mask is empty");
    return values;
}

inline std::string label(const std::string& exam_id) { return exam_id.empty() ? "" : " in exam '" + exam_id + "'"; }

} // namespace detail

/// (I - p1) / (p99 - p1) with percentiles over gland voxels, applied to the
/// whole volume without clipping.
inline Volume<float> iqr_normalize(const Volume<float>& volume, const Mask& gland, const std::string& exam_id = "")
{
    auto values = detail::gland_values(volume, gland);
    std::sort(values.begin(), values.end());
    const double p1 = percentile_sorted(values, 1.0);
    const double p99 = percentile_sorted(values, 99.0);
    const double span = p99 - p1;
    if (values.front() == values.back() || !(span >= num::epsilon_floor())) {
        throw DataError("degenerate contrast" + detail::label(exam_id) + ": p99 - p1 = " + std::to_string(span));
    }
    Volume<float> out(volume.extent);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = static_cast<float>((static_cast<double>(volume.data[i]) - p1) / span);
    }
    return out;
}

/// Zero mean, unit (population) standard deviation over gland voxels.
inline Volume<float> zscore_normalize(const Volume<float>& volume, const Mask& gland, const std::string& exam_id = "")
{
    const auto values = detail::gland_values(volume, gland);
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    var /= static_cast<double>(values.size());
    const double sd = std::sqrt(var);
    if (!(sd >= num::epsilon_floor())) throw DataError("degenerate contrast" + detail::label(exam_id) + ": zero variance");
    Volume<float> out(volume.extent);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        out.data[i] = static_cast<float>((static_cast<double>(volume.data[i]) - mean) / sd);
    }
    return out;
}

/// Percentile normalization followed by z-scoring, per channel.
inline Volume<float> normalize_channel(const Volume<float>& volume, const Mask& gland, const std::string& exam_id = "")
{
    return zscore_normalize(iqr_normalize(volume, gland, exam_id), gland, exam_id);
}

/// Network input [3, Z, Y, X] from an exam's normalized channels.
template <class T>
num::Tensor<T> input_tensor(const Exam& exam)
{
    const Extent e = exam.extent();
    std::vector<T> values;
    values.reserve(3 * e.voxels());
    for (const auto& ch : exam.channels) {
        const auto norm = normalize_channel(ch, exam.gland_mask, exam.meta.exam_id);
        for (float v : norm.data) values.push_back(static_cast<T>(v));
    }
    return num::Tensor<T>::from_values({3, e.z, e.y, e.x}, std::move(values));
}

} // namespace mixsup
