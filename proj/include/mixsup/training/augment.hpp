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
#include <string>
#include <vector>

#include "mixsup/losses/losses.hpp"
#include "mixsup/numcore/random.hpp"
#include "mixsup/numcore/tensor.hpp"

namespace mixsup::training {

/// A preprocessed training exam: normalized input [3, Z, Y, X] plus targets.
struct Sample {
    std::string exam_id;
    num::Tensor<float> input;
    losses::ExamTargets targets;
};

struct AugmentConfig {
    bool lr_flip = false;
    double flip_probability = 0.5;
    /// Uniform integer xy translation in [-max_shift, max_shift]; 0 disables.
    int max_shift = 0;
};

inline std::string mirror_region_id(const std::string& id)
{
    if (id.rfind("left-", 0) == 0) return "right-" + id.substr(5);
    if (id.rfind("right-", 0) == 0) return "left-" + id.substr(6);
    return id;
}

/// Moves voxel (x, y, z) to (map_x(x), y + dy, z); voxels leaving the grid
/// are dropped, vacated input voxels are 0.
template <class MapX>
Sample remap_xy(const Sample& s, MapX map_x, int dy)
{
    const auto& shape = s.input.shape();
    const std::size_t C = shape[0], Z = shape[1], Y = shape[2], X = shape[3];
    const std::size_t plane = Y * X, vol = Z * plane;
    auto target = [&](std::size_t idx, std::size_t& out) {
        const std::size_t x = idx % X, y = (idx / X) % Y, z = idx / plane;
        const long nx = map_x(static_cast<long>(x)), ny = static_cast<long>(y) + dy;
        if (nx < 0 || ny < 0 || nx >= static_cast<long>(X) || ny >= static_cast<long>(Y)) return false;
        out = z * plane + static_cast<std::size_t>(ny) * X + static_cast<std::size_t>(nx);
        return true;
    };
    Sample r;
    r.exam_id = s.exam_id;
    std::vector<float> in(C * vol, 0.0f);
    const auto src = s.input.values();
    r.targets.y_seg.assign(vol, 0);
    for (std::size_t i = 0; i < vol; ++i) {
        std::size_t j;
        if (!target(i, j)) continue;
        for (std::size_t c = 0; c < C; ++c) in[c * vol + j] = src[c * vol + i];
        r.targets.y_seg[j] = s.targets.y_seg[i];
    }
    r.input = num::Tensor<float>::from_values(shape, std::move(in));
    for (const auto& reg : s.targets.regions) {
        losses::RegionTarget t{reg.region_id, reg.kind, {}, reg.kstar};
        for (auto v : reg.voxels) {
            std::size_t j;
            if (target(v, j)) t.voxels.push_back(static_cast<std::uint32_t>(j));
        }
        std::sort(t.voxels.begin(), t.voxels.end());
        r.targets.regions.push_back(std::move(t));
    }
    return r;
}

/// Left-right mirror along x; left and right sextant labels swap.
inline Sample flip_lr(const Sample& s)
{
    const long X = static_cast<long>(s.input.shape()[3]);
    auto r = remap_xy(s, [X](long x) { return X - 1 - x; }, 0);
    for (auto& reg : r.targets.regions) reg.region_id = mirror_region_id(reg.region_id);
    return r;
}

inline Sample shift_xy(const Sample& s, int dx, int dy)
{
    return remap_xy(s, [dx](long x) { return x + dx; }, dy);
}

/// Random augmentation; returns the sample unchanged when every flag is off.
inline Sample augment(const Sample& s, const AugmentConfig& cfg, num::Rng& rng)
{
    if (!cfg.lr_flip && cfg.max_shift <= 0) return s;
    Sample r = s;
    if (cfg.lr_flip && rng.bernoulli(cfg.flip_probability)) r = flip_lr(r);
    if (cfg.max_shift > 0) {
        const int dx = rng.integer(-cfg.max_shift, cfg.max_shift);
        const int dy = rng.integer(-cfg.max_shift, cfg.max_shift);
        if (dx != 0 || dy != 0) r = shift_xy(r, dx, dy);
    }
    return r;
}

} // namespace mixsup::training
