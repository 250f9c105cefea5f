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

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mixsup/core/error.hpp"

namespace mixsup {

/// Grid extent; voxel (x, y, z) lives at x + X * (y + Y * z).
struct Extent {
    std::size_t x = 0, y = 0, z = 0;

    std::size_t voxels() const { return x * y * z; }
    std::size_t index(std::size_t i, std::size_t j, std::size_t k) const { return i + x * (j + y * k); }
    bool operator==(const Extent&) const = default;
    std::string str() const
    {
        return "[" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) + "]";
    }
};

template <class V>
struct Volume {
    Extent extent;
    std::vector<V> data;

    Volume() = default;
    explicit Volume(Extent e, V fill = V{}) : extent(e), data(e.voxels(), fill) {}

    V& operator()(std::size_t i, std::size_t j, std::size_t k) { return data[extent.index(i, j, k)]; }
    const V& operator()(std::size_t i, std::size_t j, std::size_t k) const { return data[extent.index(i, j, k)]; }
    std::size_t size() const { return data.size(); }
    bool operator==(const Volume&) const = default;
};

using Mask = Volume<std::uint8_t>;

inline std::size_t count(const Mask& m)
{
    std::size_t n = 0;
    for (auto v : m.data) n += v ? 1 : 0;
    return n;
}

inline std::vector<std::uint32_t> voxel_indices(const Mask& m)
{
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < m.data.size(); ++i) {
        if (m.data[i]) out.push_back(static_cast<std::uint32_t>(i));
    }
    return out;
}

inline void require_extent(const char* what, const Extent& a, const Extent& b)
{
    if (!(a == b)) throw ShapeError(std::string(what) + ": extent " + a.str() + " vs " + b.str());
}

} // namespace mixsup
