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
#include <array>
#include <cmath>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mixsup/core/error.hpp"
#include "mixsup/data/exam.hpp"

namespace mixsup::geometry {

class GeometryError : public DataError {
public:
    using DataError::DataError;
};

inline constexpr std::array<const char*, 6> sextant_labels{"left-apex",  "left-mid",  "left-base",
                                                           "right-apex", "right-mid", "right-base"};

/// Cut positions in voxel-edge coordinates: voxel i occupies [i, i + 1) and
/// is assigned by its centre i + 0.5; centres exactly on a cut go to the
/// lower-index side.
struct SextantLayout {
    double lateral_split = 0.0;
    std::array<double, 2> axial_cuts{};
    std::array<const char*, 6> labels = sextant_labels;
};

struct SextantPartition {
    std::array<Mask, 6> masks;
    SextantLayout layout;
};

struct BoundingBox {
    std::size_t x0, x1, y0, y1, z0, z1; // inclusive
};

inline BoundingBox bounding_box(const Mask& m)
{
    const Extent e = m.extent;
    BoundingBox b{e.x, 0, e.y, 0, e.z, 0};
    bool any = false;
    for (std::size_t k = 0; k < e.z; ++k)
        for (std::size_t j = 0; j < e.y; ++j)
            for (std::size_t i = 0; i < e.x; ++i) {
                if (!m(i, j, k)) continue;
                any = true;
                b.x0 = std::min(b.x0, i);
                b.x1 = std::max(b.x1, i);
                b.y0 = std::min(b.y0, j);
                b.y1 = std::max(b.y1, j);
                b.z0 = std::min(b.z0, k);
                b.z1 = std::max(b.z1, k);
            }
    if (!any) throw GeometryError("bounding box of an empty mask");
    return b;
}

/// Left/right split at the x-midpoint of the gland's bounding box; apex,
/// mid and base by equal thirds of its z-extent (apex at low z).
inline SextantPartition compute_sextants(const Mask& gland)
{
    if (count(gland) == 0) throw GeometryError("sextant layout: gland mask is empty");
    const BoundingBox box = bounding_box(gland);
    const std::size_t z_extent = box.z1 - box.z0 + 1;
    if (z_extent < 3) {
        throw GeometryError("sextant layout: gland z-extent " + std::to_string(z_extent) + " is below 3 voxels");
    }
    if (box.x1 == box.x0) throw GeometryError("sextant layout: gland x-extent is a single voxel");

    SextantPartition out;
    out.layout.lateral_split = (static_cast<double>(box.x0) + static_cast<double>(box.x1 + 1)) / 2.0;
    const double z_lo = static_cast<double>(box.z0);
    out.layout.axial_cuts = {z_lo + static_cast<double>(z_extent) / 3.0, z_lo + 2.0 * static_cast<double>(z_extent) / 3.0};
    for (auto& m : out.masks) m = Mask(gland.extent, 0);

    const Extent e = gland.extent;
    for (std::size_t k = 0; k < e.z; ++k) {
        const double zc = static_cast<double>(k) + 0.5;
        const int third = zc <= out.layout.axial_cuts[0] ? 0 : (zc <= out.layout.axial_cuts[1] ? 1 : 2);
        for (std::size_t j = 0; j < e.y; ++j)
            for (std::size_t i = 0; i < e.x; ++i) {
                if (!gland(i, j, k)) continue;
                const int side = static_cast<double>(i) + 0.5 <= out.layout.lateral_split ? 0 : 1;
                out.masks[static_cast<std::size_t>(side * 3 + third)](i, j, k) = 1;
            }
    }
    return out;
}

/// Inclusive axial rectangle bounds for one slice.
struct SliceBounds {
    std::size_t x_min, x_max, y_min, y_max;
};

/// Per-slice rectangles over consecutive slices starting at z_begin.
struct LesionBox {
    std::size_t z_begin = 0;
    std::vector<SliceBounds> slices;

    static LesionBox uniform(std::size_t x0, std::size_t x1, std::size_t y0, std::size_t y1, std::size_t z0,
                             std::size_t z1)
    {
        LesionBox b;
        b.z_begin = z0;
        if (z1 >= z0) b.slices.assign(z1 - z0 + 1, SliceBounds{x0, x1, y0, y1});
        return b;
    }
};

inline Mask lesion_box_mask(const LesionBox& box, const Extent& extent)
{
    if (box.slices.empty()) throw GeometryError("lesion box: empty z-range");
    if (box.z_begin + box.slices.size() > extent.z) throw GeometryError("lesion box: z-range exceeds the volume");
    Mask m(extent, 0);
    for (std::size_t s = 0; s < box.slices.size(); ++s) {
        const auto& b = box.slices[s];
        if (b.x_min > b.x_max || b.y_min > b.y_max) throw GeometryError("lesion box: inverted slice bounds");
        if (b.x_max >= extent.x || b.y_max >= extent.y) throw GeometryError("lesion box: slice bounds exceed the volume");
        for (std::size_t j = b.y_min; j <= b.y_max; ++j)
            for (std::size_t i = b.x_min; i <= b.x_max; ++i) m(i, j, box.z_begin + s) = 1;
    }
    return m;
}

struct LesionSpec {
    std::string region_id;
    LesionBox box;
    std::optional<int> grade_group;
    std::optional<int> pirads;
};

/// Voxel-wise max over lesion masks.
inline Mask segmentation_target(const std::vector<RegionRecord>& regions, const Extent& extent)
{
    Mask y(extent, 0);
    for (const auto& r : regions) {
        if (r.kind != RegionKind::Lesion) continue;
        require_extent("segmentation target", r.mask.extent, extent);
        for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] = std::max(y.data[i], r.mask.data[i]);
    }
    return y;
}

struct RegionSet {
    std::vector<RegionRecord> regions;
    Mask y_seg;
};

/// Lesions become kind-1 records, sextants kind-2 records labelled by
/// position; sextant_grades follows the sextant label order.
inline RegionSet build_region_set(const std::vector<LesionSpec>& lesions, const SextantPartition& sextants,
                                  const std::array<std::optional<int>, 6>& sextant_grades, const Extent& extent)
{
    RegionSet out;
    std::set<std::string> ids;
    for (const auto& l : lesions) {
        if (!ids.insert(l.region_id).second) throw GeometryError("duplicate region id '" + l.region_id + "'");
        out.regions.push_back(RegionRecord{l.region_id, lesion_box_mask(l.box, extent), RegionKind::Lesion,
                                           l.grade_group, l.pirads});
    }
    for (std::size_t s = 0; s < 6; ++s) {
        const std::string id = sextants.layout.labels[s];
        if (!ids.insert(id).second) throw GeometryError("duplicate region id '" + id + "'");
        require_extent("sextant", sextants.masks[s].extent, extent);
        out.regions.push_back(RegionRecord{id, sextants.masks[s], RegionKind::Sextant, sextant_grades[s], std::nullopt});
    }
    out.y_seg = segmentation_target(out.regions, extent);
    return out;
}

} // namespace mixsup::geometry
