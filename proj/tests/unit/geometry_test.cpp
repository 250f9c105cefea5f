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

#include <gtest/gtest.h>

#include <numeric>

#include "mixsup/geometry/regions.hpp"
#include "mixsup/numcore/random.hpp"

using namespace mixsup;
using namespace mixsup::geometry;

namespace {

Mask cuboid(Extent e, std::size_t x0, std::size_t x1, std::size_t y0, std::size_t y1, std::size_t z0, std::size_t z1)
{
    Mask m(e, 0);
    for (std::size_t k = z0; k <= z1; ++k)
        for (std::size_t j = y0; j <= y1; ++j)
            for (std::size_t i = x0; i <= x1; ++i) m(i, j, k) = 1;
    return m;
}

void expect_partition(const SextantPartition& p, const Mask& gland)
{
    for (std::size_t v = 0; v < gland.data.size(); ++v) {
        int hits = 0;
        for (const auto& m : p.masks) hits += m.data[v] ? 1 : 0;
        ASSERT_EQ(hits, gland.data[v] ? 1 : 0) << "voxel " << v;
    }
}

} // namespace

TEST(Sextants, SymmetricCuboidSplitsIntoEqualSixths)
{
    const Mask gland = cuboid({8, 8, 6}, 0, 7, 0, 7, 0, 5);
    const auto p = compute_sextants(gland);
    for (const auto& m : p.masks) EXPECT_EQ(count(m), 64u);
    expect_partition(p, gland);
    EXPECT_DOUBLE_EQ(p.layout.lateral_split, 4.0);
    EXPECT_DOUBLE_EQ(p.layout.axial_cuts[0], 2.0);
    EXPECT_DOUBLE_EQ(p.layout.axial_cuts[1], 4.0);
    // Left half is x < 4, apex is the lowest z third.
    EXPECT_EQ(p.masks[0](3, 0, 1), 1);
    EXPECT_EQ(p.masks[3](4, 0, 1), 1);
    EXPECT_EQ(p.masks[2](0, 0, 5), 1);
}

TEST(Sextants, ShallowGlandIsRejected)
{
    const Mask gland = cuboid({8, 8, 6}, 1, 6, 1, 6, 2, 3);
    EXPECT_THROW(compute_sextants(gland), GeometryError);
    EXPECT_THROW(compute_sextants(Mask({4, 4, 4}, 0)), GeometryError);
}

TEST(Sextants, OddExtentsStillPartition)
{
    const Mask gland = cuboid({9, 5, 7}, 1, 7, 0, 4, 0, 6);
    const auto p = compute_sextants(gland);
    expect_partition(p, gland);
    for (const auto& m : p.masks) EXPECT_GT(count(m), 0u);
}

TEST(Sextants, RandomEllipsoidsPartitionTheGland)
{
    num::Rng rng(2024);
    for (int trial = 0; trial < 50; ++trial) {
        const Extent e{static_cast<std::size_t>(rng.integer(6, 20)), static_cast<std::size_t>(rng.integer(6, 20)),
                       static_cast<std::size_t>(rng.integer(4, 12))};
        const double cx = rng.uniform(2.5, e.x - 2.5), cy = rng.uniform(2.5, e.y - 2.5), cz = rng.uniform(1.5, e.z - 1.5);
        const double ax = rng.uniform(1.5, e.x / 2.0), ay = rng.uniform(1.5, e.y / 2.0), az = rng.uniform(1.6, e.z / 2.0);
        Mask gland(e, 0);
        for (std::size_t k = 0; k < e.z; ++k)
            for (std::size_t j = 0; j < e.y; ++j)
                for (std::size_t i = 0; i < e.x; ++i) {
                    const double dx = (i + 0.5 - cx) / ax, dy = (j + 0.5 - cy) / ay, dz = (k + 0.5 - cz) / az;
                    gland(i, j, k) = dx * dx + dy * dy + dz * dz <= 1.0;
                }
        if (count(gland) == 0) continue;
        const auto box = bounding_box(gland);
        if (box.z1 - box.z0 < 2 || box.x1 == box.x0) {
            EXPECT_THROW(compute_sextants(gland), GeometryError);
            continue;
        }
        const auto p = compute_sextants(gland);
        expect_partition(p, gland);
        EXPECT_GT(p.layout.lateral_split, static_cast<double>(box.x0));
        EXPECT_LT(p.layout.lateral_split, static_cast<double>(box.x1 + 1));
        std::size_t total = 0;
        for (const auto& m : p.masks) total += count(m);
        EXPECT_EQ(total, count(gland));
    }
}

TEST(LesionBox, SingleSliceRectangleArea)
{
    const auto m = lesion_box_mask(LesionBox::uniform(2, 4, 1, 4, 3, 3), {8, 8, 6});
    EXPECT_EQ(count(m), 12u);
    EXPECT_TRUE(is_box_shaped(m));
}

TEST(LesionBox, ExtrusionMultipliesTheSliceCount)
{
    const auto m = lesion_box_mask(LesionBox::uniform(2, 4, 1, 4, 0, 4), {8, 8, 6});
    EXPECT_EQ(count(m), 60u);
}

TEST(LesionBox, StaircaseCountsEverySlice)
{
    LesionBox box;
    box.z_begin = 1;
    std::size_t expected = 0;
    for (std::size_t s = 0; s < 4; ++s) {
        box.slices.push_back({s, s + 2, 0, s});
        expected += 3 * (s + 1);
    }
    const auto m = lesion_box_mask(box, {10, 10, 6});
    EXPECT_EQ(count(m), expected);
    for (std::size_t s = 0; s < 4; ++s) {
        std::size_t slice = 0;
        for (std::size_t j = 0; j < 10; ++j)
            for (std::size_t i = 0; i < 10; ++i) slice += m(i, j, 1 + s);
        EXPECT_EQ(slice, 3 * (s + 1));
    }
}

TEST(LesionBox, InvalidBoundsAreRejected)
{
    const Extent e{8, 8, 6};
    EXPECT_THROW(lesion_box_mask(LesionBox{}, e), GeometryError);
    EXPECT_THROW(lesion_box_mask(LesionBox{0, {{4, 2, 0, 1}}}, e), GeometryError);
    EXPECT_THROW(lesion_box_mask(LesionBox{0, {{0, 8, 0, 1}}}, e), GeometryError);
    EXPECT_THROW(lesion_box_mask(LesionBox::uniform(0, 1, 0, 1, 4, 6), e), GeometryError);
}

TEST(RegionSet, OneLesionAndSixSextants)
{
    const Extent e{8, 8, 6};
    const auto p = compute_sextants(cuboid(e, 0, 7, 0, 7, 0, 5));
    const std::vector<LesionSpec> lesions{{"l1", LesionBox::uniform(1, 3, 1, 3, 1, 2), 2, 4}};
    const auto set = build_region_set(lesions, p, {0, 0, 0, 2, 0, 0}, e);
    ASSERT_EQ(set.regions.size(), 7u);
    EXPECT_EQ(set.regions[0].kind, RegionKind::Lesion);
    for (std::size_t r = 1; r < 7; ++r) {
        EXPECT_EQ(set.regions[r].kind, RegionKind::Sextant);
        EXPECT_EQ(set.regions[r].region_id, sextant_labels[r - 1]);
    }
    EXPECT_EQ(set.y_seg, set.regions[0].mask);
}

TEST(RegionSet, NoLesionsGivesEmptySegmentationTarget)
{
    const Extent e{8, 8, 6};
    const auto set = build_region_set({}, compute_sextants(cuboid(e, 0, 7, 0, 7, 0, 5)), {}, e);
    EXPECT_EQ(set.regions.size(), 6u);
    EXPECT_EQ(count(set.y_seg), 0u);
}

TEST(RegionSet, OverlappingLesionsGiveTheirUnion)
{
    const Extent e{8, 8, 6};
    const std::vector<LesionSpec> lesions{{"a", LesionBox::uniform(0, 3, 0, 3, 0, 1), 1, 3},
                                          {"b", LesionBox::uniform(2, 5, 2, 5, 1, 2), 3, 5}};
    const auto set = build_region_set(lesions, compute_sextants(cuboid(e, 0, 7, 0, 7, 0, 5)), {}, e);
    const auto a = lesion_box_mask(lesions[0].box, e), b = lesion_box_mask(lesions[1].box, e);
    for (std::size_t v = 0; v < e.voxels(); ++v) EXPECT_EQ(set.y_seg.data[v], std::max(a.data[v], b.data[v]));
    EXPECT_EQ(count(set.y_seg), 32u + 32u - 4u);
}

TEST(RegionSet, DuplicateIdsAreRejected)
{
    const Extent e{8, 8, 6};
    const auto p = compute_sextants(cuboid(e, 0, 7, 0, 7, 0, 5));
    const auto box = LesionBox::uniform(1, 2, 1, 2, 1, 1);
    EXPECT_THROW(build_region_set({{"x", box, 1, 3}, {"x", box, 1, 3}}, p, {}, e), GeometryError);
    EXPECT_THROW(build_region_set({{"left-mid", box, 1, 3}}, p, {}, e), GeometryError);
}
