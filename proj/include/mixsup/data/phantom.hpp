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
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "mixsup/core/error.hpp"
#include "mixsup/data/exam.hpp"
#include "mixsup/geometry/regions.hpp"
#include "mixsup/numcore/random.hpp"

namespace mixsup {

class GenerationError : public DataError {
public:
    using DataError::DataError;
};

struct PhantomConfig {
    Extent grid{32, 32, 16};
    std::array<double, 3> voxel_spacing_mm{1.0, 1.0, 2.24};
    /// Gland semi-axes as fractions of the grid half-extent.
    std::array<double, 3> gland_semi_axes{0.72, 0.62, 0.8};
    int lesions_min = 1;
    int lesions_max = 2;
    std::array<int, 2> lesion_xy_size{4, 7};
    std::array<int, 2> lesion_z_size{2, 4};
    /// Fraction of a lesion box carrying the lesion grade; the rest keeps
    /// background contrast. {1, 1} gives homogeneous boxes.
    std::array<double, 2> core_fraction{1.0, 1.0};
    double plant_probability = 0.25;
    double plant_fraction = 0.15;
    double snr = 8.0;
    std::array<double, 4> stratum_weights{92, 222, 228, 137};
    double t2_drop = 0.35;
    std::array<double, 6> adc_drop{0.0, 0.1, 0.45, 0.55, 0.65, 0.75};
    std::array<double, 6> dwi_gain{0.0, 0.1, 0.5, 0.6, 0.7, 0.8};
    std::array<double, 2> gain_range{50.0, 400.0};
    std::array<double, 2> offset_range{0.0, 100.0};
    double pirads_jitter = 0.35;
    int placement_retries = 200;
};

/// Generator-side ground truth, never written to bundles.
struct PhantomTruth {
    Volume<std::uint8_t> grade_map;
    /// Per region (same order as exam.regions): fraction of its voxels whose
    /// grade equals the recorded grade group.
    std::vector<double> grade_fraction;
    /// Per region: fraction of its voxels with grade group >= 2.
    std::vector<double> significant_fraction;
    std::vector<bool> planted;
};

struct PhantomSample {
    Exam exam;
    PhantomTruth truth;
};

namespace phantom_detail {

inline int draw_max_grade(CohortStratum s, num::Rng& rng)
{
    switch (s) {
    case CohortStratum::Isup0: return 0;
    case CohortStratum::Isup1: return 1;
    case CohortStratum::Isup2: return 2;
    case CohortStratum::Isup3to5: return rng.integer(3, 5);
    }
    return 0;
}

inline int pirads_for(int grade, double jitter, num::Rng& rng)
{
    static constexpr std::array<int, 6> base{2, 3, 4, 4, 5, 5};
    int p = base[static_cast<std::size_t>(grade)];
    if (rng.bernoulli(jitter)) p += rng.bernoulli(0.5) ? 1 : -1;
    return std::clamp(p, 1, 5);
}

inline Mask ellipsoid_gland(const PhantomConfig& cfg)
{
    const Extent e = cfg.grid;
    Mask m(e, 0);
    const double cx = 0.5 * static_cast<double>(e.x), cy = 0.5 * static_cast<double>(e.y),
                 cz = 0.5 * static_cast<double>(e.z);
    const double ax = cfg.gland_semi_axes[0] * cx, ay = cfg.gland_semi_axes[1] * cy, az = cfg.gland_semi_axes[2] * cz;
    for (std::size_t k = 0; k < e.z; ++k)
        for (std::size_t j = 0; j < e.y; ++j)
            for (std::size_t i = 0; i < e.x; ++i) {
                const double dx = (static_cast<double>(i) + 0.5 - cx) / ax;
                const double dy = (static_cast<double>(j) + 0.5 - cy) / ay;
                const double dz = (static_cast<double>(k) + 0.5 - cz) / az;
                if (dx * dx + dy * dy + dz * dz <= 1.0) m(i, j, k) = 1;
            }
    return m;
}

// The n voxels of `candidates` closest to `centre` (normalized by `scale`),
// ties broken by voxel index.
inline std::vector<std::uint32_t> nearest_voxels(const Extent& e, std::vector<std::uint32_t> candidates,
                                                 std::array<double, 3> centre, std::array<double, 3> scale,
                                                 std::size_t n)
{
    auto dist = [&](std::uint32_t v) {
        const double i = static_cast<double>(v % e.x), j = static_cast<double>((v / e.x) % e.y),
                     k = static_cast<double>(v / (e.x * e.y));
        const double dx = (i - centre[0]) / scale[0], dy = (j - centre[1]) / scale[1], dz = (k - centre[2]) / scale[2];
        return dx * dx + dy * dy + dz * dz;
    };
    n = std::min(n, candidates.size());
    std::stable_sort(candidates.begin(), candidates.end(),
                     [&](std::uint32_t a, std::uint32_t b) { return dist(a) < dist(b); });
    candidates.resize(n);
    return candidates;
}

struct PlacedLesion {
    geometry::LesionBox box;
    Mask mask;
    int grade;
    double core_fraction;
};

inline bool inside(const Mask& gland, const Mask& box)
{
    for (std::size_t i = 0; i < box.data.size(); ++i) {
        if (box.data[i] && !gland.data[i]) return false;
    }
    return true;
}

inline bool overlaps(const Mask& a, const Mask& b)
{
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        if (a.data[i] && b.data[i]) return true;
    }
    return false;
}

} // namespace phantom_detail

/// One synthetic exam at the requested cohort stratum.
inline PhantomSample generate_phantom_sample(const PhantomConfig& cfg, std::uint64_t seed, CohortStratum stratum,
                                             const std::string& exam_id)
{
    using namespace phantom_detail;
    if (cfg.lesions_min < 0 || cfg.lesions_max < cfg.lesions_min) throw ConfigError("phantom: invalid lesion count range");
    if (!(cfg.plant_fraction > 0.0 && cfg.plant_fraction <= 1.0)) throw ConfigError("phantom: plant_fraction must lie in (0, 1]");
    if (!(cfg.snr > 0.0)) throw ConfigError("phantom: snr must be positive");

    num::Rng rng(seed);
    const Extent e = cfg.grid;
    const Mask gland = ellipsoid_gland(cfg);
    const auto sextants = geometry::compute_sextants(gland);

    const int n_lesions = rng.integer(cfg.lesions_min, cfg.lesions_max);
    const bool can_grade = n_lesions > 0 || cfg.plant_probability > 0.0;
    const int g_max = can_grade ? draw_max_grade(stratum, rng) : 0;

    // Lesion placement: boxes inside the gland, mutually disjoint.
    const auto gb = geometry::bounding_box(gland);
    std::vector<PlacedLesion> lesions;
    for (int l = 0; l < n_lesions; ++l) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
            const auto sx = static_cast<std::size_t>(rng.integer(cfg.lesion_xy_size[0], cfg.lesion_xy_size[1]));
            const auto sy = static_cast<std::size_t>(rng.integer(cfg.lesion_xy_size[0], cfg.lesion_xy_size[1]));
            const auto sz = static_cast<std::size_t>(rng.integer(cfg.lesion_z_size[0], cfg.lesion_z_size[1]));
            if (gb.x1 + 1 < gb.x0 + sx || gb.y1 + 1 < gb.y0 + sy || gb.z1 + 1 < gb.z0 + sz) continue;
            const std::size_t x0 = gb.x0 + rng.index(gb.x1 + 2 - gb.x0 - sx);
            const std::size_t y0 = gb.y0 + rng.index(gb.y1 + 2 - gb.y0 - sy);
            const std::size_t z0 = gb.z0 + rng.index(gb.z1 + 2 - gb.z0 - sz);
            auto box = geometry::LesionBox::uniform(x0, x0 + sx - 1, y0, y0 + sy - 1, z0, z0 + sz - 1);
            Mask m = geometry::lesion_box_mask(box, e);
            if (!inside(gland, m)) continue;
            if (std::any_of(lesions.begin(), lesions.end(), [&](const PlacedLesion& p) { return overlaps(p.mask, m); }))
                continue;
            lesions.push_back({box, std::move(m), 0, 0.0});
            placed = true;
        }
        if (!placed) {
            throw GenerationError("phantom '" + exam_id + "': lesion " + std::to_string(l) + " could not be placed after " +
                                  std::to_string(cfg.placement_retries) + " attempts");
        }
    }
    for (std::size_t l = 0; l < lesions.size(); ++l) {
        lesions[l].grade = l == 0 ? g_max : rng.integer(0, g_max);
        lesions[l].core_fraction = rng.uniform(cfg.core_fraction[0], cfg.core_fraction[1]);
    }

    Volume<std::uint8_t> grade_map(e, 0);
    Mask lesion_union(e, 0);
    for (const auto& les : lesions) {
        for (std::size_t i = 0; i < e.voxels(); ++i) lesion_union.data[i] |= les.mask.data[i];
        const auto& s0 = les.box.slices.front();
        const std::array<double, 3> centre{0.5 * static_cast<double>(s0.x_min + s0.x_max),
                                           0.5 * static_cast<double>(s0.y_min + s0.y_max),
                                           static_cast<double>(les.box.z_begin) +
                                               0.5 * static_cast<double>(les.box.slices.size() - 1)};
        const std::array<double, 3> scale{static_cast<double>(s0.x_max - s0.x_min + 1),
                                          static_cast<double>(s0.y_max - s0.y_min + 1),
                                          static_cast<double>(les.box.slices.size())};
        const auto voxels = voxel_indices(les.mask);
        const auto n_core = static_cast<std::size_t>(std::lround(les.core_fraction * static_cast<double>(voxels.size())));
        for (auto v : nearest_voxels(e, voxels, centre, scale, std::max<std::size_t>(n_core, 1)))
            grade_map.data[v] = static_cast<std::uint8_t>(les.grade);
    }

    // Sextant plants: compact minority foci outside lesions.
    std::array<bool, 6> planted{};
    std::array<int, 6> plant_grade{};
    if (g_max >= 1) {
        for (std::size_t s = 0; s < 6; ++s) {
            if (!rng.bernoulli(cfg.plant_probability)) continue;
            planted[s] = true;
            plant_grade[s] = rng.integer(std::min(2, g_max), g_max);
        }
        const bool reached = std::any_of(lesions.begin(), lesions.end(), [&](const auto& l) { return l.grade == g_max; }) ||
                             std::any_of(plant_grade.begin(), plant_grade.end(), [&](int g) { return g == g_max; });
        if (!reached) {
            const std::size_t s = rng.index(6);
            planted[s] = true;
            plant_grade[s] = g_max;
        }
    }
    std::array<double, 6> plant_fraction_actual{};
    for (std::size_t s = 0; s < 6; ++s) {
        if (!planted[s]) continue;
        std::vector<std::uint32_t> free;
        for (auto v : voxel_indices(sextants.masks[s])) {
            if (!lesion_union.data[v]) free.push_back(v);
        }
        if (free.empty()) {
            planted[s] = false;
            continue;
        }
        const auto seed_v = free[rng.index(free.size())];
        const std::array<double, 3> centre{static_cast<double>(seed_v % e.x), static_cast<double>((seed_v / e.x) % e.y),
                                           static_cast<double>(seed_v / (e.x * e.y))};
        const double total = static_cast<double>(count(sextants.masks[s]));
        const auto n = static_cast<std::size_t>(std::max(1L, std::lround(cfg.plant_fraction * total)));
        const auto chosen = nearest_voxels(e, free, centre, {1.0, 1.0, cfg.voxel_spacing_mm[2] / cfg.voxel_spacing_mm[0]}, n);
        for (auto v : chosen) grade_map.data[v] = static_cast<std::uint8_t>(plant_grade[s]);
        plant_fraction_actual[s] = static_cast<double>(chosen.size()) / total;
    }

    // Intensities.
    Exam exam;
    exam.meta.exam_id = exam_id;
    exam.meta.voxel_spacing_mm = cfg.voxel_spacing_mm;
    exam.gland_mask = gland;
    const double sd = 1.0 / cfg.snr;
    for (std::size_t c = 0; c < 3; ++c) {
        const double gain = rng.uniform(cfg.gain_range[0], cfg.gain_range[1]);
        const double offset = rng.uniform(cfg.offset_range[0], cfg.offset_range[1]);
        Volume<float> vol(e, 0.0f);
        for (std::size_t i = 0; i < e.voxels(); ++i) {
            const int g = grade_map.data[i];
            double v;
            if (!gland.data[i]) {
                v = c == 0 ? 0.5 : (c == 1 ? 0.3 : 0.8);
            } else if (c == static_cast<std::size_t>(ChannelRole::T2WI)) {
                v = 1.0 - (lesion_union.data[i] ? cfg.t2_drop : 0.0);
            } else if (c == static_cast<std::size_t>(ChannelRole::DWI)) {
                v = 1.0 + cfg.dwi_gain[static_cast<std::size_t>(g)];
            } else {
                v = 1.0 - cfg.adc_drop[static_cast<std::size_t>(g)];
            }
            v += sd * rng.normal();
            vol.data[i] = static_cast<float>(gain * v + offset);
        }
        exam.channels[c] = std::move(vol);
    }

    PhantomTruth truth;
    auto fractions = [&](const Mask& m, int grade) {
        std::size_t n = 0, same = 0, sig = 0;
        for (std::size_t i = 0; i < e.voxels(); ++i) {
            if (!m.data[i]) continue;
            ++n;
            same += grade_map.data[i] == grade ? 1 : 0;
            sig += grade_map.data[i] >= 2 ? 1 : 0;
        }
        truth.grade_fraction.push_back(static_cast<double>(same) / static_cast<double>(n));
        truth.significant_fraction.push_back(static_cast<double>(sig) / static_cast<double>(n));
    };

    std::vector<geometry::LesionSpec> specs;
    for (std::size_t l = 0; l < lesions.size(); ++l) {
        specs.push_back({"lesion-" + std::to_string(l + 1), lesions[l].box, lesions[l].grade,
                         pirads_for(lesions[l].grade, cfg.pirads_jitter, rng)});
    }
    std::array<std::optional<int>, 6> sextant_grades;
    for (std::size_t s = 0; s < 6; ++s) {
        int g = 0;
        for (auto v : voxel_indices(sextants.masks[s])) g = std::max<int>(g, grade_map.data[v]);
        sextant_grades[s] = g;
    }
    auto set = geometry::build_region_set(specs, sextants, sextant_grades, e);
    exam.regions = std::move(set.regions);
    for (std::size_t r = 0; r < exam.regions.size(); ++r) {
        fractions(exam.regions[r].mask, *exam.regions[r].grade_group);
        truth.planted.push_back(r >= lesions.size() && planted[r - lesions.size()]);
    }
    exam.meta.cohort_stratum = stratum_for_grade(exam.max_grade().value_or(0));
    truth.grade_map = std::move(grade_map);
    validate(exam);
    return {std::move(exam), std::move(truth)};
}

/// Stratum drawn from the configured weights.
inline PhantomSample generate_phantom_sample(const PhantomConfig& cfg, std::uint64_t seed, const std::string& exam_id)
{
    num::Rng rng(seed ^ 0x5DEECE66DULL);
    const double total = std::accumulate(cfg.stratum_weights.begin(), cfg.stratum_weights.end(), 0.0);
    double u = rng.uniform() * total;
    int s = 0;
    while (s < 3 && u >= cfg.stratum_weights[static_cast<std::size_t>(s)]) u -= cfg.stratum_weights[static_cast<std::size_t>(s++)];
    return generate_phantom_sample(cfg, seed, static_cast<CohortStratum>(s), exam_id);
}

inline Exam generate_phantom(const PhantomConfig& cfg, std::uint64_t seed)
{
    return generate_phantom_sample(cfg, seed, "phantom-" + std::to_string(seed)).exam;
}

/// Largest-remainder stratum quotas for n exams.
inline std::array<std::size_t, 4> stratum_quotas(const std::array<double, 4>& weights, std::size_t n)
{
    const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
    if (!(total > 0.0)) throw ConfigError("phantom: stratum weights must have a positive sum");
    std::array<std::size_t, 4> q{};
    std::array<double, 4> rem{};
    std::size_t used = 0;
    for (std::size_t s = 0; s < 4; ++s) {
        const double exact = weights[s] / total * static_cast<double>(n);
        q[s] = static_cast<std::size_t>(std::floor(exact));
        rem[s] = exact - static_cast<double>(q[s]);
        used += q[s];
    }
    std::array<std::size_t, 4> order{0, 1, 2, 3};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
    for (std::size_t i = 0; used < n; ++i, ++used) ++q[order[i % 4]];
    return q;
}

/// n exams whose strata follow the configured weights by quota, in shuffled
/// order; exam i uses a seed derived from (seed, i).
inline std::vector<PhantomSample> generate_dataset(const PhantomConfig& cfg, std::size_t n, std::uint64_t seed,
                                                   const std::string& id_prefix = "exam")
{
    const auto q = stratum_quotas(cfg.stratum_weights, n);
    std::vector<CohortStratum> strata;
    for (std::size_t s = 0; s < 4; ++s) strata.insert(strata.end(), q[s], static_cast<CohortStratum>(s));
    num::Rng rng(seed);
    rng.shuffle(strata.begin(), strata.end());
    std::vector<PhantomSample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint64_t exam_seed = rng.split(i).next_u64();
        char id[32];
        std::snprintf(id, sizeof id, "-%04zu", i);
        out.push_back(generate_phantom_sample(cfg, exam_seed, strata[i], id_prefix + id));
    }
    return out;
}

} // namespace mixsup
