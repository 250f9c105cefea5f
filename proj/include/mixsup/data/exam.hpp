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
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mixsup/core/error.hpp"
#include "mixsup/data/volume.hpp"

namespace mixsup {

enum class ChannelRole { T2WI = 0, DWI = 1, ADC = 2 };
inline constexpr std::array<const char*, 3> channel_role_names{"T2WI", "DWI", "ADC"};

/// Supervision signal of a region: targeted-biopsy lesion or systematic sextant.
enum class RegionKind : int { Lesion = 1, Sextant = 2 };

/// Cohort strata by maximum ISUP grade group over an exam's regions.
enum class CohortStratum : int { Isup0 = 0, Isup1 = 1, Isup2 = 2, Isup3to5 = 3 };
inline constexpr std::array<const char*, 4> stratum_names{"ISUP-0", "ISUP-1", "ISUP-2", "ISUP-3-5"};

inline CohortStratum stratum_for_grade(int max_grade)
{
    if (max_grade < 0 || max_grade > 5) throw DataError("grade group out of range: " + std::to_string(max_grade));
    return static_cast<CohortStratum>(std::min(max_grade, 3));
}

inline const char* to_string(CohortStratum s) { return stratum_names[static_cast<int>(s)]; }

inline CohortStratum parse_stratum(const std::string& name)
{
    for (int i = 0; i < 4; ++i) {
        if (name == stratum_names[i]) return static_cast<CohortStratum>(i);
    }
    throw DataError("unknown cohort stratum '" + name + "'");
}

/// Maps ISUP grade groups 0..5 onto K ordered bins.
struct GradeBinning {
    int K = 2;
    std::array<int, 6> bin_of{0, 0, 1, 1, 1, 1};

    static GradeBinning for_k(int k)
    {
        GradeBinning b;
        b.K = k;
        switch (k) {
        case 2: b.bin_of = {0, 0, 1, 1, 1, 1}; break;
        case 3: b.bin_of = {0, 0, 1, 2, 2, 2}; break;
        case 4: b.bin_of = {0, 1, 2, 3, 3, 3}; break;
        case 5: b.bin_of = {0, 1, 2, 3, 4, 4}; break;
        case 6: b.bin_of = {0, 1, 2, 3, 4, 5}; break;
        default: throw ConfigError("K must be in [2, 6], got " + std::to_string(k));
        }
        return b;
    }

    int bin(int grade) const
    {
        if (grade < 0 || grade > 5) throw DataError("grade group out of range: " + std::to_string(grade));
        return bin_of[static_cast<std::size_t>(grade)];
    }

    /// First bin holding clinically significant disease (grade group >= 2).
    int significant_bin() const { return bin_of[2]; }
    bool is_significant_bin(int b) const { return b >= significant_bin(); }

    std::vector<double> one_hot(int grade) const
    {
        std::vector<double> v(static_cast<std::size_t>(K), 0.0);
        v[static_cast<std::size_t>(bin(grade))] = 1.0;
        return v;
    }
};

struct RegionRecord {
    std::string region_id;
    Mask mask;
    RegionKind kind = RegionKind::Lesion;
    std::optional<int> grade_group;
    std::optional<int> pirads;

    /// One-hot target under the given binning; absent iff the grade is.
    std::optional<std::vector<double>> y_gg(const GradeBinning& binning) const
    {
        if (!grade_group) return std::nullopt;
        return binning.one_hot(*grade_group);
    }

    bool operator==(const RegionRecord&) const = default;
};

struct ExamMeta {
    std::string exam_id;
    CohortStratum cohort_stratum = CohortStratum::Isup0;
    std::array<double, 3> voxel_spacing_mm{1.0, 1.0, 2.24};

    bool operator==(const ExamMeta&) const = default;
};

struct Exam {
    std::array<Volume<float>, 3> channels;
    Mask gland_mask;
    std::vector<RegionRecord> regions;
    ExamMeta meta;

    const Extent& extent() const { return gland_mask.extent; }
    const Volume<float>& channel(ChannelRole role) const { return channels[static_cast<int>(role)]; }

    std::optional<int> max_grade() const
    {
        std::optional<int> best;
        for (const auto& r : regions) {
            if (r.grade_group) best = std::max(best.value_or(0), *r.grade_group);
        }
        return best;
    }

    bool operator==(const Exam&) const = default;
};

/// True when every z-slice of the mask is one axis-aligned rectangle and the
/// occupied slices are contiguous.
inline bool is_box_shaped(const Mask& m)
{
    const Extent e = m.extent;
    std::optional<std::size_t> first, last;
    for (std::size_t k = 0; k < e.z; ++k) {
        std::size_t n = 0, x0 = e.x, x1 = 0, y0 = e.y, y1 = 0;
        for (std::size_t j = 0; j < e.y; ++j)
            for (std::size_t i = 0; i < e.x; ++i) {
                if (!m(i, j, k)) continue;
                ++n;
                x0 = std::min(x0, i);
                x1 = std::max(x1, i);
                y0 = std::min(y0, j);
                y1 = std::max(y1, j);
            }
        if (n == 0) continue;
        if (n != (x1 - x0 + 1) * (y1 - y0 + 1)) return false;
        if (last && *last + 1 != k) return false;
        if (!first) first = k;
        last = k;
    }
    return first.has_value();
}

/// Checks the structural invariants of an exam; throws DataError naming the exam.
inline void validate(const Exam& exam)
{
    const std::string who = "exam '" + exam.meta.exam_id + "': ";
    const Extent e = exam.gland_mask.extent;
    if (e.voxels() == 0) throw DataError(who + "empty grid");
    for (std::size_t c = 0; c < exam.channels.size(); ++c) {
        if (!(exam.channels[c].extent == e) || exam.channels[c].data.size() != e.voxels()) {
            throw DataError(who + "channel " + channel_role_names[c] + " extent " + exam.channels[c].extent.str() +
                            " differs from gland mask " + e.str());
        }
    }
    if (count(exam.gland_mask) == 0) throw DataError(who + "gland mask is empty");

    std::set<std::string> ids;
    std::vector<int> sextant_cover(e.voxels(), 0);
    bool has_sextants = false;
    for (const auto& r : exam.regions) {
        if (!ids.insert(r.region_id).second) throw DataError(who + "duplicate region id '" + r.region_id + "'");
        if (!(r.mask.extent == e) || r.mask.data.size() != e.voxels()) {
            throw DataError(who + "region '" + r.region_id + "' mask is outside the volume bounds");
        }
        if (r.grade_group && (*r.grade_group < 0 || *r.grade_group > 5)) {
            throw DataError(who + "region '" + r.region_id + "' grade group out of range");
        }
        if (r.pirads && (*r.pirads < 1 || *r.pirads > 5)) {
            throw DataError(who + "region '" + r.region_id + "' PI-RADS out of range");
        }
        if (r.kind == RegionKind::Lesion) {
            if (!is_box_shaped(r.mask)) throw DataError(who + "lesion '" + r.region_id + "' is not box-shaped");
        } else {
            if (r.pirads) throw DataError(who + "sextant '" + r.region_id + "' carries a PI-RADS score");
            has_sextants = true;
            for (std::size_t i = 0; i < e.voxels(); ++i) sextant_cover[i] += r.mask.data[i] ? 1 : 0;
        }
    }
    if (has_sextants) {
        for (std::size_t i = 0; i < e.voxels(); ++i) {
            if (sextant_cover[i] != (exam.gland_mask.data[i] ? 1 : 0)) {
                throw DataError(who + "sextant masks do not tile the gland mask");
            }
        }
    }
    if (auto g = exam.max_grade(); g && stratum_for_grade(*g) != exam.meta.cohort_stratum) {
        throw DataError(who + "cohort stratum " + to_string(exam.meta.cohort_stratum) +
                        " disagrees with region grades (max " + std::to_string(*g) + ")");
    }
}

} // namespace mixsup
