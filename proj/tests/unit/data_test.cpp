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

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include <json.hpp>

#include "mixsup/data/bundle.hpp"
#include "mixsup/data/normalize.hpp"
#include "mixsup/data/phantom.hpp"

using namespace mixsup;
namespace fs = std::filesystem;

namespace {

// Order-statistic percentile written independently of percentile_sorted:
// position p/100 * (n - 1) between the two neighbouring order statistics.
double oracle_percentile(std::vector<double> v, double p)
{
    const double pos = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto below = static_cast<std::size_t>(pos);
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(below), v.end());
    const double a = v[below];
    if (below + 1 >= v.size()) return a;
    const double b = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(below) + 1, v.end());
    return a + (pos - static_cast<double>(below)) * (b - a);
}

Volume<float> random_volume(num::Rng& rng, Extent e, double lo, double hi)
{
    Volume<float> v(e);
    for (auto& x : v.data) x = static_cast<float>(rng.uniform(lo, hi));
    return v;
}

Mask ball(Extent e)
{
    Mask m(e, 0);
    for (std::size_t k = 0; k < e.z; ++k)
        for (std::size_t j = 0; j < e.y; ++j)
            for (std::size_t i = 0; i < e.x; ++i) {
                const double dx = (i + 0.5) / e.x - 0.5, dy = (j + 0.5) / e.y - 0.5, dz = (k + 0.5) / e.z - 0.5;
                m(i, j, k) = dx * dx + dy * dy + dz * dz < 0.2;
            }
    return m;
}

void gland_moments(const Volume<float>& v, const Mask& m, double& mean, double& sd)
{
    double s = 0, s2 = 0, n = 0;
    for (std::size_t i = 0; i < v.data.size(); ++i) {
        if (!m.data[i]) continue;
        s += v.data[i];
        s2 += static_cast<double>(v.data[i]) * v.data[i];
        n += 1;
    }
    mean = s / n;
    sd = std::sqrt(s2 / n - mean * mean);
}

fs::path scratch_dir(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("mixsup_data_test_" + name);
    fs::remove_all(dir);
    return dir;
}

} // namespace

TEST(Normalize, PercentileMatchesOrderStatisticOracle)
{
    num::Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> v(static_cast<std::size_t>(rng.integer(2, 400)));
        for (auto& x : v) x = rng.uniform(-5, 5);
        auto sorted = v;
        std::sort(sorted.begin(), sorted.end());
        for (double p : {0.0, 1.0, 37.5, 50.0, 99.0, 100.0}) {
            EXPECT_NEAR(percentile_sorted(sorted, p), oracle_percentile(v, p), 1e-12);
        }
    }
}

TEST(Normalize, RampMapsEndpointsToUnitInterval)
{
    // 10..110 in unit steps with the end values repeated so that the 1st and
    // 99th percentiles land exactly on 10 and 110.
    std::vector<float> values;
    for (int i = 0; i < 4; ++i) values.push_back(10.0f);
    for (int v = 10; v <= 110; ++v) values.push_back(static_cast<float>(v));
    for (int i = 0; i < 4; ++i) values.push_back(110.0f);
    Volume<float> vol({values.size(), 1, 1});
    vol.data = values;
    const Mask gland(vol.extent, 1);
    std::vector<double> as_double(values.begin(), values.end());
    ASSERT_EQ(oracle_percentile(as_double, 1.0), 10.0);
    ASSERT_EQ(oracle_percentile(as_double, 99.0), 110.0);

    const auto out = iqr_normalize(vol, gland);
    EXPECT_NEAR(out.data.front(), 0.0, 1e-7);
    EXPECT_NEAR(out.data.back(), 1.0, 1e-7);
    EXPECT_NEAR(out.data[4 + 50], 0.5, 1e-7);
}

TEST(Normalize, ValuesOutsideTheGlandAreNotClipped)
{
    Volume<float> vol({6, 1, 1});
    vol.data = {0, 1, 2, 3, 4, 100};
    Mask gland(vol.extent, 1);
    gland.data[0] = gland.data[5] = 0;
    const auto out = iqr_normalize(vol, gland);
    EXPECT_LT(out.data[0], 0.0f);
    EXPECT_GT(out.data[5], 1.0f);
}

TEST(Normalize, ConstantVolumeIsDegenerate)
{
    const Volume<float> vol({4, 4, 4}, 7.0f);
    const Mask gland(vol.extent, 1);
    try {
        iqr_normalize(vol, gland, "exam-42");
        FAIL() << "expected degenerate contrast";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("exam-42"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("degenerate"), std::string::npos);
    }
    EXPECT_THROW(zscore_normalize(vol, gland), DataError);
}

TEST(Normalize, PipelineIsAffineInvariant)
{
    num::Rng rng(11);
    const Extent e{12, 10, 6};
    const Mask gland = ball(e);
    for (int trial = 0; trial < 10; ++trial) {
        const auto vol = random_volume(rng, e, 20.0, 300.0);
        const double a = rng.uniform(0.1, 10.0), b = rng.uniform(-100.0, 100.0);
        Volume<float> scaled(e);
        for (std::size_t i = 0; i < e.voxels(); ++i) scaled.data[i] = static_cast<float>(a * vol.data[i] + b);
        const auto x = normalize_channel(vol, gland), y = normalize_channel(scaled, gland);
        for (std::size_t i = 0; i < e.voxels(); ++i) ASSERT_NEAR(x.data[i], y.data[i], 1e-5);
        const auto xi = iqr_normalize(vol, gland), yi = iqr_normalize(scaled, gland);
        for (std::size_t i = 0; i < e.voxels(); ++i) ASSERT_NEAR(xi.data[i], yi.data[i], 1e-5);
    }
}

TEST(Normalize, ZScoreStandardizesGlandVoxels)
{
    num::Rng rng(5);
    const Extent e{10, 10, 5};
    const Mask gland = ball(e);
    const auto out = zscore_normalize(random_volume(rng, e, -3.0, 40.0), gland);
    double mean, sd;
    gland_moments(out, gland, mean, sd);
    EXPECT_NEAR(mean, 0.0, 1e-6);
    EXPECT_NEAR(sd, 1.0, 1e-6);

    const auto again = zscore_normalize(out, gland);
    for (std::size_t i = 0; i < e.voxels(); ++i) EXPECT_NEAR(again.data[i], out.data[i], 1e-6);
}

TEST(Normalize, TwoPointGlandIsUnchanged)
{
    Volume<float> vol({4, 1, 1});
    vol.data = {-1, 1, -1, 1};
    const auto out = zscore_normalize(vol, Mask(vol.extent, 1));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out.data[i], vol.data[i], 1e-6);
}

TEST(Normalize, InputTensorIsChannelMajor)
{
    const auto exam = generate_phantom(PhantomConfig{}, 1);
    const auto t = input_tensor<float>(exam);
    EXPECT_EQ(t.shape(), (num::Shape{3, 16, 32, 32}));
    const auto adc = normalize_channel(exam.channel(ChannelRole::ADC), exam.gland_mask);
    EXPECT_EQ(t.values()[2 * exam.extent().voxels() + 77], adc.data[77]);
}

TEST(GradeBinning, BinaryBinningSplitsAtSignificance)
{
    const auto b = GradeBinning::for_k(2);
    for (int g = 0; g <= 5; ++g) EXPECT_EQ(b.bin(g), g >= 2 ? 1 : 0);
    EXPECT_EQ(b.significant_bin(), 1);
    for (int k = 2; k <= 6; ++k) {
        const auto bk = GradeBinning::for_k(k);
        for (int g = 1; g <= 5; ++g) EXPECT_GE(bk.bin(g), bk.bin(g - 1));
        EXPECT_EQ(bk.bin(5), k - 1);
        const auto h = bk.one_hot(3);
        EXPECT_DOUBLE_EQ(std::accumulate(h.begin(), h.end(), 0.0), 1.0);
    }
    EXPECT_THROW(GradeBinning::for_k(7), ConfigError);
}

TEST(Exam, ValidationCatchesBrokenInvariants)
{
    auto exam = generate_phantom(PhantomConfig{}, 9);
    EXPECT_NO_THROW(validate(exam));

    auto bad_stratum = exam;
    bad_stratum.meta.cohort_stratum =
        static_cast<CohortStratum>((static_cast<int>(exam.meta.cohort_stratum) + 1) % 4);
    EXPECT_THROW(validate(bad_stratum), DataError);

    auto bad_tiling = exam;
    for (auto& r : bad_tiling.regions) {
        if (r.kind == RegionKind::Sextant) {
            std::fill(r.mask.data.begin(), r.mask.data.end(), 0);
            break;
        }
    }
    EXPECT_THROW(validate(bad_tiling), DataError);

    auto bad_shape = exam;
    bad_shape.channels[1] = Volume<float>({4, 4, 4});
    EXPECT_THROW(validate(bad_shape), DataError);
}

TEST(Phantom, SameSeedGivesIdenticalExams)
{
    const PhantomConfig cfg;
    EXPECT_EQ(generate_phantom(cfg, 7), generate_phantom(cfg, 7));
    EXPECT_NE(generate_phantom(cfg, 7).channels[0].data, generate_phantom(cfg, 8).channels[0].data);
}

TEST(Phantom, NoLesionsNoPlantsIsBenign)
{
    PhantomConfig cfg;
    cfg.lesions_min = cfg.lesions_max = 0;
    cfg.plant_probability = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto exam = generate_phantom(cfg, seed);
        EXPECT_EQ(exam.meta.cohort_stratum, CohortStratum::Isup0);
        ASSERT_EQ(exam.regions.size(), 6u);
        for (const auto& r : exam.regions) EXPECT_EQ(r.grade_group, 0);
    }
}

TEST(Phantom, DatasetStrataFollowTrainingProportions)
{
    PhantomConfig cfg;
    const auto samples = generate_dataset(cfg, 500, 99);
    std::array<double, 4> counts{};
    for (const auto& s : samples) counts[static_cast<std::size_t>(s.exam.meta.cohort_stratum)] += 1;
    const std::array<double, 4> expected{13.5, 32.7, 33.6, 20.2};
    for (std::size_t s = 0; s < 4; ++s) EXPECT_NEAR(100.0 * counts[s] / 500.0, expected[s], 3.0) << stratum_names[s];
}

TEST(Phantom, SextantGradeIsTheMaxOfPlantedGrades)
{
    const PhantomConfig cfg;
    for (const auto& s : generate_dataset(cfg, 40, 5)) {
        for (std::size_t r = 0; r < s.exam.regions.size(); ++r) {
            const auto& reg = s.exam.regions[r];
            int truth_max = 0;
            for (std::size_t v = 0; v < reg.mask.data.size(); ++v) {
                if (reg.mask.data[v]) truth_max = std::max<int>(truth_max, s.truth.grade_map.data[v]);
            }
            if (reg.kind == RegionKind::Sextant) EXPECT_EQ(reg.grade_group, truth_max) << reg.region_id;
            if (reg.kind == RegionKind::Lesion) EXPECT_LE(*reg.grade_group, truth_max);
            EXPECT_GE(s.truth.grade_fraction[r], 0.0);
            EXPECT_LE(s.truth.grade_fraction[r], 1.0);
        }
    }
}

TEST(Phantom, PlantsOccupyTheConfiguredFraction)
{
    PhantomConfig cfg;
    cfg.plant_probability = 1.0;
    std::size_t seen = 0;
    for (const auto& s : generate_dataset(cfg, 20, 13)) {
        for (std::size_t r = 0; r < s.exam.regions.size(); ++r) {
            if (!s.truth.planted[r] || s.exam.regions[r].grade_group < 2) continue;
            ++seen;
            EXPECT_GE(s.truth.significant_fraction[r], cfg.plant_fraction - 0.01);
        }
    }
    EXPECT_GT(seen, 20u);
}

TEST(Phantom, HigherGradeLowersAdc)
{
    PhantomConfig cfg;
    cfg.gain_range = {1.0, 1.0};
    cfg.offset_range = {0.0, 0.0};
    std::array<double, 6> sum{}, n{};
    for (const auto& s : generate_dataset(cfg, 60, 21)) {
        const auto& adc = s.exam.channel(ChannelRole::ADC);
        for (std::size_t v = 0; v < adc.data.size(); ++v) {
            if (!s.exam.gland_mask.data[v]) continue;
            sum[s.truth.grade_map.data[v]] += adc.data[v];
            n[s.truth.grade_map.data[v]] += 1;
        }
    }
    double prev = 2.0;
    for (std::size_t g = 0; g < 6; ++g) {
        if (n[g] == 0) continue;
        EXPECT_LT(sum[g] / n[g], prev);
        prev = sum[g] / n[g];
    }
}

TEST(Phantom, UnplaceableLesionsFail)
{
    PhantomConfig cfg;
    cfg.lesion_xy_size = {30, 30};
    EXPECT_THROW(generate_phantom(cfg, 1), GenerationError);
}

TEST(Bundle, RoundTripIsFieldExact)
{
    const auto dir = scratch_dir("roundtrip");
    const auto exam = generate_phantom_sample(PhantomConfig{}, 17, CohortStratum::Isup3to5, "rt-17").exam;
    save_exam(exam, dir);
    EXPECT_EQ(load_exam(dir), exam);
    fs::remove_all(dir);
}

TEST(Bundle, TruncatedPayloadFailsChecksum)
{
    const auto dir = scratch_dir("truncated");
    save_exam(generate_phantom(PhantomConfig{}, 3), dir);
    fs::resize_file(dir / "adc.f32", fs::file_size(dir / "adc.f32") - 4);
    EXPECT_THROW(load_exam(dir), ChecksumError);
    fs::remove_all(dir);
}

TEST(Bundle, UnknownFormatVersionIsRejected)
{
    const auto dir = scratch_dir("version");
    save_exam(generate_phantom(PhantomConfig{}, 3), dir);
    nlohmann::json m;
    std::ifstream(dir / "manifest.json") >> m;
    m["format_version"] = 99;
    std::ofstream(dir / "manifest.json") << m.dump();
    EXPECT_THROW(load_exam(dir), FormatVersionError);
    fs::remove_all(dir);
}

TEST(Bundle, ShapeMismatchIsRejected)
{
    const auto dir = scratch_dir("shape");
    save_exam(generate_phantom(PhantomConfig{}, 3), dir);
    nlohmann::json m;
    std::ifstream(dir / "manifest.json") >> m;
    m["shape"] = {32, 16, 32};
    std::ofstream(dir / "manifest.json") << m.dump();
    EXPECT_THROW(load_exam(dir), DataError);
    fs::remove_all(dir);
}

TEST(Bundle, PermutedAxesAreReordered)
{
    const auto dir = scratch_dir("permuted");
    const auto exam = generate_phantom(PhantomConfig{}, 23);
    save_exam(exam, dir);
    const Extent e = exam.extent();

    // Rewrite every payload z-fastest, then y, then x, and declare it.
    nlohmann::json m;
    std::ifstream(dir / "manifest.json") >> m;
    auto rewrite = [&](nlohmann::json& entry, auto tag) {
        using V = decltype(tag);
        const auto file = dir / entry["file"].get<std::string>();
        std::vector<V> canon(e.voxels());
        std::ifstream(file, std::ios::binary).read(reinterpret_cast<char*>(canon.data()), canon.size() * sizeof(V));
        std::vector<V> permuted;
        for (std::size_t i = 0; i < e.x; ++i)
            for (std::size_t j = 0; j < e.y; ++j)
                for (std::size_t k = 0; k < e.z; ++k) permuted.push_back(canon[e.index(i, j, k)]);
        std::ofstream(file, std::ios::binary | std::ios::trunc)
            .write(reinterpret_cast<const char*>(permuted.data()), permuted.size() * sizeof(V));
        entry["crc32c"] = crc32c_of<V>(permuted);
    };
    for (auto& c : m["channels"]) rewrite(c, float{});
    rewrite(m["gland_mask"], std::uint8_t{});
    for (auto& r : m["regions"]) rewrite(r, std::uint8_t{});
    m["axes"] = {"z", "y", "x"};
    m["shape"] = {e.z, e.y, e.x};
    std::ofstream(dir / "manifest.json") << m.dump(2);

    EXPECT_EQ(load_exam(dir), exam);
    fs::remove_all(dir);
}
