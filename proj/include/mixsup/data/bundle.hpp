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
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixsup/core/crc32c.hpp"
#include "mixsup/core/error.hpp"
#include "mixsup/data/exam.hpp"

namespace mixsup {

static_assert(std::endian::native == std::endian::little, "payload I/O assumes a little-endian host");

inline constexpr int exam_format_version = 1;

namespace bundle_detail {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::vector<std::byte> read_file(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::vector<std::byte> out(raw.size());
    std::transform(raw.begin(), raw.end(), out.begin(), [](char c) { return static_cast<std::byte>(c); });
    return out;
}

inline void write_file(const fs::path& path, std::span<const std::byte> bytes)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to '" + path.string() + "'");
}

template <class V>
json write_payload(const fs::path& dir, const std::string& file, const std::vector<V>& values)
{
    const auto bytes = std::as_bytes(std::span<const V>(values));
    write_file(dir / file, bytes);
    return json{{"file", file}, {"crc32c", crc32c(bytes)}};
}

// Axis permutation of the payload: entry i names the i-th fastest axis.
struct AxisOrder {
    std::array<int, 3> axis{0, 1, 2}; // 0 = x, 1 = y, 2 = z
    std::array<std::size_t, 3> extent{};
};

inline AxisOrder parse_axes(const json& manifest)
{
    AxisOrder order;
    const auto names = manifest.value("axes", std::vector<std::string>{"x", "y", "z"});
    const auto shape = manifest.at("shape").get<std::vector<std::size_t>>();
    if (names.size() != 3 || shape.size() != 3) throw DataError("manifest: axes and shape must have 3 entries");
    std::array<bool, 3> seen{};
    for (std::size_t i = 0; i < 3; ++i) {
        int a = names[i] == "x" ? 0 : names[i] == "y" ? 1 : names[i] == "z" ? 2 : -1;
        if (a < 0 || seen[static_cast<std::size_t>(a)]) throw DataError("manifest: invalid axis order");
        seen[static_cast<std::size_t>(a)] = true;
        order.axis[i] = a;
        order.extent[i] = shape[i];
        if (shape[i] == 0) throw DataError("manifest: zero extent");
    }
    return order;
}

inline Extent canonical_extent(const AxisOrder& order)
{
    std::array<std::size_t, 3> e{};
    for (std::size_t i = 0; i < 3; ++i) e[static_cast<std::size_t>(order.axis[i])] = order.extent[i];
    return Extent{e[0], e[1], e[2]};
}

template <class V>
std::vector<V> read_payload(const fs::path& dir, const json& entry, const AxisOrder& order)
{
    const std::string file = entry.at("file").get<std::string>();
    const auto bytes = read_file(dir / file);
    const auto expected_crc = entry.at("crc32c").get<std::uint32_t>();
    if (crc32c(bytes) != expected_crc) throw ChecksumError("checksum mismatch for payload '" + file + "'");
    const std::size_t n = order.extent[0] * order.extent[1] * order.extent[2];
    if (bytes.size() != n * sizeof(V)) {
        throw DataError("payload '" + file + "' holds " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(n * sizeof(V)));
    }
    std::vector<V> stored(n);
    std::memcpy(stored.data(), bytes.data(), bytes.size());
    if (order.axis == std::array<int, 3>{0, 1, 2}) return stored;

    const Extent canon = canonical_extent(order);
    std::vector<V> out(n);
    std::array<std::size_t, 3> c{};
    for (std::size_t flat = 0; flat < n; ++flat) {
        // Decode the stored position, fastest axis first.
        std::size_t rest = flat;
        std::array<std::size_t, 3> pos{};
        for (std::size_t i = 0; i < 3; ++i) {
            c[i] = rest % order.extent[i];
            rest /= order.extent[i];
            pos[static_cast<std::size_t>(order.axis[i])] = c[i];
        }
        out[canon.index(pos[0], pos[1], pos[2])] = stored[flat];
    }
    return out;
}

inline json optional_int(const std::optional<int>& v) { return v ? json(*v) : json(nullptr); }

inline std::optional<int> read_optional_int(const json& j, const char* key)
{
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<int>();
}

} // namespace bundle_detail

/// Writes an exam bundle directory: manifest.json plus raw little-endian
/// payloads (float32 channels, uint8 masks) in x-fastest order.
inline void save_exam(const Exam& exam, const std::filesystem::path& dir)
{
    using namespace bundle_detail;
    validate(exam);
    fs::create_directories(dir);
    const Extent e = exam.extent();
    json manifest;
    manifest["format_version"] = exam_format_version;
    manifest["exam_id"] = exam.meta.exam_id;
    manifest["cohort_stratum"] = to_string(exam.meta.cohort_stratum);
    manifest["axes"] = {"x", "y", "z"};
    manifest["shape"] = {e.x, e.y, e.z};
    manifest["voxel_spacing_mm"] = exam.meta.voxel_spacing_mm;
    const std::array<const char*, 3> files{"t2wi.f32", "dwi.f32", "adc.f32"};
    json channels = json::array();
    for (std::size_t c = 0; c < 3; ++c) {
        json entry = write_payload(dir, files[c], exam.channels[c].data);
        entry["role"] = channel_role_names[c];
        entry["dtype"] = "float32";
        channels.push_back(entry);
    }
    manifest["channels"] = channels;
    manifest["gland_mask"] = write_payload(dir, "gland.u8", exam.gland_mask.data);
    manifest["gland_mask"]["dtype"] = "uint8";
    json regions = json::array();
    for (std::size_t r = 0; r < exam.regions.size(); ++r) {
        const auto& reg = exam.regions[r];
        json entry = write_payload(dir, "region_" + std::to_string(r) + ".u8", reg.mask.data);
        entry["region_id"] = reg.region_id;
        entry["kind"] = static_cast<int>(reg.kind);
        entry["grade_group"] = optional_int(reg.grade_group);
        entry["pirads"] = optional_int(reg.pirads);
        entry["dtype"] = "uint8";
        regions.push_back(entry);
    }
    manifest["regions"] = regions;
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw DataError("cannot write manifest in '" + dir.string() + "'");
    out << manifest.dump(2) << '\n';
}

/// Reads and verifies an exam bundle; payloads stored in a permuted axis
/// order are reordered to canonical x, y, z.
inline Exam load_exam(const std::filesystem::path& dir)
{
    using namespace bundle_detail;
    json manifest;
    {
        std::ifstream in(dir / "manifest.json");
        if (!in) throw DataError("missing manifest.json in '" + dir.string() + "'");
        try {
            manifest = json::parse(in);
        } catch (const json::exception& err) {
            throw DataError("malformed manifest in '" + dir.string() + "': " + err.what());
        }
    }
    try {
        const int version = manifest.at("format_version").get<int>();
        if (version != exam_format_version) {
            throw FormatVersionError("unsupported exam format version " + std::to_string(version));
        }
        const AxisOrder order = parse_axes(manifest);
        const Extent e = canonical_extent(order);

        Exam exam;
        exam.meta.exam_id = manifest.at("exam_id").get<std::string>();
        exam.meta.cohort_stratum = parse_stratum(manifest.at("cohort_stratum").get<std::string>());
        exam.meta.voxel_spacing_mm = manifest.at("voxel_spacing_mm").get<std::array<double, 3>>();
        const auto& channels = manifest.at("channels");
        if (channels.size() != 3) throw DataError("manifest: expected 3 channels");
        for (std::size_t c = 0; c < 3; ++c) {
            const auto& entry = channels[c];
            const auto role = entry.at("role").get<std::string>();
            auto it = std::find(channel_role_names.begin(), channel_role_names.end(), role);
            if (it == channel_role_names.end()) throw DataError("manifest: unknown channel role '" + role + "'");
            auto& vol = exam.channels[static_cast<std::size_t>(it - channel_role_names.begin())];
            vol.extent = e;
            vol.data = read_payload<float>(dir, entry, order);
        }
        exam.gland_mask.extent = e;
        exam.gland_mask.data = read_payload<std::uint8_t>(dir, manifest.at("gland_mask"), order);
        for (const auto& entry : manifest.at("regions")) {
            RegionRecord r;
            r.region_id = entry.at("region_id").get<std::string>();
            const int kind = entry.at("kind").get<int>();
            if (kind != 1 && kind != 2) throw DataError("manifest: region kind must be 1 or 2");
            r.kind = static_cast<RegionKind>(kind);
            r.grade_group = read_optional_int(entry, "grade_group");
            r.pirads = read_optional_int(entry, "pirads");
            r.mask.extent = e;
            r.mask.data = read_payload<std::uint8_t>(dir, entry, order);
            exam.regions.push_back(std::move(r));
        }
        validate(exam);
        return exam;
    } catch (const json::exception& err) {
        throw DataError("manifest in '" + dir.string() + "' is inconsistent: " + err.what());
    }
}

} // namespace mixsup
