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
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixsup/core/error.hpp"
#include "mixsup/data/bundle.hpp"
#include "mixsup/data/exam.hpp"

namespace mixsup {

inline constexpr const char* dataset_manifest_name = "dataset.json";

/// Counts and fractions of exams per cohort stratum.
inline nlohmann::json strata_summary(const std::vector<const Exam*>& exams)
{
    std::array<std::size_t, 4> n{};
    for (const auto* e : exams) ++n[static_cast<std::size_t>(e->meta.cohort_stratum)];
    nlohmann::json counts = nlohmann::json::object(), fractions = nlohmann::json::object();
    for (std::size_t s = 0; s < 4; ++s) {
        counts[stratum_names[s]] = n[s];
        fractions[stratum_names[s]] = exams.empty() ? 0.0 : static_cast<double>(n[s]) / static_cast<double>(exams.size());
    }
    return {{"total", exams.size()}, {"counts", counts}, {"fractions", fractions}};
}

/// Writes dataset.json listing bundle subdirectories relative to `dir`.
inline void write_dataset_manifest(const std::filesystem::path& dir, const std::vector<const Exam*>& exams,
                                   const nlohmann::json& provenance)
{
    nlohmann::json list = nlohmann::json::array();
    for (const auto* e : exams) {
        list.push_back({{"exam_id", e->meta.exam_id}, {"path", e->meta.exam_id}, {"cohort_stratum", to_string(e->meta.cohort_stratum)}});
    }
    nlohmann::json j{{"format_version", exam_format_version},
                     {"exams", list},
                     {"strata", strata_summary(exams)},
                     {"generator", provenance}};
    const auto text = j.dump(2) + "\n";
    if (nlohmann::json::parse(text) != j) throw DataError("dataset manifest self-check failed");
    std::ofstream out(dir / dataset_manifest_name, std::ios::binary);
    out << text;
    if (!out) throw DataError("cannot write '" + (dir / dataset_manifest_name).string() + "'");
}

/// Loads a dataset from a directory: the exams listed in dataset.json, a single
/// bundle, or else every bundle subdirectory in name order.
inline std::vector<Exam> load_dataset(const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw DataError("dataset directory '" + dir.string() + "' does not exist");
    std::vector<fs::path> bundles;
    if (fs::exists(dir / dataset_manifest_name)) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(std::ifstream(dir / dataset_manifest_name));
            for (const auto& e : j.at("exams")) bundles.push_back(dir / e.at("path").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw DataError("malformed dataset manifest in '" + dir.string() + "': " + e.what());
        }
    } else if (fs::exists(dir / "manifest.json")) {
        bundles.push_back(dir);
    } else {
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) bundles.push_back(entry.path());
        }
        std::sort(bundles.begin(), bundles.end());
    }
    if (bundles.empty()) throw DataError("no exam bundles found in '" + dir.string() + "'");
    std::vector<Exam> exams;
    exams.reserve(bundles.size());
    for (const auto& b : bundles) exams.push_back(load_exam(b));
    return exams;
}

inline std::vector<const Exam*> pointers(const std::vector<Exam>& exams)
{
    std::vector<const Exam*> out;
    for (const auto& e : exams) out.push_back(&e);
    return out;
}

} // namespace mixsup
