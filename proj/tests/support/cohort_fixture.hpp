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
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixsup/training/batching.hpp"

namespace mixsup::testing {

inline std::string fixture_path(const std::string& name) { return std::string(MIXSUP_FIXTURE_DIR) + "/" + name; }

/// Training-cohort metadata: one item per exam with its max region grade.
inline std::vector<training::StratumInput> load_cohort_metadata()
{
    std::ifstream in(fixture_path("train_cohort_metadata.json"));
    const auto j = nlohmann::json::parse(in);
    std::vector<training::StratumInput> items;
    for (const auto& e : j.at("exams")) {
        training::StratumInput it{e.at("exam_id").get<std::string>(), std::nullopt};
        for (int g : e.at("region_grades")) it.max_grade = std::max(it.max_grade.value_or(0), g);
        items.push_back(std::move(it));
    }
    return items;
}

} // namespace mixsup::testing
