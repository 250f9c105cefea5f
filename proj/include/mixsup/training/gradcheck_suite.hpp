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

#include <chrono>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixsup/data/normalize.hpp"
#include "mixsup/data/phantom.hpp"
#include "mixsup/losses/losses.hpp"
#include "mixsup/model/ucnet.hpp"
#include "mixsup/numcore/gradcheck.hpp"

namespace mixsup::training {

struct GradcheckSuiteConfig {
    Extent grid{8, 8, 4};
    std::size_t base_width = 4;
    std::size_t depth = 2;
    int K = 2;
    std::uint64_t seed = 1;
    double step = 1e-6;
    double tolerance = 1e-4;
    /// Probed elements per parameter tensor; 0 probes every element.
    std::size_t probes_per_param = 6;
};

struct TermGradcheck {
    std::string name;
    num::GradCheckReport report;
};

struct GradcheckSuiteResult {
    std::vector<TermGradcheck> checks;
    double worst = 0.0;
    double seconds = 0.0;
    bool passed() const
    {
        for (const auto& c : checks) {
            if (!c.report.passed()) return false;
        }
        return !checks.empty();
    }
};

inline nlohmann::json to_json(const GradcheckSuiteResult& r, double tolerance)
{
    nlohmann::json checks = nlohmann::json::array();
    for (const auto& c : r.checks) {
        checks.push_back({{"term", c.name},
                          {"max_relative_error", c.report.worst},
                          {"probes", c.report.probes},
                          {"failures", c.report.failures.size()},
                          {"passed", c.report.passed()}});
    }
    return {{"checks", checks}, {"max_relative_error", r.worst}, {"tolerance", tolerance},
            {"seconds", r.seconds}, {"passed", r.passed()}};
}

/// Finite-difference audit of every loss term and of the composed objective
/// with respect to all network parameters, at high precision, on two small
/// phantom exams (one with a significant lesion, one benign).
inline GradcheckSuiteResult run_gradcheck_suite(const GradcheckSuiteConfig& cfg)
{
    using HP = num::HighPrecision;
    const auto t0 = std::chrono::steady_clock::now();
    PhantomConfig pc;
    pc.grid = cfg.grid;
    pc.lesions_min = pc.lesions_max = 1;
    const std::size_t small = std::min(cfg.grid.x, cfg.grid.y);
    pc.lesion_xy_size = {2, std::max<int>(2, static_cast<int>(small / 4))};
    pc.lesion_z_size = {1, std::max<int>(1, static_cast<int>(cfg.grid.z / 4))};
    pc.plant_probability = 0.5;
    const auto binning = GradeBinning::for_k(cfg.K);
    std::vector<Exam> exams{generate_phantom_sample(pc, cfg.seed, CohortStratum::Isup3to5, "gc-cs").exam,
                            generate_phantom_sample(pc, cfg.seed + 1, CohortStratum::Isup0, "gc-benign").exam};
    std::vector<losses::ExamTargets> targets;
    std::vector<num::Tensor<HP>> inputs;
    for (const auto& e : exams) {
        targets.push_back(losses::make_targets(e, binning));
        inputs.push_back(input_tensor<HP>(e));
    }
    std::vector<const losses::ExamTargets*> tp;
    for (const auto& t : targets) tp.push_back(&t);

    model::UCNetConfig mc{3, cfg.base_width, cfg.depth, cfg.K, cfg.seed};
    auto params = model::init_params<HP>(mc);
    // A nonzero bias keeps RegionNet away from the ReLU kink at h + b = 0.
    {
        auto b = params.list.back().tensor.mutable_values();
        for (std::size_t k = 0; k < b.size(); ++k) b[k] = static_cast<HP>(k % 2 ? -0.05 : 0.07);
    }
    const auto all = losses::Experiment::parse("1111");
    auto outputs = [&] {
        std::vector<losses::ExamPrediction<HP>> preds;
        for (const auto& x : inputs) {
            auto o = model::forward(params, x);
            preds.push_back({o.seg, o.gg});
        }
        return preds;
    };

    num::GradCheckOptions opt;
    opt.max_probes_per_param = cfg.probes_per_param;
    opt.seed = cfg.seed;
    GradcheckSuiteResult res;
    for (std::size_t t = 0; t < 6; ++t) {
        auto f = [&, t] { return losses::objective_terms(outputs(), tp, params.regionnet_bias(), all).terms[t]; };
        if (!f().defined()) throw Error(std::string("gradcheck fixture lacks ground truth for ") + losses::term_names[t]);
        res.checks.push_back({losses::term_names[t], num::grad_check<HP>(f, params.tensors(), cfg.step, cfg.tolerance, opt)});
    }
    auto total = [&] { return losses::total_objective(outputs(), tp, params.regionnet_bias(), all).total_tensor; };
    res.checks.push_back({"total", num::grad_check<HP>(total, params.tensors(), cfg.step, cfg.tolerance, opt)});
    for (const auto& c : res.checks) res.worst = std::max(res.worst, c.report.worst);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

} // namespace mixsup::training
