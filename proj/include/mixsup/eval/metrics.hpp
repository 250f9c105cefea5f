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
#include <cmath>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixsup/core/error.hpp"
#include "mixsup/data/exam.hpp"
#include "mixsup/data/normalize.hpp"
#include "mixsup/losses/losses.hpp"
#include "mixsup/model/ucnet.hpp"

namespace mixsup::eval {

enum class Rule { ModeMean, Msb };
inline const char* to_string(Rule r) { return r == Rule::Msb ? "msb" : "mode-mean"; }

/// MSB needs a trained RegionNet, so only experiments with the region
/// classifier term use it.
inline Rule rule_for(const losses::Experiment& e) { return e.region_classifier() ? Rule::Msb : Rule::ModeMean; }

/// Hardens each voxel to its argmax bin (ties to the lower bin) and returns
/// the most frequent bin (ties to the lower bin). gg is [K, ...] flat.
template <class T>
int classify_region_mode(std::span<const T> gg, std::size_t K, std::span<const std::uint32_t> voxels)
{
    if (voxels.empty()) throw ShapeError("classify_region_mode: empty mask");
    const std::size_t n = gg.size() / K;
    std::vector<std::size_t> votes(K, 0);
    for (auto v : voxels) {
        if (v >= n) throw ShapeError("classify_region_mode: voxel index out of range");
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) {
            if (gg[k * n + v] > gg[best * n + v]) best = k;
        }
        ++votes[best];
    }
    return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

/// Largest k with z[k] > 0; 0 when every bin is off.
template <class T>
int classify_region_msb(std::span<const T> z)
{
    for (std::size_t k = z.size(); k-- > 0;) {
        if (z[k] > T(0)) return static_cast<int>(k);
    }
    return 0;
}

/// |a & b| / |a | b|, 1 when both are empty.
inline double iou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth)
{
    if (pred.size() != truth.size()) throw ShapeError("iou: mask sizes differ");
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] != 0, b = truth[i] != 0;
        inter += a && b;
        uni += a || b;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

template <class T>
std::vector<std::uint8_t> binarize_seg(const num::Tensor<T>& seg)
{
    std::vector<std::uint8_t> m(seg.numel());
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = seg.values()[i] > T(0);
    return m;
}

struct BinaryMetrics {
    std::size_t tp = 0, fn = 0, tn = 0, fp = 0;
    std::optional<double> sensitivity, specificity;
    double balanced = 0.0;
    std::vector<std::string> flags;

    std::size_t total() const { return tp + fn + tn + fp; }
};

inline BinaryMetrics binary_metrics(const std::vector<bool>& pred, const std::vector<bool>& truth)
{
    if (pred.size() != truth.size()) throw ShapeError("metrics: prediction/truth sizes differ");
    if (pred.empty()) throw Error("metrics: empty prediction set");
    BinaryMetrics m;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (truth[i]) (pred[i] ? m.tp : m.fn)++;
        else (pred[i] ? m.fp : m.tn)++;
    }
    if (m.tp + m.fn > 0) m.sensitivity = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
    else m.flags.push_back("no positive cases; sensitivity undefined");
    if (m.tn + m.fp > 0) m.specificity = static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp);
    else m.flags.push_back("no negative cases; specificity undefined");
    if (m.sensitivity && m.specificity) m.balanced = (*m.sensitivity + *m.specificity) / 2.0;
    else m.balanced = m.sensitivity ? *m.sensitivity : *m.specificity;
    return m;
}

inline BinaryMetrics lesion_accuracy(const std::vector<bool>& pred, const std::vector<bool>& truth)
{
    return binary_metrics(pred, truth);
}

struct RegionPrediction {
    std::string region_id;
    RegionKind kind = RegionKind::Lesion;
    std::optional<int> truth_bin;
    int mode_bin = 0;
    int msb_bin = 0;
    std::vector<double> histogram;
    std::vector<double> z;

    int bin(Rule r) const { return r == Rule::Msb ? msb_bin : mode_bin; }
};

struct ExamEvaluation {
    std::string exam_id;
    std::vector<RegionPrediction> regions;
    double iou = 1.0;
    std::optional<int> truth_max_bin; // over all graded regions
};

/// Gland-level metrics from the per-exam max over lesion predictions, or
/// over every region when `all_regions` is set. Exams without lesions fall
/// back to their regions (flagged); exams without any prediction or truth
/// are excluded and reported.
inline BinaryMetrics gland_accuracy(const std::vector<ExamEvaluation>& exams, const GradeBinning& binning, Rule rule,
                                    bool all_regions)
{
    std::vector<bool> pred, truth;
    std::vector<std::string> notes;
    for (const auto& e : exams) {
        if (!e.truth_max_bin) {
            notes.push_back("exam '" + e.exam_id + "' has no graded region; excluded");
            continue;
        }
        std::optional<int> best;
        bool any_lesion = false;
        for (const auto& r : e.regions) any_lesion |= r.kind == RegionKind::Lesion;
        const bool use_all = all_regions || !any_lesion;
        if (!all_regions && !any_lesion) notes.push_back("exam '" + e.exam_id + "' has no lesions; used regions");
        for (const auto& r : e.regions) {
            if (!use_all && r.kind != RegionKind::Lesion) continue;
            best = std::max(best.value_or(0), r.bin(rule));
        }
        if (!best) {
            notes.push_back("exam '" + e.exam_id + "' has no predictions; excluded");
            continue;
        }
        pred.push_back(binning.is_significant_bin(*best));
        truth.push_back(binning.is_significant_bin(*e.truth_max_bin));
    }
    auto m = binary_metrics(pred, truth);
    m.flags.insert(m.flags.end(), notes.begin(), notes.end());
    return m;
}

struct PiradsBaseline {
    int cutoff = 4;
    BinaryMetrics metrics;
    std::size_t excluded = 0;
};

inline PiradsBaseline pirads_baseline(const std::vector<std::optional<int>>& pirads, const std::vector<bool>& truth, int cutoff)
{
    if (pirads.size() != truth.size()) throw ShapeError("pirads_baseline: sizes differ");
    PiradsBaseline b;
    b.cutoff = cutoff;
    std::vector<bool> p, t;
    for (std::size_t i = 0; i < pirads.size(); ++i) {
        if (!pirads[i]) {
            ++b.excluded;
            continue;
        }
        p.push_back(*pirads[i] >= cutoff);
        t.push_back(truth[i]);
    }
    b.metrics = binary_metrics(p, t);
    if (b.excluded > 0) b.metrics.flags.push_back(std::to_string(b.excluded) + " lesions without PI-RADS excluded");
    return b;
}

/// Forward pass and per-region classification under both rules, without
/// recording a graph.
template <class T>
ExamEvaluation evaluate_exam(const model::UCNetParams<T>& params, const Exam& exam, const GradeBinning& binning)
{
    num::NoGradGuard guard;
    const auto out = model::forward(params, input_tensor<T>(exam));
    ExamEvaluation ev;
    ev.exam_id = exam.meta.exam_id;
    ev.iou = iou(binarize_seg(out.seg), geometry::segmentation_target(exam.regions, exam.extent()).data);
    const std::size_t K = static_cast<std::size_t>(params.config.K);
    const auto bias = params.regionnet_bias().values();
    for (const auto& r : exam.regions) {
        const auto voxels = voxel_indices(r.mask);
        if (voxels.empty()) continue;
        RegionPrediction p;
        p.region_id = r.region_id;
        p.kind = r.kind;
        if (r.grade_group) {
            p.truth_bin = binning.bin(*r.grade_group);
            ev.truth_max_bin = std::max(ev.truth_max_bin.value_or(0), *p.truth_bin);
        }
        const auto h = num::masked_mean(out.gg, std::span<const std::uint32_t>(voxels));
        for (std::size_t k = 0; k < K; ++k) {
            p.histogram.push_back(static_cast<double>(h.values()[k]));
            p.z.push_back(std::max(0.0, p.histogram.back() + static_cast<double>(bias[k])));
        }
        p.mode_bin = classify_region_mode<T>(out.gg.values(), K, voxels);
        p.msb_bin = classify_region_msb<double>(p.z);
        ev.regions.push_back(std::move(p));
    }
    return ev;
}

/// PI-RADS of graded lesions in the order evaluate_exam reports them.
inline std::vector<std::optional<int>> collect_lesion_pirads(const std::vector<const Exam*>& exams)
{
    std::vector<std::optional<int>> out;
    for (const auto* e : exams) {
        for (const auto& r : e->regions) {
            if (r.kind == RegionKind::Lesion && r.grade_group && count(r.mask) > 0) out.push_back(r.pirads);
        }
    }
    return out;
}

struct MetricsReport {
    std::string experiment;
    Rule rule = Rule::ModeMean;
    double iou = 0.0;
    BinaryMetrics lesion, sextant, gland_via_lesions, gland_via_regions;
    std::optional<PiradsBaseline> pirads4, pirads5;
    std::size_t exams = 0;
};

/// Aggregates per-exam evaluations; `pirads` holds lesion PI-RADS in the
/// order lesions appear across `exams`.
inline MetricsReport build_report(const std::vector<ExamEvaluation>& exams, const std::vector<std::optional<int>>& pirads,
                                  const GradeBinning& binning, Rule rule, const std::string& experiment)
{
    MetricsReport rep;
    rep.experiment = experiment;
    rep.rule = rule;
    rep.exams = exams.size();
    std::vector<bool> lp, lt, sp, st;
    double iou_sum = 0;
    for (const auto& e : exams) {
        iou_sum += e.iou;
        for (const auto& r : e.regions) {
            if (!r.truth_bin) continue;
            auto& p = r.kind == RegionKind::Lesion ? lp : sp;
            auto& t = r.kind == RegionKind::Lesion ? lt : st;
            p.push_back(binning.is_significant_bin(r.bin(rule)));
            t.push_back(binning.is_significant_bin(*r.truth_bin));
        }
    }
    if (exams.empty()) throw Error("report: no exams evaluated");
    rep.iou = iou_sum / static_cast<double>(exams.size());
    if (!lp.empty()) rep.lesion = lesion_accuracy(lp, lt);
    else rep.lesion.flags.push_back("no graded lesions");
    if (!sp.empty()) rep.sextant = binary_metrics(sp, st);
    rep.gland_via_lesions = gland_accuracy(exams, binning, rule, false);
    rep.gland_via_regions = gland_accuracy(exams, binning, rule, true);
    if (!lt.empty() && pirads.size() == lt.size()) {
        rep.pirads4 = pirads_baseline(pirads, lt, 4);
        rep.pirads5 = pirads_baseline(pirads, lt, 5);
    }
    return rep;
}

inline nlohmann::json to_json(const BinaryMetrics& m)
{
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"balanced", m.balanced}, {"sensitivity", opt(m.sensitivity)}, {"specificity", opt(m.specificity)},
            {"confusion", {{"tp", m.tp}, {"fn", m.fn}, {"tn", m.tn}, {"fp", m.fp}}}, {"flags", m.flags}};
}

inline nlohmann::json to_json(const MetricsReport& r)
{
    nlohmann::json j{{"experiment", r.experiment},
                     {"rule", to_string(r.rule)},
                     {"exams", r.exams},
                     {"iou", r.iou},
                     {"lesion_accuracy", to_json(r.lesion)},
                     {"sextant_accuracy", to_json(r.sextant)},
                     {"gland_accuracy_via_lesions", to_json(r.gland_via_lesions)},
                     {"gland_accuracy_via_regions", to_json(r.gland_via_regions)}};
    nlohmann::json baselines = nlohmann::json::object();
    for (const auto* b : {&r.pirads4, &r.pirads5}) {
        if (!*b) continue;
        auto e = to_json((*b)->metrics);
        e["excluded"] = (*b)->excluded;
        baselines["pirads_ge_" + std::to_string((*b)->cutoff)] = e;
    }
    j["baselines"] = baselines;
    return j;
}

/// One row per experiment x metric.
inline std::string to_csv(const std::vector<MetricsReport>& reports)
{
    std::string csv = "experiment,metric,value\n";
    auto row = [&](const std::string& exp, const std::string& metric, const std::optional<double>& v) {
        csv += exp + "," + metric + "," + (v ? nlohmann::json(*v).dump() : std::string()) + "\n";
    };
    for (const auto& r : reports) {
        row(r.experiment, "iou", r.iou);
        auto block = [&](const std::string& name, const BinaryMetrics& m) {
            row(r.experiment, name + ".balanced", m.balanced);
            row(r.experiment, name + ".sensitivity", m.sensitivity);
            row(r.experiment, name + ".specificity", m.specificity);
        };
        block("lesion", r.lesion);
        block("sextant", r.sextant);
        block("gland_via_lesions", r.gland_via_lesions);
        block("gland_via_regions", r.gland_via_regions);
        if (r.pirads4) block("pirads_ge_4", r.pirads4->metrics);
        if (r.pirads5) block("pirads_ge_5", r.pirads5->metrics);
    }
    return csv;
}

inline void write_report(const MetricsReport& r, const std::string& json_path, const std::string& csv_path)
{
    const auto text = to_json(r).dump(2);
    if (nlohmann::json::parse(text) != to_json(r)) throw Error("report: JSON self-check failed");
    std::ofstream(json_path) << text << '\n';
    std::ofstream(csv_path) << to_csv({r});
}

} // namespace mixsup::eval
