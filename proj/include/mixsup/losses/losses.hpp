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

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mixsup/core/error.hpp"
#include "mixsup/data/exam.hpp"
#include "mixsup/geometry/regions.hpp"
#include "mixsup/model/ucnet.hpp"
#include "mixsup/numcore/ops.hpp"

namespace mixsup::losses {

using num::Tensor;

struct LossConfig {
    double eps = 1e-7;
    /// Soft dice with the factor 2 (0 at perfect overlap); false gives
    /// 1 - sum(y p) / (sum y + sum p + eps).
    bool dice_factor_two = true;
    /// Penalize the above-k* mass linearly instead of with -log(1 - m + eps).
    bool hist_high_linear = false;
};

/// Experiment bits a1 a2 a3 a4: region classifier, histogram losses,
/// grade-map loss, segmentation.
struct Experiment {
    std::array<bool, 4> alpha{true, true, true, true};

    static Experiment parse(const std::string& id)
    {
        if (id.size() != 4 || id.find_first_not_of("01") != std::string::npos) {
            throw ConfigError("experiment id must be four 0/1 digits, got '" + id + "'");
        }
        Experiment e;
        for (std::size_t i = 0; i < 4; ++i) e.alpha[i] = id[i] == '1';
        return e;
    }
    std::string id() const
    {
        std::string s;
        for (bool a : alpha) s += a ? '1' : '0';
        return s;
    }
    bool region_classifier() const { return alpha[0]; }
    bool histogram() const { return alpha[1]; }
    bool ggmap() const { return alpha[2]; }
    bool segmentation() const { return alpha[3]; }
    bool operator==(const Experiment&) const = default;
};

inline constexpr std::array<double, 4> default_lambda{1.0, 0.5, 1.0, 1.0};

// ---------------------------------------------------------------------------
// Targets

struct RegionTarget {
    std::string region_id;
    RegionKind kind = RegionKind::Lesion;
    std::vector<std::uint32_t> voxels;
    std::optional<int> kstar; // grade bin under the active binning
};

struct ExamTargets {
    std::vector<std::uint8_t> y_seg;
    std::vector<RegionTarget> regions;
};

inline ExamTargets make_targets(const Exam& exam, const GradeBinning& binning)
{
    ExamTargets t;
    t.y_seg = geometry::segmentation_target(exam.regions, exam.extent()).data;
    for (const auto& r : exam.regions) {
        RegionTarget rt{r.region_id, r.kind, voxel_indices(r.mask), std::nullopt};
        if (r.grade_group) rt.kstar = binning.bin(*r.grade_group);
        t.regions.push_back(std::move(rt));
    }
    return t;
}

// ---------------------------------------------------------------------------
// Regional histograms

template <class T>
struct HistogramMatrix {
    Tensor<T> h;                       // [R, K]; undefined when no rows
    std::vector<std::size_t> source;   // input index of each row
    std::vector<std::size_t> skipped;  // inputs with empty masks
    std::size_t rows() const { return source.size(); }
};

/// Row r is the mean of the K-vector grade map over region r's voxels.
template <class T>
HistogramMatrix<T> region_histograms(const Tensor<T>& gg, const std::vector<const std::vector<std::uint32_t>*>& regions)
{
    HistogramMatrix<T> out;
    std::vector<Tensor<T>> rows;
    for (std::size_t r = 0; r < regions.size(); ++r) {
        if (regions[r]->empty()) {
            out.skipped.push_back(r);
            continue;
        }
        rows.push_back(num::masked_mean(gg, std::span<const std::uint32_t>(*regions[r])));
        out.source.push_back(r);
    }
    if (!rows.empty()) out.h = num::stack(rows);
    return out;
}

// ---------------------------------------------------------------------------
// Individual terms. All are negative log-likelihood style and >= 0.

namespace detail {

template <class T>
Tensor<T> constant_like(const Tensor<T>& t, const std::vector<std::uint8_t>& mask)
{
    std::vector<T> v(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) v[i] = mask[i] ? T(1) : T(0);
    return Tensor<T>::from_values(t.shape(), std::move(v));
}

template <class T>
Tensor<T> safe_log(const Tensor<T>& x, double eps)
{
    return num::log(num::clamp(x, static_cast<T>(eps), std::numeric_limits<T>::max()));
}

// log of a "one minus" argument capped at 1, so a zero penalty is exactly 0.
template <class T>
Tensor<T> capped_log(const Tensor<T>& x, double eps)
{
    return num::log(num::clamp(x, static_cast<T>(eps), T(1)));
}

template <class T>
Tensor<T> negate(const Tensor<T>& x)
{
    return num::affine_scalar(x, T(-1), T(0));
}

} // namespace detail

/// p = (y_seg + 1) / 2.
template <class T>
Tensor<T> seg_probability(const Tensor<T>& y_seg_pred)
{
    return num::affine_scalar(y_seg_pred, T(0.5), T(0.5));
}

template <class T>
Tensor<T> loss_seg_dice(const std::vector<std::uint8_t>& y, const Tensor<T>& p, const LossConfig& cfg = {})
{
    if (y.size() != p.numel()) throw ShapeError("dice: target/prediction size mismatch");
    const auto yt = detail::constant_like(p, y);
    std::size_t ny = 0;
    for (auto v : y) ny += v ? 1 : 0;
    const auto inter = num::sum(num::mul(yt, p));
    const auto denom = num::affine_scalar(num::sum(p), T(1), static_cast<T>(static_cast<double>(ny) + cfg.eps));
    const T factor = cfg.dice_factor_two ? T(2) : T(1);
    return num::affine_scalar(num::div(inter, denom), -factor, T(1));
}

struct BceInfo {
    bool foreground = false, background = false;
};

/// Class-balanced BCE: mean over foreground voxels and mean over background
/// voxels, averaged over the classes present.
template <class T>
Tensor<T> loss_seg_bce(const std::vector<std::uint8_t>& y, const Tensor<T>& p, const LossConfig& cfg = {},
                       BceInfo* info = nullptr)
{
    if (y.size() != p.numel()) throw ShapeError("bce: target/prediction size mismatch");
    std::vector<std::size_t> fg, bg;
    for (std::size_t i = 0; i < y.size(); ++i) (y[i] ? fg : bg).push_back(i);
    const T hi = static_cast<T>(1.0 - cfg.eps), lo = static_cast<T>(cfg.eps);
    std::vector<Tensor<T>> parts;
    if (!fg.empty()) {
        parts.push_back(detail::negate(num::mean(num::log(num::clamp(num::gather(p, fg), lo, hi)))));
    }
    if (!bg.empty()) {
        const auto q = num::affine_scalar(num::gather(p, bg), T(-1), T(1));
        parts.push_back(detail::negate(num::mean(num::log(num::clamp(q, lo, hi)))));
    }
    if (info) *info = {!fg.empty(), !bg.empty()};
    if (parts.size() == 1) return parts[0];
    return num::affine_scalar(num::add(parts[0], parts[1]), T(0.5), T(0));
}

/// Per-region mean of -sum_k y_k log gg_k, averaged over regions. Each entry
/// of `regions` pairs a voxel list with a label vector of length K.
template <class T>
Tensor<T> loss_ggmap(const Tensor<T>& gg, const std::vector<std::pair<const std::vector<std::uint32_t>*, std::vector<double>>>& regions,
                     const LossConfig& cfg = {})
{
    if (regions.empty()) throw Error("ggmap: no strongly supervised regions");
    const std::size_t K = gg.dim(0), N = gg.numel() / K;
    Tensor<T> acc;
    for (const auto& [voxels, label] : regions) {
        if (label.size() != K) throw ShapeError("ggmap: label length differs from K");
        if (voxels->empty()) throw ShapeError("ggmap: empty region");
        Tensor<T> region_loss;
        for (std::size_t k = 0; k < K; ++k) {
            if (label[k] == 0.0) continue;
            std::vector<std::size_t> idx;
            idx.reserve(voxels->size());
            for (auto v : *voxels) idx.push_back(k * N + v);
            auto term = num::affine_scalar(num::mean(detail::safe_log(num::gather(gg, std::move(idx)), cfg.eps)),
                                           static_cast<T>(-label[k]), T(0));
            region_loss = region_loss.defined() ? num::add(region_loss, term) : term;
        }
        if (!region_loss.defined()) region_loss = Tensor<T>::scalar(T(0));
        acc = acc.defined() ? num::add(acc, region_loss) : region_loss;
    }
    return num::affine_scalar(acc, T(1) / static_cast<T>(regions.size()), T(0));
}

/// -(1/R) sum_r sum_k y[r,k] log h[r,k] over rows of `h`.
template <class T>
Tensor<T> loss_hist_strong(const Tensor<T>& h, const std::vector<std::vector<double>>& labels, const LossConfig& cfg = {})
{
    if (h.rank() != 2 || h.dim(0) != labels.size()) throw ShapeError("hist_strong: rows and labels differ");
    if (labels.empty()) throw Error("hist_strong: no rows");
    const std::size_t K = h.dim(1);
    std::vector<T> w(h.numel(), T(0));
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r].size() != K) throw ShapeError("hist_strong: label length differs from K");
        for (std::size_t k = 0; k < K; ++k) w[r * K + k] = static_cast<T>(-labels[r][k] / static_cast<double>(labels.size()));
    }
    return num::sum(num::mul(detail::safe_log(h, cfg.eps), Tensor<T>::from_values(h.shape(), std::move(w))));
}

/// (1/R) sum_r -log(min(1 - m_r + eps, 1)), m_r the histogram mass above bin k*_r.
template <class T>
Tensor<T> loss_hist_high(const Tensor<T>& h, const std::vector<int>& kstar, const LossConfig& cfg = {})
{
    if (h.rank() != 2 || h.dim(0) != kstar.size()) throw ShapeError("hist_high: rows and k* differ");
    if (kstar.empty()) throw Error("hist_high: no rows");
    const std::size_t K = h.dim(1);
    std::vector<T> above(h.numel(), T(0));
    std::vector<std::size_t> rows_with_mass;
    for (std::size_t r = 0; r < kstar.size(); ++r) {
        if (kstar[r] < 0 || kstar[r] >= static_cast<int>(K)) throw ShapeError("hist_high: k* out of range");
        for (std::size_t k = static_cast<std::size_t>(kstar[r]) + 1; k < K; ++k) above[r * K + k] = T(1);
        if (kstar[r] + 1 < static_cast<int>(K)) rows_with_mass.push_back(r);
    }
    if (rows_with_mass.empty()) return num::affine_scalar(num::sum(h), T(0), T(0));
    // Row masses m_r as an [R] tensor.
    auto masked = num::mul(h, Tensor<T>::from_values(h.shape(), std::move(above)));
    auto m = num::sum(masked, {1});
    const T inv = T(1) / static_cast<T>(kstar.size());
    if (cfg.hist_high_linear) return num::affine_scalar(num::sum(m), inv, T(0));
    std::vector<std::size_t> idx(rows_with_mass.begin(), rows_with_mass.end());
    auto one_minus = num::affine_scalar(num::gather(m, idx), T(-1), static_cast<T>(1.0 + cfg.eps));
    return num::affine_scalar(num::sum(detail::capped_log(one_minus, cfg.eps)), -inv, T(0));
}

/// Region-classifier target: per bin 1, 0, or unconstrained.
struct ClassifierTarget {
    std::vector<std::optional<int>> bins;

    /// Lesions: one-hot at k*. Sextants: 1 at k*, 0 above, free below.
    static ClassifierTarget make(RegionKind kind, int kstar, int K)
    {
        ClassifierTarget t;
        t.bins.assign(static_cast<std::size_t>(K), std::nullopt);
        for (int k = 0; k < K; ++k) {
            if (k == kstar) t.bins[static_cast<std::size_t>(k)] = 1;
            else if (k > kstar || kind == RegionKind::Lesion) t.bins[static_cast<std::size_t>(k)] = 0;
        }
        return t;
    }
};

/// -(1/R) sum_r sum_{constrained k} [t log(min(z, 1-eps) + eps) + (1-t) log(min(1 - min(z, 1) + eps, 1))].
template <class T>
Tensor<T> loss_region_classifier(const Tensor<T>& z, const std::vector<ClassifierTarget>& targets, const LossConfig& cfg = {})
{
    if (z.rank() != 2 || z.dim(0) != targets.size()) throw ShapeError("region_classifier: rows and targets differ");
    if (targets.empty()) throw Error("region_classifier: no rows");
    const std::size_t K = z.dim(1);
    std::vector<std::size_t> pos, neg;
    for (std::size_t r = 0; r < targets.size(); ++r) {
        if (targets[r].bins.size() != K) throw ShapeError("region_classifier: target length differs from K");
        for (std::size_t k = 0; k < K; ++k) {
            if (!targets[r].bins[k]) continue;
            (*targets[r].bins[k] == 1 ? pos : neg).push_back(r * K + k);
        }
    }
    const T eps = static_cast<T>(cfg.eps);
    const T lowest = std::numeric_limits<T>::lowest();
    Tensor<T> acc;
    if (!pos.empty()) {
        auto v = num::affine_scalar(num::clamp(num::gather(z, pos), lowest, T(1) - eps), T(1), eps);
        acc = num::sum(detail::safe_log(v, cfg.eps));
    }
    if (!neg.empty()) {
        auto v = num::affine_scalar(num::clamp(num::gather(z, neg), lowest, T(1)), T(-1), T(1) + eps);
        auto s = num::sum(detail::capped_log(v, cfg.eps));
        acc = acc.defined() ? num::add(acc, s) : s;
    }
    if (!acc.defined()) return num::affine_scalar(num::sum(z), T(0), T(0));
    return num::affine_scalar(acc, T(-1) / static_cast<T>(targets.size()), T(0));
}

// ---------------------------------------------------------------------------
// Composition

enum class Term : std::size_t { SegDice, SegBce, GGMap, HistStrong, HistHigh, RegionClassifier };
inline constexpr std::array<const char*, 6> term_names{"seg_dice", "seg_bce", "ggmap", "hist_strong", "hist_high",
                                                       "region_classifier"};
/// Experiment bit (0-based) gating each term.
inline constexpr std::array<std::size_t, 6> term_bit{3, 3, 2, 1, 1, 0};

enum class TermStatus { Active, Gated, Missing };

template <class T>
struct LossBreakdown {
    std::array<double, 6> value{};
    std::array<TermStatus, 6> status{};
    Tensor<T> total_tensor;
    double total = 0.0;
    bool skipped = false;
    std::vector<std::string> notes;

    bool active(Term t) const { return status[static_cast<std::size_t>(t)] == TermStatus::Active; }
    double operator[](Term t) const { return value[static_cast<std::size_t>(t)]; }
};

/// Weighted sum over the four composite terms (region classifier,
/// histogram, grade map, segmentation); absent composites are skipped.
inline double compose(const Experiment& e, const std::array<double, 4>& lambda,
                      const std::array<std::optional<double>, 4>& composite)
{
    double total = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        if (e.alpha[i] && composite[i]) total += lambda[i] * *composite[i];
    }
    return total;
}

template <class T>
struct ExamPrediction {
    Tensor<T> seg; // [1, Z, Y, X]
    Tensor<T> gg;  // [K, Z, Y, X]
};

template <class T>
struct ObjectiveTerms {
    std::array<Tensor<T>, 6> terms; // undefined unless Active
    std::array<TermStatus, 6> status{};
    std::vector<std::string> notes;
};

/// The individual loss terms of a batch. Segmentation terms pool voxels over
/// the whole batch; region terms pool regions over the batch. Terms whose
/// experiment bit is 0 are never built; terms without ground truth in the
/// batch are flagged Missing.
template <class T>
ObjectiveTerms<T> objective_terms(const std::vector<ExamPrediction<T>>& preds, const std::vector<const ExamTargets*>& targets,
                                  const Tensor<T>& regionnet_bias, const Experiment& exp, const LossConfig& cfg = {})
{
    if (preds.size() != targets.size() || preds.empty()) throw ShapeError("objective: batch size mismatch");
    ObjectiveTerms<T> out;
    const std::size_t K = preds.front().gg.dim(0);
    for (std::size_t t = 0; t < 6; ++t) out.status[t] = exp.alpha[term_bit[t]] ? TermStatus::Missing : TermStatus::Gated;
    auto& terms = out.terms;

    if (exp.segmentation()) {
        std::vector<Tensor<T>> ps;
        std::vector<std::uint8_t> y;
        for (std::size_t b = 0; b < preds.size(); ++b) {
            ps.push_back(num::reshape(seg_probability(preds[b].seg), {preds[b].seg.numel()}));
            y.insert(y.end(), targets[b]->y_seg.begin(), targets[b]->y_seg.end());
        }
        const auto p = ps.size() == 1 ? ps[0] : num::reshape(num::stack(ps), {y.size()});
        terms[0] = loss_seg_dice(y, p, cfg);
        BceInfo info;
        terms[1] = loss_seg_bce(y, p, cfg, &info);
        if (!info.foreground) out.notes.push_back("seg_bce: no foreground voxels in batch");
    }

    if (exp.ggmap()) {
        // One grade-map term per exam would weight exams, not regions; pool
        // regions by accumulating per-exam sums.
        Tensor<T> acc;
        std::size_t n = 0;
        for (std::size_t b = 0; b < preds.size(); ++b) {
            std::vector<std::pair<const std::vector<std::uint32_t>*, std::vector<double>>> rs;
            for (const auto& r : targets[b]->regions) {
                if (r.kind != RegionKind::Lesion || !r.kstar || r.voxels.empty()) continue;
                std::vector<double> label(K, 0.0);
                label[static_cast<std::size_t>(*r.kstar)] = 1.0;
                rs.emplace_back(&r.voxels, std::move(label));
            }
            if (rs.empty()) continue;
            auto part = num::affine_scalar(loss_ggmap(preds[b].gg, rs, cfg), static_cast<T>(rs.size()), T(0));
            acc = acc.defined() ? num::add(acc, part) : part;
            n += rs.size();
        }
        if (n > 0) terms[2] = num::affine_scalar(acc, T(1) / static_cast<T>(n), T(0));
    }

    if (exp.histogram() || exp.region_classifier()) {
        std::vector<Tensor<T>> rows;
        std::vector<const RegionTarget*> meta;
        for (std::size_t b = 0; b < preds.size(); ++b) {
            for (const auto& r : targets[b]->regions) {
                if (!r.kstar) continue;
                if (r.voxels.empty()) {
                    out.notes.push_back("region '" + r.region_id + "' has an empty mask and was skipped");
                    continue;
                }
                rows.push_back(num::masked_mean(preds[b].gg, std::span<const std::uint32_t>(r.voxels)));
                meta.push_back(&r);
            }
        }
        if (!rows.empty()) {
            const auto h = num::stack(rows);
            auto select = [&](RegionKind kind) {
                std::vector<std::size_t> idx;
                std::vector<std::size_t> which;
                for (std::size_t i = 0; i < meta.size(); ++i) {
                    if (meta[i]->kind != kind) continue;
                    which.push_back(i);
                    for (std::size_t k = 0; k < K; ++k) idx.push_back(i * K + k);
                }
                return std::pair{which, idx};
            };
            if (exp.histogram()) {
                auto [lw, li] = select(RegionKind::Lesion);
                if (!lw.empty()) {
                    std::vector<std::vector<double>> labels;
                    for (auto i : lw) {
                        std::vector<double> l(K, 0.0);
                        l[static_cast<std::size_t>(*meta[i]->kstar)] = 1.0;
                        labels.push_back(std::move(l));
                    }
                    terms[3] = loss_hist_strong(num::reshape(num::gather(h, li), {lw.size(), K}), labels, cfg);
                }
                auto [sw, si] = select(RegionKind::Sextant);
                if (!sw.empty()) {
                    std::vector<int> ks;
                    for (auto i : sw) ks.push_back(*meta[i]->kstar);
                    terms[4] = loss_hist_high(num::reshape(num::gather(h, si), {sw.size(), K}), ks, cfg);
                }
            }
            if (exp.region_classifier()) {
                std::vector<ClassifierTarget> ct;
                for (const auto* m : meta) ct.push_back(ClassifierTarget::make(m->kind, *m->kstar, static_cast<int>(K)));
                terms[5] = loss_region_classifier(model::regionnet(h, regionnet_bias), ct, cfg);
            }
        }
    }

    for (std::size_t t = 0; t < 6; ++t) {
        if (terms[t].defined()) out.status[t] = TermStatus::Active;
        else if (out.status[t] == TermStatus::Missing) out.notes.push_back(std::string(term_names[t]) + ": no ground truth in batch");
    }
    return out;
}

/// Batch objective: lambda-weighted sum of the active composite terms.
template <class T>
LossBreakdown<T> total_objective(const std::vector<ExamPrediction<T>>& preds, const std::vector<const ExamTargets*>& targets,
                                 const Tensor<T>& regionnet_bias, const Experiment& exp,
                                 const std::array<double, 4>& lambda = default_lambda, const LossConfig& cfg = {})
{
    auto parts = objective_terms(preds, targets, regionnet_bias, exp, cfg);
    LossBreakdown<T> out;
    out.status = parts.status;
    out.notes = std::move(parts.notes);
    const auto& terms = parts.terms;
    std::array<Tensor<T>, 4> composite_tensor;
    for (std::size_t t = 0; t < 6; ++t) {
        if (!terms[t].defined()) continue;
        out.value[t] = static_cast<double>(terms[t].item());
        const std::size_t bit = term_bit[t];
        composite_tensor[bit] = composite_tensor[bit].defined() ? num::add(composite_tensor[bit], terms[t]) : terms[t];
    }
    Tensor<T> total;
    for (std::size_t i = 0; i < 4; ++i) {
        if (!composite_tensor[i].defined()) continue;
        auto w = num::affine_scalar(composite_tensor[i], static_cast<T>(lambda[i]), T(0));
        total = total.defined() ? num::add(total, w) : w;
    }
    if (!total.defined()) {
        out.skipped = true;
        out.notes.push_back("all loss terms inactive; batch skipped");
        return out;
    }
    out.total_tensor = total;
    out.total = static_cast<double>(total.item());
    return out;
}

} // namespace mixsup::losses
