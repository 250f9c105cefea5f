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

#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixsup/data/normalize.hpp"
#include "mixsup/eval/metrics.hpp"
#include "mixsup/losses/losses.hpp"
#include "mixsup/model/checkpoint.hpp"
#include "mixsup/model/ucnet.hpp"
#include "mixsup/training/adamw.hpp"
#include "mixsup/training/augment.hpp"
#include "mixsup/training/batching.hpp"

namespace mixsup::training {

struct TrainConfig {
    std::string experiment_id = "1111";
    std::array<double, 4> lambda = losses::default_lambda;
    std::size_t batch_size = 6;
    AdamWConfig optimizer;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    AugmentConfig augment;
    losses::LossConfig loss;
    /// Stop after this many optimizer steps; 0 means no cap.
    std::size_t max_steps = 0;
};

inline nlohmann::json to_json(const TrainConfig& c)
{
    return {{"experiment_id", c.experiment_id},
            {"lambda", c.lambda},
            {"batch_size", c.batch_size},
            {"lr", c.optimizer.lr},
            {"beta1", c.optimizer.beta1},
            {"beta2", c.optimizer.beta2},
            {"adam_eps", c.optimizer.eps},
            {"weight_decay", c.optimizer.weight_decay},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"augment", {{"lr_flip", c.augment.lr_flip},
                         {"flip_probability", c.augment.flip_probability},
                         {"max_shift", c.augment.max_shift}}},
            {"loss", {{"eps", c.loss.eps},
                      {"dice_factor_two", c.loss.dice_factor_two},
                      {"hist_high_linear", c.loss.hist_high_linear}}},
            {"max_steps", c.max_steps}};
}

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    losses::LossBreakdown<float> loss;
    bool rejected = false;
};

inline nlohmann::json to_json(const StepRecord& r, double lr)
{
    nlohmann::json j{{"type", "step"}, {"step", r.step}, {"epoch", r.epoch}, {"lr", lr}};
    nlohmann::json terms = nlohmann::json::object();
    nlohmann::json missing = nlohmann::json::array();
    for (std::size_t t = 0; t < 6; ++t) {
        if (r.loss.status[t] == losses::TermStatus::Active) terms[losses::term_names[t]] = r.loss.value[t];
        else if (r.loss.status[t] == losses::TermStatus::Missing) missing.push_back(losses::term_names[t]);
    }
    j["terms"] = terms;
    if (!missing.empty()) j["missing"] = missing;
    if (r.loss.skipped) j["skipped"] = true;
    else j["total"] = r.loss.total;
    if (r.rejected) j["rejected"] = true;
    return j;
}

struct ValidationResult {
    std::string basis; // "lesion" or "gland"
    eval::BinaryMetrics metrics;
    double score = 0.0;
};

struct TrainResult {
    model::Checkpoint best;
    model::Checkpoint last;
    std::optional<std::size_t> best_epoch;
    nlohmann::json history = nlohmann::json::array();
    std::vector<StepRecord> steps;
    std::vector<std::string> warnings;
};

inline Sample make_sample(const Exam& exam, const GradeBinning& binning)
{
    return {exam.meta.exam_id, input_tensor<float>(exam), losses::make_targets(exam, binning)};
}

/// Deep copy of every parameter tensor.
template <class T>
model::UCNetParams<T> clone_params(const model::UCNetParams<T>& p)
{
    model::UCNetParams<T> out;
    out.config = p.config;
    for (const auto& q : p.list) {
        const auto v = q.tensor.values();
        out.list.push_back({q.name, num::Tensor<T>::from_values(q.tensor.shape(), std::vector<T>(v.begin(), v.end()), true),
                            q.group, q.decay});
    }
    return out;
}

/// Validation accuracy under the experiment's inference rule. Falls back to
/// gland-level accuracy when the set holds no graded lesion.
inline ValidationResult validate_model(const model::UCNetParams<float>& params, const std::vector<const Exam*>& val,
                                       const GradeBinning& binning, eval::Rule rule)
{
    std::vector<eval::ExamEvaluation> evs;
    for (const auto* e : val) evs.push_back(eval::evaluate_exam(params, *e, binning));
    std::vector<bool> pred, truth;
    for (const auto& e : evs) {
        for (const auto& r : e.regions) {
            if (r.kind != RegionKind::Lesion || !r.truth_bin) continue;
            pred.push_back(binning.is_significant_bin(r.bin(rule)));
            truth.push_back(binning.is_significant_bin(*r.truth_bin));
        }
    }
    ValidationResult out;
    if (!pred.empty()) {
        out.basis = "lesion";
        out.metrics = eval::lesion_accuracy(pred, truth);
    } else {
        out.basis = "gland";
        out.metrics = eval::gland_accuracy(evs, binning, rule, false);
    }
    out.score = out.metrics.balanced;
    return out;
}

struct TrainHooks {
    std::ostream* log = nullptr; // JSON lines
    std::function<void(const nlohmann::json&)> on_epoch;
};

/// Mixed-supervision training with stratified round-robin batches. Keeps the
/// checkpoint with the best validation accuracy (earliest on ties) and the
/// last one.
inline TrainResult train(const TrainConfig& cfg, const model::UCNetConfig& model_cfg, const std::vector<const Exam*>& train_set,
                         const std::vector<const Exam*>& val_set, const TrainHooks& hooks = {})
{
    const auto exp = losses::Experiment::parse(cfg.experiment_id);
    if (train_set.empty()) throw DataError("training set is empty");
    if (val_set.empty()) throw DataError("validation set is empty");
    if (cfg.batch_size == 0) throw ConfigError("batch_size must be positive");
    model::detail::validate(model_cfg);
    const auto binning = GradeBinning::for_k(model_cfg.K);
    const auto rule = eval::rule_for(exp);

    TrainResult res;
    const auto strata = stratify(train_set);
    res.warnings = strata.warnings;
    if (cfg.batch_size < strata.nonempty()) {
        res.warnings.push_back("batch_size " + std::to_string(cfg.batch_size) + " is below the " +
                               std::to_string(strata.nonempty()) + " nonempty strata");
    }
    std::vector<Sample> cache;
    cache.reserve(train_set.size());
    for (const auto* e : train_set) cache.push_back(make_sample(*e, binning));

    auto params = model::init_params<float>(model_cfg);
    AdamWState<float> opt;
    nlohmann::json run_config{{"train", to_json(cfg)}, {"model", model::to_json(model_cfg)}};
    res.best = {clone_params(params), opt, run_config, nlohmann::json::array()};
    auto emit = [&](const nlohmann::json& j) {
        if (hooks.log) *hooks.log << j.dump() << '\n';
    };
    for (const auto& w : res.warnings) emit({{"type", "warning"}, {"message", w}});

    num::Rng root(cfg.seed);
    BalancedBatchSampler sampler(strata, cfg.batch_size, root.split(1).next_u64());
    num::Rng aug_rng = root.split(2);
    std::optional<double> best_score;
    std::size_t step = 0;
    bool capped = false;

    for (std::size_t epoch = 1; epoch <= cfg.epochs && !capped; ++epoch) {
        double loss_sum = 0.0;
        std::size_t loss_n = 0, rejected = 0;
        for (const auto& batch : sampler.next_epoch()) {
            if (cfg.max_steps > 0 && step >= cfg.max_steps) {
                capped = true;
                break;
            }
            std::vector<Sample> samples;
            for (auto i : batch) samples.push_back(augment(cache[i], cfg.augment, aug_rng));
            std::vector<losses::ExamPrediction<float>> preds;
            std::vector<const losses::ExamTargets*> targets;
            for (const auto& s : samples) {
                const auto out = model::forward(params, s.input);
                preds.push_back({out.seg, out.gg});
                targets.push_back(&s.targets);
            }
            StepRecord rec;
            rec.step = ++step;
            rec.epoch = epoch;
            rec.loss = losses::total_objective(preds, targets, params.regionnet_bias(), exp, cfg.lambda, cfg.loss);
            if (!rec.loss.skipped) {
                params.zero_grad();
                num::backward(rec.loss.total_tensor);
                std::vector<std::vector<float>> zeros;
                std::vector<AdamWTarget<float>> ts;
                zeros.reserve(params.list.size());
                for (auto& p : params.list) {
                    if (p.tensor.has_grad()) {
                        ts.push_back({p.tensor, p.tensor.grad(), p.decay});
                    } else {
                        zeros.emplace_back(p.tensor.numel(), 0.0f);
                        ts.push_back({p.tensor, zeros.back(), false});
                    }
                }
                rec.rejected = !std::isfinite(rec.loss.total) || !adamw_step(ts, opt, cfg.optimizer);
                if (rec.rejected) ++rejected;
                else {
                    loss_sum += rec.loss.total;
                    ++loss_n;
                }
            }
            rec.loss.total_tensor = {};
            emit(to_json(rec, cfg.optimizer.lr));
            res.steps.push_back(std::move(rec));
        }
        if (loss_n == 0 && capped) break;

        const auto val = validate_model(params, val_set, binning, rule);
        nlohmann::json h{{"epoch", epoch},
                         {"steps", step},
                         {"train_loss", loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0},
                         {"rejected_steps", rejected},
                         {"val_basis", val.basis},
                         {"val_balanced", val.score},
                         {"val", eval::to_json(val.metrics)},
                         {"rule", eval::to_string(rule)}};
        if (val.basis == "gland") {
            const std::string w = "validation set has no graded lesions; using gland-level accuracy";
            h["warning"] = w;
            if (res.warnings.empty() || res.warnings.back() != w) res.warnings.push_back(w);
        }
        const bool improved = !best_score || val.score > *best_score;
        h["best"] = improved;
        res.history.push_back(h);
        nlohmann::json line = h;
        line["type"] = "epoch";
        emit(line);
        if (hooks.on_epoch) hooks.on_epoch(h);
        if (improved) {
            best_score = val.score;
            res.best_epoch = epoch;
            res.best = {clone_params(params), opt, run_config, nlohmann::json::array()};
        }
    }
    res.best.history = res.history;
    res.last = {std::move(params), opt, run_config, res.history};
    if (res.history.empty()) res.last.params = clone_params(res.best.params);
    return res;
}

} // namespace mixsup::training
