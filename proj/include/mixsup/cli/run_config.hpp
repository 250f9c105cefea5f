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

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "mixsup/core/error.hpp"
#include "mixsup/data/exam.hpp"
#include "mixsup/data/phantom.hpp"
#include "mixsup/eval/metrics.hpp"
#include "mixsup/model/checkpoint.hpp"
#include "mixsup/model/ucnet.hpp"
#include "mixsup/training/gradcheck_suite.hpp"
#include "mixsup/training/trainer.hpp"

namespace mixsup::cli {

struct DataPaths {
    std::string train;
    /// Empty: hold out `val_fraction` of the training exams.
    std::string val;
    double val_fraction = 0.2;
};

struct EvalOptions {
    /// "auto" follows the experiment's region-classifier bit.
    std::string rule = "auto";
};

/// The one JSON document driving every subcommand.
struct RunConfig {
    std::string output_dir;
    DataPaths data;
    model::UCNetConfig model;
    GradeBinning binning;
    training::TrainConfig train;
    PhantomConfig phantom;
    EvalOptions eval;
    training::GradcheckSuiteConfig gradcheck;
};

namespace detail {

/// Reads the keys of one JSON object and rejects any it was not asked about.
class Section {
public:
    Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) throw ConfigError("'" + path_ + "' must be a JSON object");
    }

    template <class T>
    void get(const char* key, T& out)
    {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            out = it->template get<T>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("'" + where(key) + "' has the wrong type: " + e.what());
        }
    }

    void get(const char* key, Extent& out)
    {
        std::array<std::size_t, 3> xyz{out.x, out.y, out.z};
        get(key, xyz);
        out = {xyz[0], xyz[1], xyz[2]};
    }

    /// Child object, or an empty one when absent.
    Section child(const char* key)
    {
        seen_.insert(key);
        auto it = j_.find(key);
        static const nlohmann::json empty = nlohmann::json::object();
        return Section(it == j_.end() ? empty : *it, where(key));
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
        }
    }

    std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void require(bool ok, const std::string& msg)
{
    if (!ok) throw ConfigError(msg);
}

inline nlohmann::json extent_json(const Extent& e) { return nlohmann::json::array({e.x, e.y, e.z}); }

} // namespace detail

inline nlohmann::json to_json(const PhantomConfig& p)
{
    return {{"grid", detail::extent_json(p.grid)},
            {"voxel_spacing_mm", p.voxel_spacing_mm},
            {"gland_semi_axes", p.gland_semi_axes},
            {"lesions_min", p.lesions_min},
            {"lesions_max", p.lesions_max},
            {"lesion_xy_size", p.lesion_xy_size},
            {"lesion_z_size", p.lesion_z_size},
            {"core_fraction", p.core_fraction},
            {"plant_probability", p.plant_probability},
            {"plant_fraction", p.plant_fraction},
            {"snr", p.snr},
            {"stratum_weights", p.stratum_weights},
            {"t2_drop", p.t2_drop},
            {"adc_drop", p.adc_drop},
            {"dwi_gain", p.dwi_gain},
            {"gain_range", p.gain_range},
            {"offset_range", p.offset_range},
            {"pirads_jitter", p.pirads_jitter},
            {"placement_retries", p.placement_retries}};
}

inline nlohmann::json to_json(const training::GradcheckSuiteConfig& g)
{
    return {{"grid", detail::extent_json(g.grid)}, {"base_width", g.base_width}, {"depth", g.depth},
            {"K", g.K},                            {"seed", g.seed},             {"step", g.step},
            {"tolerance", g.tolerance},            {"probes_per_param", g.probes_per_param}};
}

/// Canonical form with every default filled in.
inline nlohmann::json to_json(const RunConfig& c)
{
    return {{"output_dir", c.output_dir},
            {"data", {{"train", c.data.train}, {"val", c.data.val}, {"val_fraction", c.data.val_fraction}}},
            {"model", {{"in_channels", c.model.in_channels}, {"base_width", c.model.base_width}, {"depth", c.model.depth}, {"seed", c.model.seed}}},
            {"binning", {{"K", c.binning.K}}},
            {"train", training::to_json(c.train)},
            {"phantom", to_json(c.phantom)},
            {"eval", {{"rule", c.eval.rule}}},
            {"gradcheck", to_json(c.gradcheck)}};
}

/// Validates and reads a config document; throws ConfigError on unknown keys,
/// wrong types or out-of-range values.
inline RunConfig parse_run_config(const nlohmann::json& j)
{
    using detail::require;
    RunConfig c;
    detail::Section root(j, "");
    root.get("output_dir", c.output_dir);

    auto data = root.child("data");
    data.get("train", c.data.train);
    data.get("val", c.data.val);
    data.get("val_fraction", c.data.val_fraction);
    data.finish();
    require(c.data.val_fraction > 0.0 && c.data.val_fraction < 1.0, "data.val_fraction must lie in (0, 1)");

    auto binning = root.child("binning");
    int K = 2;
    binning.get("K", K);
    binning.finish();
    c.binning = GradeBinning::for_k(K);

    auto model = root.child("model");
    model.get("in_channels", c.model.in_channels);
    model.get("base_width", c.model.base_width);
    model.get("depth", c.model.depth);
    model.get("seed", c.model.seed);
    model.finish();
    c.model.K = K;
    model::detail::validate(c.model);

    auto tr = root.child("train");
    tr.get("experiment_id", c.train.experiment_id);
    tr.get("lambda", c.train.lambda);
    tr.get("batch_size", c.train.batch_size);
    tr.get("lr", c.train.optimizer.lr);
    tr.get("beta1", c.train.optimizer.beta1);
    tr.get("beta2", c.train.optimizer.beta2);
    tr.get("adam_eps", c.train.optimizer.eps);
    tr.get("weight_decay", c.train.optimizer.weight_decay);
    tr.get("epochs", c.train.epochs);
    tr.get("seed", c.train.seed);
    tr.get("max_steps", c.train.max_steps);
    auto aug = tr.child("augment");
    aug.get("lr_flip", c.train.augment.lr_flip);
    aug.get("flip_probability", c.train.augment.flip_probability);
    aug.get("max_shift", c.train.augment.max_shift);
    aug.finish();
    auto loss = tr.child("loss");
    loss.get("eps", c.train.loss.eps);
    loss.get("dice_factor_two", c.train.loss.dice_factor_two);
    loss.get("hist_high_linear", c.train.loss.hist_high_linear);
    loss.finish();
    tr.finish();
    losses::Experiment::parse(c.train.experiment_id);
    require(c.train.batch_size > 0, "train.batch_size must be positive");
    require(c.train.optimizer.lr > 0.0, "train.lr must be positive");
    require(c.train.optimizer.beta1 >= 0.0 && c.train.optimizer.beta1 < 1.0, "train.beta1 must lie in [0, 1)");
    require(c.train.optimizer.beta2 >= 0.0 && c.train.optimizer.beta2 < 1.0, "train.beta2 must lie in [0, 1)");
    require(c.train.optimizer.eps > 0.0, "train.adam_eps must be positive");
    require(c.train.optimizer.weight_decay >= 0.0, "train.weight_decay must be non-negative");
    require(c.train.loss.eps > 0.0, "train.loss.eps must be positive");
    for (double l : c.train.lambda) require(l >= 0.0, "train.lambda entries must be non-negative");
    require(c.train.augment.flip_probability >= 0.0 && c.train.augment.flip_probability <= 1.0,
            "train.augment.flip_probability must lie in [0, 1]");

    auto ph = root.child("phantom");
    auto& p = c.phantom;
    ph.get("grid", p.grid);
    ph.get("voxel_spacing_mm", p.voxel_spacing_mm);
    ph.get("gland_semi_axes", p.gland_semi_axes);
    ph.get("lesions_min", p.lesions_min);
    ph.get("lesions_max", p.lesions_max);
    ph.get("lesion_xy_size", p.lesion_xy_size);
    ph.get("lesion_z_size", p.lesion_z_size);
    ph.get("core_fraction", p.core_fraction);
    ph.get("plant_probability", p.plant_probability);
    ph.get("plant_fraction", p.plant_fraction);
    ph.get("snr", p.snr);
    ph.get("stratum_weights", p.stratum_weights);
    ph.get("t2_drop", p.t2_drop);
    ph.get("adc_drop", p.adc_drop);
    ph.get("dwi_gain", p.dwi_gain);
    ph.get("gain_range", p.gain_range);
    ph.get("offset_range", p.offset_range);
    ph.get("pirads_jitter", p.pirads_jitter);
    ph.get("placement_retries", p.placement_retries);
    ph.finish();
    require(p.grid.x >= 4 && p.grid.y >= 4 && p.grid.z >= 2, "phantom.grid is too small");
    require(p.lesions_min >= 0 && p.lesions_min <= p.lesions_max, "phantom.lesions_min must lie in [0, lesions_max]");
    require(p.lesion_xy_size[0] >= 1 && p.lesion_xy_size[0] <= p.lesion_xy_size[1], "phantom.lesion_xy_size must be an ordered positive range");
    require(p.lesion_z_size[0] >= 1 && p.lesion_z_size[0] <= p.lesion_z_size[1], "phantom.lesion_z_size must be an ordered positive range");
    require(p.core_fraction[0] > 0.0 && p.core_fraction[0] <= p.core_fraction[1] && p.core_fraction[1] <= 1.0,
            "phantom.core_fraction must be an ordered range in (0, 1]");
    require(p.plant_probability >= 0.0 && p.plant_probability <= 1.0, "phantom.plant_probability must lie in [0, 1]");
    require(p.plant_fraction > 0.0 && p.plant_fraction < 1.0, "phantom.plant_fraction must lie in (0, 1)");
    require(p.snr > 0.0, "phantom.snr must be positive");
    require(p.placement_retries > 0, "phantom.placement_retries must be positive");
    double weight_sum = 0.0;
    for (double w : p.stratum_weights) {
        require(w >= 0.0, "phantom.stratum_weights must be non-negative");
        weight_sum += w;
    }
    require(weight_sum > 0.0, "phantom.stratum_weights must not all be zero");

    auto ev = root.child("eval");
    ev.get("rule", c.eval.rule);
    ev.finish();
    require(c.eval.rule == "auto" || c.eval.rule == "msb" || c.eval.rule == "mode-mean",
            "eval.rule must be auto, msb or mode-mean; got '" + c.eval.rule + "'");

    auto gc = root.child("gradcheck");
    gc.get("grid", c.gradcheck.grid);
    gc.get("base_width", c.gradcheck.base_width);
    gc.get("depth", c.gradcheck.depth);
    gc.get("K", c.gradcheck.K);
    gc.get("seed", c.gradcheck.seed);
    gc.get("step", c.gradcheck.step);
    gc.get("tolerance", c.gradcheck.tolerance);
    gc.get("probes_per_param", c.gradcheck.probes_per_param);
    gc.finish();
    require(c.gradcheck.step > 0.0 && c.gradcheck.tolerance > 0.0, "gradcheck.step and gradcheck.tolerance must be positive");

    root.finish();
    return c;
}

/// Loads a config file with data paths resolved against its directory; an
/// empty path yields the defaults.
inline RunConfig load_run_config(const std::filesystem::path& path)
{
    if (path.empty()) return parse_run_config(nlohmann::json::object());
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    auto c = parse_run_config(j);
    const auto base = path.parent_path();
    auto resolve = [&](std::string& p) {
        if (!p.empty() && std::filesystem::path(p).is_relative()) p = (base / p).lexically_normal().string();
    };
    resolve(c.data.train);
    resolve(c.data.val);
    resolve(c.output_dir);
    return c;
}

inline eval::Rule resolve_rule(const EvalOptions& o, const std::string& experiment_id)
{
    if (o.rule == "msb") return eval::Rule::Msb;
    if (o.rule == "mode-mean") return eval::Rule::ModeMean;
    return eval::rule_for(losses::Experiment::parse(experiment_id));
}

} // namespace mixsup::cli
