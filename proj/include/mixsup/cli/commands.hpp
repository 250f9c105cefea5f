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
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mixsup/cli/run_config.hpp"
#include "mixsup/core/error.hpp"
#include "mixsup/core/log.hpp"
#include "mixsup/data/bundle.hpp"
#include "mixsup/data/dataset.hpp"
#include "mixsup/data/phantom.hpp"
#include "mixsup/eval/metrics.hpp"
#include "mixsup/model/checkpoint.hpp"
#include "mixsup/training/gradcheck_suite.hpp"
#include "mixsup/training/trainer.hpp"

namespace mixsup::cli {

namespace fs = std::filesystem;

enum ExitCode : int { Success = 0, Usage = 1, DataFailure = 2, NumericFailure = 3 };

namespace detail {

inline void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw DataError("cannot write '" + path.string() + "'");
}

/// Writes `j` and checks that the file parses back to the same document.
inline void write_json(const fs::path& path, const nlohmann::json& j)
{
    write_text(path, j.dump(2) + "\n");
    std::ifstream in(path);
    if (nlohmann::json::parse(in) != j) throw DataError("self-check failed for '" + path.string() + "'");
}

inline void prepare_out_dir(const fs::path& out, bool force)
{
    if (fs::exists(out)) {
        if (!fs::is_directory(out)) throw ConfigError("output path '" + out.string() + "' is not a directory");
        if (!force && !fs::is_empty(out)) {
            throw ConfigError("output directory '" + out.string() + "' is not empty; pass --force to overwrite");
        }
    }
    fs::create_directories(out);
}

inline bool same_values(const model::UCNetParams<float>& a, const model::UCNetParams<float>& b)
{
    if (a.list.size() != b.list.size()) return false;
    for (std::size_t i = 0; i < a.list.size(); ++i) {
        if (a.list[i].name != b.list[i].name || !std::ranges::equal(a.list[i].tensor.values(), b.list[i].tensor.values())) return false;
    }
    return true;
}

inline void save_checked(const model::Checkpoint& ck, const fs::path& path)
{
    model::save_checkpoint(ck, path);
    if (!same_values(model::load_checkpoint(path).params, ck.params)) {
        throw DataError("checkpoint self-check failed for '" + path.string() + "'");
    }
}

/// Deterministic hold-out of `fraction` of the exams, at least one.
inline void split_validation(const std::vector<const Exam*>& all, double fraction, std::uint64_t seed,
                             std::vector<const Exam*>& train, std::vector<const Exam*>& val)
{
    if (all.size() < 2) throw DataError("need at least two exams to hold out a validation split");
    std::vector<std::size_t> idx(all.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    num::Rng(seed).split(3).shuffle(idx.begin(), idx.end());
    auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(all.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, all.size() - 1);
    std::vector<bool> is_val(all.size(), false);
    for (std::size_t i = 0; i < n_val; ++i) is_val[idx[i]] = true;
    for (std::size_t i = 0; i < all.size(); ++i) (is_val[i] ? val : train).push_back(all[i]);
}

inline std::string experiment_of(const model::Checkpoint& ck)
{
    const auto& rc = ck.run_config;
    if (rc.contains("train") && rc["train"].contains("experiment_id")) return rc["train"]["experiment_id"].get<std::string>();
    return "1111";
}

inline RunConfig config_of(const model::Checkpoint& ck)
{
    if (ck.run_config.contains("run")) return parse_run_config(ck.run_config["run"]);
    RunConfig c;
    c.model = ck.params.config;
    c.binning = GradeBinning::for_k(ck.params.config.K);
    c.train.experiment_id = experiment_of(ck);
    return c;
}

} // namespace detail

struct GenPhantomArgs {
    std::string config, out;
    std::size_t count = 0;
    std::uint64_t seed = 1;
    bool force = false;
};

inline int gen_phantom(const GenPhantomArgs& a, std::ostream& out)
{
    auto cfg = load_run_config(a.config);
    if (a.count == 0) throw ConfigError("--count must be positive");
    const fs::path dir(a.out);
    detail::prepare_out_dir(dir, a.force);
    const auto samples = generate_dataset(cfg.phantom, a.count, a.seed);
    std::vector<const Exam*> exams;
    for (const auto& s : samples) {
        const auto bundle = dir / s.exam.meta.exam_id;
        save_exam(s.exam, bundle);
        if (!(load_exam(bundle) == s.exam)) throw DataError("bundle self-check failed for '" + bundle.string() + "'");
        exams.push_back(&s.exam);
        log::debug("wrote " + bundle.string());
    }
    write_dataset_manifest(dir, exams, {{"seed", a.seed}, {"count", a.count}, {"phantom", to_json(cfg.phantom)}});
    detail::write_json(dir / "run_config.json", to_json(cfg));
    const auto summary = strata_summary(exams);
    out << summary.dump() << '\n';
    log::info("generated " + std::to_string(a.count) + " phantom exams in " + dir.string());
    return Success;
}

struct TrainArgs {
    std::string config, experiment, out;
    bool force = false;
};

inline int train(const TrainArgs& a, std::ostream& out)
{
    if (!a.experiment.empty()) losses::Experiment::parse(a.experiment);
    auto cfg = load_run_config(a.config);
    if (!a.experiment.empty()) cfg.train.experiment_id = a.experiment;
    const fs::path dir(a.out.empty() ? cfg.output_dir : a.out);
    if (dir.empty()) throw ConfigError("no output directory: pass --out or set output_dir");
    if (cfg.data.train.empty()) throw ConfigError("config has no data.train path");

    const auto train_exams = load_dataset(cfg.data.train);
    std::vector<Exam> val_exams;
    std::vector<const Exam*> train_set, val_set;
    if (cfg.data.val.empty()) {
        detail::split_validation(pointers(train_exams), cfg.data.val_fraction, cfg.train.seed, train_set, val_set);
    } else {
        val_exams = load_dataset(cfg.data.val);
        train_set = pointers(train_exams);
        val_set = pointers(val_exams);
    }
    training::stratify(train_set);
    for (const auto* e : train_set) {
        if (e->extent() != train_set.front()->extent()) throw DataError("exam '" + e->meta.exam_id + "' has a different grid");
    }

    detail::prepare_out_dir(dir, a.force);
    const auto cfg_json = to_json(cfg);
    detail::write_json(dir / "run_config.json", cfg_json);
    std::ofstream log_file(dir / "train_log.jsonl", std::ios::trunc);
    if (!log_file) throw DataError("cannot write '" + (dir / "train_log.jsonl").string() + "'");

    log::info("training experiment " + cfg.train.experiment_id + " on " + std::to_string(train_set.size()) + " exams, " +
              std::to_string(val_set.size()) + " for validation");
    training::TrainHooks hooks;
    hooks.log = &log_file;
    hooks.on_epoch = [](const nlohmann::json& h) { log::info(h.dump()); };
    auto res = training::train(cfg.train, cfg.model, train_set, val_set, hooks);
    log_file.close();
    for (const auto& w : res.warnings) log::warn(w);

    res.best.run_config["run"] = cfg_json;
    res.last.run_config["run"] = cfg_json;
    detail::save_checked(res.best, dir / "best.ckpt");
    detail::save_checked(res.last, dir / "last.ckpt");
    detail::write_json(dir / "history.json", res.history);
    nlohmann::json summary{{"experiment", cfg.train.experiment_id},
                           {"steps", res.steps.size()},
                           {"best_epoch", res.best_epoch ? nlohmann::json(*res.best_epoch) : nlohmann::json(nullptr)}};
    out << summary.dump() << '\n';
    return Success;
}

struct EvalArgs {
    std::string checkpoint, data, out, config;
};

inline int evaluate(const EvalArgs& a, std::ostream& out)
{
    const auto probe = model::load_checkpoint(a.checkpoint);
    auto cfg = a.config.empty() ? detail::config_of(probe) : load_run_config(a.config);
    const auto ck = model::load_checkpoint(a.checkpoint, cfg.model);
    const auto experiment = detail::experiment_of(ck);
    const auto exams = load_dataset(a.data);
    const auto ptrs = pointers(exams);
    std::vector<eval::ExamEvaluation> evals;
    for (const auto* e : ptrs) evals.push_back(eval::evaluate_exam(ck.params, *e, cfg.binning));
    const auto rule = resolve_rule(cfg.eval, experiment);
    const auto report = eval::build_report(evals, eval::collect_lesion_pirads(ptrs), cfg.binning, rule, experiment);
    const fs::path dir(a.out);
    fs::create_directories(dir);
    eval::write_report(report, (dir / "metrics.json").string(), (dir / "metrics.csv").string());
    out << eval::to_json(report).dump() << '\n';
    return Success;
}

struct InferArgs {
    std::string checkpoint, exam, out, config;
};

inline int infer(const InferArgs& a, std::ostream& out)
{
    const auto probe = model::load_checkpoint(a.checkpoint);
    auto cfg = a.config.empty() ? detail::config_of(probe) : load_run_config(a.config);
    const auto ck = model::load_checkpoint(a.checkpoint, cfg.model);
    const auto experiment = detail::experiment_of(ck);
    const auto rule = resolve_rule(cfg.eval, experiment);
    const auto exam = load_exam(a.exam);
    const fs::path dir(a.out);
    fs::create_directories(dir);

    model::ForwardOutput<float> pred;
    {
        num::NoGradGuard guard;
        pred = model::forward(ck.params, input_tensor<float>(exam));
    }
    const auto e = exam.extent();
    auto volume = [&](const char* name, const std::string& file, const num::Tensor<float>& t) {
        const auto v = t.values();
        nlohmann::json entry = bundle_detail::write_payload(dir, file, std::vector<float>(v.begin(), v.end()));
        const auto back = bundle_detail::read_file(dir / file);
        if (crc32c(back) != entry.at("crc32c").template get<std::uint32_t>()) throw DataError("payload self-check failed for '" + file + "'");
        entry["name"] = name;
        entry["dtype"] = "float32";
        entry["axes"] = nlohmann::json::array({"x", "y", "z", "c"});
        entry["shape"] = nlohmann::json::array({e.x, e.y, e.z, t.shape()[0]});
        return entry;
    };
    nlohmann::json volumes = nlohmann::json::array({volume("seg", "seg.f32", pred.seg), volume("gg", "gg.f32", pred.gg)});

    const auto ev = eval::evaluate_exam(ck.params, exam, cfg.binning);
    nlohmann::json regions = nlohmann::json::array(), hist = nlohmann::json::array();
    std::optional<int> gland_bin, gland_all;
    for (const auto& r : ev.regions) {
        const int bin = r.bin(rule);
        regions.push_back({{"region_id", r.region_id},
                           {"kind", static_cast<int>(r.kind)},
                           {"histogram", r.histogram},
                           {"z", r.z},
                           {"mode_bin", r.mode_bin},
                           {"msb_bin", r.msb_bin},
                           {"predicted_bin", bin},
                           {"significant", cfg.binning.is_significant_bin(bin)},
                           {"truth_bin", r.truth_bin ? nlohmann::json(*r.truth_bin) : nlohmann::json(nullptr)}});
        hist.push_back(r.histogram);
        gland_all = std::max(gland_all.value_or(0), bin);
        if (r.kind == RegionKind::Lesion) gland_bin = std::max(gland_bin.value_or(0), bin);
    }
    const bool via_lesions = gland_bin.has_value();
    const int g = gland_bin.value_or(gland_all.value_or(0));
    nlohmann::json report{{"exam_id", exam.meta.exam_id},
                          {"experiment", experiment},
                          {"rule", eval::to_string(rule)},
                          {"K", cfg.binning.K},
                          {"volumes", volumes},
                          {"histograms", hist},
                          {"regions", regions},
                          {"gland", {{"predicted_bin", g},
                                     {"significant", cfg.binning.is_significant_bin(g)},
                                     {"basis", via_lesions ? "lesions" : "regions"}}},
                          {"iou", ev.iou}};
    detail::write_json(dir / "report.json", report);
    out << report["gland"].dump() << '\n';
    return Success;
}

struct GradcheckArgs {
    std::string config;
};

inline int gradcheck(const GradcheckArgs& a, std::ostream& out)
{
    const auto cfg = load_run_config(a.config);
    const auto res = training::run_gradcheck_suite(cfg.gradcheck);
    out << training::to_json(res, cfg.gradcheck.tolerance).dump(2) << '\n';
    if (!res.passed()) {
        log::error("gradient check failed: worst relative error " + std::to_string(res.worst) + " exceeds " +
                   std::to_string(cfg.gradcheck.tolerance));
        return NumericFailure;
    }
    log::info("gradient check passed: worst relative error " + std::to_string(res.worst));
    return Success;
}

/// Parses arguments, runs one subcommand and maps failures to exit codes.
inline int run_cli(std::vector<std::string> args, std::ostream& out = std::cout)
{
    CLI::App app{"Mixed-supervision prostate MRI engine", "mixsup"};
    app.require_subcommand(1);

    GenPhantomArgs gp;
    auto* gen = app.add_subcommand("gen-phantom", "Generate phantom exam bundles");
    gen->add_option("--config", gp.config, "Run config JSON");
    gen->add_option("--count", gp.count, "Number of exams")->required();
    gen->add_option("--seed", gp.seed, "Generator seed");
    gen->add_option("--out", gp.out, "Output directory")->required();
    gen->add_flag("--force", gp.force, "Overwrite a non-empty output directory");

    TrainArgs ta;
    auto* tr = app.add_subcommand("train", "Train a model");
    tr->add_option("--config", ta.config, "Run config JSON")->required();
    tr->add_option("--experiment", ta.experiment, "Four-bit experiment id, overrides the config");
    tr->add_option("--out", ta.out, "Output directory");
    tr->add_flag("--force", ta.force, "Overwrite a non-empty output directory");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    ev->add_option("--checkpoint", ea.checkpoint, "Checkpoint file")->required();
    ev->add_option("--data", ea.data, "Dataset directory")->required();
    ev->add_option("--out", ea.out, "Output directory")->required();
    ev->add_option("--config", ea.config, "Run config JSON; defaults to the checkpoint's");

    InferArgs ia;
    auto* in = app.add_subcommand("infer", "Predict one exam");
    in->add_option("--checkpoint", ia.checkpoint, "Checkpoint file")->required();
    in->add_option("--exam", ia.exam, "Exam bundle directory")->required();
    in->add_option("--out", ia.out, "Output directory")->required();
    in->add_option("--config", ia.config, "Run config JSON; defaults to the checkpoint's");

    GradcheckArgs ga;
    auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every loss term");
    gc->add_option("--config", ga.config, "Run config JSON");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return Success;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return Success;
    } catch (const CLI::ParseError& e) {
        log::error(e.what());
        return Usage;
    }

    try {
        if (*gen) return gen_phantom(gp, out);
        if (*tr) return train(ta, out);
        if (*ev) return evaluate(ea, out);
        if (*in) return infer(ia, out);
        if (*gc) return gradcheck(ga, out);
    } catch (const ConfigError& e) {
        log::error(e.what());
        return Usage;
    } catch (const DataError& e) {
        log::error(e.what());
        return DataFailure;
    } catch (const NumericError& e) {
        log::error(e.what());
        return NumericFailure;
    } catch (const DomainError& e) {
        log::error(e.what());
        return NumericFailure;
    } catch (const std::exception& e) {
        log::error(e.what());
        return DataFailure;
    }
    return Usage;
}

} // namespace mixsup::cli
