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
#include <map>
#include <sstream>

#include "mixsup/data/phantom.hpp"
#include "mixsup/training/trainer.hpp"
#include "support/cohort_fixture.hpp"

using namespace mixsup;
using namespace mixsup::training;

namespace {

std::vector<StratumInput> sized_items(const std::vector<std::size_t>& sizes)
{
    std::vector<StratumInput> items;
    for (std::size_t s = 0; s < sizes.size(); ++s) {
        for (std::size_t i = 0; i < sizes[s]; ++i) items.push_back({"e" + std::to_string(items.size()), static_cast<int>(s)});
    }
    return items;
}

std::vector<std::size_t> batch_counts(const std::vector<std::size_t>& batch, const std::vector<StratumInput>& items)
{
    std::vector<std::size_t> c(4, 0);
    for (auto i : batch) ++c[std::min(*items[i].max_grade, 3)];
    return c;
}

} // namespace

TEST(Stratify, BucketsMaxGrade)
{
    const auto s = stratify({{"a", 4}, {"b", 0}, {"c", 2}, {"d", 5}, {"e", 1}, {"f", 3}});
    EXPECT_EQ(s.strata[3].members, (std::vector<std::size_t>{0, 3, 5}));
    EXPECT_EQ(s.strata[0].members, (std::vector<std::size_t>{1}));
    EXPECT_EQ(s.strata[1].members, (std::vector<std::size_t>{4}));
    EXPECT_EQ(s.strata[2].members, (std::vector<std::size_t>{2}));
    EXPECT_TRUE(s.warnings.empty());
}

TEST(Stratify, CohortFixtureSizes)
{
    const auto items = mixsup::testing::load_cohort_metadata();
    ASSERT_EQ(items.size(), 679u);
    const auto s = stratify(items);
    EXPECT_EQ(s.strata[0].members.size(), 92u);
    EXPECT_EQ(s.strata[1].members.size(), 222u);
    EXPECT_EQ(s.strata[2].members.size(), 228u);
    EXPECT_EQ(s.strata[3].members.size(), 137u);
}

TEST(Stratify, IsAPartition)
{
    num::Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<StratumInput> items;
        const std::size_t n = 1 + rng.index(200);
        for (std::size_t i = 0; i < n; ++i) items.push_back({"x" + std::to_string(i), rng.integer(0, 5)});
        const auto s = stratify(items);
        std::vector<int> seen(n, 0);
        for (const auto& st : s.strata) {
            for (auto m : st.members) ++seen[m];
        }
        for (int c : seen) ASSERT_EQ(c, 1);
    }
}

TEST(Stratify, MissingGradeRejectedWithId)
{
    try {
        stratify({{"ok", 1}, {"bad-exam", std::nullopt}});
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("bad-exam"), std::string::npos);
    }
}

TEST(Stratify, AllBenignWarnsAboutEmptyStrata)
{
    const auto s = stratify({{"a", 0}, {"b", 0}});
    EXPECT_EQ(s.nonempty(), 1u);
    EXPECT_EQ(s.warnings.size(), 3u);
}

TEST(BalancedBatches, EqualStrataGiveTwoTwoOneOne)
{
    const auto items = sized_items({12, 12, 12, 12});
    BalancedBatchSampler sampler(stratify(items), 6, 1);
    for (const auto& b : sampler.next_epoch()) {
        auto c = batch_counts(b, items);
        std::sort(c.begin(), c.end());
        EXPECT_EQ(c, (std::vector<std::size_t>{1, 1, 2, 2}));
    }
}

TEST(BalancedBatches, SingleStratum)
{
    const auto items = sized_items({0, 0, 9, 0});
    BalancedBatchSampler sampler(stratify(items), 4, 2);
    const auto batches = sampler.next_epoch();
    EXPECT_EQ(batches.size(), 3u);
    for (const auto& b : batches) {
        EXPECT_EQ(b.size(), 4u);
        for (auto i : b) EXPECT_EQ(*items[i].max_grade, 2);
    }
}

TEST(BalancedBatches, EpochCoversLongestStratumOncePerEpoch)
{
    const auto items = sized_items({3, 10, 5, 7});
    BalancedBatchSampler sampler(stratify(items), 6, 4);
    EXPECT_EQ(sampler.draws_per_epoch(), 42u);
    for (int epoch = 0; epoch < 5; ++epoch) {
        std::map<std::size_t, int> seen;
        for (const auto& b : sampler.next_epoch()) {
            for (auto i : b) ++seen[i];
        }
        for (std::size_t i = 3; i < 13; ++i) EXPECT_GE(seen[i], 1) << "longest stratum member " << i;
    }
}

TEST(BalancedBatches, CountsDifferByAtMostOneForRandomSizes)
{
    num::Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<std::size_t> sizes(4);
        for (auto& s : sizes) s = rng.bernoulli(0.2) ? 0 : 1 + rng.index(40);
        if (std::all_of(sizes.begin(), sizes.end(), [](auto s) { return s == 0; })) sizes[0] = 1;
        const std::size_t batch = 1 + rng.index(12);
        const auto items = sized_items(sizes);
        BalancedBatchSampler sampler(stratify(items), batch, trial);
        for (int epoch = 0; epoch < 3; ++epoch) {
            for (const auto& b : sampler.next_epoch()) {
                ASSERT_EQ(b.size(), batch);
                const auto c = batch_counts(b, items);
                std::size_t lo = SIZE_MAX, hi = 0;
                for (std::size_t s = 0; s < 4; ++s) {
                    if (sizes[s] == 0) continue;
                    lo = std::min(lo, c[s]);
                    hi = std::max(hi, c[s]);
                }
                ASSERT_LE(hi - lo, 1u);
            }
        }
    }
}

TEST(BalancedBatches, CohortSizesBalancedOverFiftyEpochs)
{
    const auto items = sized_items({92, 222, 228, 137});
    BalancedBatchSampler sampler(stratify(items), 6, 7);
    std::vector<double> freq(4, 0.0);
    for (int epoch = 0; epoch < 50; ++epoch) {
        for (const auto& b : sampler.next_epoch()) {
            const auto c = batch_counts(b, items);
            for (std::size_t s = 0; s < 4; ++s) {
                ASSERT_GE(c[s], 1u);
                freq[s] += static_cast<double>(c[s]);
            }
        }
    }
    const double mean = (freq[0] + freq[1] + freq[2] + freq[3]) / 4.0;
    for (double f : freq) EXPECT_NEAR(f / mean, 1.0, 0.05);
}

TEST(BalancedBatches, SameSeedSameOrder)
{
    const auto items = sized_items({5, 8, 2, 6});
    BalancedBatchSampler a(stratify(items), 6, 99), b(stratify(items), 6, 99);
    for (int e = 0; e < 3; ++e) EXPECT_EQ(a.next_epoch(), b.next_epoch());
}

// --- AdamW -----------------------------------------------------------------

namespace {

num::Tensor<double> param(std::vector<double> v)
{
    const std::size_t n = v.size();
    return num::Tensor<double>::from_values({n}, std::move(v), true);
}

} // namespace

TEST(AdamW, ZeroGradZeroDecayIsNoOp)
{
    auto p = param({1.0, -2.0, 3.0});
    std::vector<double> g(3, 0.0);
    AdamWState<double> st;
    std::vector<AdamWTarget<double>> ts{{p, g, true}};
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    for (int i = 0; i < 5; ++i) ASSERT_TRUE(adamw_step(ts, st, cfg));
    EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()), (std::vector<double>{1.0, -2.0, 3.0}));
}

TEST(AdamW, FirstStepIsMinusLr)
{
    auto p = param({0.5});
    std::vector<double> g{1.0};
    AdamWState<double> st;
    std::vector<AdamWTarget<double>> ts{{p, g, false}};
    AdamWConfig cfg;
    ASSERT_TRUE(adamw_step(ts, st, cfg));
    EXPECT_NEAR(p.values()[0] - 0.5, -cfg.lr / (1.0 + cfg.eps), 1e-15);
}

TEST(AdamW, DecayIsPureShrinkWithZeroGrad)
{
    auto p = param({2.0});
    std::vector<double> g{0.0};
    AdamWState<double> st;
    std::vector<AdamWTarget<double>> ts{{p, g, true}};
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.1;
    ASSERT_TRUE(adamw_step(ts, st, cfg));
    EXPECT_DOUBLE_EQ(p.values()[0], 2.0 * (1.0 - 0.01 * 0.1));
}

TEST(AdamW, EqualsAdamWhenDecayIsZero)
{
    // Independent Adam on f(x) = (x - 3)^2 + x^4 / 10.
    AdamWConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.0;
    auto p = param({-1.0});
    AdamWState<double> st;
    double x = -1.0, m = 0.0, v = 0.0;
    for (int t = 1; t <= 200; ++t) {
        auto grad_at = [](double y) { return 2.0 * (y - 3.0) + 0.4 * y * y * y; };
        std::vector<double> g{grad_at(p.values()[0])};
        std::vector<AdamWTarget<double>> ts{{p, g, true}};
        ASSERT_TRUE(adamw_step(ts, st, cfg));
        const double gx = grad_at(x);
        m = cfg.beta1 * m + (1 - cfg.beta1) * gx;
        v = cfg.beta2 * v + (1 - cfg.beta2) * gx * gx;
        const double mh = m / (1 - std::pow(cfg.beta1, t)), vh = v / (1 - std::pow(cfg.beta2, t));
        x -= cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
        ASSERT_NEAR(p.values()[0], x, 1e-12) << "step " << t;
    }
}

TEST(AdamW, NonFiniteGradientRejected)
{
    auto p = param({1.0, 1.0});
    std::vector<double> g{0.5, std::nan("")};
    AdamWState<double> st;
    std::vector<AdamWTarget<double>> ts{{p, g, true}};
    EXPECT_FALSE(adamw_step(ts, st, AdamWConfig{}));
    EXPECT_EQ(st.step, 0u);
    EXPECT_EQ(p.values()[0], 1.0);
}

// --- augmentation ------------------------------------------------------------

namespace {

Sample small_sample()
{
    Sample s;
    s.exam_id = "s";
    std::vector<float> in(3 * 2 * 3 * 4);
    for (std::size_t i = 0; i < in.size(); ++i) in[i] = static_cast<float>(i);
    s.input = num::Tensor<float>::from_values({3, 2, 3, 4}, in);
    s.targets.y_seg.assign(24, 0);
    s.targets.y_seg[0] = 1;
    s.targets.regions.push_back({"lesion-1", RegionKind::Lesion, {0, 1}, 1});
    s.targets.regions.push_back({"left-mid", RegionKind::Sextant, {4, 5, 16}, 0});
    return s;
}

} // namespace

TEST(Augment, FlipMirrorsVoxelsAndSwapsSextantLabels)
{
    const auto s = small_sample();
    const auto f = flip_lr(s);
    EXPECT_EQ(f.input.values()[3], s.input.values()[0]);
    EXPECT_EQ(f.targets.y_seg[3], 1);
    EXPECT_EQ(f.targets.regions[0].voxels, (std::vector<std::uint32_t>{2, 3}));
    EXPECT_EQ(f.targets.regions[1].region_id, "right-mid");
    EXPECT_EQ(f.targets.regions[1].voxels, (std::vector<std::uint32_t>{6, 7, 19}));
    const auto back = flip_lr(f);
    EXPECT_TRUE(std::equal(back.input.values().begin(), back.input.values().end(), s.input.values().begin()));
    EXPECT_EQ(back.targets.regions[1].region_id, "left-mid");
    EXPECT_EQ(back.targets.regions[1].voxels, s.targets.regions[1].voxels);
}

TEST(Augment, ShiftClipsAtBorder)
{
    const auto s = small_sample();
    const auto r = shift_xy(s, -1, 1);
    // voxel 0 (x=0) leaves the grid; voxel 1 (x=1,y=0) lands at x=0,y=1.
    EXPECT_EQ(r.targets.regions[0].voxels, (std::vector<std::uint32_t>{4}));
    EXPECT_EQ(r.targets.y_seg[0], 0);
    EXPECT_EQ(r.input.values()[0], 0.0f);
    EXPECT_EQ(r.input.values()[4], s.input.values()[1]);
}

TEST(Augment, OffByDefault)
{
    const auto s = small_sample();
    num::Rng rng(1);
    const auto r = augment(s, AugmentConfig{}, rng);
    EXPECT_TRUE(std::equal(r.input.values().begin(), r.input.values().end(), s.input.values().begin()));
    EXPECT_EQ(r.targets.regions[1].region_id, "left-mid");
}

// --- trainer -------------------------------------------------------------------

namespace {

struct TinySetup {
    std::vector<PhantomSample> train, val;
    std::vector<const Exam*> train_ptr, val_ptr;
    model::UCNetConfig model;

    TinySetup()
    {
        PhantomConfig pc;
        train = generate_dataset(pc, 8, 5, "tr");
        val = generate_dataset(pc, 3, 6, "va");
        for (const auto& s : train) train_ptr.push_back(&s.exam);
        for (const auto& s : val) val_ptr.push_back(&s.exam);
        model.base_width = 2;
        model.depth = 2;
        model.K = 2;
        model.seed = 3;
    }
};

const TinySetup& tiny()
{
    static const TinySetup s;
    return s;
}

} // namespace

TEST(Trainer, ZeroEpochsReturnsInitialisedCheckpoint)
{
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto r = train(cfg, tiny().model, tiny().train_ptr, tiny().val_ptr);
    EXPECT_TRUE(r.history.empty());
    EXPECT_TRUE(r.steps.empty());
    const auto init = model::init_params<float>(tiny().model);
    for (std::size_t i = 0; i < init.list.size(); ++i) {
        const auto a = init.list[i].tensor.values(), b = r.best.params.list[i].tensor.values();
        ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << init.list[i].name;
    }
}

TEST(Trainer, FirstTenStepsBitIdentical)
{
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.max_steps = 10;
    cfg.optimizer.lr = 1e-3;
    cfg.augment.lr_flip = true;
    cfg.augment.max_shift = 1;
    const auto a = train(cfg, tiny().model, tiny().train_ptr, tiny().val_ptr);
    const auto b = train(cfg, tiny().model, tiny().train_ptr, tiny().val_ptr);
    ASSERT_EQ(a.steps.size(), 10u);
    ASSERT_EQ(b.steps.size(), 10u);
    for (std::size_t i = 0; i < 10; ++i) {
        EXPECT_EQ(a.steps[i].loss.total, b.steps[i].loss.total);
        EXPECT_EQ(a.steps[i].loss.value, b.steps[i].loss.value);
    }
}

TEST(Trainer, LogOmitsGatedTerms)
{
    for (const std::string id : {"0001", "1110"}) {
        TrainConfig cfg;
        cfg.experiment_id = id;
        cfg.epochs = 1;
        cfg.max_steps = 2;
        std::ostringstream log;
        train(cfg, tiny().model, tiny().train_ptr, tiny().val_ptr, {&log, {}});
        std::istringstream in(log.str());
        std::string line;
        int steps = 0;
        while (std::getline(in, line)) {
            const auto j = nlohmann::json::parse(line);
            if (j.at("type") != "step") continue;
            ++steps;
            for (const auto& [name, v] : j.at("terms").items()) {
                const bool seg = name == "seg_dice" || name == "seg_bce";
                EXPECT_EQ(seg, id == "0001") << id << " logged " << name;
            }
            if (id == "0001") EXPECT_EQ(j.at("terms").size(), 2u);
        }
        EXPECT_EQ(steps, 2);
    }
}

TEST(Trainer, HistoryAndBestCheckpoint)
{
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.optimizer.lr = 1e-3;
    const auto r = train(cfg, tiny().model, tiny().train_ptr, tiny().val_ptr);
    ASSERT_EQ(r.history.size(), 2u);
    ASSERT_TRUE(r.best_epoch);
    double best = -1;
    std::size_t arg = 0;
    for (const auto& h : r.history) {
        EXPECT_EQ(h.at("val_basis"), "lesion");
        EXPECT_EQ(h.at("rule"), "msb");
        if (h.at("val_balanced").get<double>() > best) {
            best = h.at("val_balanced").get<double>();
            arg = h.at("epoch").get<std::size_t>();
        }
    }
    EXPECT_EQ(*r.best_epoch, arg);
    EXPECT_EQ(r.last.history, r.history);
    EXPECT_EQ(r.last.optimizer.step, r.steps.size());
}

TEST(Trainer, ValidationWithoutLesionsFallsBackToGland)
{
    std::vector<Exam> val;
    for (const auto* e : tiny().val_ptr) {
        Exam copy = *e;
        std::erase_if(copy.regions, [](const RegionRecord& r) { return r.kind == RegionKind::Lesion; });
        val.push_back(std::move(copy));
    }
    std::vector<const Exam*> vp;
    for (const auto& e : val) vp.push_back(&e);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.max_steps = 1;
    const auto r = train(cfg, tiny().model, tiny().train_ptr, vp);
    ASSERT_EQ(r.history.size(), 1u);
    EXPECT_EQ(r.history[0].at("val_basis"), "gland");
    EXPECT_TRUE(std::any_of(r.warnings.begin(), r.warnings.end(),
                            [](const std::string& w) { return w.find("gland") != std::string::npos; }));
}

TEST(Trainer, InvalidExperimentRejected)
{
    TrainConfig cfg;
    cfg.experiment_id = "2x11";
    EXPECT_THROW(train(cfg, tiny().model, tiny().train_ptr, tiny().val_ptr), ConfigError);
}
