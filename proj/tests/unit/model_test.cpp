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

#include <filesystem>
#include <fstream>

#include "mixsup/model/checkpoint.hpp"
#include "mixsup/model/ucnet.hpp"
#include "mixsup/numcore/gradcheck.hpp"

using namespace mixsup;
using namespace mixsup::model;
namespace fs = std::filesystem;

namespace {

template <class T>
Tensor<T> random_input(std::uint64_t seed, std::size_t Z, std::size_t Y, std::size_t X, std::size_t C = 3)
{
    num::Rng rng(seed);
    std::vector<T> v(C * Z * Y * X);
    for (auto& x : v) x = static_cast<T>(rng.normal());
    return Tensor<T>::from_values({C, Z, Y, X}, std::move(v));
}

// Parameter count by enumerating conv layers one by one.
std::size_t enumerate_count(std::size_t w0, std::size_t depth, std::size_t K)
{
    std::vector<std::pair<std::size_t, std::size_t>> convs3{{3, w0}};
    for (std::size_t l = 0; l < depth; ++l) {
        const std::size_t w = w0 << l;
        convs3.push_back({w, w});
        convs3.push_back({w, w});
        if (l + 1 < depth) {
            convs3.push_back({w, 2 * w});
            convs3.push_back({2 * w, w});
            convs3.push_back({w, w});
            convs3.push_back({w, w});
        }
    }
    std::size_t n = 0;
    for (auto [ci, co] : convs3) n += 27 * ci * co + co;
    return n + (w0 + 1) + (w0 * K + K) + K;
}

fs::path scratch(const std::string& name) { return fs::temp_directory_path() / ("mixsup_model_test_" + name); }

} // namespace

TEST(UCNet, ParameterCountMatchesClosedForm)
{
    for (std::size_t w : {2u, 4u, 8u})
        for (std::size_t d : {1u, 2u, 3u})
            for (int K : {2, 3, 6}) {
                const UCNetConfig c{3, w, d, K, 0};
                const auto p = init_params<float>(c);
                EXPECT_EQ(p.count(), parameter_count(c));
                EXPECT_EQ(p.count(), enumerate_count(w, d, static_cast<std::size_t>(K)));
            }
}

TEST(UCNet, DoublingWidthFollowsConvFormula)
{
    const UCNetConfig a{3, 4, 2, 2, 0}, b{3, 8, 2, 2, 0};
    const auto diff = static_cast<long>(parameter_count(b)) - static_cast<long>(parameter_count(a));
    EXPECT_EQ(diff, static_cast<long>(enumerate_count(8, 2, 2)) - static_cast<long>(enumerate_count(4, 2, 2)));
    EXPECT_EQ(parameter_count(a), 7301u);
}

TEST(UCNet, OutputsHaveInputExtentAndValidRanges)
{
    const UCNetConfig c{3, 4, 3, 3, 5};
    const auto p = init_params<float>(c);
    const auto out = forward(p, random_input<float>(1, 8, 12, 16));
    EXPECT_EQ(out.seg.shape(), (Shape{1, 8, 12, 16}));
    EXPECT_EQ(out.gg.shape(), (Shape{3, 8, 12, 16}));
    for (float v : out.seg.values()) {
        EXPECT_GT(v, -1.0f);
        EXPECT_LT(v, 1.0f);
    }
    const std::size_t n = 8 * 12 * 16;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0;
        for (std::size_t k = 0; k < 3; ++k) s += out.gg.values()[k * n + i];
        ASSERT_NEAR(s, 1.0, 1e-6);
    }
}

TEST(UCNet, ZeroHeadsGiveNeutralOutputs)
{
    auto p = init_params<float>({3, 4, 2, 4, 1});
    for (auto name : {"seg_head.w", "grade_head.w"}) {
        auto v = p[name].mutable_values();
        std::fill(v.begin(), v.end(), 0.0f);
    }
    const auto out = forward(p, random_input<float>(2, 4, 8, 8));
    for (float v : out.seg.values()) EXPECT_EQ(v, 0.0f);
    for (float v : out.gg.values()) EXPECT_NEAR(v, 0.25f, 1e-7);
}

TEST(UCNet, ForwardIsDeterministic)
{
    const auto p = init_params<float>({3, 4, 2, 2, 9});
    const auto x = random_input<float>(3, 4, 8, 8);
    const auto a = forward(p, x), b = forward(p, x);
    EXPECT_TRUE(std::equal(a.gg.values().begin(), a.gg.values().end(), b.gg.values().begin()));
    const auto q = init_params<float>({3, 4, 2, 2, 9});
    EXPECT_TRUE(std::equal(p["enc1.conv2.w"].values().begin(), p["enc1.conv2.w"].values().end(),
                           q["enc1.conv2.w"].values().begin()));
}

TEST(UCNet, RejectsBadInputs)
{
    const auto p = init_params<float>({3, 4, 3, 2, 0});
    EXPECT_THROW(forward(p, random_input<float>(1, 6, 8, 8)), ShapeError);
    EXPECT_THROW(forward(p, random_input<float>(1, 8, 8, 8, 2)), ShapeError);
    auto x = random_input<float>(1, 4, 8, 8);
    auto bad = Tensor<float>::from_values(x.shape(), std::vector<float>(x.values().begin(), x.values().end()));
    bad.mutable_values()[5] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(forward(p, bad), NumericError);
    EXPECT_THROW(init_params<float>({3, 4, 2, 1, 0}), ConfigError);
}

TEST(UCNet, NonFiniteActivationNamesTheLayer)
{
    auto p = init_params<float>({3, 4, 2, 2, 0});
    p["down0.w"].mutable_values()[0] = std::numeric_limits<float>::infinity();
    try {
        forward(p, random_input<float>(1, 4, 8, 8));
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("down0"), std::string::npos) << e.what();
    }
}

TEST(UCNet, GradientsReachEveryBackboneParameter)
{
    auto p = init_params<float>({3, 4, 2, 2, 4});
    const auto out = forward(p, random_input<float>(4, 4, 8, 8));
    num::Rng rng(8);
    std::vector<float> w(out.gg.numel());
    for (auto& x : w) x = static_cast<float>(rng.uniform(-1, 1));
    auto loss = num::add(num::sum(num::mul(out.gg, Tensor<float>::from_values(out.gg.shape(), w))), num::sum(out.seg));
    num::backward(loss);
    for (const auto& prm : p.list) {
        if (prm.group == ParamGroup::RegionNet) continue;
        double mag = 0;
        for (float g : prm.tensor.grad()) mag += std::abs(g);
        EXPECT_GT(mag, 0.0) << prm.name;
    }
}

TEST(UCNet, BackwardMatchesFiniteDifferences)
{
    using HP = num::HighPrecision;
    auto p = init_params<HP>({3, 2, 2, 2, 7});
    const auto x = random_input<HP>(5, 2, 4, 4);
    num::Rng rng(12);
    std::vector<HP> w(2 * 2 * 4 * 4);
    for (auto& v : w) v = static_cast<HP>(rng.uniform(-1, 1));
    const auto weights = Tensor<HP>::from_values({2, 2, 4, 4}, w);
    auto f = [&] {
        const auto out = forward(p, x);
        return num::add(num::sum(num::mul(out.gg, weights)), num::mean(out.seg));
    };
    num::GradCheckOptions opt;
    opt.max_probes_per_param = 8;
    const auto rep = num::grad_check<HP>(f, p.tensors(), 1e-6, 1e-4, opt);
    EXPECT_TRUE(rep.passed()) << rep.worst;
}

TEST(RegionNet, Examples)
{
    const auto h = Tensor<double>::from_values({1, 2}, {0.9, 0.1});
    auto z0 = regionnet(h, Tensor<double>::zeros({2}));
    EXPECT_DOUBLE_EQ(z0.at(0), 0.9);
    EXPECT_DOUBLE_EQ(z0.at(1), 0.1);
    auto z1 = regionnet(h, Tensor<double>::full({2}, -1.0));
    EXPECT_EQ(z1.at(0), 0.0);
    EXPECT_EQ(z1.at(1), 0.0);
    auto z2 = regionnet(h, Tensor<double>::from_values({2}, {-0.5, -0.05}));
    EXPECT_NEAR(z2.at(0), 0.4, 1e-12);
    EXPECT_NEAR(z2.at(1), 0.05, 1e-12);
}

TEST(RegionNet, PreservesOrderingUnderEqualBias)
{
    num::Rng rng(31);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t K = static_cast<std::size_t>(rng.integer(2, 6));
        std::vector<double> h(K);
        double s = 0;
        for (auto& v : h) s += (v = rng.uniform());
        for (auto& v : h) v /= s;
        const double b = rng.uniform(-1, 1);
        const auto z = regionnet(Tensor<double>::from_values({1, K}, h), Tensor<double>::full({K}, b));
        for (std::size_t a = 0; a < K; ++a) {
            EXPECT_GE(z.at(a), 0.0);
            for (std::size_t c = 0; c < K; ++c) {
                if (h[a] >= h[c]) EXPECT_GE(z.at(a), z.at(c));
            }
        }
    }
}

TEST(RegionNet, OnlyBiasIsTrainable)
{
    auto bias = Tensor<double>::from_values({2}, {0.1, -0.2}, true);
    auto h = Tensor<double>::from_values({3, 2}, {0.5, 0.5, 0.8, 0.2, 0.1, 0.9}, true);
    num::backward(num::sum(regionnet(h, bias)));
    EXPECT_DOUBLE_EQ(bias.grad()[0], 3.0);
    EXPECT_DOUBLE_EQ(bias.grad()[1], 2.0); // row 2 bin 1 is clipped by the ReLU
}

TEST(Checkpoint, RoundTripIsBitExact)
{
    Checkpoint ck;
    ck.params = init_params<float>({3, 4, 2, 2, 3});
    ck.params["regionnet.bias"].mutable_values()[1] = -0.125f;
    ck.optimizer.step = 17;
    for (const auto& p : ck.params.list) {
        ck.optimizer.m.emplace_back(p.tensor.numel(), 0.5f);
        ck.optimizer.v.emplace_back(p.tensor.numel(), 0.25f);
    }
    ck.run_config = {{"experiment_id", "1111"}};
    ck.history = nlohmann::json::array({{{"epoch", 0}, {"val_accuracy", 0.5}}});
    const auto path = scratch("rt.ckpt");
    save_checkpoint(ck, path);
    const auto back = load_checkpoint(path);
    EXPECT_EQ(back.params.config, ck.params.config);
    EXPECT_EQ(back.optimizer, ck.optimizer);
    EXPECT_EQ(back.run_config, ck.run_config);
    EXPECT_EQ(back.history, ck.history);
    const auto x = random_input<float>(6, 4, 8, 8);
    const auto a = forward(ck.params, x), b = forward(back.params, x);
    EXPECT_TRUE(std::equal(a.gg.values().begin(), a.gg.values().end(), b.gg.values().begin()));
    EXPECT_TRUE(std::equal(a.seg.values().begin(), a.seg.values().end(), b.seg.values().begin()));
    fs::remove(path);
}

TEST(Checkpoint, CorruptionIsDetected)
{
    Checkpoint ck;
    ck.params = init_params<float>({3, 2, 2, 2, 3});
    const auto path = scratch("corrupt.ckpt");
    save_checkpoint(ck, path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(static_cast<std::streamoff>(fs::file_size(path) - 40));
        char c = 0x5a;
        f.write(&c, 1);
    }
    EXPECT_THROW(load_checkpoint(path), ChecksumError);
    fs::resize_file(path, fs::file_size(path) / 2);
    EXPECT_THROW(load_checkpoint(path), ChecksumError);
    fs::remove(path);
}

TEST(Checkpoint, VersionAndKMismatchAreExplicit)
{
    Checkpoint ck;
    ck.params = init_params<float>({3, 2, 2, 3, 3});
    const auto path = scratch("k.ckpt");
    save_checkpoint(ck, path);
    EXPECT_NO_THROW(load_checkpoint(path, {3, 2, 2, 3, 0}));
    try {
        load_checkpoint(path, {3, 2, 2, 2, 0});
        FAIL() << "expected incompatibility";
    } catch (const IncompatibleCheckpointError& e) {
        EXPECT_NE(std::string(e.what()).find("K = 3"), std::string::npos);
    }
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(8);
        const std::uint32_t v = 7;
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    EXPECT_THROW(load_checkpoint(path), FormatVersionError);
    fs::remove(path);
}
