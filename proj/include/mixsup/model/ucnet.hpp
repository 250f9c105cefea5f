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

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mixsup/core/error.hpp"
#include "mixsup/numcore/ops.hpp"
#include "mixsup/numcore/random.hpp"

namespace mixsup::model {

using num::Shape;
using num::Tensor;

struct UCNetConfig {
    std::size_t in_channels = 3;
    std::size_t base_width = 8;
    std::size_t depth = 3;
    int K = 2;
    std::uint64_t seed = 0;

    std::size_t width(std::size_t level) const { return base_width << level; }
    bool operator==(const UCNetConfig&) const = default;
};

/// Which part of the network a parameter belongs to; the heads and the
/// RegionNet bias are exclusive to particular loss terms.
enum class ParamGroup { Backbone, SegHead, GradeHead, RegionNet };

template <class T>
struct Param {
    std::string name;
    Tensor<T> tensor;
    ParamGroup group = ParamGroup::Backbone;
    bool decay = false; // conv kernels only
};

template <class T>
struct UCNetParams {
    UCNetConfig config;
    std::vector<Param<T>> list;

    const Tensor<T>& operator[](const std::string& name) const
    {
        for (const auto& p : list) {
            if (p.name == name) return p.tensor;
        }
        throw Error("no parameter named '" + name + "'");
    }
    Tensor<T>& operator[](const std::string& name)
    {
        return const_cast<Tensor<T>&>(static_cast<const UCNetParams&>(*this)[name]);
    }
    const Tensor<T>& regionnet_bias() const { return list.back().tensor; }

    std::vector<Tensor<T>> tensors() const
    {
        std::vector<Tensor<T>> out;
        for (const auto& p : list) out.push_back(p.tensor);
        return out;
    }
    std::size_t count() const
    {
        std::size_t n = 0;
        for (const auto& p : list) n += p.tensor.numel();
        return n;
    }
    void zero_grad()
    {
        for (auto& p : list) p.tensor.zero_grad();
    }
};

/// Closed-form parameter count of the configured network.
inline std::size_t parameter_count(const UCNetConfig& c)
{
    auto conv = [](std::size_t k, std::size_t ci, std::size_t co) { return k * k * k * ci * co + co; };
    const std::size_t K = static_cast<std::size_t>(c.K);
    std::size_t n = conv(3, c.in_channels, c.width(0));
    for (std::size_t l = 0; l < c.depth; ++l) n += 2 * conv(3, c.width(l), c.width(l));
    for (std::size_t l = 0; l + 1 < c.depth; ++l) {
        n += conv(3, c.width(l), c.width(l + 1)); // down
        n += conv(3, c.width(l + 1), c.width(l)); // up
        n += 2 * conv(3, c.width(l), c.width(l));  // decoder block
    }
    return n + conv(1, c.width(0), 1) + conv(1, c.width(0), K) + K;
}

namespace detail {

inline void validate(const UCNetConfig& c)
{
    if (c.K < 2 || c.K > 6) throw ConfigError("model: K must be in [2, 6], got " + std::to_string(c.K));
    if (c.depth < 1 || c.depth > 6) throw ConfigError("model: depth must be in [1, 6]");
    if (c.base_width < 1) throw ConfigError("model: base_width must be positive");
    if (c.in_channels < 1) throw ConfigError("model: in_channels must be positive");
}

template <class T>
void add_conv(UCNetParams<T>& p, num::Rng& rng, const std::string& name, std::size_t k, std::size_t ci,
              std::size_t co, ParamGroup group, double gain)
{
    const std::size_t fan_in = ci * k * k * k;
    p.list.push_back({name + ".w", num::kaiming_uniform_init<T>(rng, {co, ci, k, k, k}, fan_in, gain), group, true});
    p.list.push_back({name + ".b", Tensor<T>::zeros({co}, true), group, false});
}

template <class T>
Tensor<T> checked(Tensor<T> t, const std::string& layer)
{
    if (!num::all_finite(t)) throw NumericError("non-finite activation after layer '" + layer + "'");
    return t;
}

} // namespace detail

/// Kaiming-uniform kernels (gain sqrt 2 ahead of ReLUs, damped on the
/// closing conv of each residual branch and on the heads), zero biases,
/// zero RegionNet bias.
template <class T>
UCNetParams<T> init_params(const UCNetConfig& c)
{
    detail::validate(c);
    num::Rng rng(c.seed);
    UCNetParams<T> p;
    p.config = c;
    const double relu_gain = std::sqrt(2.0);
    const double branch_gain = 0.5;
    const double head_gain = 0.25;
    detail::add_conv(p, rng, "stem", 3, c.in_channels, c.width(0), ParamGroup::Backbone, relu_gain);
    for (std::size_t l = 0; l < c.depth; ++l) {
        const std::string lv = std::to_string(l);
        detail::add_conv(p, rng, "enc" + lv + ".conv1", 3, c.width(l), c.width(l), ParamGroup::Backbone, relu_gain);
        detail::add_conv(p, rng, "enc" + lv + ".conv2", 3, c.width(l), c.width(l), ParamGroup::Backbone, branch_gain);
        if (l + 1 < c.depth) {
            detail::add_conv(p, rng, "down" + lv, 3, c.width(l), c.width(l + 1), ParamGroup::Backbone, relu_gain);
        }
    }
    for (std::size_t l = c.depth - 1; l-- > 0;) {
        const std::string lv = std::to_string(l);
        detail::add_conv(p, rng, "up" + lv, 3, c.width(l + 1), c.width(l), ParamGroup::Backbone, relu_gain);
        detail::add_conv(p, rng, "dec" + lv + ".conv1", 3, c.width(l), c.width(l), ParamGroup::Backbone, relu_gain);
        detail::add_conv(p, rng, "dec" + lv + ".conv2", 3, c.width(l), c.width(l), ParamGroup::Backbone, branch_gain);
    }
    detail::add_conv(p, rng, "seg_head", 1, c.width(0), 1, ParamGroup::SegHead, head_gain);
    detail::add_conv(p, rng, "grade_head", 1, c.width(0), static_cast<std::size_t>(c.K), ParamGroup::GradeHead, head_gain);
    p.list.push_back({"regionnet.bias", Tensor<T>::zeros({static_cast<std::size_t>(c.K)}, true), ParamGroup::RegionNet,
                      false});
    return p;
}

template <class T>
struct ForwardOutput {
    Tensor<T> seg; // [1, Z, Y, X] in (-1, 1)
    Tensor<T> gg;  // [K, Z, Y, X], simplex per voxel
};

/// Residual encoder-decoder with tanh lesion and softmax grade heads.
template <class T>
ForwardOutput<T> forward(const UCNetParams<T>& p, const Tensor<T>& x)
{
    const auto& c = p.config;
    if (x.rank() != 4 || x.dim(0) != c.in_channels) {
        throw ShapeError("forward: expected input [" + std::to_string(c.in_channels) + ", Z, Y, X], got " +
                         num::to_string(x.shape()));
    }
    const std::size_t div = std::size_t{1} << (c.depth - 1);
    for (std::size_t a = 1; a < 4; ++a) {
        if (x.dim(a) % div != 0) {
            throw ShapeError("forward: spatial extents " + num::to_string(x.shape()) + " must be divisible by " +
                             std::to_string(div));
        }
    }
    if (!num::all_finite(x)) throw NumericError("non-finite values in network input");

    auto conv = [&](const Tensor<T>& in, const std::string& name, std::size_t stride = 1) {
        return detail::checked(num::conv3d(in, p[name + ".w"], p[name + ".b"], stride), name);
    };
    auto block = [&](const Tensor<T>& in, const std::string& name) {
        auto h = num::relu(conv(in, name + ".conv1"));
        return num::relu(num::add(in, conv(h, name + ".conv2")));
    };

    std::vector<Tensor<T>> skips;
    auto h = num::relu(conv(x, "stem"));
    for (std::size_t l = 0; l < c.depth; ++l) {
        const std::string lv = std::to_string(l);
        h = block(h, "enc" + lv);
        if (l + 1 < c.depth) {
            skips.push_back(h);
            h = num::relu(conv(h, "down" + lv, 2));
        }
    }
    for (std::size_t l = c.depth - 1; l-- > 0;) {
        const std::string lv = std::to_string(l);
        h = num::relu(conv(num::upsample_nearest2(h), "up" + lv));
        h = block(num::add(h, skips[l]), "dec" + lv);
    }
    auto seg = num::tanh(conv(h, "seg_head"));
    auto gg = detail::checked(num::softmax_channels(conv(h, "grade_head")), "grade_softmax");
    return {std::move(seg), std::move(gg)};
}

/// RegionNet: relu(I_K h + bias) row-wise over an [R, K] histogram matrix.
template <class T>
Tensor<T> regionnet(const Tensor<T>& histograms, const Tensor<T>& bias)
{
    if (histograms.rank() != 2 || histograms.dim(1) != bias.numel()) {
        throw ShapeError("regionnet: histograms " + num::to_string(histograms.shape()) + " vs bias " +
                         num::to_string(bias.shape()));
    }
    const std::size_t K = bias.numel();
    std::vector<T> eye(K * K, T(0));
    for (std::size_t k = 0; k < K; ++k) eye[k * K + k] = T(1);
    return num::relu(num::affine(histograms, Tensor<T>::from_values({K, K}, std::move(eye)), bias));
}

} // namespace mixsup::model
