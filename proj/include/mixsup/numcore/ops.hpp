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
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mixsup/numcore/tensor.hpp"

namespace mixsup::num {

namespace detail {

inline void require_same_shape(const char* op, const Shape& a, const Shape& b)
{
    if (a != b) throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <class T>
void require_floor(const char* op, std::span<const T> values, bool absolute)
{
    const T floor = static_cast<T>(epsilon_floor());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const T v = absolute ? std::abs(values[i]) : values[i];
        if (!(v >= floor)) {
            std::ostringstream msg;
            msg << op << ": value " << static_cast<double>(values[i]) << " at index " << i
                << " is below the epsilon floor " << epsilon_floor() << " (clamp first)";
            throw DomainError(msg.str());
        }
    }
}

// Elementwise binary op with numel-1 broadcasting on either side.
template <class T, class Fwd, class DA, class DB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, DA da, DB db)
{
    const bool a_scalar = a.numel() == 1 && b.numel() != 1;
    const bool b_scalar = b.numel() == 1 && a.numel() != 1;
    if (!a_scalar && !b_scalar) require_same_shape(op, a.shape(), b.shape());
    const Shape out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = numel_of(out_shape);
    auto av = a.values();
    auto bv = b.values();
    std::vector<T> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
    return make_result<T>(out_shape, std::move(out), op, {a.impl(), b.impl()},
                          [a_scalar, b_scalar, n, da, db](Node<T>& self) {
                              auto& na = *self.inputs[0];
                              auto& nb = *self.inputs[1];
                              for (std::size_t i = 0; i < n; ++i) {
                                  const T x = na.value[a_scalar ? 0 : i];
                                  const T y = nb.value[b_scalar ? 0 : i];
                                  const T g = self.grad[i];
                                  if (na.requires_grad) na.grad[a_scalar ? 0 : i] += g * da(x, y);
                                  if (nb.requires_grad) nb.grad[b_scalar ? 0 : i] += g * db(x, y);
                              }
                          });
}

// Elementwise unary op; derivative expressed from input x and output y.
template <class T, class Fwd, class D>
Tensor<T> unary(const char* op, const Tensor<T>& a, Fwd fwd, D deriv)
{
    auto av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
    return make_result<T>(a.shape(), std::move(out), op, {a.impl()}, [deriv](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < self.value.size(); ++i) in.grad[i] += self.grad[i] * deriv(in.value[i], self.value[i]);
    });
}

} // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary<T>("add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
                             [](T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary<T>("sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
                             [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b)
{
    return detail::binary<T>("mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
                             [](T x, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b)
{
    detail::require_floor<T>("div", b.values(), true);
    return detail::binary<T>("div", a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
                             [](T x, T y) { return -x / (y * y); });
}

/// scale * a + shift
template <class T>
Tensor<T> affine_scalar(const Tensor<T>& a, T scale, T shift)
{
    return detail::unary<T>("affine_scalar", a, [=](T x) { return scale * x + shift; },
                            [=](T, T) { return scale; });
}

template <class T>
Tensor<T> relu(const Tensor<T>& a)
{
    return detail::unary<T>("relu", a, [](T x) { return x > T(0) ? x : T(0); },
                            [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a)
{
    return detail::unary<T>("tanh", a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

/// Natural log; rejects inputs under the epsilon floor.
template <class T>
Tensor<T> log(const Tensor<T>& a)
{
    detail::require_floor<T>("log", a.values(), false);
    return detail::unary<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

/// Gradient passes where lo <= x <= hi.
template <class T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi)
{
    return detail::unary<T>("clamp", a, [=](T x) { return std::clamp(x, lo, hi); },
                            [=](T x, T) { return (x >= lo && x <= hi) ? T(1) : T(0); });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape)
{
    if (numel_of(shape) != a.numel()) {
        throw ShapeError("reshape: " + to_string(a.shape()) + " cannot become " + to_string(shape));
    }
    std::vector<T> out(a.values().begin(), a.values().end());
    return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {a.impl()}, [](Node<T>& self) {
        auto& in = *self.inputs[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a)
{
    T total = T(0);
    for (T v : a.values()) total += v;
    return detail::make_result<T>({1}, {total}, "sum", {a.impl()}, [](Node<T>& self) {
        auto& in = *self.inputs[0];
        const T g = self.grad[0];
        for (auto& gi : in.grad) gi += g;
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a)
{
    return affine_scalar(sum(a), T(1) / static_cast<T>(a.numel()), T(0));
}

/// Sum over the listed axes; reduced axes are dropped from the result shape.
template <class T>
Tensor<T> sum(const Tensor<T>& a, std::vector<std::size_t> axes)
{
    const Shape& in_shape = a.shape();
    std::vector<bool> reduced(in_shape.size(), false);
    for (auto ax : axes) {
        if (ax >= in_shape.size()) {
            throw ShapeError("sum: axis " + std::to_string(ax) + " out of range for " + to_string(in_shape));
        }
        reduced[ax] = true;
    }
    Shape out_shape;
    for (std::size_t d = 0; d < in_shape.size(); ++d) {
        if (!reduced[d]) out_shape.push_back(in_shape[d]);
    }
    if (out_shape.empty()) out_shape = {1};

    // Map every input flat index to its output flat index.
    std::vector<std::size_t> target(a.numel());
    std::vector<std::size_t> coord(in_shape.size(), 0);
    for (std::size_t flat = 0; flat < a.numel(); ++flat) {
        std::size_t o = 0;
        for (std::size_t d = 0; d < in_shape.size(); ++d) {
            if (!reduced[d]) o = o * in_shape[d] + coord[d];
        }
        target[flat] = o;
        for (std::size_t d = in_shape.size(); d-- > 0;) {
            if (++coord[d] < in_shape[d]) break;
            coord[d] = 0;
        }
    }
    std::vector<T> out(numel_of(out_shape), T(0));
    auto av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) out[target[i]] += av[i];
    return detail::make_result<T>(out_shape, std::move(out), "sum_axes", {a.impl()},
                                  [target = std::move(target)](Node<T>& self) {
                                      auto& in = *self.inputs[0];
                                      for (std::size_t i = 0; i < target.size(); ++i) in.grad[i] += self.grad[target[i]];
                                  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a, std::vector<std::size_t> axes)
{
    std::size_t count = 1;
    for (auto ax : axes) count *= a.shape().at(ax);
    return affine_scalar(sum(a, std::move(axes)), T(1) / static_cast<T>(count), T(0));
}

/// Softmax over axis 0 of a [C, ...] tensor.
template <class T>
Tensor<T> softmax_channels(const Tensor<T>& a)
{
    if (a.rank() < 1) throw ShapeError("softmax_channels: needs a channel axis");
    const std::size_t channels = a.dim(0);
    const std::size_t voxels = a.numel() / channels;
    auto av = a.values();
    std::vector<T> out(av.size());
    for (std::size_t v = 0; v < voxels; ++v) {
        T peak = av[v];
        for (std::size_t c = 1; c < channels; ++c) peak = std::max(peak, av[c * voxels + v]);
        T denom = T(0);
        for (std::size_t c = 0; c < channels; ++c) {
            const T e = std::exp(av[c * voxels + v] - peak);
            out[c * voxels + v] = e;
            denom += e;
        }
        for (std::size_t c = 0; c < channels; ++c) out[c * voxels + v] /= denom;
    }
    return detail::make_result<T>(a.shape(), std::move(out), "softmax_channels", {a.impl()},
                                  [channels, voxels](Node<T>& self) {
                                      auto& in = *self.inputs[0];
                                      for (std::size_t v = 0; v < voxels; ++v) {
                                          T dot = T(0);
                                          for (std::size_t c = 0; c < channels; ++c) {
                                              dot += self.value[c * voxels + v] * self.grad[c * voxels + v];
                                          }
                                          for (std::size_t c = 0; c < channels; ++c) {
                                              const std::size_t i = c * voxels + v;
                                              in.grad[i] += self.value[i] * (self.grad[i] - dot);
                                          }
                                      }
                                  });
}

/// Per-channel mean over a voxel subset of a [C, ...] tensor; result shape [C].
template <class T>
Tensor<T> masked_mean(const Tensor<T>& a, std::span<const std::uint32_t> voxels)
{
    if (voxels.empty()) throw ShapeError("masked_mean: empty mask");
    const std::size_t channels = a.dim(0);
    const std::size_t per_channel = a.numel() / channels;
    for (auto v : voxels) {
        if (v >= per_channel) throw ShapeError("masked_mean: voxel index out of range");
    }
    auto av = a.values();
    std::vector<T> out(channels, T(0));
    const T inv = T(1) / static_cast<T>(voxels.size());
    for (std::size_t c = 0; c < channels; ++c) {
        T acc = T(0);
        const T* base = av.data() + c * per_channel;
        for (auto v : voxels) acc += base[v];
        out[c] = acc * inv;
    }
    std::vector<std::uint32_t> idx(voxels.begin(), voxels.end());
    return detail::make_result<T>({channels}, std::move(out), "masked_mean", {a.impl()},
                                  [idx = std::move(idx), channels, per_channel, inv](Node<T>& self) {
                                      auto& in = *self.inputs[0];
                                      for (std::size_t c = 0; c < channels; ++c) {
                                          const T g = self.grad[c] * inv;
                                          T* base = in.grad.data() + c * per_channel;
                                          for (auto v : idx) base[v] += g;
                                      }
                                  });
}

/// Flat-index selection; result shape [n].
template <class T>
Tensor<T> gather(const Tensor<T>& a, std::vector<std::size_t> indices)
{
    if (indices.empty()) throw ShapeError("gather: no indices");
    for (auto i : indices) {
        if (i >= a.numel()) throw ShapeError("gather: index out of range for " + to_string(a.shape()));
    }
    std::vector<T> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) out[i] = a.values()[indices[i]];
    const std::size_t n = indices.size();
    return detail::make_result<T>({n}, std::move(out), "gather", {a.impl()},
                                  [idx = std::move(indices)](Node<T>& self) {
                                      auto& in = *self.inputs[0];
                                      for (std::size_t i = 0; i < idx.size(); ++i) in.grad[idx[i]] += self.grad[i];
                                  });
}

/// Stacks equal-shape tensors along a new leading axis.
template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts)
{
    if (parts.empty()) throw ShapeError("stack: no inputs");
    const Shape& inner = parts.front().shape();
    std::vector<T> out;
    out.reserve(parts.size() * parts.front().numel());
    std::vector<std::shared_ptr<Node<T>>> inputs;
    for (const auto& p : parts) {
        detail::require_same_shape("stack", inner, p.shape());
        out.insert(out.end(), p.values().begin(), p.values().end());
        inputs.push_back(p.impl());
    }
    Shape shape{parts.size()};
    shape.insert(shape.end(), inner.begin(), inner.end());
    const std::size_t block = parts.front().numel();
    return detail::make_result<T>(std::move(shape), std::move(out), "stack", std::move(inputs),
                                  [block](Node<T>& self) {
                                      for (std::size_t p = 0; p < self.inputs.size(); ++p) {
                                          auto& in = *self.inputs[p];
                                          if (!in.requires_grad) continue;
                                          for (std::size_t i = 0; i < block; ++i) in.grad[i] += self.grad[p * block + i];
                                      }
                                  });
}

/// Dense layer: x [N, in], weight [out, in], bias [out] -> [N, out].
template <class T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias)
{
    if (x.rank() != 2 || weight.rank() != 2 || weight.dim(1) != x.dim(1) || bias.numel() != weight.dim(0)) {
        throw ShapeError("affine: x " + to_string(x.shape()) + " weight " + to_string(weight.shape()) + " bias " +
                         to_string(bias.shape()));
    }
    const std::size_t rows = x.dim(0), in_dim = x.dim(1), out_dim = weight.dim(0);
    auto xv = x.values();
    auto wv = weight.values();
    auto bv = bias.values();
    std::vector<T> out(rows * out_dim);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t o = 0; o < out_dim; ++o) {
            T acc = bv[o];
            for (std::size_t i = 0; i < in_dim; ++i) acc += wv[o * in_dim + i] * xv[r * in_dim + i];
            out[r * out_dim + o] = acc;
        }
    }
    return detail::make_result<T>({rows, out_dim}, std::move(out), "affine", {x.impl(), weight.impl(), bias.impl()},
                                  [rows, in_dim, out_dim](Node<T>& self) {
                                      auto& nx = *self.inputs[0];
                                      auto& nw = *self.inputs[1];
                                      auto& nb = *self.inputs[2];
                                      for (std::size_t r = 0; r < rows; ++r) {
                                          for (std::size_t o = 0; o < out_dim; ++o) {
                                              const T g = self.grad[r * out_dim + o];
                                              if (nb.requires_grad) nb.grad[o] += g;
                                              for (std::size_t i = 0; i < in_dim; ++i) {
                                                  if (nw.requires_grad) nw.grad[o * in_dim + i] += g * nx.value[r * in_dim + i];
                                                  if (nx.requires_grad) nx.grad[r * in_dim + i] += g * nw.value[o * in_dim + i];
                                              }
                                          }
                                      }
                                  });
}

/// Nearest-neighbour 2x upsampling of a [C, Z, Y, X] tensor.
template <class T>
Tensor<T> upsample_nearest2(const Tensor<T>& a)
{
    if (a.rank() != 4) throw ShapeError("upsample_nearest2: expects [C,Z,Y,X], got " + to_string(a.shape()));
    const std::size_t C = a.dim(0), Z = a.dim(1), Y = a.dim(2), X = a.dim(3);
    const std::size_t Z2 = 2 * Z, Y2 = 2 * Y, X2 = 2 * X;
    auto av = a.values();
    std::vector<T> out(C * Z2 * Y2 * X2);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t z = 0; z < Z2; ++z)
            for (std::size_t y = 0; y < Y2; ++y) {
                const T* src = av.data() + ((c * Z + z / 2) * Y + y / 2) * X;
                T* dst = out.data() + ((c * Z2 + z) * Y2 + y) * X2;
                for (std::size_t x = 0; x < X2; ++x) dst[x] = src[x / 2];
            }
    return detail::make_result<T>({C, Z2, Y2, X2}, std::move(out), "upsample_nearest2", {a.impl()},
                                  [C, Z, Y, X](Node<T>& self) {
                                      auto& in = *self.inputs[0];
                                      const std::size_t Z2 = 2 * Z, Y2 = 2 * Y, X2 = 2 * X;
                                      for (std::size_t c = 0; c < C; ++c)
                                          for (std::size_t z = 0; z < Z2; ++z)
                                              for (std::size_t y = 0; y < Y2; ++y) {
                                                  const T* g = self.grad.data() + ((c * Z2 + z) * Y2 + y) * X2;
                                                  T* dst = in.grad.data() + ((c * Z + z / 2) * Y + y / 2) * X;
                                                  for (std::size_t x = 0; x < X2; ++x) dst[x / 2] += g[x];
                                              }
                                  });
}

namespace detail {

struct ConvGeometry {
    std::size_t ci, co, k, stride, pad;
    std::size_t Z, Y, X;    // input
    std::size_t Zp, Yp, Xp; // padded input
    std::size_t Zo, Yo, Xo; // output
};

// Dot product with a fixed number of independent partial sums so the loop
// vectorizes without reassociation flags; the summation order is fixed.
template <class T>
T blocked_dot(const T* a, const T* b, std::size_t n)
{
    constexpr std::size_t L = 16;
    T part[L] = {};
    std::size_t i = 0;
    for (; i + L <= n; i += L)
        for (std::size_t l = 0; l < L; ++l) part[l] += a[i + l] * b[i + l];
    T acc = T(0);
    for (; i < n; ++i) acc += a[i] * b[i];
    for (std::size_t l = 0; l < L; ++l) acc += part[l];
    return acc;
}

// Padded conv buffers carry this many trailing elements so row kernels can
// always run whole chunks.
inline constexpr std::size_t conv_slack = 64;

// Stride-1 correlation over padded input rows. Output for (co, zo) is
// written in the padded row stride: element yo * Xp + xo, row_span long.
// Each output chunk accumulates every (ci, tap) before it is stored once;
// the summation order is fixed. Inputs need conv_slack trailing elements.
template <class T>
void conv_s1_rows(const T* xp, const T* w, std::size_t ci_n, std::size_t co_n, std::size_t k, std::size_t Zo,
                  std::size_t Yp, std::size_t Xp, std::size_t Yo, std::size_t Xo, T* out)
{
    constexpr std::size_t B = conv_slack;
    const std::size_t k3 = k * k * k;
    const std::size_t row_span = (Yo - 1) * Xp + Xo;
    const std::size_t tmp_plane = Yo * Xp;
    const std::size_t in_plane = Yp * Xp;
    const std::size_t Zp = Zo + k - 1;
    for (std::size_t co = 0; co < co_n; ++co)
        for (std::size_t zo = 0; zo < Zo; ++zo) {
            T* dst = out + (co * Zo + zo) * tmp_plane;
            for (std::size_t j0 = 0; j0 < row_span; j0 += B) {
                T acc[B] = {};
                for (std::size_t ci = 0; ci < ci_n; ++ci) {
                    const T* wk = w + (co * ci_n + ci) * k3;
                    for (std::size_t kz = 0; kz < k; ++kz)
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const T* row = xp + (ci * Zp + zo + kz) * in_plane + ky * Xp + j0;
                            const T* wr = wk + (kz * k + ky) * k;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const T wv = wr[kx];
                                const T* src = row + kx;
                                for (std::size_t j = 0; j < B; ++j) acc[j] += wv * src[j];
                            }
                        }
                }
                std::copy(acc, acc + std::min(B, row_span - j0), dst + j0);
            }
        }
}

#if defined(__GNUC__)
typedef float f32x16 __attribute__((vector_size(64)));

inline f32x16 load16(const float* p)
{
    f32x16 v;
    std::memcpy(&v, p, sizeof v);
    return v;
}

template <>
inline void conv_s1_rows<float>(const float* xp, const float* w, std::size_t ci_n, std::size_t co_n, std::size_t k,
                                std::size_t Zo, std::size_t Yp, std::size_t Xp, std::size_t Yo, std::size_t Xo, float* out)
{
    static_assert(conv_slack == 64);
    const std::size_t k3 = k * k * k;
    const std::size_t row_span = (Yo - 1) * Xp + Xo;
    const std::size_t tmp_plane = Yo * Xp;
    const std::size_t in_plane = Yp * Xp;
    const std::size_t Zp = Zo + k - 1;
    for (std::size_t co = 0; co < co_n; ++co)
        for (std::size_t zo = 0; zo < Zo; ++zo) {
            float* dst = out + (co * Zo + zo) * tmp_plane;
            for (std::size_t j0 = 0; j0 < row_span; j0 += 64) {
                f32x16 a0{}, a1{}, a2{}, a3{};
                for (std::size_t ci = 0; ci < ci_n; ++ci) {
                    const float* wk = w + (co * ci_n + ci) * k3;
                    for (std::size_t kz = 0; kz < k; ++kz)
                        for (std::size_t ky = 0; ky < k; ++ky) {
                            const float* row = xp + (ci * Zp + zo + kz) * in_plane + ky * Xp + j0;
                            const float* wr = wk + (kz * k + ky) * k;
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const float wv = wr[kx];
                                const float* src = row + kx;
                                a0 += wv * load16(src);
                                a1 += wv * load16(src + 16);
                                a2 += wv * load16(src + 32);
                                a3 += wv * load16(src + 48);
                            }
                        }
                }
                float acc[64];
                std::memcpy(acc, &a0, 64);
                std::memcpy(acc + 16, &a1, 64);
                std::memcpy(acc + 32, &a2, 64);
                std::memcpy(acc + 48, &a3, 64);
                std::copy(acc, acc + std::min<std::size_t>(64, row_span - j0), dst + j0);
            }
        }
}
#endif

// Dot product of two rows of length n rounded up to whole chunks; both
// rows need conv_slack readable trailing elements and `a` must be zero past n.
template <class T>
T padded_dot(const T* a, const T* b, std::size_t n)
{
    return blocked_dot(a, b, n);
}

#if defined(__GNUC__)
template <>
inline float padded_dot<float>(const float* a, const float* b, std::size_t n)
{
    f32x16 a0{}, a1{}, a2{}, a3{};
    for (std::size_t j = 0; j < n; j += 64) {
        a0 += load16(a + j) * load16(b + j);
        a1 += load16(a + j + 16) * load16(b + j + 16);
        a2 += load16(a + j + 32) * load16(b + j + 32);
        a3 += load16(a + j + 48) * load16(b + j + 48);
    }
    const f32x16 s = (a0 + a1) + (a2 + a3);
    float acc = 0.0f;
    for (int l = 0; l < 16; ++l) acc += s[l];
    return acc;
}
#endif

// out[t] += dot(a, b + offs[t]) over n elements for each tap t. Same
// padding contract as padded_dot.
template <class T>
void tap_dots(const T* a, const T* b, const std::size_t* offs, std::size_t taps, std::size_t n, T* out)
{
    for (std::size_t t = 0; t < taps; ++t) out[t] += padded_dot(a, b + offs[t], n);
}

#if defined(__GNUC__)
template <>
inline void tap_dots<float>(const float* a, const float* b, const std::size_t* offs, std::size_t taps, std::size_t n,
                            float* out)
{
    constexpr std::size_t G = 9;
    for (std::size_t t0 = 0; t0 < taps; t0 += G) {
        const std::size_t g = std::min(G, taps - t0);
        f32x16 acc[G] = {};
        const float* bt[G];
        for (std::size_t t = 0; t < G; ++t) bt[t] = b + offs[t0 + std::min(t, g - 1)];
        for (std::size_t j = 0; j < n; j += 16) {
            const f32x16 av = load16(a + j);
            for (std::size_t t = 0; t < G; ++t) acc[t] += av * load16(bt[t] + j);
        }
        for (std::size_t t = 0; t < g; ++t) {
            float s = 0.0f;
            for (int l = 0; l < 16; ++l) s += acc[t][l];
            out[t0 + t] += s;
        }
    }
}
#endif

template <class T>
std::vector<T> pad_volume(std::span<const T> x, const ConvGeometry& g)
{
    std::vector<T> xp(g.ci * g.Zp * g.Yp * g.Xp + conv_slack, T(0));
    for (std::size_t c = 0; c < g.ci; ++c)
        for (std::size_t z = 0; z < g.Z; ++z)
            for (std::size_t y = 0; y < g.Y; ++y) {
                const T* src = x.data() + ((c * g.Z + z) * g.Y + y) * g.X;
                T* dst = xp.data() + ((c * g.Zp + z + g.pad) * g.Yp + y + g.pad) * g.Xp + g.pad;
                std::copy(src, src + g.X, dst);
            }
    return xp;
}

} // namespace detail

/// 3D convolution with zero padding k/2 on a [Cin, Z, Y, X] input.
/// weight [Cout, Cin, k, k, k], bias [Cout]; stride 1 preserves extent,
/// stride 2 yields ceil(extent / 2).
template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1)
{
    if (x.rank() != 4 || weight.rank() != 5 || weight.dim(1) != x.dim(0) || weight.dim(2) != weight.dim(3) ||
        weight.dim(3) != weight.dim(4) || weight.dim(2) % 2 == 0 || bias.numel() != weight.dim(0)) {
        throw ShapeError("conv3d: input " + to_string(x.shape()) + " weight " + to_string(weight.shape()) +
                         " bias " + to_string(bias.shape()));
    }
    if (stride != 1 && stride != 2) throw ShapeError("conv3d: stride must be 1 or 2");
    detail::ConvGeometry g{};
    g.ci = x.dim(0);
    g.co = weight.dim(0);
    g.k = weight.dim(2);
    g.stride = stride;
    g.pad = g.k / 2;
    g.Z = x.dim(1);
    g.Y = x.dim(2);
    g.X = x.dim(3);
    g.Zp = g.Z + 2 * g.pad;
    g.Yp = g.Y + 2 * g.pad;
    g.Xp = g.X + 2 * g.pad;
    g.Zo = (g.Zp - g.k) / stride + 1;
    g.Yo = (g.Yp - g.k) / stride + 1;
    g.Xo = (g.Xp - g.k) / stride + 1;

    auto xp = std::make_shared<std::vector<T>>(detail::pad_volume(x.values(), g));
    auto wv = weight.values();
    auto bv = bias.values();
    const std::size_t k3 = g.k * g.k * g.k;
    const std::size_t out_plane = g.Yo * g.Xo;
    std::vector<T> out(g.co * g.Zo * out_plane);

    if (stride == 1) {
        const std::size_t tmp_plane = g.Yo * g.Xp;
        std::vector<T> tmp(g.co * g.Zo * tmp_plane);
        detail::conv_s1_rows(xp->data(), wv.data(), g.ci, g.co, g.k, g.Zo, g.Yp, g.Xp, g.Yo, g.Xo, tmp.data());
        for (std::size_t co = 0; co < g.co; ++co)
            for (std::size_t zo = 0; zo < g.Zo; ++zo)
                for (std::size_t yo = 0; yo < g.Yo; ++yo) {
                    const T* src = tmp.data() + (co * g.Zo + zo) * tmp_plane + yo * g.Xp;
                    T* dst = out.data() + (co * g.Zo + zo) * out_plane + yo * g.Xo;
                    for (std::size_t xo = 0; xo < g.Xo; ++xo) dst[xo] = src[xo] + bv[co];
                }
    } else {
        for (std::size_t co = 0; co < g.co; ++co) {
            T* oc = out.data() + co * g.Zo * out_plane;
            std::fill(oc, oc + g.Zo * out_plane, bv[co]);
            for (std::size_t ci = 0; ci < g.ci; ++ci) {
                const T* wk = wv.data() + (co * g.ci + ci) * k3;
                for (std::size_t kz = 0; kz < g.k; ++kz)
                    for (std::size_t ky = 0; ky < g.k; ++ky)
                        for (std::size_t kx = 0; kx < g.k; ++kx) {
                            const T w = wk[(kz * g.k + ky) * g.k + kx];
                            for (std::size_t zo = 0; zo < g.Zo; ++zo)
                                for (std::size_t yo = 0; yo < g.Yo; ++yo) {
                                    const T* src = xp->data() +
                                                   ((ci * g.Zp + zo * stride + kz) * g.Yp + yo * stride + ky) * g.Xp + kx;
                                    T* dst = oc + zo * out_plane + yo * g.Xo;
                                    for (std::size_t xo = 0; xo < g.Xo; ++xo) dst[xo] += w * src[xo * stride];
                                }
                        }
            }
        }
    }

    return detail::make_result<T>(
        {g.co, g.Zo, g.Yo, g.Xo}, std::move(out), "conv3d", {x.impl(), weight.impl(), bias.impl()},
        [g, xp](Node<T>& self) {
            auto& nx = *self.inputs[0];
            auto& nw = *self.inputs[1];
            auto& nb = *self.inputs[2];
            const std::size_t k3 = g.k * g.k * g.k;
            const std::size_t out_plane = g.Yo * g.Xo;
            const auto& gout = self.grad;
            if (nb.requires_grad) {
                for (std::size_t co = 0; co < g.co; ++co) {
                    T acc = T(0);
                    const T* go = gout.data() + co * g.Zo * out_plane;
                    for (std::size_t i = 0; i < g.Zo * out_plane; ++i) acc += go[i];
                    nb.grad[co] += acc;
                }
            }
            if (!nw.requires_grad && !nx.requires_grad) return;
            if (g.stride == 1) {
                const std::size_t row_span = (g.Yo - 1) * g.Xp + g.Xo;
                const std::size_t tmp_plane = g.Yo * g.Xp;
                const std::size_t pad_plane = g.Yp * g.Xp;
                if (nw.requires_grad) {
                    std::vector<std::size_t> offs;
                    for (std::size_t kz = 0; kz < g.k; ++kz)
                        for (std::size_t ky = 0; ky < g.k; ++ky)
                            for (std::size_t kx = 0; kx < g.k; ++kx) offs.push_back(kz * pad_plane + ky * g.Xp + kx);
                    std::vector<T> gtmp(tmp_plane + detail::conv_slack);
                    for (std::size_t co = 0; co < g.co; ++co)
                        for (std::size_t zo = 0; zo < g.Zo; ++zo) {
                            std::fill(gtmp.begin(), gtmp.end(), T(0));
                            for (std::size_t yo = 0; yo < g.Yo; ++yo) {
                                const T* src = gout.data() + (co * g.Zo + zo) * out_plane + yo * g.Xo;
                                std::copy(src, src + g.Xo, gtmp.data() + yo * g.Xp);
                            }
                            for (std::size_t ci = 0; ci < g.ci; ++ci) {
                                const T* base = xp->data() + (ci * g.Zp + zo) * pad_plane;
                                detail::tap_dots(gtmp.data(), base, offs.data(), k3, row_span,
                                                 nw.grad.data() + (co * g.ci + ci) * k3);
                            }
                        }
                }
                if (nx.requires_grad) {
                    // dx is a correlation of the padded output gradient with
                    // the flipped kernel, channels swapped.
                    std::vector<T> gpad(g.co * g.Zp * pad_plane + detail::conv_slack, T(0));
                    for (std::size_t co = 0; co < g.co; ++co)
                        for (std::size_t zo = 0; zo < g.Zo; ++zo)
                            for (std::size_t yo = 0; yo < g.Yo; ++yo) {
                                const T* src = gout.data() + (co * g.Zo + zo) * out_plane + yo * g.Xo;
                                std::copy(src, src + g.Xo,
                                          gpad.data() + (co * g.Zp + zo + g.pad) * pad_plane + (yo + g.pad) * g.Xp + g.pad);
                            }
                    std::vector<T> wf(g.ci * g.co * k3);
                    for (std::size_t co = 0; co < g.co; ++co)
                        for (std::size_t ci = 0; ci < g.ci; ++ci)
                            for (std::size_t t = 0; t < k3; ++t)
                                wf[(ci * g.co + co) * k3 + (k3 - 1 - t)] = nw.value[(co * g.ci + ci) * k3 + t];
                    std::vector<T> dx(g.ci * g.Z * tmp_plane);
                    detail::conv_s1_rows(gpad.data(), wf.data(), g.co, g.ci, g.k, g.Z, g.Yp, g.Xp, g.Y, g.X, dx.data());
                    for (std::size_t c = 0; c < g.ci; ++c)
                        for (std::size_t z = 0; z < g.Z; ++z)
                            for (std::size_t y = 0; y < g.Y; ++y) {
                                const T* src = dx.data() + (c * g.Z + z) * tmp_plane + y * g.Xp;
                                T* dst = nx.grad.data() + ((c * g.Z + z) * g.Y + y) * g.X;
                                for (std::size_t xx = 0; xx < g.X; ++xx) dst[xx] += src[xx];
                            }
                }
                return;
            }
            std::vector<T> gxp(nx.requires_grad ? xp->size() : 0, T(0));
            {
                for (std::size_t co = 0; co < g.co; ++co) {
                    const T* oc = gout.data() + co * g.Zo * out_plane;
                    for (std::size_t ci = 0; ci < g.ci; ++ci) {
                        const std::size_t wbase = (co * g.ci + ci) * k3;
                        for (std::size_t kz = 0; kz < g.k; ++kz)
                            for (std::size_t ky = 0; ky < g.k; ++ky)
                                for (std::size_t kx = 0; kx < g.k; ++kx) {
                                    const std::size_t widx = wbase + (kz * g.k + ky) * g.k + kx;
                                    const T w = nw.value[widx];
                                    T acc = T(0);
                                    for (std::size_t zo = 0; zo < g.Zo; ++zo)
                                        for (std::size_t yo = 0; yo < g.Yo; ++yo) {
                                            const std::size_t row =
                                                ((ci * g.Zp + zo * g.stride + kz) * g.Yp + yo * g.stride + ky) * g.Xp + kx;
                                            const T* src = xp->data() + row;
                                            const T* go = oc + zo * out_plane + yo * g.Xo;
                                            for (std::size_t xo = 0; xo < g.Xo; ++xo) {
                                                acc += go[xo] * src[xo * g.stride];
                                                if (nx.requires_grad) gxp[row + xo * g.stride] += w * go[xo];
                                            }
                                        }
                                    if (nw.requires_grad) nw.grad[widx] += acc;
                                }
                    }
                }
            }
            if (nx.requires_grad) {
                for (std::size_t c = 0; c < g.ci; ++c)
                    for (std::size_t z = 0; z < g.Z; ++z)
                        for (std::size_t y = 0; y < g.Y; ++y) {
                            const T* src = gxp.data() + ((c * g.Zp + z + g.pad) * g.Yp + y + g.pad) * g.Xp + g.pad;
                            T* dst = nx.grad.data() + ((c * g.Z + z) * g.Y + y) * g.X;
                            for (std::size_t xx = 0; xx < g.X; ++xx) dst[xx] += src[xx];
                        }
            }
        });
}

} // namespace mixsup::num
