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
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mixsup/core/crc32c.hpp"
#include "mixsup/core/error.hpp"
#include "mixsup/model/ucnet.hpp"
#include "mixsup/training/adamw.hpp"

namespace mixsup::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr std::array<char, 8> checkpoint_magic{'M', 'X', 'S', 'P', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t checkpoint_format_version = 1;

class IncompatibleCheckpointError : public DataError {
public:
    using DataError::DataError;
};

struct Checkpoint {
    UCNetParams<float> params;
    training::AdamWState<float> optimizer;
    nlohmann::json run_config = nlohmann::json::object();
    nlohmann::json history = nlohmann::json::array();
};

inline nlohmann::json to_json(const UCNetConfig& c)
{
    return {{"in_channels", c.in_channels}, {"base_width", c.base_width}, {"depth", c.depth}, {"K", c.K}, {"seed", c.seed}};
}

inline UCNetConfig model_config_from_json(const nlohmann::json& j)
{
    UCNetConfig c;
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.base_width = j.at("base_width").get<std::size_t>();
    c.depth = j.at("depth").get<std::size_t>();
    c.K = j.at("K").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

namespace ckpt_detail {

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc), path_(path)
    {
        if (!out_) throw DataError("cannot write checkpoint '" + path.string() + "'");
    }
    void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
    template <class I>
    void integer(I v)
    {
        bytes(&v, sizeof v);
    }
    void blob(std::span<const float> values)
    {
        integer<std::uint64_t>(values.size());
        const auto raw = std::as_bytes(values);
        bytes(raw.data(), raw.size());
        integer<std::uint32_t>(crc32c(raw));
    }
    void finish()
    {
        out_.flush();
        if (!out_) throw DataError("short write to checkpoint '" + path_.string() + "'");
    }

private:
    std::ofstream out_;
    std::filesystem::path path_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path)
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
        data_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    void bytes(void* p, std::size_t n)
    {
        if (pos_ + n > data_.size()) throw ChecksumError("checkpoint is truncated");
        std::memcpy(p, data_.data() + pos_, n);
        pos_ += n;
    }
    template <class I>
    I integer()
    {
        I v;
        bytes(&v, sizeof v);
        return v;
    }
    std::vector<float> blob(std::size_t expected)
    {
        const auto n = integer<std::uint64_t>();
        if (n != expected) throw ChecksumError("checkpoint blob holds " + std::to_string(n) + " values, expected " +
                                               std::to_string(expected));
        std::vector<float> v(n);
        bytes(v.data(), n * sizeof(float));
        const auto crc = integer<std::uint32_t>();
        if (crc != crc32c_of<float>(v)) throw ChecksumError("checkpoint blob checksum mismatch");
        return v;
    }
    bool at_end() const { return pos_ == data_.size(); }

private:
    std::vector<char> data_;
    std::size_t pos_ = 0;
};

} // namespace ckpt_detail

/// Header (magic, version, canonical JSON + CRC32C) followed by float32
/// blobs for parameters and, when present, both Adam moment sets.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path)
{
    nlohmann::json header;
    header["model"] = to_json(ck.params.config);
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& p : ck.params.list) shapes.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
    header["params"] = shapes;
    header["optimizer"] = {{"step", ck.optimizer.step}, {"slots", ck.optimizer.m.size()}};
    header["run_config"] = ck.run_config;
    header["history"] = ck.history;
    const std::string text = header.dump();

    ckpt_detail::Writer w(path);
    w.bytes(checkpoint_magic.data(), checkpoint_magic.size());
    w.integer(checkpoint_format_version);
    w.integer<std::uint64_t>(text.size());
    w.bytes(text.data(), text.size());
    w.integer<std::uint32_t>(crc32c(std::as_bytes(std::span<const char>(text))));
    for (const auto& p : ck.params.list) w.blob(p.tensor.values());
    for (const auto& m : ck.optimizer.m) w.blob(m);
    for (const auto& v : ck.optimizer.v) w.blob(v);
    w.finish();
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    ckpt_detail::Reader r(path);
    std::array<char, 8> magic{};
    r.bytes(magic.data(), magic.size());
    if (magic != checkpoint_magic) throw DataError("'" + path.string() + "' is not a checkpoint");
    const auto version = r.integer<std::uint32_t>();
    if (version != checkpoint_format_version) {
        throw FormatVersionError("unsupported checkpoint format version " + std::to_string(version));
    }
    const auto len = r.integer<std::uint64_t>();
    if (len > (std::uint64_t{1} << 32)) throw ChecksumError("checkpoint header length is implausible");
    std::string text(len, '\0');
    r.bytes(text.data(), len);
    if (r.integer<std::uint32_t>() != crc32c(std::as_bytes(std::span<const char>(text)))) {
        throw ChecksumError("checkpoint header checksum mismatch");
    }
    Checkpoint ck;
    try {
        const auto header = nlohmann::json::parse(text);
        ck.params = init_params<float>(model_config_from_json(header.at("model")));
        const auto& shapes = header.at("params");
        if (shapes.size() != ck.params.list.size()) throw IncompatibleCheckpointError("checkpoint parameter list differs from its model config");
        for (std::size_t i = 0; i < shapes.size(); ++i) {
            if (shapes[i].at("name") != ck.params.list[i].name ||
                shapes[i].at("shape").get<num::Shape>() != ck.params.list[i].tensor.shape()) {
                throw IncompatibleCheckpointError("checkpoint parameter '" + shapes[i].at("name").get<std::string>() +
                                                  "' does not match its model config");
            }
        }
        ck.optimizer.step = header.at("optimizer").at("step").get<std::uint64_t>();
        const auto slots = header.at("optimizer").at("slots").get<std::size_t>();
        if (slots != 0 && slots != ck.params.list.size()) throw DataError("checkpoint optimizer slot count mismatch");
        ck.run_config = header.at("run_config");
        ck.history = header.at("history");
        for (auto& p : ck.params.list) {
            auto v = r.blob(p.tensor.numel());
            std::copy(v.begin(), v.end(), p.tensor.mutable_values().begin());
        }
        for (std::size_t i = 0; i < slots; ++i) ck.optimizer.m.push_back(r.blob(ck.params.list[i].tensor.numel()));
        for (std::size_t i = 0; i < slots; ++i) ck.optimizer.v.push_back(r.blob(ck.params.list[i].tensor.numel()));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint header: ") + e.what());
    }
    if (!r.at_end()) throw ChecksumError("trailing bytes after checkpoint payload");
    return ck;
}

/// Loads and requires the stored network to match `expected` (K and shape).
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const UCNetConfig& expected)
{
    auto ck = load_checkpoint(path);
    const auto& got = ck.params.config;
    if (got.K != expected.K) {
        throw IncompatibleCheckpointError("checkpoint was trained with K = " + std::to_string(got.K) +
                                          " but K = " + std::to_string(expected.K) + " was requested");
    }
    if (got.base_width != expected.base_width || got.depth != expected.depth || got.in_channels != expected.in_channels) {
        throw IncompatibleCheckpointError("checkpoint architecture differs from the requested model");
    }
    return ck;
}

} // namespace mixsup::model
