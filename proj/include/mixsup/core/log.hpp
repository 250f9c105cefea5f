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

#include <cstdlib>
#include <iostream>
#include <string>
#include <string_view>

#include "mixsup/core/error.hpp"

namespace mixsup::log {

enum class Level { Error = 0, Warn = 1, Info = 2, Debug = 3 };

/// Parses MIXSUP_LOG_LEVEL values; unset or empty means info.
inline Level parse_level(std::string_view s)
{
    if (s.empty() || s == "info") return Level::Info;
    if (s == "error") return Level::Error;
    if (s == "warn" || s == "warning") return Level::Warn;
    if (s == "debug") return Level::Debug;
    throw ConfigError("MIXSUP_LOG_LEVEL must be one of error, warn, info, debug; got '" + std::string(s) + "'");
}

inline Level& threshold()
{
    static Level level = [] {
        const char* env = std::getenv("MIXSUP_LOG_LEVEL");
        try {
            return parse_level(env ? env : "");
        } catch (const ConfigError& e) {
            std::cerr << "[warn] " << e.what() << '\n';
            return Level::Info;
        }
    }();
    return level;
}

inline void write(Level level, std::string_view msg)
{
    if (static_cast<int>(level) > static_cast<int>(threshold())) return;
    static constexpr const char* tags[] = {"error", "warn", "info", "debug"};
    std::cerr << '[' << tags[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void error(std::string_view m) { write(Level::Error, m); }
inline void warn(std::string_view m) { write(Level::Warn, m); }
inline void info(std::string_view m) { write(Level::Info, m); }
inline void debug(std::string_view m) { write(Level::Debug, m); }

} // namespace mixsup::log
