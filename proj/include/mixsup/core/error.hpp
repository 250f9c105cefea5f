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

#include <stdexcept>
#include <string>

namespace mixsup {

// Errors are grouped by how the CLI reports them: usage (1), data (2) and
// numeric (3) failures map onto distinct process exit codes.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor or volume shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A log or division reached a value under the epsilon floor.
class DomainError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf detected in activations, losses or gradients.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Malformed, corrupted or inconsistent on-disk or in-memory data.
class DataError : public Error {
public:
    using Error::Error;
};

class ChecksumError : public DataError {
public:
    using DataError::DataError;
};

class FormatVersionError : public DataError {
public:
    using DataError::DataError;
};

/// Invalid configuration, experiment id or command-line usage.
class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace mixsup
