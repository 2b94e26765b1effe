/*
 * Copyright 2026 swarmseg contributors
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
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace swarmseg {

/// Base error for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor/grid shapes.
struct ShapeError : Error {
    using Error::Error;
};

/// Invalid argument or configuration value, detected before side effects.
struct ValidationError : Error {
    using Error::Error;
};

/// A numeric value left the finite domain (NaN/Inf).
struct NumericError : Error {
    using Error::Error;
};

/// The decentralized protocol reached an inconsistent state.
struct ProtocolError : Error {
    using Error::Error;
};

/// File I/O failure; message carries the path.
struct IoError : Error {
    using Error::Error;
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

inline int64_t numel_of(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

/// FNV-1a 64-bit digest, used for config digests and blob comparison.
inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace swarmseg
