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

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "swarmseg/common.hpp"
#include "swarmseg/params.hpp"
#include "swarmseg/tensor.hpp"

namespace swarmseg {

// All on-disk and on-wire multi-byte values are little-endian. The f64
// payload is the IEEE-754 bit pattern memcpy'd byte by byte, so a decoded
// blob reproduces every value bit-exactly.

namespace detail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 16) & 0xff));
    out.push_back(static_cast<uint8_t>((v >> 24) & 0xff));
}

inline void put_u64(std::vector<uint8_t>& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

inline uint32_t get_u32(const uint8_t* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline uint64_t get_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

inline void put_f64(std::vector<uint8_t>& out, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

inline double get_f64(const uint8_t* p) {
    const uint64_t bits = get_u64(p);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameter blob: [u32 header_len][JSON header][flat LE f64 payload]
// ---------------------------------------------------------------------------

/// Header lists each tensor's name, shape and element offset into the payload,
/// in set order. Decoding rebuilds an identical ParameterSet.
inline std::vector<uint8_t> to_blob(const ParameterSet& params) {
    nlohmann::json header = nlohmann::json::array();
    int64_t offset = 0;
    for (const auto& [name, t] : params) {
        header.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel();
    }
    const std::string hs = header.dump();
    if (hs.size() > 0xffffffffu) throw ProtocolError("to_blob: header too large");

    std::vector<uint8_t> out;
    out.reserve(4 + hs.size() + static_cast<size_t>(offset) * 8);
    detail::put_u32(out, static_cast<uint32_t>(hs.size()));
    out.insert(out.end(), hs.begin(), hs.end());
    for (const auto& [name, t] : params)
        for (double v : t.data()) detail::put_f64(out, v);
    return out;
}

inline ParameterSet from_blob(const std::vector<uint8_t>& blob) {
    if (blob.size() < 4) throw ProtocolError("from_blob: truncated blob (no header length)");
    const uint32_t hlen = detail::get_u32(blob.data());
    if (blob.size() < 4 + static_cast<size_t>(hlen))
        throw ProtocolError("from_blob: truncated blob (header)");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.begin() + 4, blob.begin() + 4 + hlen);
    } catch (const nlohmann::json::exception& e) {
        throw ProtocolError(std::string("from_blob: bad header JSON: ") + e.what());
    }
    if (!header.is_array()) throw ProtocolError("from_blob: header is not an array");

    const uint8_t* payload = blob.data() + 4 + hlen;
    const size_t payload_len = blob.size() - 4 - hlen;
    if (payload_len % 8 != 0) throw ProtocolError("from_blob: payload not a multiple of 8 bytes");
    const int64_t total = static_cast<int64_t>(payload_len / 8);

    ParameterSet out;
    int64_t expected_offset = 0;
    for (const auto& entry : header) {
        if (!entry.contains("name") || !entry.contains("shape") || !entry.contains("offset"))
            throw ProtocolError("from_blob: header entry missing field");
        const std::string name = entry["name"].get<std::string>();
        const std::vector<int> shape = entry["shape"].get<std::vector<int>>();
        const int64_t offset = entry["offset"].get<int64_t>();
        if (offset != expected_offset)
            throw ProtocolError("from_blob: non-contiguous offset for '" + name + "'");
        Tensor t(shape);
        if (offset + t.numel() > total)
            throw ProtocolError("from_blob: payload too short for '" + name + "'");
        for (int64_t i = 0; i < t.numel(); ++i)
            t.data()[static_cast<size_t>(i)] = detail::get_f64(payload + (offset + i) * 8);
        out.add(name, std::move(t));
        expected_offset = offset + out.get(name).numel();
    }
    if (expected_offset != total)
        throw ProtocolError("from_blob: payload has trailing bytes");
    return out;
}

// ---------------------------------------------------------------------------
// Round message: what a center broadcasts after a local training phase.
// ---------------------------------------------------------------------------

constexpr uint32_t kMessageMagic = 0x53574d31;  // "SWM1"
constexpr uint32_t kProtocolVersion = 1;

/// Wire frame: 24-byte header (magic, version, center_id, round, n_k) followed
/// by a parameter blob holding the shared parameters only.
struct RoundMessage {
    uint32_t center_id = 0;
    uint32_t round = 0;
    uint64_t n_train = 0;
    std::vector<uint8_t> blob;

    std::vector<uint8_t> encode() const {
        std::vector<uint8_t> out;
        out.reserve(24 + blob.size());
        detail::put_u32(out, kMessageMagic);
        detail::put_u32(out, kProtocolVersion);
        detail::put_u32(out, center_id);
        detail::put_u32(out, round);
        detail::put_u64(out, n_train);
        out.insert(out.end(), blob.begin(), blob.end());
        return out;
    }

    static RoundMessage decode(const std::vector<uint8_t>& bytes) {
        if (bytes.size() < 24) throw ProtocolError("RoundMessage: frame shorter than header");
        if (detail::get_u32(bytes.data()) != kMessageMagic)
            throw ProtocolError("RoundMessage: bad magic");
        const uint32_t version = detail::get_u32(bytes.data() + 4);
        if (version != kProtocolVersion)
            throw ProtocolError("RoundMessage: unsupported protocol version " + std::to_string(version));
        RoundMessage m;
        m.center_id = detail::get_u32(bytes.data() + 8);
        m.round = detail::get_u32(bytes.data() + 12);
        m.n_train = detail::get_u64(bytes.data() + 16);
        m.blob.assign(bytes.begin() + 24, bytes.end());
        return m;
    }
};

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

inline void write_bytes(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed: " + path.string());
}

inline std::vector<uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary | std::ios::ate);
    if (!f) throw IoError("cannot open for read: " + path.string());
    const std::streamsize n = f.tellg();
    f.seekg(0);
    std::vector<uint8_t> out(static_cast<size_t>(n));
    f.read(reinterpret_cast<char*>(out.data()), n);
    if (!f) throw IoError("read failed: " + path.string());
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);  // binary: keep \n as-is everywhere
    if (!f) throw IoError("cannot open for write: " + path.string());
    f << text;
    if (!f) throw IoError("write failed: " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for read: " + path.string());
    std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return s;
}

/// Raw little-endian f64 dump of one tensor (shape travels in the manifest).
inline void write_raw_f64(const std::filesystem::path& path, const std::vector<double>& v) {
    std::vector<uint8_t> bytes;
    bytes.reserve(v.size() * 8);
    for (double d : v) detail::put_f64(bytes, d);
    write_bytes(path, bytes);
}

inline std::vector<double> read_raw_f64(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    if (bytes.size() % 8 != 0) throw IoError("raw f64 file has odd length: " + path.string());
    std::vector<double> out(bytes.size() / 8);
    for (size_t i = 0; i < out.size(); ++i) out[i] = detail::get_f64(bytes.data() + i * 8);
    return out;
}

/// 8-bit binary PGM (P5) preview of a (H,W) image; values are min-max scaled.
inline void write_pgm(const std::filesystem::path& path, const std::vector<double>& img, int h, int w) {
    if (static_cast<size_t>(h) * w != img.size())
        throw ShapeError("write_pgm: image size mismatch");
    double lo = img[0], hi = img[0];
    for (double v : img) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
    std::string head = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<uint8_t> bytes(head.begin(), head.end());
    for (double v : img)
        bytes.push_back(static_cast<uint8_t>(std::lround((v - lo) * scale)));
    write_bytes(path, bytes);
}

}  // namespace swarmseg
