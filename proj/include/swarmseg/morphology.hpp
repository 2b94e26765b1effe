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
#include <string>
#include <vector>

#include "swarmseg/common.hpp"

namespace swarmseg {

/// Binary label grid. 1 = foreground, 0 = background. Pixels outside the
/// grid are treated as background by every operator, which matches padding
/// the image with 0 before applying the structuring element.
struct Mask {
    int h = 0;
    int w = 0;
    std::vector<uint8_t> v;  // row-major, h*w entries

    Mask() = default;
    Mask(int h_, int w_) : h(h_), w(w_), v(static_cast<size_t>(h_) * w_, 0) {
        if (h_ <= 0 || w_ <= 0)
            throw ShapeError("Mask: non-positive dims " + std::to_string(h_) + "x" + std::to_string(w_));
    }

    uint8_t at(int y, int x) const { return v[static_cast<size_t>(y) * w + x]; }
    uint8_t& at(int y, int x) { return v[static_cast<size_t>(y) * w + x]; }

    /// Background for out-of-grid reads.
    uint8_t at_padded(int y, int x) const {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0;
        return at(y, x);
    }

    bool operator==(const Mask& o) const { return h == o.h && w == o.w && v == o.v; }

    int64_t count() const {
        int64_t n = 0;
        for (uint8_t b : v) n += b;
        return n;
    }
};

/// Offsets (dy,dx) of a disk structuring element: dy^2 + dx^2 <= r^2.
/// r = 0 degenerates to the identity element {(0,0)}.
inline std::vector<std::pair<int, int>> disk_offsets(int r) {
    if (r < 0) throw ValidationError("disk_offsets: negative radius " + std::to_string(r));
    std::vector<std::pair<int, int>> off;
    for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx)
            if (dy * dy + dx * dx <= r * r) off.emplace_back(dy, dx);
    return off;
}

/// Erosion: keep a pixel iff the whole disk around it is foreground.
/// Out-of-grid counts as background, so foreground touching the border erodes.
inline Mask erode(const Mask& m, int r) {
    const auto off = disk_offsets(r);
    Mask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            uint8_t keep = 1;
            for (const auto& [dy, dx] : off)
                if (!m.at_padded(y + dy, x + dx)) {
                    keep = 0;
                    break;
                }
            out.at(y, x) = keep;
        }
    return out;
}

/// Dilation: set a pixel iff any disk neighbor is foreground.
inline Mask dilate(const Mask& m, int r) {
    const auto off = disk_offsets(r);
    Mask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            uint8_t hit = 0;
            for (const auto& [dy, dx] : off)
                if (m.at_padded(y + dy, x + dx)) {
                    hit = 1;
                    break;
                }
            out.at(y, x) = hit;
        }
    return out;
}

inline Mask opening(const Mask& m, int r) { return dilate(erode(m, r), r); }
inline Mask closing(const Mask& m, int r) { return erode(dilate(m, r), r); }

/// Pixelwise complement (used by the duality property tests).
inline Mask complement(const Mask& m) {
    Mask out(m.h, m.w);
    for (size_t i = 0; i < m.v.size(); ++i) out.v[i] = m.v[i] ? 0 : 1;
    return out;
}

/// Copy m into the middle of a grid grown by `pad` background pixels per side.
inline Mask pad_background(const Mask& m, int pad) {
    Mask out(m.h + 2 * pad, m.w + 2 * pad);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) out.at(y + pad, x + pad) = m.at(y, x);
    return out;
}

inline Mask crop(const Mask& m, int y0, int x0, int h, int w) {
    if (y0 < 0 || x0 < 0 || y0 + h > m.h || x0 + w > m.w)
        throw ShapeError("crop: window out of range");
    Mask out(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(y, x) = m.at(y0 + y, x0 + x);
    return out;
}

inline bool subset_of(const Mask& a, const Mask& b) {
    if (a.h != b.h || a.w != b.w) throw ShapeError("subset_of: size mismatch");
    for (size_t i = 0; i < a.v.size(); ++i)
        if (a.v[i] && !b.v[i]) return false;
    return true;
}

}  // namespace swarmseg
