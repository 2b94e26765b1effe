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

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "swarmseg/common.hpp"
#include "swarmseg/morphology.hpp"
#include "swarmseg/rng.hpp"
#include "swarmseg/tensor.hpp"

namespace swarmseg {

/// One synthetic case: z-scored image, (possibly corrupted) training label,
/// and the pre-corruption ground truth.
struct SegSample {
    Tensor image;      // (1,H,W), mean 0, std 1
    Mask label;        // what training/testing sees
    Mask clean_label;  // generation-time truth, never corrupted
    std::string case_id;
};

enum class LabelSkew { none, open_erode, close_dilate };

inline LabelSkew label_skew_from_string(const std::string& s) {
    if (s == "none") return LabelSkew::none;
    if (s == "open_erode") return LabelSkew::open_erode;
    if (s == "close_dilate") return LabelSkew::close_dilate;
    throw ValidationError("unknown label skew '" + s + "'");
}

inline std::string to_string(LabelSkew s) {
    switch (s) {
        case LabelSkew::none: return "none";
        case LabelSkew::open_erode: return "open_erode";
        case LabelSkew::close_dilate: return "close_dilate";
    }
    throw ValidationError("bad LabelSkew value");
}

/// Per-center intensity transform (feature skew) and annotation-habit model
/// (label skew). The deterministic morphological op uses radius r_lo; the
/// random per-case op draws an extra radius uniformly from [0, r_hi - r_lo]
/// and applies it on top (0 = no extra op).
struct CenterSpec {
    int center_id = 0;
    int n_train = 12;
    int n_test = 4;
    double gain = 1.0;
    double bias = 0.0;
    double gamma = 1.0;
    double noise_std = 0.08;
    LabelSkew label_skew = LabelSkew::none;
    int r_lo = 1;
    int r_hi = 2;

    void validate(int h, int w) const {
        if (n_train < 1) throw ValidationError("CenterSpec: n_train must be >= 1");
        if (n_test < 1) throw ValidationError("CenterSpec: n_test must be >= 1");
        if (gamma <= 0.0) throw ValidationError("CenterSpec: gamma must be > 0");
        if (gain <= 0.0) throw ValidationError("CenterSpec: gain must be > 0");
        if (noise_std < 0.0) throw ValidationError("CenterSpec: noise_std must be >= 0");
        const int r_max = std::min(h, w) / 8;
        if (r_lo < 1 || r_hi < r_lo || r_hi > r_max)
            throw ValidationError("CenterSpec: radius range [" + std::to_string(r_lo) + "," +
                                  std::to_string(r_hi) + "] outside [1," + std::to_string(r_max) + "]");
    }
};

/// Geometry and sizing knobs for the generator.
struct DataConfig {
    int n_train = 12;
    int n_local_test = 4;
    int n_generic = 24;
    int protrusions_min = 3;
    int protrusions_max = 3;
    double protrusion_len_min = 8.0;
    double protrusion_len_max = 14.0;
    double gen_noise_std = 0.05;
    double generic_noise_std = 0.08;

    void validate() const {
        if (n_train < 1 || n_local_test < 1 || n_generic < 1)
            throw ValidationError("DataConfig: all set sizes must be >= 1");
        if (protrusions_min < 1 || protrusions_max < protrusions_min || protrusions_max > 3)
            throw ValidationError("DataConfig: protrusion count range invalid");
        if (protrusion_len_min < 2.0 || protrusion_len_max < protrusion_len_min)
            throw ValidationError("DataConfig: protrusion length range invalid");
    }
};

namespace detail {

inline Tensor zscore(const std::vector<double>& raw, int h, int w) {
    const double n = static_cast<double>(raw.size());
    double mean = 0.0;
    for (double v : raw) mean += v;
    mean /= n;
    double var = 0.0;
    for (double v : raw) var += (v - mean) * (v - mean);
    var /= n;
    const double sd = std::sqrt(var);
    if (sd < 1e-9) throw NumericError("zscore: degenerate image (constant intensity)");
    Tensor img({1, h, w});
    for (size_t i = 0; i < raw.size(); ++i) img.data()[i] = (raw[i] - mean) / sd;
    return img;
}

}  // namespace detail

/// One clean case: wobbly-edged elliptical body with thin radial protrusions
/// (the ambiguous fine structures centers disagree about), label-dependent
/// intensity with a smooth background field and noise, z-score normalized.
inline SegSample generate_case(Rng& rng, int h, int w, const DataConfig& cfg) {
    cfg.validate();
    for (int attempt = 0; attempt < 10; ++attempt) {
        Mask label(h, w);
        const double cy = rng.uniform(0.40, 0.60) * h;
        const double cx = rng.uniform(0.40, 0.60) * w;
        const double a = rng.uniform(0.21, 0.31) * w;   // semi-axis x
        const double b = rng.uniform(0.21, 0.31) * h;   // semi-axis y
        const double rot = rng.uniform(0.0, 3.14159265358979323846);
        const double cr = std::cos(rot), sr = std::sin(rot);
        // Radial boundary wobble: two mid-frequency harmonics carve bumps and
        // valleys one or two pixels deep — exactly the scale annotation-style
        // morphology acts on (openings shave the bumps, closings fill the
        // valleys), so center styles change labels substantially.
        const int k1 = rng.uniform_int(5, 7);
        const int k2 = rng.uniform_int(11, 14);
        const double a1 = rng.uniform(0.10, 0.22);
        const double a2 = rng.uniform(0.14, 0.26);
        const double p1 = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        const double p2 = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double dx = x - cx, dy = y - cy;
                const double u = (cr * dx + sr * dy) / a;
                const double v = (-sr * dx + cr * dy) / b;
                const double rho = std::sqrt(u * u + v * v);
                const double th = std::atan2(v, u);
                const double edge =
                    1.0 + a1 * std::cos(k1 * th + p1) + a2 * std::cos(k2 * th + p2);
                if (rho <= edge) label.at(y, x) = 1;
            }

        const int n_prot = rng.uniform_int(cfg.protrusions_min, cfg.protrusions_max);
        for (int p = 0; p < n_prot; ++p) {
            // Walk outward from the ellipse boundary along a jittered radial
            // direction, stamping a 1px-wide line (plus one lateral neighbor
            // every other step, so width varies between 1 and 2).
            const double ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
            const double dirx = std::cos(ang), diry = std::sin(ang);
            // boundary point of the (rotated) ellipse along this direction
            const double eu = std::cos(ang - rot) / a, ev = std::sin(ang - rot) / b;
            const double t0 = 1.0 / std::sqrt(eu * eu + ev * ev);
            const double len = rng.uniform(cfg.protrusion_len_min, cfg.protrusion_len_max);
            const bool widen = rng.uniform() < 0.5;
            for (double t = 0.0; t <= len; t += 0.5) {
                const int py = static_cast<int>(std::lround(cy + (t0 + t) * diry));
                const int px = static_cast<int>(std::lround(cx + (t0 + t) * dirx));
                if (py < 1 || py >= h - 1 || px < 1 || px >= w - 1) break;
                label.at(py, px) = 1;
                if (widen) label.at(py + (std::abs(dirx) > std::abs(diry) ? 1 : 0),
                                    px + (std::abs(dirx) > std::abs(diry) ? 0 : 1)) = 1;
            }
        }

        const int64_t fg = label.count();
        if (fg < 8 || fg > static_cast<int64_t>(h) * w * 3 / 4) continue;

        // Intensity: bright body on a darker background modulated by a smooth
        // low-frequency field, plus white noise. Units are arbitrary; the
        // z-score at the end fixes the scale. Two box blurs of the mask give
        // the contour a ~2px intensity ramp on both sides, so near-boundary
        // pixels are genuinely ambiguous: intensity alone cannot settle which
        // annotation style produced a label there.
        std::vector<double> soft(static_cast<size_t>(h) * w);
        for (size_t i = 0; i < soft.size(); ++i) soft[i] = label.v[i];
        for (int pass = 0; pass < 2; ++pass) {
            std::vector<double> nxt(soft.size(), 0.0);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double acc = 0.0;
                    int cnt = 0;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = y + dy, xx = x + dx;
                            if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                            acc += soft[static_cast<size_t>(yy) * w + xx];
                            ++cnt;
                        }
                    nxt[static_cast<size_t>(y) * w + x] = acc / cnt;
                }
            soft.swap(nxt);
        }
        const double fy = rng.uniform(0.5, 1.5), fx = rng.uniform(0.5, 1.5);
        const double ph1 = rng.uniform(0.0, 6.28), ph2 = rng.uniform(0.0, 6.28);
        std::vector<double> raw(static_cast<size_t>(h) * w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double v = 0.25 + 0.75 * soft[static_cast<size_t>(y) * w + x];
                v += 0.10 * std::sin(2.0 * 3.14159265 * fy * y / h + ph1);
                v += 0.10 * std::sin(2.0 * 3.14159265 * fx * x / w + ph2);
                v += rng.normal(0.0, cfg.gen_noise_std);
                raw[static_cast<size_t>(y) * w + x] = v;
            }

        SegSample s;
        s.image = detail::zscore(raw, h, w);
        s.label = label;
        s.clean_label = label;
        return s;
    }
    throw Error("generate_case: degenerate geometry after 10 attempts");
}

/// Dispatch table for the four basic morphological operators.
inline Mask morphology(const Mask& label, const std::string& op, int radius) {
    if (op == "erode") return erode(label, radius);
    if (op == "dilate") return dilate(label, radius);
    if (op == "open") return opening(label, radius);
    if (op == "close") return closing(label, radius);
    throw ValidationError("morphology: unknown op '" + op + "'");
}

enum class Split { train, test };

/// Center-specific corruption. The image always receives the intensity
/// transform; labels are corrupted only as the split rule dictates:
/// train = deterministic op + random-radius op, local test = deterministic
/// op only (annotation habit without the per-case randomness).
///
/// Gamma is applied on a min-max remap of the z-scored image (z-scores are
/// signed, so x^gamma is otherwise undefined); order is gamma, gain, bias,
/// noise, then a fresh z-score.
inline SegSample apply_center_skew(const SegSample& sample, const CenterSpec& spec, Rng& rng,
                                   Split split) {
    const int h = sample.label.h, w = sample.label.w;
    spec.validate(h, w);

    double lo = sample.image.data()[0], hi = lo;
    for (double v : sample.image.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;
    if (span < 1e-9) throw NumericError("apply_center_skew: constant image");
    std::vector<double> raw(sample.image.data().size());
    for (size_t i = 0; i < raw.size(); ++i) {
        const double t = (sample.image.data()[i] - lo) / span;
        raw[i] = spec.gain * std::pow(t, spec.gamma) + spec.bias + rng.normal(0.0, spec.noise_std);
    }

    SegSample out;
    out.image = detail::zscore(raw, h, w);
    out.clean_label = sample.clean_label;
    out.case_id = sample.case_id;

    // The extra radius rides on top of the deterministic op, so its range
    // starts at zero: the per-case annotation jitter scatters AROUND the
    // center's systematic habit instead of compounding it.  Radius-0
    // erosion/dilation is the identity.
    auto corrupt = [&](int extra_radius) -> Mask {
        switch (spec.label_skew) {
            case LabelSkew::none: return sample.clean_label;
            case LabelSkew::open_erode: {
                Mask m = opening(sample.clean_label, spec.r_lo);
                if (split == Split::train && extra_radius > 0) m = erode(m, extra_radius);
                return m;
            }
            case LabelSkew::close_dilate: {
                Mask m = closing(sample.clean_label, spec.r_lo);
                if (split == Split::train && extra_radius > 0) m = dilate(m, extra_radius);
                return m;
            }
        }
        throw ValidationError("apply_center_skew: bad skew value");
    };

    const int e = rng.uniform_int(0, spec.r_hi - spec.r_lo);  // drawn even when unused: keeps
                                                              // the stream layout split-independent
    Mask m = corrupt(e);
    if (m.count() == 0 && spec.label_skew != LabelSkew::none && e > 0)
        m = corrupt(0);  // clamp the random radius down once
    if (m.count() == 0 && spec.label_skew == LabelSkew::open_erode)
        throw Error("apply_center_skew: corrupted label empty for case " + sample.case_id);
    out.label = m;
    return out;
}

/// Training-time augmentation: joint quarter-turn rotation and horizontal
/// flip, plus image-only Gaussian noise. Requires H == W for rotations.
inline SegSample augment(const SegSample& sample, Rng& rng) {
    const int h = sample.label.h, w = sample.label.w;
    if (h != w) throw ValidationError("augment: quarter-turn rotation needs H == W");
    const int quarter = rng.uniform_int(0, 3);
    const bool flip = rng.uniform() < 0.5;

    auto map_index = [&](int y, int x) -> std::pair<int, int> {
        for (int q = 0; q < quarter; ++q) {
            const int ny = x, nx = h - 1 - y;  // 90 degrees clockwise
            y = ny;
            x = nx;
        }
        if (flip) x = w - 1 - x;
        return {y, x};
    };

    SegSample out;
    out.case_id = sample.case_id;
    out.label = Mask(h, w);
    out.clean_label = Mask(h, w);
    Tensor img({1, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const auto [ny, nx] = map_index(y, x);
            out.label.at(ny, nx) = sample.label.at(y, x);
            out.clean_label.at(ny, nx) = sample.clean_label.at(y, x);
            img.data()[static_cast<size_t>(ny) * w + nx] =
                sample.image.data()[static_cast<size_t>(y) * w + x];
        }
    for (auto& v : img.data()) v += rng.normal(0.0, 0.02);
    out.image = img;
    return out;
}

struct CenterData {
    CenterSpec spec;
    std::vector<SegSample> train;
    std::vector<SegSample> local_test;
};

struct FederationData {
    int height = 0;
    int width = 0;
    std::vector<CenterData> centers;
    std::vector<SegSample> generic_test;  // clean labels, neutral intensity
};

/// Default 4-center federation mirroring the A/B/C/D roles: two centers with
/// feature skew only, one with open+erode label skew, one with close+dilate.
inline std::vector<CenterSpec> default_center_specs(const DataConfig& d) {
    std::vector<CenterSpec> specs(4);
    for (int k = 0; k < 4; ++k) {
        specs[k].center_id = k;
        specs[k].n_train = d.n_train;
        specs[k].n_test = d.n_local_test;
    }
    specs[0].gamma = 0.60; specs[0].gain = 1.15; specs[0].bias = 0.05;  specs[0].noise_std = 0.10;
    specs[1].gamma = 1.70; specs[1].gain = 0.90; specs[1].bias = -0.05; specs[1].noise_std = 0.10;
    specs[2].gamma = 0.85; specs[2].gain = 1.05; specs[2].noise_std = 0.08;
    specs[2].label_skew = LabelSkew::open_erode;
    specs[2].r_lo = 3; specs[2].r_hi = 4;
    specs[3].gamma = 1.20; specs[3].gain = 0.95; specs[3].noise_std = 0.08;
    specs[3].label_skew = LabelSkew::close_dilate;
    specs[3].r_lo = 3; specs[3].r_hi = 4;
    return specs;
}

/// Generate every center's train/local-test sets plus the generic test set.
/// Case pools are disjoint by construction: every case is generated fresh
/// from its own (seed, case counter) stream.
inline FederationData build_federation_data(const std::vector<CenterSpec>& specs, int h, int w,
                                            const DataConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (specs.empty()) throw ValidationError("build_federation_data: no centers");
    for (size_t i = 0; i < specs.size(); ++i)
        for (size_t j = i + 1; j < specs.size(); ++j)
            if (specs[i].center_id == specs[j].center_id)
                throw ValidationError("build_federation_data: duplicate center_id " +
                                      std::to_string(specs[i].center_id));

    FederationData fed;
    fed.height = h;
    fed.width = w;
    uint64_t case_uid = 0;

    auto make_case = [&](const CenterSpec* spec, Split split) -> SegSample {
        Rng rng(mix_seed(seed, 0xCA5Eull, case_uid));
        SegSample clean = generate_case(rng, h, w, cfg);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "case_%04llu", static_cast<unsigned long long>(case_uid));
        clean.case_id = buf;
        ++case_uid;
        if (!spec) {
            // Generic pool: neutral intensity pipeline, untouched labels.
            CenterSpec neutral;
            neutral.noise_std = cfg.generic_noise_std;
            return apply_center_skew(clean, neutral, rng, Split::test);
        }
        return apply_center_skew(clean, *spec, rng, split);
    };

    for (const auto& spec : specs) {
        spec.validate(h, w);
        CenterData cd;
        cd.spec = spec;
        for (int i = 0; i < spec.n_train; ++i) cd.train.push_back(make_case(&spec, Split::train));
        for (int i = 0; i < spec.n_test; ++i) cd.local_test.push_back(make_case(&spec, Split::test));
        fed.centers.push_back(std::move(cd));
    }
    for (int i = 0; i < cfg.n_generic; ++i) fed.generic_test.push_back(make_case(nullptr, Split::test));
    return fed;
}

}  // namespace swarmseg
