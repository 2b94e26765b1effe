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
#include <string>
#include <vector>

#include "swarmseg/common.hpp"
#include "swarmseg/losses.hpp"
#include "swarmseg/params.hpp"
#include "swarmseg/rng.hpp"
#include "swarmseg/tensor.hpp"

namespace swarmseg {

/// Shared topology knobs for all four networks.
struct NetConfig {
    int classes = 2;        // C
    int latent_dim = 8;     // D
    int base_channels = 8;  // encoder width at the top level
    int depth = 3;          // down/up levels in the segmentation net and encoders
    int height = 32;
    int width = 32;

    void validate() const {
        if (classes < 2) throw ValidationError("NetConfig: classes must be >= 2");
        if (latent_dim < 1) throw ValidationError("NetConfig: latent_dim must be >= 1");
        if (base_channels < 1) throw ValidationError("NetConfig: base_channels must be >= 1");
        if (depth < 1) throw ValidationError("NetConfig: depth must be >= 1");
        const int div = 1 << depth;
        if (height % div || width % div)
            throw ValidationError("NetConfig: H=" + std::to_string(height) + " W=" +
                                  std::to_string(width) + " not divisible by 2^depth=" +
                                  std::to_string(div));
    }

    /// Feature width at encoder level i (0 = finest). Capped so the desk-scale
    /// bottleneck stays cheap.
    int level_channels(int i) const { return std::min(base_channels << i, 32); }
    int bottleneck_channels() const { return std::min(base_channels << depth, 32); }
};

/// How the DA network is conditioned.
enum class AdaptMode {
    distribution,  // broadcast latent z, the paper's main method
    image,         // raw image (ImgAdapt ablation)
    fixed,         // learned constant field, ignores conditioning (FixedAdapt ablation)
};

inline AdaptMode adapt_mode_from_string(const std::string& s) {
    if (s == "distribution") return AdaptMode::distribution;
    if (s == "image") return AdaptMode::image;
    if (s == "fixed") return AdaptMode::fixed;
    throw ValidationError("unknown adaptation mode '" + s + "'");
}

inline std::string to_string(AdaptMode m) {
    switch (m) {
        case AdaptMode::distribution: return "distribution";
        case AdaptMode::image: return "image";
        case AdaptMode::fixed: return "fixed";
    }
    throw ValidationError("bad AdaptMode value");
}

/// Column-stochastic per-pixel transition matrices; throws when the invariants
/// are violated by more than the stated tolerance.
inline void validate_adaptation_field(const Tensor& w, double tol = 1e-6) {
    detail::require_rank("AdaptationField", w, 4);
    const int c = w.shape()[0];
    if (w.shape()[1] != c) throw ShapeError("AdaptationField: not square, " + shape_str(w.shape()));
    const size_t hw = static_cast<size_t>(w.shape()[2]) * w.shape()[3];
    for (double v : w.data())
        if (v < 0.0) throw ValidationError("AdaptationField: negative entry");
    for (int j = 0; j < c; ++j)
        for (size_t i = 0; i < hw; ++i) {
            double s = 0.0;
            for (int a = 0; a < c; ++a) s += w.data()[(static_cast<size_t>(a) * c + j) * hw + i];
            if (std::abs(s - 1.0) > tol)
                throw ValidationError("AdaptationField: column sum " + std::to_string(s) +
                                      " deviates from 1");
        }
}

// ---------------------------------------------------------------------------
// Parameter builders. Names are prefixed per network (seg./prior./post./da.)
// so the privacy audit can tell shared from personalized tensors by name.
// ---------------------------------------------------------------------------

inline ParameterSet build_seg_params(const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    ParameterSet p;
    int ch = 1;
    for (int i = 0; i < cfg.depth; ++i) {
        const int out = cfg.level_channels(i);
        p.add("seg.enc" + std::to_string(i) + ".k", init_conv3x3(rng, out, ch));
        p.add("seg.enc" + std::to_string(i) + ".b", init_zeros({out}));
        ch = out;
    }
    const int wb = cfg.bottleneck_channels();
    p.add("seg.bott.k", init_conv3x3(rng, wb, ch));
    p.add("seg.bott.b", init_zeros({wb}));
    ch = wb;
    for (int i = cfg.depth - 1; i >= 0; --i) {
        const int out = cfg.level_channels(i);
        p.add("seg.dec" + std::to_string(i) + ".k", init_conv3x3(rng, out, ch + out));
        p.add("seg.dec" + std::to_string(i) + ".b", init_zeros({out}));
        ch = out;
    }
    p.add("seg.head.k", init_conv1x1(rng, cfg.classes, ch + cfg.latent_dim));
    p.add("seg.head.b", init_zeros({cfg.classes}));
    return p;
}

namespace detail {

inline ParameterSet build_encoder_params(const NetConfig& cfg, Rng& rng, const std::string& prefix,
                                         int in_channels) {
    ParameterSet p;
    int ch = in_channels;
    for (int i = 0; i < cfg.depth; ++i) {
        const int out = cfg.level_channels(i);
        p.add(prefix + ".enc" + std::to_string(i) + ".k", init_conv3x3(rng, out, ch));
        p.add(prefix + ".enc" + std::to_string(i) + ".b", init_zeros({out}));
        ch = out;
    }
    p.add(prefix + ".mu.w", init_linear(rng, ch, cfg.latent_dim));
    p.add(prefix + ".mu.b", init_zeros({cfg.latent_dim}));
    p.add(prefix + ".ls.w", init_linear(rng, ch, cfg.latent_dim));
    p.add(prefix + ".ls.b", init_zeros({cfg.latent_dim}));
    return p;
}

}  // namespace detail

inline ParameterSet build_prior_params(const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    return detail::build_encoder_params(cfg, rng, "prior", 1);
}

inline ParameterSet build_posterior_params(const NetConfig& cfg, Rng& rng) {
    cfg.validate();
    return detail::build_encoder_params(cfg, rng, "post", 1 + cfg.classes);
}

inline ParameterSet build_da_params(const NetConfig& cfg, Rng& rng, AdaptMode mode) {
    cfg.validate();
    ParameterSet p;
    if (mode == AdaptMode::fixed) {
        // Learned constant raw field; SoftPlus + column normalization are
        // applied in the forward pass, so the stored values are unconstrained.
        p.add("da.fixed", init_zeros({cfg.classes * cfg.classes, cfg.height, cfg.width}));
        return p;
    }
    // 1x1 kernels: the conditioning is either a broadcast latent (spatially
    // constant, so spatial taps add nothing) or a raw intensity map, and the
    // small fan-in keeps the SoftPlus head well away from saturation during
    // the warm-up phase's trace climb — a saturated head stops adapting.
    const int hidden = 8;
    const int in0 = mode == AdaptMode::distribution ? cfg.latent_dim : 1;
    int ch = in0;
    for (int i = 0; i < 5; ++i) {
        const int out = i == 4 ? cfg.classes * cfg.classes : hidden;
        p.add("da.conv" + std::to_string(i) + ".k", init_conv1x1(rng, out, ch));
        p.add("da.conv" + std::to_string(i) + ".b", init_zeros({out}));
        ch = out;
    }
    return p;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

/// Segmentation network: U-shaped encoder-decoder with skip connections.
/// The latent z is tiled to (D,H,W) and concatenated with the finest decoder
/// feature map right before the 1x1 prediction head.
inline Tensor forward_seg(const NetConfig& cfg, const ParameterSet& theta_s, const Tensor& image,
                          const Tensor& z) {
    cfg.validate();
    detail::require_rank("forward_seg", image, 3);
    if (image.shape()[0] != 1 || image.shape()[1] != cfg.height || image.shape()[2] != cfg.width)
        throw ShapeError("forward_seg: image " + shape_str(image.shape()) + " does not match config " +
                         std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
    if (z.shape().size() != 1 || z.shape()[0] != cfg.latent_dim)
        throw ShapeError("forward_seg: z " + shape_str(z.shape()) + " != (D)");

    std::vector<Tensor> skips;
    Tensor h = image;
    for (int i = 0; i < cfg.depth; ++i) {
        h = relu(conv2d(h, theta_s.get("seg.enc" + std::to_string(i) + ".k"),
                        theta_s.get("seg.enc" + std::to_string(i) + ".b")));
        skips.push_back(h);
        h = maxpool2(h);
    }
    h = relu(conv2d(h, theta_s.get("seg.bott.k"), theta_s.get("seg.bott.b")));
    for (int i = cfg.depth - 1; i >= 0; --i) {
        h = upsample_nearest2(h);
        h = concat_channels(h, skips[static_cast<size_t>(i)]);
        h = relu(conv2d(h, theta_s.get("seg.dec" + std::to_string(i) + ".k"),
                        theta_s.get("seg.dec" + std::to_string(i) + ".b")));
    }
    h = concat_channels(h, broadcast_channels(z, cfg.height, cfg.width));
    Tensor logits = conv1x1(h, theta_s.get("seg.head.k"), theta_s.get("seg.head.b"));
    return channel_softmax(logits);
}

namespace detail {

inline GaussianDiag forward_encoder(const NetConfig& cfg, const ParameterSet& params,
                                    const std::string& prefix, const Tensor& input) {
    Tensor h = input;
    for (int i = 0; i < cfg.depth; ++i) {
        h = relu(conv2d(h, params.get(prefix + ".enc" + std::to_string(i) + ".k"),
                        params.get(prefix + ".enc" + std::to_string(i) + ".b")));
        h = maxpool2(h);
    }
    Tensor feat = reshape(global_avg_pool(h), {1, h.shape()[0]});
    GaussianDiag g;
    g.mu = reshape(add(matmul(feat, params.get(prefix + ".mu.w")),
                       reshape(params.get(prefix + ".mu.b"), {1, cfg.latent_dim})),
                   {cfg.latent_dim});
    g.log_sigma = reshape(add(matmul(feat, params.get(prefix + ".ls.w")),
                              reshape(params.get(prefix + ".ls.b"), {1, cfg.latent_dim})),
                          {cfg.latent_dim});
    return g;
}

}  // namespace detail

/// Prior encoder p(z|x): conv pyramid, global average pool, two linear heads.
inline GaussianDiag forward_prior(const NetConfig& cfg, const ParameterSet& psi, const Tensor& image) {
    cfg.validate();
    detail::require_rank("forward_prior", image, 3);
    if (image.shape()[0] != 1)
        throw ShapeError("forward_prior: expected 1-channel image, got " + shape_str(image.shape()));
    return detail::forward_encoder(cfg, psi, "prior", image);
}

/// Posterior encoder q(z|x,y): same topology, input is concat(image, onehot).
inline GaussianDiag forward_posterior(const NetConfig& cfg, const ParameterSet& phi,
                                      const Tensor& image, const Tensor& onehot) {
    cfg.validate();
    detail::require_rank("forward_posterior", image, 3);
    detail::require_rank("forward_posterior", onehot, 3);
    if (onehot.shape()[0] != cfg.classes)
        throw ShapeError("forward_posterior: onehot " + shape_str(onehot.shape()) + " != C channels");
    return detail::forward_encoder(cfg, phi, "post", concat_channels(image, onehot));
}

/// Reparameterized sample z = mu + exp(log_sigma) * noise. The caller supplies
/// the standard-normal draw so the op itself stays deterministic.
inline Tensor sample_latent(const GaussianDiag& g, const Tensor& noise) {
    g.validate();
    if (noise.shape() != g.mu.shape())
        throw ShapeError("sample_latent: noise " + shape_str(noise.shape()) + " vs mu " +
                         shape_str(g.mu.shape()));
    return add(g.mu, mul(exp_t(g.log_sigma), noise));
}

/// Distribution-adaptation network: five 1x1 conv layers with SoftPlus
/// activations, a SoftPlus output head, then per-pixel column normalization.
/// `conditioning` is the broadcast latent (distribution mode), the image
/// (image mode), or ignored entirely (fixed mode).
inline Tensor forward_da(const NetConfig& cfg, const ParameterSet& theta_p, const Tensor& conditioning,
                         AdaptMode mode) {
    cfg.validate();
    const int c = cfg.classes;
    if (mode == AdaptMode::fixed) {
        Tensor raw = theta_p.get("da.fixed");
        return normalize_columns(reshape(softplus(raw), {c, c, cfg.height, cfg.width}));
    }
    detail::require_rank("forward_da", conditioning, 3);
    const int want = mode == AdaptMode::distribution ? cfg.latent_dim : 1;
    if (conditioning.shape()[0] != want || conditioning.shape()[1] != cfg.height ||
        conditioning.shape()[2] != cfg.width)
        throw ShapeError("forward_da: conditioning " + shape_str(conditioning.shape()) +
                         " does not match mode " + to_string(mode));
    Tensor h = conditioning;
    for (int i = 0; i < 5; ++i) {
        h = conv1x1(h, theta_p.get("da.conv" + std::to_string(i) + ".k"),
                    theta_p.get("da.conv" + std::to_string(i) + ".b"));
        h = softplus(h);
    }
    return normalize_columns(reshape(h, {c, c, cfg.height, cfg.width}));
}

/// Per-pixel matrix multiplication W (.) f. Column-stochastic W times a
/// simplex vector stays on the simplex, so adapted outputs remain
/// probabilities.
inline Tensor apply_adaptation(const Tensor& w, const Tensor& probs) {
    return pixelwise_matvec(w, probs);
}

}  // namespace swarmseg
