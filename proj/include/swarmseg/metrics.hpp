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

#include "swarmseg/common.hpp"
#include "swarmseg/morphology.hpp"
#include "swarmseg/nets.hpp"
#include "swarmseg/rng.hpp"
#include "swarmseg/tensor.hpp"

namespace swarmseg {

/// Dice overlap 2|A^B| / (|A|+|B|); two empty masks count as a perfect match.
inline double dice(const Mask& pred, const Mask& gt) {
    if (pred.h != gt.h || pred.w != gt.w)
        throw ShapeError("dice: mask sizes differ, " + std::to_string(pred.h) + "x" +
                         std::to_string(pred.w) + " vs " + std::to_string(gt.h) + "x" +
                         std::to_string(gt.w));
    int64_t inter = 0, total = 0;
    for (size_t i = 0; i < pred.v.size(); ++i) {
        inter += pred.v[i] & gt.v[i];
        total += pred.v[i] + gt.v[i];
    }
    if (total == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

/// Hard prediction from per-pixel class probabilities. Foreground is any
/// class > 0; ties (including the exact 0.5/0.5 split at C=2) resolve to the
/// lowest class index, i.e. background.
inline Mask argmax_mask(const Tensor& probs) {
    detail::require_rank("argmax_mask", probs, 3);
    const int c = probs.shape()[0];
    const int h = probs.shape()[1], w = probs.shape()[2];
    const size_t hw = static_cast<size_t>(h) * w;
    Mask m(h, w);
    for (size_t i = 0; i < hw; ++i) {
        int best = 0;
        double bv = probs.data()[i];
        for (int j = 1; j < c; ++j) {
            const double v = probs.data()[static_cast<size_t>(j) * hw + i];
            if (v > bv) {
                bv = v;
                best = j;
            }
        }
        m.v[i] = best != 0 ? 1 : 0;
    }
    return m;
}

struct PredictOptions {
    int samples = 8;        // prior draws averaged in probability space
    bool mean_latent = false;  // use z = mu_prior instead of sampling (S ignored)

    void validate() const {
        if (samples < 1) throw ValidationError("PredictOptions: samples must be >= 1");
    }
};

/// Global (Task 1) prediction: mean segmentation probabilities over S prior
/// samples. Pass psi == nullptr for methods without a latent model; z is then
/// the zero vector and a single pass is made.
inline Tensor predict_global(const NetConfig& cfg, const ParameterSet& theta_s,
                             const ParameterSet* psi, const Tensor& image,
                             const PredictOptions& opt, Rng& rng) {
    opt.validate();
    if (!psi) {
        Tensor z = Tensor::zeros({cfg.latent_dim});
        return forward_seg(cfg, theta_s, image, z);
    }
    GaussianDiag prior = forward_prior(cfg, *psi, image);
    if (opt.mean_latent) return forward_seg(cfg, theta_s, image, prior.mu);
    Tensor acc;
    for (int s = 0; s < opt.samples; ++s) {
        Tensor eps({cfg.latent_dim});
        for (auto& v : eps.data()) v = rng.normal();
        Tensor probs = forward_seg(cfg, theta_s, image, sample_latent(prior, eps));
        acc = s == 0 ? probs : add(acc, probs);
    }
    return mul_scalar(acc, 1.0 / opt.samples);
}

/// Local (Task 2) prediction: every prior sample's probabilities pass through
/// the DA network and the per-pixel adaptation before averaging.
inline Tensor predict_local(const NetConfig& cfg, const ParameterSet& theta_s,
                            const ParameterSet& psi, const ParameterSet& theta_p, AdaptMode mode,
                            const Tensor& image, const PredictOptions& opt, Rng& rng) {
    opt.validate();
    GaussianDiag prior = forward_prior(cfg, psi, image);

    auto adapted_pass = [&](const Tensor& z) {
        Tensor f = forward_seg(cfg, theta_s, image, z);
        Tensor cond;
        if (mode == AdaptMode::distribution)
            cond = broadcast_channels(z, cfg.height, cfg.width);
        else if (mode == AdaptMode::image)
            cond = image;
        Tensor w = forward_da(cfg, theta_p, cond, mode);
        return apply_adaptation(w, f);
    };

    if (opt.mean_latent) return adapted_pass(prior.mu);
    Tensor acc;
    for (int s = 0; s < opt.samples; ++s) {
        Tensor eps({cfg.latent_dim});
        for (auto& v : eps.data()) v = rng.normal();
        Tensor probs = adapted_pass(sample_latent(prior, eps));
        acc = s == 0 ? probs : add(acc, probs);
    }
    return mul_scalar(acc, 1.0 / opt.samples);
}

}  // namespace swarmseg
