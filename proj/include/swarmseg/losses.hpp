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

#include "swarmseg/common.hpp"
#include "swarmseg/tensor.hpp"

namespace swarmseg {

/// Diagonal Gaussian over the D-dimensional latent space, parameterized by
/// mean and log standard deviation (both shape (D)).
struct GaussianDiag {
    Tensor mu;
    Tensor log_sigma;

    void validate() const {
        if (!mu.valid() || !log_sigma.valid()) throw ValidationError("GaussianDiag: empty tensors");
        if (mu.shape() != log_sigma.shape() || mu.shape().size() != 1)
            throw ShapeError("GaussianDiag: mu " + shape_str(mu.shape()) + " vs log_sigma " +
                             shape_str(log_sigma.shape()));
    }
    int dim() const { return mu.shape()[0]; }
};

/// Loss weights; alpha scales the trace term, beta the KL term, q is the
/// noise-robust exponent.
struct LossWeights {
    double alpha = 0.01;
    double beta = 0.01;
    double q = 0.7;

    void validate() const {
        if (alpha < 0.0 || beta < 0.0)
            throw ValidationError("LossWeights: alpha and beta must be >= 0");
        if (!(q > 0.0 && q <= 1.0))
            throw ValidationError("LossWeights: q must lie in (0, 1], got " + std::to_string(q));
    }
};

namespace detail {

inline void require_probs_pair(const char* op, const Tensor& probs, const Tensor& onehot) {
    require_rank(op, probs, 3);
    require_rank(op, onehot, 3);
    if (probs.shape() != onehot.shape())
        throw ShapeError(std::string(op) + ": probs " + shape_str(probs.shape()) + " vs onehot " +
                         shape_str(onehot.shape()));
}

}  // namespace detail

/// Cross-entropy, mean over pixels: -(1/M) sum_p sum_j y[j,p] * log(probs[j,p] + 1e-12).
inline Tensor ce_loss(const Tensor& probs, const Tensor& onehot) {
    detail::require_probs_pair("ce_loss", probs, onehot);
    const double m = static_cast<double>(probs.shape()[1]) * probs.shape()[2];
    Tensor picked = mul(onehot, log_t(add_scalar(probs, 1e-12)));
    return mul_scalar(sum(picked), -1.0 / m);
}

/// Mean per-pixel trace of the adaptation field: (1/M) sum_p tr(W_p).
inline Tensor tr_loss(const Tensor& w) {
    detail::require_rank("tr_loss", w, 4);
    const int c = w.shape()[0];
    if (w.shape()[1] != c) throw ShapeError("tr_loss: field not square, " + shape_str(w.shape()));
    const int h = w.shape()[2], ww = w.shape()[3];
    // Constant diagonal selector; element product + sum extracts sum_p tr(W_p).
    Tensor diag({c, c, h, ww});
    const size_t hw = static_cast<size_t>(h) * ww;
    for (int j = 0; j < c; ++j)
        std::fill_n(diag.data().begin() + (static_cast<size_t>(j) * c + j) * hw, hw, 1.0);
    return mul_scalar(sum(mul(w, diag)), 1.0 / static_cast<double>(hw));
}

/// Noise-robust generalized cross-entropy, mean over pixels:
/// (1/M) sum_p sum_j y[j,p] * (1 - probs[j,p]^q) / q.
/// q -> 0 recovers cross-entropy; q = 1 is the mean of (1 - p_true).
inline Tensor nr_loss(const Tensor& probs, const Tensor& onehot, double q) {
    detail::require_probs_pair("nr_loss", probs, onehot);
    if (!(q > 0.0 && q <= 1.0))
        throw ValidationError("nr_loss: q must lie in (0, 1], got " + std::to_string(q));
    const double m = static_cast<double>(probs.shape()[1]) * probs.shape()[2];
    Tensor gce = mul(onehot, add_scalar(mul_scalar(pow_const(probs, q), -1.0), 1.0));
    return mul_scalar(sum(gce), 1.0 / (q * m));
}

/// Closed-form KL[q || p] between diagonal Gaussians:
/// sum_d [ log(sigma_p/sigma_q) + (sigma_q^2 + (mu_q - mu_p)^2) / (2 sigma_p^2) - 1/2 ].
inline Tensor kl_diag_gauss(const GaussianDiag& q_dist, const GaussianDiag& p_dist) {
    q_dist.validate();
    p_dist.validate();
    if (q_dist.dim() != p_dist.dim())
        throw ShapeError("kl_diag_gauss: dims differ, " + std::to_string(q_dist.dim()) + " vs " +
                         std::to_string(p_dist.dim()));
    Tensor log_ratio = sub(p_dist.log_sigma, q_dist.log_sigma);
    Tensor var_q = exp_t(mul_scalar(q_dist.log_sigma, 2.0));
    Tensor diff = sub(q_dist.mu, p_dist.mu);
    Tensor num = add(var_q, mul(diff, diff));
    Tensor inv_var_p = exp_t(mul_scalar(p_dist.log_sigma, -2.0));
    Tensor term = add(log_ratio, add_scalar(mul_scalar(mul(num, inv_var_p), 0.5), -0.5));
    return sum(term);
}

/// Warm-up objective: ce(f, y) + beta*KL - tr(W). The negated trace term
/// drives the adaptation matrices toward diagonal dominance before the main
/// phase starts.
inline Tensor warmup_loss(const Tensor& seg_probs, const Tensor& onehot, const Tensor& w,
                          const GaussianDiag& q_dist, const GaussianDiag& p_dist,
                          const LossWeights& weights) {
    weights.validate();
    Tensor l = ce_loss(seg_probs, onehot);
    l = add(l, mul_scalar(kl_diag_gauss(q_dist, p_dist), weights.beta));
    l = sub(l, tr_loss(w));
    return l;
}

/// Main objective: ce(W (.) f, y) + nr(f, y) + alpha*tr(W) + beta*KL.
/// `local_probs` must be the adapted probabilities the caller computed as
/// apply_adaptation(W, seg_probs), so gradients flow through both paths.
inline Tensor total_loss(const Tensor& seg_probs, const Tensor& local_probs, const Tensor& onehot,
                         const Tensor& w, const GaussianDiag& q_dist, const GaussianDiag& p_dist,
                         const LossWeights& weights) {
    weights.validate();
    Tensor l = ce_loss(local_probs, onehot);
    l = add(l, nr_loss(seg_probs, onehot, weights.q));
    l = add(l, mul_scalar(tr_loss(w), weights.alpha));
    l = add(l, mul_scalar(kl_diag_gauss(q_dist, p_dist), weights.beta));
    return l;
}

}  // namespace swarmseg
