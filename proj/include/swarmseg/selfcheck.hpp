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
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "swarmseg/common.hpp"
#include "swarmseg/losses.hpp"
#include "swarmseg/morphology.hpp"
#include "swarmseg/nets.hpp"
#include "swarmseg/params.hpp"
#include "swarmseg/rng.hpp"
#include "swarmseg/swarm.hpp"
#include "swarmseg/synthdata.hpp"
#include "swarmseg/tensor.hpp"

namespace swarmseg {

/// One verification item: a measured value against a pinned tolerance.
struct CheckResult {
    std::string name;
    double measured = 0.0;
    double tol = 0.0;
    bool pass = false;
    std::string note;
};

namespace selfcheck {

inline Tensor rand_tensor(Rng& rng, std::vector<int> shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

/// Uniform values with |v| >= margin, for ops with a kink at zero (finite
/// differences would otherwise straddle it).
inline Tensor rand_tensor_away_from_zero(Rng& rng, std::vector<int> shape, double range,
                                         double margin) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) {
        do {
            v = rng.uniform(-range, range);
        } while (std::abs(v) < margin);
    }
    return t;
}

/// Values whose 2x2 pooling windows have well-separated entries, so the
/// argmax is stable under the finite-difference step.
inline Tensor rand_pool_safe(Rng& rng, int c, int h, int w) {
    for (int tries = 0; tries < 100; ++tries) {
        Tensor t = rand_tensor(rng, {c, h, w}, 0.0, 1.0);
        bool ok = true;
        for (int b = 0; b < c && ok; ++b)
            for (int y = 0; y < h && ok; y += 2)
                for (int x = 0; x < w && ok; x += 2) {
                    double v[4];
                    for (int k = 0; k < 4; ++k)
                        v[k] = t.data()[(static_cast<size_t>(b) * h + y + (k >> 1)) * w + x + (k & 1)];
                    for (int i = 0; i < 4 && ok; ++i)
                        for (int j = i + 1; j < 4; ++j)
                            if (std::abs(v[i] - v[j]) < 1e-3) {
                                ok = false;
                                break;
                            }
                }
        if (ok) return t;
    }
    throw Error("rand_pool_safe: could not draw a tie-free grid");
}

/// Scalarize through a fixed random weighting; a plain sum would let
/// mass-conserving gradient bugs (e.g. in softmax) cancel out.
inline std::function<Tensor(const Tensor&)> weighted(const Tensor& w,
                                                     std::function<Tensor(const Tensor&)> inner) {
    return [w, inner](const Tensor& x) { return sum(mul(inner(x), w)); };
}

inline std::pair<Tensor, Tensor> split_vec(const Tensor& x, int d) {
    Tensor r = reshape(x, {2 * d, 1, 1});
    return {reshape(slice_channels(r, 0, d), {d}), reshape(slice_channels(r, d, 2 * d), {d})};
}

inline Tensor random_onehot(Rng& rng, int c, int h, int w) {
    Tensor y({c, h, w});
    const size_t hw = static_cast<size_t>(h) * w;
    for (size_t i = 0; i < hw; ++i) {
        const int cls = rng.uniform_int(0, c - 1);
        y.data()[static_cast<size_t>(cls) * hw + i] = 1.0;
    }
    return y;
}

/// Run `points` grad checks of a freshly drawn (f, x) pair; returns the worst
/// relative disagreement seen.
inline double worst_over_points(
    Rng& rng, int points,
    const std::function<std::pair<std::function<Tensor(const Tensor&)>, Tensor>(Rng&)>& make_case,
    double eps = 1e-5) {
    double worst = 0.0;
    for (int p = 0; p < points; ++p) {
        auto [f, x] = make_case(rng);
        worst = std::max(worst, grad_check(f, x, eps));
    }
    return worst;
}

/// The gradient registry: every differentiable primitive and every loss,
/// checked at `points` random points each against central differences.
inline std::vector<CheckResult> gradcheck_suite(uint64_t seed, int points = 20) {
    std::vector<CheckResult> results;
    const double tol = 1e-4;

    auto run = [&](const std::string& name, int pts,
                   const std::function<std::pair<std::function<Tensor(const Tensor&)>, Tensor>(Rng&)>&
                       make_case) {
        Rng rng(mix_seed(seed, fnv1a64(name)));
        CheckResult r;
        r.name = "grad/" + name;
        r.tol = tol;
        r.measured = worst_over_points(rng, pts, make_case);
        r.pass = r.measured <= tol;
        results.push_back(r);
    };

    using Fn = std::function<Tensor(const Tensor&)>;
    using Case = std::pair<Fn, Tensor>;

    // --- elementwise / scalar ---
    run("add", points, [](Rng& rng) -> Case {
        Tensor b = rand_tensor(rng, {3, 4, 4}, -1, 1), w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [b](const Tensor& x) { return add(x, b); }),
                rand_tensor(rng, {3, 4, 4}, -1, 1)};
    });
    run("sub", points, [](Rng& rng) -> Case {
        Tensor b = rand_tensor(rng, {3, 4, 4}, -1, 1), w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [b](const Tensor& x) { return sub(b, x); }),
                rand_tensor(rng, {3, 4, 4}, -1, 1)};
    });
    run("mul", points, [](Rng& rng) -> Case {
        Tensor b = rand_tensor(rng, {3, 4, 4}, -1, 1), w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [b](const Tensor& x) { return mul(x, b); }),
                rand_tensor(rng, {3, 4, 4}, -1, 1)};
    });
    run("add_scalar", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return add_scalar(x, 1.7); }),
                rand_tensor(rng, {2, 3, 3}, -1, 1)};
    });
    run("mul_scalar", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return mul_scalar(x, -0.6); }),
                rand_tensor(rng, {2, 3, 3}, -1, 1)};
    });
    run("relu", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return relu(x); }),
                rand_tensor_away_from_zero(rng, {3, 4, 4}, 1.0, 1e-2)};
    });
    run("softplus", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return softplus(x); }),
                rand_tensor(rng, {3, 4, 4}, -2, 2)};
    });
    run("exp", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return exp_t(x); }),
                rand_tensor(rng, {2, 3, 3}, -1, 1)};
    });
    run("log", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return log_t(x); }),
                rand_tensor(rng, {2, 3, 3}, 0.5, 2.0)};
    });
    run("pow_const", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return pow_const(x, 0.7); }),
                rand_tensor(rng, {2, 3, 3}, 0.1, 2.0)};
    });

    // --- reductions / shape ---
    run("sum", points, [](Rng& rng) -> Case {
        return {[](const Tensor& x) { return sum(x); }, rand_tensor(rng, {3, 4, 4}, -1, 1)};
    });
    run("mean", points, [](Rng& rng) -> Case {
        return {[](const Tensor& x) { return mean(x); }, rand_tensor(rng, {3, 4, 4}, -1, 1)};
    });
    run("reshape", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {4, 6}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return reshape(x, {4, 6}); }),
                rand_tensor(rng, {3, 8}, -1, 1)};
    });

    // --- linear algebra ---
    run("matmul_lhs", points, [](Rng& rng) -> Case {
        Tensor b = rand_tensor(rng, {4, 2}, -1, 1), w = rand_tensor(rng, {3, 2}, -1, 1);
        return {weighted(w, [b](const Tensor& x) { return matmul(x, b); }),
                rand_tensor(rng, {3, 4}, -1, 1)};
    });
    run("matmul_rhs", points, [](Rng& rng) -> Case {
        Tensor a = rand_tensor(rng, {3, 4}, -1, 1), w = rand_tensor(rng, {3, 2}, -1, 1);
        return {weighted(w, [a](const Tensor& x) { return matmul(a, x); }),
                rand_tensor(rng, {4, 2}, -1, 1)};
    });

    // --- spatial ---
    run("conv2d_input", points, [](Rng& rng) -> Case {
        Tensor k = rand_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5), b = rand_tensor(rng, {3}, -0.5, 0.5);
        Tensor w = rand_tensor(rng, {3, 6, 6}, -1, 1);
        return {weighted(w, [k, b](const Tensor& x) { return conv2d(x, k, b); }),
                rand_tensor(rng, {2, 6, 6}, -1, 1)};
    });
    run("conv2d_kernel", points, [](Rng& rng) -> Case {
        Tensor in = rand_tensor(rng, {2, 6, 6}, -1, 1), b = rand_tensor(rng, {3}, -0.5, 0.5);
        Tensor w = rand_tensor(rng, {3, 6, 6}, -1, 1);
        return {weighted(w, [in, b](const Tensor& x) { return conv2d(in, x, b); }),
                rand_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5)};
    });
    run("conv2d_bias", points, [](Rng& rng) -> Case {
        Tensor in = rand_tensor(rng, {2, 6, 6}, -1, 1), k = rand_tensor(rng, {3, 2, 3, 3}, -0.5, 0.5);
        Tensor w = rand_tensor(rng, {3, 6, 6}, -1, 1);
        return {weighted(w, [in, k](const Tensor& x) { return conv2d(in, k, x); }),
                rand_tensor(rng, {3}, -0.5, 0.5)};
    });
    run("conv1x1_input", points, [](Rng& rng) -> Case {
        Tensor k = rand_tensor(rng, {3, 2}, -0.5, 0.5), b = rand_tensor(rng, {3}, -0.5, 0.5);
        Tensor w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [k, b](const Tensor& x) { return conv1x1(x, k, b); }),
                rand_tensor(rng, {2, 4, 4}, -1, 1)};
    });
    run("conv1x1_kernel", points, [](Rng& rng) -> Case {
        Tensor in = rand_tensor(rng, {2, 4, 4}, -1, 1), b = rand_tensor(rng, {3}, -0.5, 0.5);
        Tensor w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [in, b](const Tensor& x) { return conv1x1(in, x, b); }),
                rand_tensor(rng, {3, 2}, -0.5, 0.5)};
    });
    run("conv1x1_bias", points, [](Rng& rng) -> Case {
        Tensor in = rand_tensor(rng, {2, 4, 4}, -1, 1), k = rand_tensor(rng, {3, 2}, -0.5, 0.5);
        Tensor w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [in, k](const Tensor& x) { return conv1x1(in, k, x); }),
                rand_tensor(rng, {3}, -0.5, 0.5)};
    });
    run("channel_softmax", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {3, 4, 4}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return channel_softmax(x); }),
                rand_tensor(rng, {3, 4, 4}, -2, 2)};
    });
    run("maxpool2", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return maxpool2(x); }), rand_pool_safe(rng, 2, 6, 6)};
    });
    run("upsample_nearest2", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 6, 6}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return upsample_nearest2(x); }),
                rand_tensor(rng, {2, 3, 3}, -1, 1)};
    });
    run("concat_channels_lhs", points, [](Rng& rng) -> Case {
        Tensor b = rand_tensor(rng, {3, 4, 4}, -1, 1), w = rand_tensor(rng, {5, 4, 4}, -1, 1);
        return {weighted(w, [b](const Tensor& x) { return concat_channels(x, b); }),
                rand_tensor(rng, {2, 4, 4}, -1, 1)};
    });
    run("concat_channels_rhs", points, [](Rng& rng) -> Case {
        Tensor a = rand_tensor(rng, {2, 4, 4}, -1, 1), w = rand_tensor(rng, {5, 4, 4}, -1, 1);
        return {weighted(w, [a](const Tensor& x) { return concat_channels(a, x); }),
                rand_tensor(rng, {3, 4, 4}, -1, 1)};
    });
    run("slice_channels", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return slice_channels(x, 1, 3); }),
                rand_tensor(rng, {4, 3, 3}, -1, 1)};
    });
    run("broadcast_channels", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {5, 4, 4}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return broadcast_channels(x, 4, 4); }),
                rand_tensor(rng, {5}, -1, 1)};
    });
    run("global_avg_pool", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return global_avg_pool(x); }),
                rand_tensor(rng, {3, 4, 4}, -1, 1)};
    });
    run("pixelwise_matvec_field", points, [](Rng& rng) -> Case {
        Tensor p = rand_tensor(rng, {2, 3, 3}, 0.1, 0.9), w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [p](const Tensor& x) { return pixelwise_matvec(x, p); }),
                rand_tensor(rng, {2, 2, 3, 3}, -1, 1)};
    });
    run("pixelwise_matvec_probs", points, [](Rng& rng) -> Case {
        Tensor f = rand_tensor(rng, {2, 2, 3, 3}, -1, 1), w = rand_tensor(rng, {2, 3, 3}, -1, 1);
        return {weighted(w, [f](const Tensor& x) { return pixelwise_matvec(f, x); }),
                rand_tensor(rng, {2, 3, 3}, -1, 1)};
    });
    run("normalize_columns", points, [](Rng& rng) -> Case {
        Tensor w = rand_tensor(rng, {2, 2, 3, 3}, -1, 1);
        return {weighted(w, [](const Tensor& x) { return normalize_columns(x); }),
                rand_tensor(rng, {2, 2, 3, 3}, 0.1, 2.0)};
    });
    run("sample_latent", points, [](Rng& rng) -> Case {
        const int d = 3;
        Tensor noise = rand_tensor(rng, {d}, -1.5, 1.5), w = rand_tensor(rng, {d}, -1, 1);
        return {[noise, w, d](const Tensor& x) {
                    auto [mu, ls] = split_vec(x, d);
                    return sum(mul(sample_latent({mu, ls}, noise), w));
                },
                rand_tensor(rng, {2 * d}, -1, 1)};
    });

    // --- losses ---
    const LossWeights lw{};
    run("ce_loss", points, [](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4);
        return {[y](const Tensor& x) { return ce_loss(channel_softmax(x), y); },
                rand_tensor(rng, {2, 4, 4}, -2, 2)};
    });
    run("nr_loss", points, [](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4);
        return {[y](const Tensor& x) { return nr_loss(channel_softmax(x), y, 0.7); },
                rand_tensor(rng, {2, 4, 4}, -2, 2)};
    });
    run("tr_loss", points, [](Rng& rng) -> Case {
        return {[](const Tensor& x) { return tr_loss(normalize_columns(softplus(x))); },
                rand_tensor(rng, {2, 2, 4, 4}, -1, 1)};
    });
    run("kl_q_side", points, [](Rng& rng) -> Case {
        const int d = 3;
        GaussianDiag p{rand_tensor(rng, {d}, -1, 1), rand_tensor(rng, {d}, -0.5, 0.5)};
        return {[p, d](const Tensor& x) {
                    auto [mu, ls] = split_vec(x, d);
                    return kl_diag_gauss({mu, ls}, p);
                },
                rand_tensor(rng, {2 * d}, -1, 1)};
    });
    run("kl_p_side", points, [](Rng& rng) -> Case {
        const int d = 3;
        GaussianDiag q{rand_tensor(rng, {d}, -1, 1), rand_tensor(rng, {d}, -0.5, 0.5)};
        return {[q, d](const Tensor& x) {
                    auto [mu, ls] = split_vec(x, d);
                    return kl_diag_gauss(q, {mu, ls});
                },
                rand_tensor(rng, {2 * d}, -1, 1)};
    });

    auto fixture_field = [](Rng& rng) {
        return normalize_columns(softplus(rand_tensor(rng, {2, 2, 4, 4}, -1, 1)));
    };
    auto fixture_probs = [](Rng& rng) { return channel_softmax(rand_tensor(rng, {2, 4, 4}, -2, 2)); };
    auto fixture_gauss = [](Rng& rng) {
        return GaussianDiag{rand_tensor(rng, {3}, -1, 1), rand_tensor(rng, {3}, -0.5, 0.5)};
    };

    run("warmup_loss_logits", points, [&](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4), fld = fixture_field(rng);
        GaussianDiag q = fixture_gauss(rng), p = fixture_gauss(rng);
        return {[=](const Tensor& x) { return warmup_loss(channel_softmax(x), y, fld, q, p, lw); },
                rand_tensor(rng, {2, 4, 4}, -2, 2)};
    });
    run("warmup_loss_field", points, [&](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4), probs = fixture_probs(rng);
        GaussianDiag q = fixture_gauss(rng), p = fixture_gauss(rng);
        return {[=](const Tensor& x) {
                    return warmup_loss(probs, y, normalize_columns(softplus(x)), q, p, lw);
                },
                rand_tensor(rng, {2, 2, 4, 4}, -1, 1)};
    });
    run("warmup_loss_qdist", points, [&](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4), probs = fixture_probs(rng), fld = fixture_field(rng);
        GaussianDiag p = fixture_gauss(rng);
        return {[=](const Tensor& x) {
                    auto [mu, ls] = split_vec(x, 3);
                    return warmup_loss(probs, y, fld, {mu, ls}, p, lw);
                },
                rand_tensor(rng, {6}, -1, 1)};
    });
    run("warmup_loss_pdist", points, [&](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4), probs = fixture_probs(rng), fld = fixture_field(rng);
        GaussianDiag q = fixture_gauss(rng);
        return {[=](const Tensor& x) {
                    auto [mu, ls] = split_vec(x, 3);
                    return warmup_loss(probs, y, fld, q, {mu, ls}, lw);
                },
                rand_tensor(rng, {6}, -1, 1)};
    });
    run("total_loss_logits", points, [&](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4), fld = fixture_field(rng);
        GaussianDiag q = fixture_gauss(rng), p = fixture_gauss(rng);
        return {[=](const Tensor& x) {
                    Tensor probs = channel_softmax(x);
                    return total_loss(probs, apply_adaptation(fld, probs), y, fld, q, p, lw);
                },
                rand_tensor(rng, {2, 4, 4}, -2, 2)};
    });
    run("total_loss_field", points, [&](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4), probs = fixture_probs(rng);
        GaussianDiag q = fixture_gauss(rng), p = fixture_gauss(rng);
        return {[=](const Tensor& x) {
                    Tensor fld = normalize_columns(softplus(x));
                    return total_loss(probs, apply_adaptation(fld, probs), y, fld, q, p, lw);
                },
                rand_tensor(rng, {2, 2, 4, 4}, -1, 1)};
    });
    run("total_loss_qdist", points, [&](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4), probs = fixture_probs(rng), fld = fixture_field(rng);
        Tensor local = apply_adaptation(fld, probs);
        GaussianDiag p = fixture_gauss(rng);
        return {[=](const Tensor& x) {
                    auto [mu, ls] = split_vec(x, 3);
                    return total_loss(probs, local, y, fld, {mu, ls}, p, lw);
                },
                rand_tensor(rng, {6}, -1, 1)};
    });
    run("total_loss_pdist", points, [&](Rng& rng) -> Case {
        Tensor y = random_onehot(rng, 2, 4, 4), probs = fixture_probs(rng), fld = fixture_field(rng);
        Tensor local = apply_adaptation(fld, probs);
        GaussianDiag q = fixture_gauss(rng);
        return {[=](const Tensor& x) {
                    auto [mu, ls] = split_vec(x, 3);
                    return total_loss(probs, local, y, fld, q, {mu, ls}, lw);
                },
                rand_tensor(rng, {6}, -1, 1)};
    });

    // --- nets composed end-to-end on an 8x8 instance ---
    NetConfig small;
    small.height = 8;
    small.width = 8;
    small.latent_dim = 3;
    run("net_seg_da_adapt_image", 3, [small](Rng& rng) -> Case {
        Rng prng(rng.next_u64());
        ParameterSet theta_s = build_seg_params(small, prng);
        ParameterSet theta_p = build_da_params(small, prng, AdaptMode::image);
        Tensor z = rand_tensor(rng, {small.latent_dim}, -1, 1);
        Tensor w = rand_tensor(rng, {small.classes, 8, 8}, -1, 1);
        return {[=](const Tensor& x) {
                    Tensor f = forward_seg(small, theta_s, x, z);
                    Tensor fld = forward_da(small, theta_p, x, AdaptMode::image);
                    return sum(mul(apply_adaptation(fld, f), w));
                },
                rand_tensor(rng, {1, 8, 8}, -1, 1)};
    });
    run("net_seg_param", 3, [small](Rng& rng) -> Case {
        Rng prng(rng.next_u64());
        ParameterSet theta_s = build_seg_params(small, prng);
        Tensor z = rand_tensor(rng, {small.latent_dim}, -1, 1);
        Tensor img = rand_tensor(rng, {1, 8, 8}, -1, 1);
        Tensor w = rand_tensor(rng, {small.classes, 8, 8}, -1, 1);
        const std::string target = "seg.enc0.k";
        return {[=](const Tensor& x) {
                    ParameterSet ps;
                    for (const auto& [name, t] : theta_s)
                        ps.add(name, name == target ? x : t);
                    return sum(mul(forward_seg(small, ps, img, z), w));
                },
                theta_s.get(target).clone()};
    });

    return results;
}

// ---------------------------------------------------------------------------
// KL Monte-Carlo oracle
// ---------------------------------------------------------------------------

/// Closed-form KL vs E_q[log q - log p] over `samples` draws; returns the
/// worst absolute disagreement across `pairs` random Gaussian pairs.
inline CheckResult kl_mc_check(uint64_t seed, int pairs = 10, int samples = 1000000, int dim = 4) {
    Rng rng(mix_seed(seed, 0x415eull));
    double worst = 0.0;
    for (int i = 0; i < pairs; ++i) {
        // Ranges keep the worst-pair estimator std near 2e-3 at 1e6 samples
        // (per-dim variance a^2 b^2 + (b^2-1)^2/2 with a = dmu/sigma_p,
        // b = sigma_q/sigma_p), a 5-sigma margin against the 1e-2 tolerance.
        std::vector<double> muq(dim), lsq(dim), mup(dim), lsp(dim);
        for (int d = 0; d < dim; ++d) {
            muq[d] = rng.uniform(-0.25, 0.25);
            lsq[d] = rng.uniform(-0.15, 0.15);
            mup[d] = rng.uniform(-0.25, 0.25);
            lsp[d] = rng.uniform(-0.15, 0.15);
        }
        GaussianDiag q{Tensor::from_data({dim}, muq), Tensor::from_data({dim}, lsq)};
        GaussianDiag p{Tensor::from_data({dim}, mup), Tensor::from_data({dim}, lsp)};
        const double closed = kl_diag_gauss(q, p).value();

        double acc = 0.0;
        for (int s = 0; s < samples; ++s) {
            double ll_diff = 0.0;
            for (int d = 0; d < dim; ++d) {
                const double sq = std::exp(lsq[d]), sp = std::exp(lsp[d]);
                const double z = muq[d] + sq * rng.normal();
                const double tq = (z - muq[d]) / sq, tp = (z - mup[d]) / sp;
                ll_diff += (lsp[d] - lsq[d]) + 0.5 * (tp * tp - tq * tq);
            }
            acc += ll_diff;
        }
        worst = std::max(worst, std::abs(acc / samples - closed));
    }
    CheckResult r;
    r.name = "kl_monte_carlo";
    r.tol = 1e-2;
    r.measured = worst;
    r.pass = worst <= r.tol;
    return r;
}

// ---------------------------------------------------------------------------
// Aggregation exactness
// ---------------------------------------------------------------------------

inline std::vector<CheckResult> aggregation_check(uint64_t seed) {
    Rng rng(mix_seed(seed, 0xA66ull));
    std::vector<CheckResult> out;

    auto random_set = [&](double lo, double hi) {
        ParameterSet p;
        p.add("a", rand_tensor(rng, {3, 4}, lo, hi));
        p.add("b", rand_tensor(rng, {7}, lo, hi));
        p.add("c", rand_tensor(rng, {2, 2, 3, 3}, lo, hi));
        return p;
    };

    std::vector<ParameterSet> sets;
    std::vector<uint64_t> sizes{3, 12, 5, 4};
    for (int k = 0; k < 4; ++k) sets.push_back(random_set(-1.0, 1.0));
    ParameterSet agg = aggregate(sets, sizes);

    // Brute force straight from the definition, accumulated in extended
    // precision so the reference carries no rounding error of its own.
    long double total = 0.0L;
    for (auto s : sizes) total += static_cast<long double>(s);
    double worst = 0.0;
    for (const auto& [name, t] : agg) {
        for (size_t i = 0; i < t.data().size(); ++i) {
            long double s = 0.0L;
            for (size_t k = 0; k < sets.size(); ++k)
                s += static_cast<long double>(sizes[k]) *
                     static_cast<long double>(sets[k].get(name).data()[i]);
            worst = std::max(worst, std::abs(t.data()[i] - static_cast<double>(s / total)));
        }
    }
    out.push_back({"aggregate_vs_bruteforce", worst, 1e-15, worst <= 1e-15, ""});

    // Fixed point: identical inputs aggregate to themselves bitwise.
    std::vector<ParameterSet> same;
    for (int k = 0; k < 4; ++k) same.push_back(sets[0].clone());
    ParameterSet fp = aggregate(same, sizes);
    bool bitwise = true;
    for (const auto& [name, t] : fp)
        if (t.data() != sets[0].get(name).data()) bitwise = false;
    out.push_back({"aggregate_fixed_point_bitwise", bitwise ? 0.0 : 1.0, 0.0, bitwise, ""});

    // Affine equivariance: aggregate(a*x+b) == a*aggregate(x)+b.
    const double a = 2.5, b = -1.25;
    std::vector<ParameterSet> scaled;
    for (const auto& s : sets) {
        ParameterSet sc = s.clone();
        for (auto& [name, t] : sc)
            for (auto& v : t.data()) v = a * v + b;
        scaled.push_back(std::move(sc));
    }
    ParameterSet agg2 = aggregate(scaled, sizes);
    double worst_aff = 0.0;
    for (const auto& [name, t] : agg2)
        for (size_t i = 0; i < t.data().size(); ++i)
            worst_aff = std::max(worst_aff, std::abs(t.data()[i] - (a * agg.get(name).data()[i] + b)));
    out.push_back({"aggregate_affine_equivariance", worst_aff, 1e-12, worst_aff <= 1e-12, ""});

    return out;
}

// ---------------------------------------------------------------------------
// Morphology set-definition oracle
// ---------------------------------------------------------------------------

namespace morph_oracle {

/// Dilation by stamping the SE at every foreground pixel (Minkowski sum).
inline Mask dilate(const Mask& m, int r) {
    const auto off = disk_offsets(r);
    Mask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x)
            if (m.at(y, x))
                for (const auto& [dy, dx] : off) {
                    const int ny = y + dy, nx = x + dx;
                    if (ny >= 0 && ny < m.h && nx >= 0 && nx < m.w) out.at(ny, nx) = 1;
                }
    return out;
}

/// Erosion by counting: a pixel survives iff the number of foreground
/// neighbors under the SE equals the SE size (out-of-grid counts as 0).
inline Mask erode(const Mask& m, int r) {
    const auto off = disk_offsets(r);
    Mask out(m.h, m.w);
    for (int y = 0; y < m.h; ++y)
        for (int x = 0; x < m.w; ++x) {
            size_t hits = 0;
            for (const auto& [dy, dx] : off) hits += m.at_padded(y + dy, x + dx);
            out.at(y, x) = hits == off.size() ? 1 : 0;
        }
    return out;
}

inline Mask open_(const Mask& m, int r) { return morph_oracle::dilate(morph_oracle::erode(m, r), r); }
inline Mask close_(const Mask& m, int r) { return morph_oracle::erode(morph_oracle::dilate(m, r), r); }

}  // namespace morph_oracle

inline std::vector<CheckResult> morphology_check(uint64_t seed) {
    std::vector<CheckResult> out;

    // Exhaustive 4x4, r=1: 65536 grids, all four operators.
    {
        int failures = 0;
        for (uint32_t bits = 0; bits < 65536; ++bits) {
            Mask m(4, 4);
            for (int i = 0; i < 16; ++i) m.v[static_cast<size_t>(i)] = (bits >> i) & 1;
            if (!(erode(m, 1) == morph_oracle::erode(m, 1)) ||
                !(dilate(m, 1) == morph_oracle::dilate(m, 1)) ||
                !(opening(m, 1) == morph_oracle::open_(m, 1)) ||
                !(closing(m, 1) == morph_oracle::close_(m, 1)))
                ++failures;
        }
        out.push_back({"morphology_4x4_exhaustive", static_cast<double>(failures), 0.0,
                       failures == 0, "failing grids"});
    }

    // Properties on random 32x32 grids.
    {
        Rng rng(mix_seed(seed, 0x306full));
        int failures = 0;
        const int n = 1000;
        for (int i = 0; i < n; ++i) {
            Mask m(32, 32);
            const double density = rng.uniform(0.2, 0.8);
            for (auto& v : m.v) v = rng.uniform() < density ? 1 : 0;
            const int r = 1 + (i % 2);

            if (!subset_of(erode(m, r), m)) ++failures;
            if (!subset_of(m, dilate(m, r))) ++failures;
            Mask o = opening(m, r), c = closing(m, r);
            if (!(opening(o, r) == o)) ++failures;
            if (!(closing(c, r) == c)) ++failures;

            // Duality needs true set semantics, so compare away from the
            // border: pad by 2r and check the original window only.
            Mask p = pad_background(m, 2 * r);
            Mask lhs = crop(dilate(p, r), 2 * r, 2 * r, 32, 32);
            Mask rhs = crop(complement(erode(complement(p), r)), 2 * r, 2 * r, 32, 32);
            if (!(lhs == rhs)) ++failures;
        }
        out.push_back({"morphology_properties_32x32", static_cast<double>(failures), 0.0,
                       failures == 0, "failing property instances"});
    }
    return out;
}

/// Negative control for the checker itself: a 3x3 convolution whose recorded
/// backward pass keeps the forward tap orientation instead of transposing it.
/// The property passes only when grad_check reports a LARGE error — a checker
/// that accepts this gradient is broken.
inline CheckResult detector_check(uint64_t seed) {
    Rng rng(mix_seed(seed, 0xBADull));
    Tensor kernel = rand_tensor(rng, {3, 3}, -1.0, 1.0);
    kernel.data()[1] += 2.0;  // strongly asymmetric: flipped taps cannot agree

    auto bad_conv = [kernel](const Tensor& x) {
        const int h = x.shape()[1], w = x.shape()[2];
        Tensor out({1, h, w});
        for (int y = 0; y < h; ++y)
            for (int c = 0; c < w; ++c) {
                double acc = 0.0;
                for (int ky = 0; ky < 3; ++ky)
                    for (int kx = 0; kx < 3; ++kx) {
                        const int sy = y + ky - 1, sx = c + kx - 1;
                        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                        acc += kernel.data()[static_cast<size_t>(ky) * 3 + kx] *
                               x.data()[static_cast<size_t>(sy) * w + sx];
                    }
                out.data()[static_cast<size_t>(y) * w + c] = acc;
            }
        if (detail::tracing(x)) {
            out.set_requires_grad(true);
            auto xn = x.node(), on = out.node();
            Tape::active()->record([xn, on, kernel, h, w] {
                const auto* go = detail::out_grad(on);
                if (!go) return;
                auto* g = Tensor::grad_buf(xn);
                for (int y = 0; y < h; ++y)
                    for (int c = 0; c < w; ++c) {
                        double acc = 0.0;
                        for (int ky = 0; ky < 3; ++ky)
                            for (int kx = 0; kx < 3; ++kx) {
                                const int sy = y + ky - 1, sx = c + kx - 1;
                                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                                acc += kernel.data()[static_cast<size_t>(ky) * 3 + kx] *
                                       (*go)[static_cast<size_t>(sy) * w + sx];
                            }
                        (*g)[static_cast<size_t>(y) * w + c] += acc;
                    }
            });
        }
        return out;
    };

    Tensor x0 = rand_tensor(rng, {1, 4, 4}, -1.0, 1.0);
    // Per-pixel weighting: under a plain sum the two tap orientations agree in
    // the interior and the bug would go unseen.
    Tensor wgt = rand_tensor(rng, {1, 4, 4}, 0.5, 1.5);
    const double err = grad_check([&](const Tensor& t) { return sum(mul(bad_conv(t), wgt)); }, x0);

    CheckResult r;
    r.name = "grad/wrong_conv_gradient_detected";
    r.measured = err;
    r.tol = 1e-2;
    r.pass = err > r.tol;
    r.note = "negative control; pass requires error above tol";
    return r;
}

}  // namespace selfcheck

/// Full verification suite, as run by the selftest command: the gradient
/// registry with its negative control, the KL Monte-Carlo oracle, aggregation
/// exactness, and the morphology oracle.
inline std::vector<CheckResult> run_selfcheck(uint64_t seed, int grad_points = 20) {
    std::vector<CheckResult> all = selfcheck::gradcheck_suite(seed, grad_points);
    all.push_back(selfcheck::detector_check(seed));
    all.push_back(selfcheck::kl_mc_check(seed));
    for (auto& r : selfcheck::aggregation_check(seed)) all.push_back(r);
    for (auto& r : selfcheck::morphology_check(seed)) all.push_back(r);
    return all;
}

}  // namespace swarmseg
