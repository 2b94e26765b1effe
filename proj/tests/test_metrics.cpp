// Copyright 2026 The swarmseg Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include <swarmseg/metrics.hpp>

using namespace swarmseg;

namespace {

NetConfig tiny_config() {
    NetConfig cfg;
    cfg.classes = 2;
    cfg.latent_dim = 3;
    cfg.base_channels = 4;
    cfg.depth = 2;
    cfg.height = 8;
    cfg.width = 8;
    return cfg;
}

Tensor random_image(Rng& rng, const NetConfig& cfg) {
    Tensor x({1, cfg.height, cfg.width});
    for (auto& v : x.data()) v = rng.uniform(-1.0, 1.0);
    return x;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("dice against hand-computed values") {
    Mask pred(2, 2), gt(2, 2);
    pred.at(0, 0) = 1; pred.at(0, 1) = 1;
    gt.at(0, 0) = 1;   gt.at(1, 0) = 1;
    REQUIRE(dice(pred, gt) == Catch::Approx(0.5).margin(1e-15));  // 2*1 / (2+2)

    REQUIRE(dice(gt, gt) == 1.0);

    Mask empty(2, 2);
    REQUIRE(dice(empty, empty) == 1.0);   // both raters agree there is nothing
    REQUIRE(dice(empty, gt) == 0.0);
    REQUIRE(dice(gt, empty) == 0.0);

    Mask disjoint(2, 2);
    disjoint.at(1, 1) = 1;
    REQUIRE(dice(disjoint, gt) == 0.0);

    REQUIRE_THROWS_AS(dice(Mask(2, 2), Mask(2, 3)), ShapeError);
}

TEST_CASE("argmax_mask picks the strict per-pixel winner") {
    Tensor probs = Tensor::from_data({2, 1, 3}, {0.6, 0.5, 0.2,
                                                 0.4, 0.5, 0.8});
    Mask m = argmax_mask(probs);
    REQUIRE(m.at(0, 0) == 0);  // class 0 wins
    REQUIRE(m.at(0, 1) == 0);  // exact tie goes to the background
    REQUIRE(m.at(0, 2) == 1);

    Tensor three = Tensor::from_data({3, 1, 1}, {0.2, 0.5, 0.3});
    REQUIRE(argmax_mask(three).at(0, 0) == 1);

    REQUIRE_THROWS_AS(argmax_mask(Tensor({2, 4})), ShapeError);
}

TEST_CASE("PredictOptions validation") {
    PredictOptions opt;
    REQUIRE_NOTHROW(opt.validate());
    opt.samples = 0;
    REQUIRE_THROWS_AS(opt.validate(), ValidationError);
}

TEST_CASE("predict_global is deterministic given the RNG state") {
    NetConfig cfg = tiny_config();
    Rng init(3);
    ParameterSet theta_s = build_seg_params(cfg, init);
    ParameterSet psi = build_prior_params(cfg, init);
    Tensor image = random_image(init, cfg);
    PredictOptions opt;

    Rng r1(42), r2(42), r3(43);
    Tensor p1 = predict_global(cfg, theta_s, &psi, image, opt, r1);
    Tensor p2 = predict_global(cfg, theta_s, &psi, image, opt, r2);
    Tensor p3 = predict_global(cfg, theta_s, &psi, image, opt, r3);
    REQUIRE(bit_equal(p1, p2));
    REQUIRE(!bit_equal(p1, p3));
    REQUIRE(p1.shape() == std::vector<int>{cfg.classes, cfg.height, cfg.width});

    // The averaged output is still a per-pixel simplex.
    const int hw = cfg.height * cfg.width;
    for (int p = 0; p < hw; ++p) {
        double s = 0.0;
        for (int c = 0; c < cfg.classes; ++c) s += p1.data()[static_cast<size_t>(c * hw + p)];
        REQUIRE(std::abs(s - 1.0) < 1e-12);
    }
}

TEST_CASE("predict_global without a prior ignores the RNG") {
    NetConfig cfg = tiny_config();
    Rng init(5);
    ParameterSet theta_s = build_seg_params(cfg, init);
    Tensor image = random_image(init, cfg);
    PredictOptions opt;

    Rng r(1000);
    Tensor p = predict_global(cfg, theta_s, nullptr, image, opt, r);
    REQUIRE(r.next_u64() == Rng(1000).next_u64());  // no draws consumed

    // Equal to a single zero-latent pass.
    Tensor direct = forward_seg(cfg, theta_s, image, Tensor::zeros({cfg.latent_dim}));
    REQUIRE(bit_equal(p, direct));
}

TEST_CASE("mean-latent prediction bypasses sampling") {
    NetConfig cfg = tiny_config();
    Rng init(7);
    ParameterSet theta_s = build_seg_params(cfg, init);
    ParameterSet psi = build_prior_params(cfg, init);
    Tensor image = random_image(init, cfg);

    PredictOptions opt;
    opt.mean_latent = true;
    Rng r(11);
    Tensor p = predict_global(cfg, theta_s, &psi, image, opt, r);
    REQUIRE(r.next_u64() == Rng(11).next_u64());

    GaussianDiag prior = forward_prior(cfg, psi, image);
    Tensor direct = forward_seg(cfg, theta_s, image, prior.mu);
    REQUIRE(bit_equal(p, direct));
}

TEST_CASE("predict_local with an identity field reproduces predict_global") {
    NetConfig cfg = tiny_config();
    Rng init(13);
    ParameterSet theta_s = build_seg_params(cfg, init);
    ParameterSet psi = build_prior_params(cfg, init);
    Tensor image = random_image(init, cfg);

    // Saturated diagonal raw weights: the adaptation field is the identity at
    // every pixel to roughly 1e-17 after SoftPlus + normalization.
    ParameterSet theta_p = build_da_params(cfg, init, AdaptMode::fixed);
    Tensor& raw = theta_p.get("da.fixed");
    const int hw = cfg.height * cfg.width;
    for (int i = 0; i < cfg.classes; ++i)
        for (int j = 0; j < cfg.classes; ++j)
            for (int p = 0; p < hw; ++p)
                raw.data()[static_cast<size_t>((i * cfg.classes + j) * hw + p)] =
                    (i == j) ? 37.0 : -50.0;

    PredictOptions opt;
    opt.samples = 4;
    // Both paths consume S x D standard normals in identical order, so two
    // same-seeded generators see the same latents.
    Rng rg(21), rl(21);
    Tensor pg = predict_global(cfg, theta_s, &psi, image, opt, rg);
    Tensor pl = predict_local(cfg, theta_s, psi, theta_p, AdaptMode::fixed, image, opt, rl);

    REQUIRE(pg.shape() == pl.shape());
    double max_diff = 0.0;
    for (int64_t i = 0; i < pg.numel(); ++i)
        max_diff = std::max(max_diff, std::abs(pg.data()[i] - pl.data()[i]));
    REQUIRE(max_diff < 1e-12);
}

TEST_CASE("predict_local output stays on the simplex for a real DA net") {
    NetConfig cfg = tiny_config();
    Rng init(17);
    ParameterSet theta_s = build_seg_params(cfg, init);
    ParameterSet psi = build_prior_params(cfg, init);
    ParameterSet theta_p = build_da_params(cfg, init, AdaptMode::distribution);
    Tensor image = random_image(init, cfg);

    PredictOptions opt;
    Rng r(23);
    Tensor p = predict_local(cfg, theta_s, psi, theta_p, AdaptMode::distribution, image, opt, r);
    const int hw = cfg.height * cfg.width;
    for (int q = 0; q < hw; ++q) {
        double s = 0.0;
        for (int c = 0; c < cfg.classes; ++c) {
            const double v = p.data()[static_cast<size_t>(c * hw + q)];
            REQUIRE(v >= -1e-15);
            s += v;
        }
        REQUIRE(std::abs(s - 1.0) < 1e-9);
    }
}
