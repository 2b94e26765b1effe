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
#include <cstdint>
#include <cstring>
#include <set>
#include <string>
#include <vector>

#include <swarmseg/synthdata.hpp>

using namespace swarmseg;

namespace {

constexpr int kH = 32, kW = 32;

bool images_bit_equal(const Tensor& a, const Tensor& b) {
    return a.shape() == b.shape() &&
           std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

bool samples_identical(const SegSample& a, const SegSample& b) {
    return a.case_id == b.case_id && a.label == b.label && a.clean_label == b.clean_label &&
           images_bit_equal(a.image, b.image);
}

void check_zscored(const Tensor& img) {
    double mean = 0.0;
    for (double v : img.data()) mean += v;
    mean /= static_cast<double>(img.numel());
    double var = 0.0;
    for (double v : img.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(img.numel());
    REQUIRE(std::abs(mean) < 1e-9);
    REQUIRE(std::abs(std::sqrt(var) - 1.0) < 1e-9);
}

}  // namespace

TEST_CASE("config validation") {
    REQUIRE_NOTHROW(DataConfig{}.validate());
    DataConfig bad;
    bad.n_train = 0;
    REQUIRE_THROWS_AS(bad.validate(), ValidationError);
    bad = DataConfig{};
    bad.protrusion_len_min = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), ValidationError);

    CenterSpec spec;
    REQUIRE_NOTHROW(spec.validate(kH, kW));
    spec.gamma = 0.0;
    REQUIRE_THROWS_AS(spec.validate(kH, kW), ValidationError);
    spec = CenterSpec{};
    spec.r_hi = 5;  // disk radius capped at min(h,w)/8 = 4
    REQUIRE_THROWS_AS(spec.validate(kH, kW), ValidationError);
    spec = CenterSpec{};
    REQUIRE_NOTHROW(spec.validate(kH, kW));
    spec.r_lo = 3;
    spec.r_hi = 2;
    REQUIRE_THROWS_AS(spec.validate(kH, kW), ValidationError);
}

TEST_CASE("generate_case produces plausible z-scored cases") {
    DataConfig cfg;
    Rng rng(404);
    for (int i = 0; i < 20; ++i) {
        SegSample s = generate_case(rng, kH, kW, cfg);
        REQUIRE(s.image.shape() == std::vector<int>{1, kH, kW});
        REQUIRE(s.label == s.clean_label);
        const int64_t fg = s.label.count();
        REQUIRE(fg >= 8);
        REQUIRE(fg <= static_cast<int64_t>(kH) * kW * 3 / 4);
        check_zscored(s.image);
    }
}

TEST_CASE("default federation layout") {
    DataConfig cfg;
    FederationData fed = build_federation_data(default_center_specs(cfg), kH, kW, cfg, 5);

    REQUIRE(fed.height == kH);
    REQUIRE(fed.width == kW);
    REQUIRE(fed.centers.size() == 4);
    REQUIRE(fed.generic_test.size() == 24);
    for (size_t k = 0; k < fed.centers.size(); ++k) {
        const CenterData& cd = fed.centers[k];
        REQUIRE(cd.spec.center_id == static_cast<int>(k));
        REQUIRE(cd.train.size() == 12);
        REQUIRE(cd.local_test.size() == 4);
        for (const SegSample& s : cd.train) {
            REQUIRE(s.image.shape() == std::vector<int>{1, kH, kW});
            check_zscored(s.image);
        }
    }

    // Case ids are unique across the whole federation.
    std::set<std::string> ids;
    size_t total = 0;
    for (const CenterData& cd : fed.centers) {
        for (const SegSample& s : cd.train) { ids.insert(s.case_id); ++total; }
        for (const SegSample& s : cd.local_test) { ids.insert(s.case_id); ++total; }
    }
    for (const SegSample& s : fed.generic_test) { ids.insert(s.case_id); ++total; }
    REQUIRE(ids.size() == total);
    REQUIRE(total == 4 * (12 + 4) + 24);
}

TEST_CASE("federation generation is bitwise deterministic in the seed") {
    DataConfig cfg;
    cfg.n_train = 3;
    cfg.n_local_test = 2;
    cfg.n_generic = 4;
    auto specs = default_center_specs(cfg);

    FederationData a = build_federation_data(specs, kH, kW, cfg, 77);
    FederationData b = build_federation_data(specs, kH, kW, cfg, 77);
    FederationData c = build_federation_data(specs, kH, kW, cfg, 78);

    for (size_t k = 0; k < a.centers.size(); ++k) {
        for (size_t i = 0; i < a.centers[k].train.size(); ++i)
            REQUIRE(samples_identical(a.centers[k].train[i], b.centers[k].train[i]));
        for (size_t i = 0; i < a.centers[k].local_test.size(); ++i)
            REQUIRE(samples_identical(a.centers[k].local_test[i], b.centers[k].local_test[i]));
    }
    for (size_t i = 0; i < a.generic_test.size(); ++i)
        REQUIRE(samples_identical(a.generic_test[i], b.generic_test[i]));

    REQUIRE(!images_bit_equal(a.centers[0].train[0].image, c.centers[0].train[0].image));
}

TEST_CASE("label skews act in the advertised direction") {
    DataConfig cfg;
    cfg.n_train = 6;
    cfg.n_local_test = 3;
    cfg.n_generic = 1;
    FederationData fed = build_federation_data(default_center_specs(cfg), kH, kW, cfg, 99);

    auto all_samples = [](const CenterData& cd) {
        std::vector<SegSample> v = cd.train;
        v.insert(v.end(), cd.local_test.begin(), cd.local_test.end());
        return v;
    };

    // Centers 0 and 1: feature skew only, labels untouched.
    for (int k : {0, 1})
        for (const SegSample& s : all_samples(fed.centers[static_cast<size_t>(k)]))
            REQUIRE(s.label == s.clean_label);

    // Center 2 (open+erode): corrupted labels shrink; at least one case truly
    // differs from its clean label.
    bool changed = false;
    for (const SegSample& s : all_samples(fed.centers[2])) {
        REQUIRE(subset_of(s.label, s.clean_label));
        REQUIRE(s.label.count() > 0);
        if (!(s.label == s.clean_label)) changed = true;
    }
    REQUIRE(changed);

    // Center 3 (close+dilate): corrupted labels grow.
    changed = false;
    for (const SegSample& s : all_samples(fed.centers[3])) {
        REQUIRE(subset_of(s.clean_label, s.label));
        if (!(s.label == s.clean_label)) changed = true;
    }
    REQUIRE(changed);

    // Generic pool keeps clean labels.
    for (const SegSample& s : fed.generic_test) REQUIRE(s.label == s.clean_label);
}

TEST_CASE("train split corruption is at least as strong as test split") {
    // With a fixed random radius the train pipeline applies an extra erode
    // (resp. dilate) on top of the deterministic opening (resp. closing).
    DataConfig cfg;
    Rng gen_rng(1234);
    SegSample clean = generate_case(gen_rng, kH, kW, cfg);

    CenterSpec spec;
    spec.label_skew = LabelSkew::open_erode;
    Rng r1(5), r2(5);
    SegSample train = apply_center_skew(clean, spec, r1, Split::train);
    SegSample test = apply_center_skew(clean, spec, r2, Split::test);
    REQUIRE(subset_of(train.label, test.label));
    REQUIRE(subset_of(test.label, clean.clean_label));

    spec.label_skew = LabelSkew::close_dilate;
    Rng r3(5), r4(5);
    SegSample train2 = apply_center_skew(clean, spec, r3, Split::train);
    SegSample test2 = apply_center_skew(clean, spec, r4, Split::test);
    REQUIRE(subset_of(test2.label, train2.label));
    REQUIRE(subset_of(clean.clean_label, test2.label));
}

TEST_CASE("morphology dispatch") {
    Mask m(8, 8);
    for (int y = 2; y <= 5; ++y)
        for (int x = 2; x <= 5; ++x) m.at(y, x) = 1;
    REQUIRE(morphology(m, "erode", 1) == erode(m, 1));
    REQUIRE(morphology(m, "dilate", 1) == dilate(m, 1));
    REQUIRE(morphology(m, "open", 1) == opening(m, 1));
    REQUIRE(morphology(m, "close", 1) == closing(m, 1));
    REQUIRE_THROWS_AS(morphology(m, "blur", 1), ValidationError);
}

TEST_CASE("augment permutes pixels jointly and deterministically") {
    DataConfig cfg;
    Rng gen_rng(2024);
    SegSample s = generate_case(gen_rng, kH, kW, cfg);
    s.case_id = "case_x";

    Rng a1(9), a2(9);
    SegSample out1 = augment(s, a1);
    SegSample out2 = augment(s, a2);
    REQUIRE(samples_identical(out1, out2));
    REQUIRE(out1.case_id == "case_x");

    // Rotation/flip preserve mask cardinality, and label/clean_label move
    // through the same permutation.
    REQUIRE(out1.label.count() == s.label.count());
    REQUIRE(out1.clean_label.count() == s.clean_label.count());
    REQUIRE(out1.label == out1.clean_label);

    // Image noise is applied after the permutation: sorting both pixel sets
    // is not exact equality, but values stay close to a permutation of the
    // originals (sigma = 0.02).
    std::vector<double> orig(s.image.data()), moved(out1.image.data());
    std::sort(orig.begin(), orig.end());
    std::sort(moved.begin(), moved.end());
    double max_gap = 0.0;
    for (size_t i = 0; i < orig.size(); ++i)
        max_gap = std::max(max_gap, std::abs(orig[i] - moved[i]));
    REQUIRE(max_gap < 0.25);

    SegSample tall;
    tall.image = Tensor({1, 4, 8});
    tall.label = Mask(4, 8);
    tall.clean_label = Mask(4, 8);
    Rng a3(1);
    REQUIRE_THROWS_AS(augment(tall, a3), ValidationError);
}

TEST_CASE("build_federation_data rejects duplicate center ids") {
    DataConfig cfg;
    auto specs = default_center_specs(cfg);
    specs[1].center_id = 0;
    REQUIRE_THROWS_AS(build_federation_data(specs, kH, kW, cfg, 1), ValidationError);
    REQUIRE_THROWS_AS(build_federation_data({}, kH, kW, cfg, 1), ValidationError);
}
