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

#include <cstdio>
#include <filesystem>
#include <string>

#include <swarmseg/config.hpp>

using namespace swarmseg;

TEST_CASE("default config validates and resolves four centers") {
    ExperimentConfig cfg;
    REQUIRE_NOTHROW(cfg.validate());

    auto specs = cfg.resolved_centers();
    REQUIRE(specs.size() == 4);
    for (size_t k = 0; k < specs.size(); ++k) REQUIRE(specs[k].center_id == static_cast<int>(k));
    REQUIRE(specs[2].label_skew == LabelSkew::open_erode);
    REQUIRE(specs[3].label_skew == LabelSkew::close_dilate);

    // Explicit centers take precedence over the default roster.
    cfg.centers.push_back(CenterSpec{});
    REQUIRE(cfg.resolved_centers().size() == 1);
}

TEST_CASE("config validation failures") {
    ExperimentConfig cfg;
    cfg.method = "quantum";
    REQUIRE_THROWS_AS(cfg.validate(), ValidationError);

    cfg = ExperimentConfig{};
    cfg.jobs = 0;
    REQUIRE_THROWS_AS(cfg.validate(), ValidationError);

    cfg = ExperimentConfig{};
    cfg.out_dir = "";
    REQUIRE_THROWS_AS(cfg.validate(), ValidationError);

    cfg = ExperimentConfig{};
    cfg.centers.resize(2);  // both center_id 0
    REQUIRE_THROWS_AS(cfg.validate(), ValidationError);

    cfg = ExperimentConfig{};
    cfg.net.height = 30;  // not divisible by 2^depth
    REQUIRE_THROWS_AS(cfg.validate(), ValidationError);

    // Center radius caps depend on the image size.
    cfg = ExperimentConfig{};
    cfg.centers.resize(1);
    cfg.centers[0].r_hi = 5;
    REQUIRE_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("JSON round trip preserves every field") {
    ExperimentConfig cfg;
    cfg.seed = 99;
    cfg.net.height = 64;
    cfg.net.width = 64;
    cfg.net.latent_dim = 5;
    cfg.weights.alpha = 0.02;
    cfg.weights.q = 0.5;
    cfg.schedule.rounds = 7;
    cfg.schedule.augment = false;
    cfg.data.n_generic = 6;
    cfg.method = "fixed_adapt";
    cfg.out_dir = "elsewhere";
    cfg.eval.samples = 9;
    cfg.eval.mean_latent = true;
    cfg.jobs = 3;
    cfg.log_messages = true;
    CenterSpec s;
    s.center_id = 4;
    s.gamma = 1.5;
    s.label_skew = LabelSkew::close_dilate;
    s.r_lo = 2;
    s.r_hi = 3;
    cfg.centers.push_back(s);

    ExperimentConfig back = config_from_json(config_to_json(cfg));
    REQUIRE(config_canonical_dump(back) == config_canonical_dump(cfg));
    REQUIRE(back.seed == 99);
    REQUIRE(back.net.height == 64);
    REQUIRE(back.weights.q == 0.5);
    REQUIRE(back.schedule.rounds == 7);
    REQUIRE(back.schedule.augment == false);
    REQUIRE(back.method == "fixed_adapt");
    REQUIRE(back.eval.mean_latent == true);
    REQUIRE(back.centers.size() == 1);
    REQUIRE(back.centers[0].center_id == 4);
    REQUIRE(back.centers[0].label_skew == LabelSkew::close_dilate);
    REQUIRE(back.centers[0].r_hi == 3);
}

TEST_CASE("absent keys keep defaults") {
    ExperimentConfig cfg = config_from_json(nlohmann::json::parse(R"({"seed": 5})"));
    REQUIRE(cfg.seed == 5);
    REQUIRE(cfg.method == "ours");
    REQUIRE(cfg.net.height == 32);
    REQUIRE(cfg.schedule.rounds == 60);
    REQUIRE(cfg.centers.empty());

    ExperimentConfig nested =
        config_from_json(nlohmann::json::parse(R"({"schedule": {"rounds": 3}})"));
    REQUIRE(nested.schedule.rounds == 3);
    REQUIRE(nested.schedule.local_epochs == 2);  // untouched sibling
}

TEST_CASE("load_config reads files and rejects malformed JSON") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "swarmseg_test_config";
    fs::create_directories(dir);

    const fs::path good = dir / "good.json";
    write_text(good, R"({"seed": 11, "method": "single"})");
    ExperimentConfig cfg = load_config(good);
    REQUIRE(cfg.seed == 11);
    REQUIRE(cfg.method == "single");

    const fs::path bad = dir / "bad.json";
    write_text(bad, "{not json");
    REQUIRE_THROWS_AS(load_config(bad), ValidationError);

    REQUIRE_THROWS_AS(load_config(dir / "absent.json"), IoError);

    fs::remove_all(dir);
}

TEST_CASE("config digest is stable and sensitive") {
    ExperimentConfig a, b;
    REQUIRE(config_digest(a) == config_digest(b));
    REQUIRE(config_digest(a).size() == 16);

    b.seed = 2;
    REQUIRE(config_digest(a) != config_digest(b));

    b = ExperimentConfig{};
    b.weights.alpha = 0.011;
    REQUIRE(config_digest(a) != config_digest(b));

    // The canonical dump is key-sorted, so logically equal configs built in
    // different ways agree.
    ExperimentConfig c = config_from_json(config_to_json(a));
    REQUIRE(config_digest(c) == config_digest(a));
}
