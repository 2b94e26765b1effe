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

#include <string>
#include <vector>

#include <swarmseg/eval.hpp>

using namespace swarmseg;

namespace {

NetConfig tiny_net() {
    NetConfig cfg;
    cfg.classes = 2;
    cfg.latent_dim = 3;
    cfg.base_channels = 4;
    cfg.depth = 2;
    cfg.height = 16;
    cfg.width = 16;
    return cfg;
}

SegSample empty_label_sample(Rng& rng, int h, int w, const std::string& id) {
    SegSample s;
    s.image = Tensor({1, h, w});
    for (auto& v : s.image.data()) v = rng.uniform(-1.0, 1.0);
    s.label = Mask(h, w);
    s.clean_label = Mask(h, w);
    s.case_id = id;
    return s;
}

/// A federation whose every test label is empty, plus model states whose head
/// bias saturates toward the background class. Every prediction is then the
/// empty mask and every Dice is exactly 1 — a known-answer fixture for the
/// whole evaluation path.
struct OracleFixture {
    NetConfig cfg = tiny_net();
    FederationData fed;
    ExperimentHistory run;

    explicit OracleFixture(Method method, int centers = 2) {
        fed.height = cfg.height;
        fed.width = cfg.width;
        Rng rng(614);
        for (int k = 0; k < centers; ++k) {
            CenterData cd;
            cd.spec.center_id = k;
            for (int i = 0; i < 2; ++i)
                cd.local_test.push_back(
                    empty_label_sample(rng, cfg.height, cfg.width,
                                       "local_" + std::to_string(k) + "_" + std::to_string(i)));
            fed.centers.push_back(cd);
        }
        for (int i = 0; i < 3; ++i)
            fed.generic_test.push_back(
                empty_label_sample(rng, cfg.height, cfg.width, "gen_" + std::to_string(i)));

        run.method = method;
        for (int k = 0; k < centers; ++k) {
            CenterState st;
            st.center_id = k;
            st.local_test_data = fed.centers[static_cast<size_t>(k)].local_test;
            Rng init(mix_seed(1, 0x1217ull));
            st.theta_s = build_seg_params(cfg, init);
            st.theta_s.get("seg.head.b").data() = {20.0, -20.0};
            st.rebuild_views();
            run.centers.push_back(std::move(st));
        }
    }
};

}  // namespace

TEST_CASE("summarize computes population statistics") {
    EvalRow r = detail::summarize("task2", "0", {1.0, 0.5});
    REQUIRE(r.n_cases == 2);
    REQUIRE(r.mean_dice == Catch::Approx(0.75).margin(1e-15));
    REQUIRE(r.std_dice == Catch::Approx(0.25).margin(1e-15));

    EvalRow one = detail::summarize("task1", "global", {0.8});
    REQUIRE(one.std_dice == 0.0);

    REQUIRE_THROWS_AS(detail::summarize("task1", "global", {}), ValidationError);
}

TEST_CASE("report row lookup and serialization") {
    EvalReport rep;
    rep.method = "ours";
    rep.seed = 9;
    rep.config_digest = "deadbeefdeadbeef";
    rep.rows.push_back(detail::summarize("task1", "global", {1.0, 0.5}));
    rep.rows.push_back(detail::summarize("task2", "0", {0.25, 0.75}));

    REQUIRE(rep.row("task1", "global").n_cases == 2);
    REQUIRE(rep.row("task2", "0").mean_dice == Catch::Approx(0.5));
    REQUIRE_THROWS_AS(rep.row("task2", "7"), ValidationError);

    const std::string csv = rep.to_csv();
    REQUIRE(csv.rfind("schema_version,method,seed,task,center,n_cases,mean_dice,std_dice,"
                      "config_digest\n",
                      0) == 0);
    size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    REQUIRE(lines == 3);
    REQUIRE(csv.find("1,ours,9,task1,global,2,") != std::string::npos);
    REQUIRE(csv.find("deadbeefdeadbeef") != std::string::npos);

    const nlohmann::json j = rep.to_json();
    REQUIRE(j["schema_version"] == 1);
    REQUIRE(j["method"] == "ours");
    REQUIRE(j["seed"] == 9);
    REQUIRE(j["rows"].size() == 2);
    REQUIRE(j["rows"][0]["task"] == "task1");
}

TEST_CASE("oracle fixture scores all-ones Dice everywhere") {
    OracleFixture fx(Method::swarm_plain);
    PredictOptions opt;
    EvalReport rep = evaluate(fx.cfg, fx.run, fx.fed, opt, 5, "0123456789abcdef");

    REQUIRE(rep.method == "swarm_plain");
    REQUIRE(rep.rows.size() == 3);  // task1/global + one task2 row per center
    const EvalRow& t1 = rep.row("task1", "global");
    REQUIRE(t1.n_cases == 3);
    REQUIRE(t1.mean_dice == 1.0);
    REQUIRE(t1.std_dice == 0.0);
    for (const std::string& c : {std::string("0"), std::string("1")}) {
        const EvalRow& t2 = rep.row("task2", c);
        REQUIRE(t2.n_cases == 2);
        REQUIRE(t2.mean_dice == 1.0);
        REQUIRE(t2.std_dice == 0.0);
    }
}

TEST_CASE("single-center evaluation pools the generic scores") {
    OracleFixture fx(Method::single);
    PredictOptions opt;
    EvalReport rep = evaluate(fx.cfg, fx.run, fx.fed, opt, 5, "d");

    const EvalRow& pooled = rep.row("task1", "pooled");
    REQUIRE(pooled.n_cases == 2 * 3);  // K models x generic cases
    REQUIRE(pooled.mean_dice == 1.0);
    REQUIRE_THROWS_AS(rep.row("task1", "global"), ValidationError);
}

TEST_CASE("evaluation is deterministic") {
    OracleFixture fx(Method::swarm_plain);
    PredictOptions opt;
    EvalReport a = evaluate(fx.cfg, fx.run, fx.fed, opt, 42, "x");
    EvalReport b = evaluate(fx.cfg, fx.run, fx.fed, opt, 42, "x");
    REQUIRE(a.to_csv() == b.to_csv());
    REQUIRE(a.to_json() == b.to_json());
}

TEST_CASE("evaluation input validation") {
    OracleFixture fx(Method::swarm_plain);
    PredictOptions opt;

    ExperimentHistory no_centers;
    no_centers.method = Method::swarm_plain;
    REQUIRE_THROWS_AS(evaluate(fx.cfg, no_centers, fx.fed, opt, 1, "x"), ValidationError);

    FederationData no_generic = fx.fed;
    no_generic.generic_test.clear();
    REQUIRE_THROWS_AS(evaluate(fx.cfg, fx.run, no_generic, opt, 1, "x"), ValidationError);
}
