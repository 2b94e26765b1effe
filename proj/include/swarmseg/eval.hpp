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
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "swarmseg/common.hpp"
#include "swarmseg/metrics.hpp"
#include "swarmseg/swarm.hpp"

namespace swarmseg {

struct EvalRow {
    std::string task;    // "task1" (generic) or "task2" (local)
    std::string center;  // center id, or "global"/"pooled" for task1
    int n_cases = 0;
    double mean_dice = 0.0;
    double std_dice = 0.0;  // population std over cases
};

struct EvalReport {
    int schema_version = 1;
    std::string method;
    uint64_t seed = 0;
    std::string config_digest;
    std::vector<EvalRow> rows;

    const EvalRow& row(const std::string& task, const std::string& center) const {
        for (const auto& r : rows)
            if (r.task == task && r.center == center) return r;
        throw ValidationError("EvalReport: no row for " + task + "/" + center);
    }

    std::string to_csv() const {
        std::string out =
            "schema_version,method,seed,task,center,n_cases,mean_dice,std_dice,config_digest\n";
        char buf[320];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof(buf), "%d,%s,%llu,%s,%s,%d,%.17g,%.17g,%s\n", schema_version,
                          method.c_str(), static_cast<unsigned long long>(seed), r.task.c_str(),
                          r.center.c_str(), r.n_cases, r.mean_dice, r.std_dice,
                          config_digest.c_str());
            out += buf;
        }
        return out;
    }

    nlohmann::json to_json() const {
        nlohmann::json rows_j = nlohmann::json::array();
        for (const auto& r : rows)
            rows_j.push_back({{"task", r.task},
                              {"center", r.center},
                              {"n_cases", r.n_cases},
                              {"mean_dice", r.mean_dice},
                              {"std_dice", r.std_dice}});
        return {{"schema_version", schema_version},
                {"method", method},
                {"seed", seed},
                {"config_digest", config_digest},
                {"rows", rows_j}};
    }
};

namespace detail {

inline EvalRow summarize(const std::string& task, const std::string& center,
                         const std::vector<double>& scores) {
    if (scores.empty()) throw ValidationError("evaluate: empty test set for " + task + "/" + center);
    double mean = 0.0;
    for (double s : scores) mean += s;
    mean /= static_cast<double>(scores.size());
    double var = 0.0;
    for (double s : scores) var += (s - mean) * (s - mean);
    var /= static_cast<double>(scores.size());
    EvalRow r;
    r.task = task;
    r.center = center;
    r.n_cases = static_cast<int>(scores.size());
    r.mean_dice = mean;
    r.std_dice = std::sqrt(var);
    return r;
}

}  // namespace detail

/// Table-1-style evaluation. Task 1 scores the global model on the generic
/// set (clean labels); Task 2 scores each center's method-appropriate
/// prediction on its own local test set (deliberately skewed labels).
/// For `single` — which has no global model — Task 1 pools every center
/// model's generic scores, as the paper does for personalized baselines.
inline EvalReport evaluate(const NetConfig& cfg, const ExperimentHistory& run,
                           const FederationData& data, const PredictOptions& opt, uint64_t seed,
                           const std::string& config_digest) {
    cfg.validate();
    opt.validate();
    if (run.centers.empty()) throw ValidationError("evaluate: run has no centers");
    if (data.generic_test.empty()) throw ValidationError("evaluate: empty generic test set");
    const Method method = run.method;
    const bool adapted = method_has_adaptation(method);

    EvalReport rep;
    rep.method = to_string(method);
    rep.seed = seed;
    rep.config_digest = config_digest;

    auto case_rng = [&](uint64_t tag, uint64_t model, uint64_t idx) {
        return Rng(mix_seed(seed, tag, model, idx));
    };

    // --- Task 1: generic set ---
    if (method_aggregates(method)) {
        // All centers hold identical global parts; use center 0's.
        const CenterState& st = run.centers.front();
        std::vector<double> scores;
        for (size_t i = 0; i < data.generic_test.size(); ++i) {
            const auto& s = data.generic_test[i];
            Rng rng = case_rng(0x7A51ull, 0, i);
            Tensor probs = predict_global(cfg, st.theta_s, adapted ? &st.psi : nullptr, s.image,
                                          opt, rng);
            scores.push_back(dice(argmax_mask(probs), s.clean_label));
        }
        rep.rows.push_back(detail::summarize("task1", "global", scores));
    } else {
        std::vector<double> pooled;
        for (const auto& st : run.centers)
            for (size_t i = 0; i < data.generic_test.size(); ++i) {
                const auto& s = data.generic_test[i];
                Rng rng = case_rng(0x7A51ull, static_cast<uint64_t>(st.center_id), i);
                Tensor probs = predict_global(cfg, st.theta_s, nullptr, s.image, opt, rng);
                pooled.push_back(dice(argmax_mask(probs), s.clean_label));
            }
        rep.rows.push_back(detail::summarize("task1", "pooled", pooled));
    }

    // --- Task 2: per-center local sets ---
    for (const auto& st : run.centers) {
        std::vector<double> scores;
        for (size_t i = 0; i < st.local_test_data.size(); ++i) {
            const auto& s = st.local_test_data[i];
            Rng rng = case_rng(0x7A52ull, static_cast<uint64_t>(st.center_id), i);
            Tensor probs;
            if (adapted)
                probs = predict_local(cfg, st.theta_s, st.psi, st.theta_p,
                                      method_adapt_mode(method), s.image, opt, rng);
            else
                probs = predict_global(cfg, st.theta_s, nullptr, s.image, opt, rng);
            scores.push_back(dice(argmax_mask(probs), s.label));
        }
        rep.rows.push_back(detail::summarize("task2", std::to_string(st.center_id), scores));
    }
    return rep;
}

}  // namespace swarmseg
