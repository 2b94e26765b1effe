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
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "swarmseg/common.hpp"
#include "swarmseg/losses.hpp"
#include "swarmseg/metrics.hpp"
#include "swarmseg/nets.hpp"
#include "swarmseg/serialize.hpp"
#include "swarmseg/swarm.hpp"
#include "swarmseg/synthdata.hpp"

namespace swarmseg {

/// Whole-experiment configuration. The JSON file uses the same nesting as the
/// struct; every field has a default, and absent keys keep it. CLI flags
/// override file values; the fully-resolved config is echoed into the output
/// directory for provenance.
struct ExperimentConfig {
    uint64_t seed = 1;
    NetConfig net;
    LossWeights weights;
    TrainSchedule schedule;
    DataConfig data;
    std::vector<CenterSpec> centers;  // empty = default 4-center A/B/C/D setup
    std::string method = "ours";
    std::string out_dir = "out";
    PredictOptions eval;
    int jobs = 1;
    bool log_messages = false;

    std::vector<CenterSpec> resolved_centers() const {
        return centers.empty() ? default_center_specs(data) : centers;
    }

    void validate() const {
        net.validate();
        weights.validate();
        schedule.validate();
        data.validate();
        eval.validate();
        method_from_string(method);  // throws on unknown
        if (jobs < 1) throw ValidationError("config: jobs must be >= 1");
        if (out_dir.empty()) throw ValidationError("config: out_dir must not be empty");
        const auto specs = resolved_centers();
        if (specs.empty()) throw ValidationError("config: no centers");
        for (const auto& s : specs) s.validate(net.height, net.width);
        for (size_t i = 0; i < specs.size(); ++i)
            for (size_t j = i + 1; j < specs.size(); ++j)
                if (specs[i].center_id == specs[j].center_id)
                    throw ValidationError("config: duplicate center_id " +
                                          std::to_string(specs[i].center_id));
    }
};

namespace detail {

template <typename T>
void read_key(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json center_spec_to_json(const CenterSpec& s) {
    return {{"center_id", s.center_id}, {"n_train", s.n_train},   {"n_test", s.n_test},
            {"gain", s.gain},           {"bias", s.bias},         {"gamma", s.gamma},
            {"noise_std", s.noise_std}, {"label_skew", to_string(s.label_skew)},
            {"r_lo", s.r_lo},           {"r_hi", s.r_hi}};
}

inline CenterSpec center_spec_from_json(const nlohmann::json& j) {
    CenterSpec s;
    detail::read_key(j, "center_id", s.center_id);
    detail::read_key(j, "n_train", s.n_train);
    detail::read_key(j, "n_test", s.n_test);
    detail::read_key(j, "gain", s.gain);
    detail::read_key(j, "bias", s.bias);
    detail::read_key(j, "gamma", s.gamma);
    detail::read_key(j, "noise_std", s.noise_std);
    if (j.contains("label_skew")) s.label_skew = label_skew_from_string(j.at("label_skew"));
    detail::read_key(j, "r_lo", s.r_lo);
    detail::read_key(j, "r_hi", s.r_hi);
    return s;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
    nlohmann::json centers_j = nlohmann::json::array();
    for (const auto& s : c.centers) centers_j.push_back(center_spec_to_json(s));
    return {
        {"seed", c.seed},
        {"net",
         {{"classes", c.net.classes},
          {"latent_dim", c.net.latent_dim},
          {"base_channels", c.net.base_channels},
          {"depth", c.net.depth},
          {"height", c.net.height},
          {"width", c.net.width}}},
        {"weights", {{"alpha", c.weights.alpha}, {"beta", c.weights.beta}, {"q", c.weights.q}}},
        {"schedule",
         {{"rounds", c.schedule.rounds},
          {"local_epochs", c.schedule.local_epochs},
          {"warmup_epochs", c.schedule.warmup_epochs},
          {"batch_size", c.schedule.batch_size},
          {"lr", c.schedule.lr},
          {"augment", c.schedule.augment}}},
        {"data",
         {{"n_train", c.data.n_train},
          {"n_local_test", c.data.n_local_test},
          {"n_generic", c.data.n_generic},
          {"protrusions_min", c.data.protrusions_min},
          {"protrusions_max", c.data.protrusions_max},
          {"protrusion_len_min", c.data.protrusion_len_min},
          {"protrusion_len_max", c.data.protrusion_len_max},
          {"gen_noise_std", c.data.gen_noise_std},
          {"generic_noise_std", c.data.generic_noise_std}}},
        {"centers", centers_j},
        {"method", c.method},
        {"out_dir", c.out_dir},
        {"eval", {{"samples", c.eval.samples}, {"mean_latent", c.eval.mean_latent}}},
        {"jobs", c.jobs},
        {"log_messages", c.log_messages},
    };
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig c;
    detail::read_key(j, "seed", c.seed);
    if (j.contains("net")) {
        const auto& n = j.at("net");
        detail::read_key(n, "classes", c.net.classes);
        detail::read_key(n, "latent_dim", c.net.latent_dim);
        detail::read_key(n, "base_channels", c.net.base_channels);
        detail::read_key(n, "depth", c.net.depth);
        detail::read_key(n, "height", c.net.height);
        detail::read_key(n, "width", c.net.width);
    }
    if (j.contains("weights")) {
        const auto& w = j.at("weights");
        detail::read_key(w, "alpha", c.weights.alpha);
        detail::read_key(w, "beta", c.weights.beta);
        detail::read_key(w, "q", c.weights.q);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        detail::read_key(s, "rounds", c.schedule.rounds);
        detail::read_key(s, "local_epochs", c.schedule.local_epochs);
        detail::read_key(s, "warmup_epochs", c.schedule.warmup_epochs);
        detail::read_key(s, "batch_size", c.schedule.batch_size);
        detail::read_key(s, "lr", c.schedule.lr);
        detail::read_key(s, "augment", c.schedule.augment);
    }
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::read_key(d, "n_train", c.data.n_train);
        detail::read_key(d, "n_local_test", c.data.n_local_test);
        detail::read_key(d, "n_generic", c.data.n_generic);
        detail::read_key(d, "protrusions_min", c.data.protrusions_min);
        detail::read_key(d, "protrusions_max", c.data.protrusions_max);
        detail::read_key(d, "protrusion_len_min", c.data.protrusion_len_min);
        detail::read_key(d, "protrusion_len_max", c.data.protrusion_len_max);
        detail::read_key(d, "gen_noise_std", c.data.gen_noise_std);
        detail::read_key(d, "generic_noise_std", c.data.generic_noise_std);
    }
    if (j.contains("centers"))
        for (const auto& s : j.at("centers")) c.centers.push_back(center_spec_from_json(s));
    detail::read_key(j, "method", c.method);
    detail::read_key(j, "out_dir", c.out_dir);
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        detail::read_key(e, "samples", c.eval.samples);
        detail::read_key(e, "mean_latent", c.eval.mean_latent);
    }
    detail::read_key(j, "jobs", c.jobs);
    detail::read_key(j, "log_messages", c.log_messages);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config file " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

/// Canonical serialized form (sorted keys, fixed indentation); its hash
/// stamps reports so mismatched config/checkpoint pairings are detectable.
inline std::string config_canonical_dump(const ExperimentConfig& c) {
    return config_to_json(c).dump(2);
}

inline std::string config_digest(const ExperimentConfig& c) {
    return hex64(fnv1a64(config_canonical_dump(c)));
}

}  // namespace swarmseg
