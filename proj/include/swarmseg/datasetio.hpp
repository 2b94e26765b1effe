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

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "swarmseg/common.hpp"
#include "swarmseg/config.hpp"
#include "swarmseg/serialize.hpp"
#include "swarmseg/synthdata.hpp"

namespace swarmseg {

// Dataset directory layout:
//   <dir>/manifest.json                   seed, dims, specs, case lists
//   <dir>/center_<k>/<case>_img.f64      exact image (LE f64, H*W values)
//   <dir>/center_<k>/<case>_img.pgm      8-bit preview (min-max quantized)
//   <dir>/center_<k>/<case>_lbl.pgm      training/test label (0/255, lossless)
//   <dir>/center_<k>/<case>_clean.pgm    pre-corruption truth
//   <dir>/generic/...                    same per-case files, clean labels
// The f64 sidecar is authoritative for images; PGMs are for eyeballing
// (labels being binary, their PGM round-trips exactly).

namespace detail {

inline void write_mask_pgm(const std::filesystem::path& path, const Mask& m) {
    std::vector<double> img(m.v.size());
    for (size_t i = 0; i < m.v.size(); ++i) img[i] = m.v[i] ? 1.0 : 0.0;
    write_pgm(path, img, m.h, m.w);
}

inline Mask read_mask_pgm(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    // Parse "P5\n<w> <h>\n<maxval>\n" then raw payload.
    size_t pos = 0;
    auto next_token = [&]() -> std::string {
        while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
        std::string t;
        while (pos < bytes.size() && !std::isspace(bytes[pos])) t += static_cast<char>(bytes[pos++]);
        return t;
    };
    if (next_token() != "P5") throw IoError("not a P5 PGM: " + path.string());
    const int w = std::stoi(next_token());
    const int h = std::stoi(next_token());
    const int maxval = std::stoi(next_token());
    if (maxval <= 0 || maxval > 255) throw IoError("unsupported PGM maxval: " + path.string());
    ++pos;  // single whitespace after header
    if (bytes.size() - pos < static_cast<size_t>(h) * w)
        throw IoError("truncated PGM payload: " + path.string());
    Mask m(h, w);
    for (size_t i = 0; i < m.v.size(); ++i) m.v[i] = bytes[pos + i] > maxval / 2 ? 1 : 0;
    return m;
}

inline void write_case(const std::filesystem::path& dir, const SegSample& s) {
    const int h = s.label.h, w = s.label.w;
    write_raw_f64(dir / (s.case_id + "_img.f64"), s.image.data());
    write_pgm(dir / (s.case_id + "_img.pgm"), s.image.data(), h, w);
    write_mask_pgm(dir / (s.case_id + "_lbl.pgm"), s.label);
    write_mask_pgm(dir / (s.case_id + "_clean.pgm"), s.clean_label);
}

inline SegSample read_case(const std::filesystem::path& dir, const std::string& case_id, int h,
                           int w) {
    SegSample s;
    s.case_id = case_id;
    auto raw = read_raw_f64(dir / (case_id + "_img.f64"));
    if (raw.size() != static_cast<size_t>(h) * w)
        throw IoError("image size mismatch in " + (dir / (case_id + "_img.f64")).string());
    s.image = Tensor::from_data({1, h, w}, std::move(raw));
    s.label = read_mask_pgm(dir / (case_id + "_lbl.pgm"));
    s.clean_label = read_mask_pgm(dir / (case_id + "_clean.pgm"));
    if (s.label.h != h || s.label.w != w || s.clean_label.h != h || s.clean_label.w != w)
        throw IoError("label size mismatch for case " + case_id);
    return s;
}

}  // namespace detail

/// Write a generated federation to disk, manifest last (so a complete
/// manifest implies a complete dataset).
inline void write_dataset(const std::filesystem::path& dir, const FederationData& fed,
                          uint64_t seed) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    nlohmann::json centers_j = nlohmann::json::array();
    for (const auto& cd : fed.centers) {
        const fs::path cdir = dir / ("center_" + std::to_string(cd.spec.center_id));
        fs::create_directories(cdir);
        nlohmann::json train_j = nlohmann::json::array(), test_j = nlohmann::json::array();
        for (const auto& s : cd.train) {
            detail::write_case(cdir, s);
            train_j.push_back(s.case_id);
        }
        for (const auto& s : cd.local_test) {
            detail::write_case(cdir, s);
            test_j.push_back(s.case_id);
        }
        nlohmann::json cj = center_spec_to_json(cd.spec);
        cj["train"] = train_j;
        cj["local_test"] = test_j;
        centers_j.push_back(cj);
    }

    const fs::path gdir = dir / "generic";
    fs::create_directories(gdir);
    nlohmann::json generic_j = nlohmann::json::array();
    for (const auto& s : fed.generic_test) {
        detail::write_case(gdir, s);
        generic_j.push_back(s.case_id);
    }

    nlohmann::json manifest = {{"schema_version", 1},
                               {"seed", seed},
                               {"height", fed.height},
                               {"width", fed.width},
                               {"centers", centers_j},
                               {"generic", generic_j}};
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

/// Reconstruct a federation bit-exactly from a dataset directory.
inline FederationData load_dataset(const std::filesystem::path& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest in " + dir.string() + ": " + e.what());
    }
    if (manifest.value("schema_version", 0) != 1)
        throw IoError("unsupported dataset schema in " + dir.string());

    FederationData fed;
    fed.height = manifest.at("height").get<int>();
    fed.width = manifest.at("width").get<int>();
    for (const auto& cj : manifest.at("centers")) {
        CenterData cd;
        cd.spec = center_spec_from_json(cj);
        const auto cdir = dir / ("center_" + std::to_string(cd.spec.center_id));
        for (const auto& id : cj.at("train"))
            cd.train.push_back(detail::read_case(cdir, id.get<std::string>(), fed.height, fed.width));
        for (const auto& id : cj.at("local_test"))
            cd.local_test.push_back(
                detail::read_case(cdir, id.get<std::string>(), fed.height, fed.width));
        fed.centers.push_back(std::move(cd));
    }
    for (const auto& id : manifest.at("generic"))
        fed.generic_test.push_back(
            detail::read_case(dir / "generic", id.get<std::string>(), fed.height, fed.width));
    return fed;
}

}  // namespace swarmseg
