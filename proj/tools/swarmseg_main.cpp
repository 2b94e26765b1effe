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

// Experiment driver. Subcommands: gen-data, train, eval, report, selftest.
// Exit codes: 0 ok, 1 validation error, 2 runtime error, 3 selftest failure.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <swarmseg/swarmseg.hpp>

namespace fs = std::filesystem;
using namespace swarmseg;

namespace {

struct CliArgs {
    std::string config_path;
    uint64_t seed = 0;
    std::string method;
    int rounds = 0;
    int jobs = 0;
    bool log_messages = false;
    std::string out_dir;
    bool dump_preds = false;
};

fs::path dataset_dir(const ExperimentConfig& cfg) { return fs::path(cfg.out_dir) / "dataset"; }

fs::path run_dir(const ExperimentConfig& cfg) {
    return fs::path(cfg.out_dir) / "runs" / (cfg.method + "_seed" + std::to_string(cfg.seed));
}

void check_dataset_matches(const ExperimentConfig& cfg, const FederationData& fed) {
    if (fed.height != cfg.net.height || fed.width != cfg.net.width)
        throw ValidationError("dataset is " + std::to_string(fed.height) + "x" +
                              std::to_string(fed.width) + " but config expects " +
                              std::to_string(cfg.net.height) + "x" + std::to_string(cfg.net.width));
}

int cmd_gen_data(const ExperimentConfig& cfg) {
    FederationData fed = build_federation_data(cfg.resolved_centers(), cfg.net.height,
                                               cfg.net.width, cfg.data, cfg.seed);
    const fs::path dir = dataset_dir(cfg);
    write_dataset(dir, fed, cfg.seed);
    write_text(dir / "gen_config.json", config_canonical_dump(cfg) + "\n");
    std::printf("dataset written to %s\n", dir.string().c_str());
    std::printf("  centers: %zu, generic test cases: %zu\n", fed.centers.size(),
                fed.generic_test.size());
    for (const auto& c : fed.centers)
        std::printf("  center %d: %zu train / %zu local test (skew=%s)\n", c.spec.center_id,
                    c.train.size(), c.local_test.size(), to_string(c.spec.label_skew).c_str());
    return 0;
}

int cmd_train(const ExperimentConfig& cfg) {
    const Method method = method_from_string(cfg.method);
    FederationData fed = load_dataset(dataset_dir(cfg));
    check_dataset_matches(cfg, fed);

    const fs::path rdir = run_dir(cfg);
    fs::create_directories(rdir);
    write_text(rdir / "config.json", config_canonical_dump(cfg) + "\n");

    MessageSink sink = nullptr;
    if (cfg.log_messages && method_aggregates(method)) {
        const fs::path mdir = rdir / "messages";
        fs::create_directories(mdir);
        sink = [mdir](const RoundMessage& msg) {
            char name[64];
            std::snprintf(name, sizeof(name), "round_%04u_center_%u.msg", msg.round,
                          msg.center_id);
            write_bytes(mdir / name, msg.encode());
        };
    }

    std::printf("training method=%s seed=%llu rounds=%d local_epochs=%d jobs=%d\n",
                cfg.method.c_str(), static_cast<unsigned long long>(cfg.seed),
                cfg.schedule.rounds, cfg.schedule.local_epochs, cfg.jobs);
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentHistory hist =
        method == Method::ours
            ? run_swarm(cfg.net, cfg.weights, cfg.schedule, fed, cfg.seed, cfg.jobs, sink)
            : run_baseline(cfg.net, cfg.weights, cfg.schedule, method, fed, cfg.seed, cfg.jobs,
                           sink);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    write_text(rdir / "history.csv", history_to_csv(hist));
    write_text(rdir / "rounds.csv", rounds_to_csv(hist));

    const fs::path ckpt = rdir / "checkpoints";
    fs::create_directories(ckpt);
    if (method_aggregates(method))
        write_bytes(ckpt / "global.blob", to_blob(hist.centers.front().shared_view));
    for (const auto& st : hist.centers) {
        const std::string id = std::to_string(st.center_id);
        write_bytes(ckpt / ("center_" + id + "_shared.blob"), to_blob(st.shared_view));
        if (method_has_adaptation(method))
            write_bytes(ckpt / ("center_" + id + "_personal.blob"), to_blob(st.theta_p));
    }

    if (!hist.round_rows.empty()) {
        std::printf("final-round local-test dice:");
        const int last = hist.round_rows.back().round;
        for (const auto& rr : hist.round_rows)
            if (rr.round == last) std::printf("  c%d=%.3f", rr.center, rr.local_dice);
        std::printf("\n");
    }
    std::printf("run artifacts in %s (%.1f s)\n", rdir.string().c_str(), secs);
    return 0;
}

void dump_case_pgms(const fs::path& dir, const std::string& stem, const NetConfig& net,
                    const SegSample& s, const Mask& gt, const Mask& pred_global,
                    const Mask* pred_local) {
    auto mask_to_f64 = [](const Mask& m) {
        std::vector<double> v(m.v.size());
        for (size_t i = 0; i < m.v.size(); ++i) v[i] = m.v[i];
        return v;
    };
    write_pgm(dir / (stem + "_img.pgm"), s.image.data(), net.height, net.width);
    write_pgm(dir / (stem + "_gt.pgm"), mask_to_f64(gt), net.height, net.width);
    write_pgm(dir / (stem + "_pred_global.pgm"), mask_to_f64(pred_global), net.height, net.width);
    if (pred_local)
        write_pgm(dir / (stem + "_pred_local.pgm"), mask_to_f64(*pred_local), net.height,
                  net.width);
}

int cmd_eval(const ExperimentConfig& cli_cfg, bool dump_preds) {
    const fs::path rdir = run_dir(cli_cfg);
    // The run's echoed config is authoritative for evaluation.
    ExperimentConfig cfg = load_config(rdir / "config.json");
    cfg.out_dir = cli_cfg.out_dir;
    cfg.validate();
    const Method method = method_from_string(cfg.method);
    const bool adapted = method_has_adaptation(method);

    FederationData fed = load_dataset(dataset_dir(cfg));
    check_dataset_matches(cfg, fed);

    const fs::path ckpt = rdir / "checkpoints";
    ExperimentHistory run;
    run.method = method;
    run.seed = cfg.seed;
    for (const auto& cd : fed.centers) {
        CenterState st;
        st.center_id = cd.spec.center_id;
        st.train_data = cd.train;
        st.local_test_data = cd.local_test;
        st.n_train = cd.train.size();
        const std::string id = std::to_string(st.center_id);
        ParameterSet shared = from_blob(read_bytes(ckpt / ("center_" + id + "_shared.blob")));
        ParameterSet personal;
        if (adapted)
            personal = from_blob(read_bytes(ckpt / ("center_" + id + "_personal.blob")));
        load_center_params(st, shared, personal);
        run.centers.push_back(std::move(st));
    }

    EvalReport rep = evaluate(cfg.net, run, fed, cfg.eval, cfg.seed, config_digest(cfg));
    write_text(rdir / "eval_report.csv", rep.to_csv());
    write_text(rdir / "eval_report.json", rep.to_json().dump(2) + "\n");

    for (const auto& row : rep.rows)
        std::printf("%-6s %-8s n=%-3d dice %.4f +/- %.4f\n", row.task.c_str(), row.center.c_str(),
                    row.n_cases, row.mean_dice, row.std_dice);
    std::printf("reports written to %s\n", rdir.string().c_str());

    if (dump_preds) {
        const fs::path pdir = rdir / "preds";
        // Generic set: global prediction (pooled over centers for `single`,
        // which has no shared model; center 0 stands in for the dump).
        const CenterState& g = run.centers.front();
        fs::create_directories(pdir / "generic");
        for (size_t i = 0; i < fed.generic_test.size(); ++i) {
            const auto& s = fed.generic_test[i];
            Rng rng(mix_seed(cfg.seed, 0xD0ull, 0, i));
            Mask pg = argmax_mask(
                predict_global(cfg.net, g.theta_s, adapted ? &g.psi : nullptr, s.image, cfg.eval, rng));
            dump_case_pgms(pdir / "generic", s.case_id, cfg.net, s, s.clean_label, pg, nullptr);
        }
        for (const auto& st : run.centers) {
            const fs::path cdir = pdir / ("center_" + std::to_string(st.center_id));
            fs::create_directories(cdir);
            for (size_t i = 0; i < st.local_test_data.size(); ++i) {
                const auto& s = st.local_test_data[i];
                Rng rng1(mix_seed(cfg.seed, 0xD0ull, static_cast<uint64_t>(st.center_id), i));
                Rng rng2(mix_seed(cfg.seed, 0xD1ull, static_cast<uint64_t>(st.center_id), i));
                Mask pg = argmax_mask(predict_global(cfg.net, st.theta_s,
                                                     adapted ? &st.psi : nullptr, s.image,
                                                     cfg.eval, rng1));
                if (adapted) {
                    Mask pl = argmax_mask(predict_local(cfg.net, st.theta_s, st.psi, st.theta_p,
                                                        method_adapt_mode(method), s.image,
                                                        cfg.eval, rng2));
                    dump_case_pgms(cdir, s.case_id, cfg.net, s, s.label, pg, &pl);
                } else {
                    dump_case_pgms(cdir, s.case_id, cfg.net, s, s.label, pg, nullptr);
                }
            }
        }
        std::printf("prediction dumps in %s\n", pdir.string().c_str());
    }
    return 0;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string cell;
    for (char ch : text) {
        if (ch == ',') {
            row.push_back(cell);
            cell.clear();
        } else if (ch == '\n') {
            row.push_back(cell);
            cell.clear();
            rows.push_back(row);
            row.clear();
        } else {
            cell += ch;
        }
    }
    if (!cell.empty() || !row.empty()) {
        row.push_back(cell);
        rows.push_back(row);
    }
    return rows;
}

int cmd_report(const ExperimentConfig& cfg) {
    const fs::path rdir = run_dir(cfg);
    const auto hist = parse_csv(read_text(rdir / "history.csv"));
    const auto rounds = parse_csv(read_text(rdir / "rounds.csv"));

    // Mean total loss per round.
    std::map<int, std::pair<double, int>> loss_acc;
    for (size_t i = 1; i < hist.size(); ++i) {
        if (hist[i].size() < 10) continue;
        const int r = std::stoi(hist[i][0]);
        loss_acc[r].first += std::stod(hist[i][8]);
        loss_acc[r].second += 1;
    }
    SvgSeries loss_series{"mean total loss", svg_palette(0), {}};
    for (const auto& [r, acc] : loss_acc)
        loss_series.points.emplace_back(r, acc.first / acc.second);

    // Per-center and mean local-test dice per round.
    std::map<int, SvgSeries> center_series;
    std::map<int, std::pair<double, int>> dice_acc;
    for (size_t i = 1; i < rounds.size(); ++i) {
        if (rounds[i].size() < 4) continue;
        const int r = std::stoi(rounds[i][0]);
        const int c = std::stoi(rounds[i][1]);
        const double d = std::stod(rounds[i][2]);
        if (!center_series.count(c))
            center_series[c] = {"dice c" + std::to_string(c),
                                svg_palette(2 + static_cast<size_t>(center_series.size())), {}};
        center_series[c].points.emplace_back(r, d);
        dice_acc[r].first += d;
        dice_acc[r].second += 1;
    }
    SvgSeries dice_series{"mean local dice", svg_palette(1), {}};
    for (const auto& [r, acc] : dice_acc)
        dice_series.points.emplace_back(r, acc.first / acc.second);

    std::vector<SvgSeries> series{loss_series, dice_series};
    for (const auto& [c, s] : center_series) series.push_back(s);
    const std::string title = cfg.method + " seed " + std::to_string(cfg.seed) +
                              ": loss and Dice vs round";
    write_svg_chart(rdir / "report.svg", title, "round", "loss / dice", series);
    std::printf("chart written to %s\n", (rdir / "report.svg").string().c_str());
    return 0;
}

int cmd_selftest(const ExperimentConfig& cfg) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto results = run_selfcheck(cfg.seed);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%-36s measured=%11.4e tol=%9.2e  %s\n", r.name.c_str(), r.measured, r.tol,
                    r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%zu checks in %.1f s: %s\n", results.size(), secs,
                all_pass ? "all passed" : "FAILURES PRESENT");
    return all_pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-center segmentation swarm-learning testbed"};
    app.require_subcommand(1);

    CliArgs a;
    auto* opt_config = app.add_option("--config", a.config_path, "config file (JSON)");
    auto* opt_seed = app.add_option("--seed", a.seed, "experiment seed");
    auto* opt_method = app.add_option(
        "--method", a.method, "ours | swarm_plain | single | fixed_adapt | img_adapt");
    auto* opt_rounds = app.add_option("--rounds", a.rounds, "communication rounds");
    auto* opt_jobs = app.add_option("--jobs", a.jobs, "per-center training parallelism");
    auto* opt_log = app.add_flag("--log-messages", a.log_messages, "record round messages");
    auto* opt_out = app.add_option("--out", a.out_dir, "output directory");

    auto* sub_gen = app.add_subcommand("gen-data", "generate the synthetic multi-center dataset");
    auto* sub_train = app.add_subcommand("train", "run a training experiment");
    auto* sub_eval = app.add_subcommand("eval", "evaluate checkpoints of a finished run");
    sub_eval->add_flag("--dump-preds", a.dump_preds, "write per-case PGM prediction dumps");
    auto* sub_report = app.add_subcommand("report", "render an SVG chart from run CSVs");
    auto* sub_selftest = app.add_subcommand("selftest", "run the built-in verification suite");
    for (auto* s : {sub_gen, sub_train, sub_eval, sub_report, sub_selftest}) s->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        ExperimentConfig cfg;
        if (opt_config->count()) cfg = load_config(a.config_path);
        if (opt_seed->count()) cfg.seed = a.seed;
        if (opt_method->count()) cfg.method = a.method;
        if (opt_rounds->count()) cfg.schedule.rounds = a.rounds;
        if (opt_jobs->count()) cfg.jobs = a.jobs;
        if (opt_log->count()) cfg.log_messages = a.log_messages;
        if (opt_out->count()) cfg.out_dir = a.out_dir;
        cfg.validate();

        if (app.got_subcommand(sub_gen)) return cmd_gen_data(cfg);
        if (app.got_subcommand(sub_train)) return cmd_train(cfg);
        if (app.got_subcommand(sub_eval)) return cmd_eval(cfg, a.dump_preds);
        if (app.got_subcommand(sub_report)) return cmd_report(cfg);
        if (app.got_subcommand(sub_selftest)) return cmd_selftest(cfg);
        throw ValidationError("no subcommand");
    } catch (const ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
