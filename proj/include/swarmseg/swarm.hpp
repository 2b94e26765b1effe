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

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "swarmseg/common.hpp"
#include "swarmseg/losses.hpp"
#include "swarmseg/metrics.hpp"
#include "swarmseg/nets.hpp"
#include "swarmseg/params.hpp"
#include "swarmseg/rng.hpp"
#include "swarmseg/serialize.hpp"
#include "swarmseg/synthdata.hpp"
#include "swarmseg/tensor.hpp"

namespace swarmseg {

enum class Method { ours, swarm_plain, single, fixed_adapt, img_adapt };

inline Method method_from_string(const std::string& s) {
    if (s == "ours") return Method::ours;
    if (s == "swarm_plain") return Method::swarm_plain;
    if (s == "single") return Method::single;
    if (s == "fixed_adapt") return Method::fixed_adapt;
    if (s == "img_adapt") return Method::img_adapt;
    throw ValidationError("unknown method '" + s + "'");
}

inline std::string to_string(Method m) {
    switch (m) {
        case Method::ours: return "ours";
        case Method::swarm_plain: return "swarm_plain";
        case Method::single: return "single";
        case Method::fixed_adapt: return "fixed_adapt";
        case Method::img_adapt: return "img_adapt";
    }
    throw ValidationError("bad Method value");
}

/// Everything except `single` exchanges and aggregates the global part.
inline bool method_aggregates(Method m) { return m != Method::single; }

/// The ours-family methods carry the latent encoders and the DA network.
inline bool method_has_adaptation(Method m) {
    return m == Method::ours || m == Method::fixed_adapt || m == Method::img_adapt;
}

inline AdaptMode method_adapt_mode(Method m) {
    switch (m) {
        case Method::ours: return AdaptMode::distribution;
        case Method::fixed_adapt: return AdaptMode::fixed;
        case Method::img_adapt: return AdaptMode::image;
        default: throw ValidationError("method " + to_string(m) + " has no adaptation network");
    }
}

/// Round/epoch schedule. Warm-up is counted in epochs from the start of
/// training (default 10% of rounds*local_epochs, mirroring 50 of 500).
struct TrainSchedule {
    int rounds = 60;
    int local_epochs = 2;
    int warmup_epochs = 12;
    int batch_size = 4;
    double lr = 1e-3;
    bool augment = true;

    void validate() const {
        if (rounds < 0) throw ValidationError("TrainSchedule: rounds must be >= 0");
        if (local_epochs < 1) throw ValidationError("TrainSchedule: local_epochs must be >= 1");
        if (warmup_epochs < 0) throw ValidationError("TrainSchedule: warmup_epochs must be >= 0");
        if (batch_size < 1) throw ValidationError("TrainSchedule: batch_size must be >= 1");
        if (lr <= 0.0) throw ValidationError("TrainSchedule: lr must be > 0");
    }
};

enum class Phase { warmup, main };

inline std::string to_string(Phase p) { return p == Phase::warmup ? "warmup" : "main"; }

/// Mean loss terms over one epoch's batches, plus the mean per-pixel trace of
/// the adaptation field (0 for methods without one).
struct EpochMetrics {
    Phase phase = Phase::main;
    double ce = 0.0;
    double nr = 0.0;
    double tr = 0.0;
    double kl = 0.0;
    double total = 0.0;
    double mean_trace = 0.0;
};

/// One center's full local situation: data, the four parameter sets, merged
/// zero-copy views for optimization/serialization, and optimizer state.
struct CenterState {
    int center_id = 0;
    uint64_t n_train = 0;
    std::vector<SegSample> train_data;
    std::vector<SegSample> local_test_data;

    ParameterSet theta_s;  // segmentation net (global part)
    ParameterSet psi;      // prior encoder (global part; empty for plain methods)
    ParameterSet phi;      // posterior encoder (global part; empty for plain methods)
    ParameterSet theta_p;  // DA network; never leaves the center

    ParameterSet shared_view;  // theta_s + psi + phi (same underlying tensors)
    ParameterSet all_view;     // shared_view + theta_p

    AdamState opt;
    int epochs_done = 0;

    /// Rebuild the merged views after the individual sets change identity
    /// (they alias tensor storage, so value updates never need a rebuild).
    void rebuild_views() {
        shared_view = ParameterSet();
        all_view = ParameterSet();
        for (auto* set : {&theta_s, &psi, &phi})
            for (auto& [name, t] : *set) shared_view.add(name, t);
        for (auto& [name, t] : shared_view) all_view.add(name, t);
        for (auto& [name, t] : theta_p) all_view.add(name, t);
    }
};

/// Rebuild a center's per-role parameter sets from flat shared/personal sets
/// (as decoded from checkpoint blobs). Names route by prefix.
inline void load_center_params(CenterState& st, const ParameterSet& shared,
                               const ParameterSet& personal) {
    st.theta_s = ParameterSet();
    st.psi = ParameterSet();
    st.phi = ParameterSet();
    st.theta_p = ParameterSet();
    for (const auto& [name, t] : shared) {
        if (name.rfind("seg.", 0) == 0)
            st.theta_s.add(name, t.clone());
        else if (name.rfind("prior.", 0) == 0)
            st.psi.add(name, t.clone());
        else if (name.rfind("post.", 0) == 0)
            st.phi.add(name, t.clone());
        else
            throw ProtocolError("load_center_params: unknown shared parameter '" + name + "'");
    }
    for (const auto& [name, t] : personal) {
        if (name.rfind("da.", 0) != 0)
            throw ProtocolError("load_center_params: unknown personal parameter '" + name + "'");
        st.theta_p.add(name, t.clone());
    }
    st.rebuild_views();
}

/// Size-weighted parameter average theta = sum_k (n_k/N) theta_k, computed in
/// delta form around center 0: theta = theta_0 + (sum_k n_k (theta_k -
/// theta_0)) / N. Algebraically the same mean, but identical inputs make
/// every delta exactly zero, so the aggregate of identical sets returns them
/// bitwise unchanged. The caller passes sets in ascending center_id order;
/// summation follows that order element by element, so every center computes
/// bitwise-identical results.
inline ParameterSet aggregate(const std::vector<ParameterSet>& params,
                              const std::vector<uint64_t>& sizes) {
    if (params.empty()) throw ValidationError("aggregate: no parameter sets");
    if (params.size() != sizes.size())
        throw ValidationError("aggregate: sets and sizes count mismatch");
    uint64_t total = 0;
    for (uint64_t s : sizes) {
        if (s == 0) throw ValidationError("aggregate: zero training size");
        total += s;
    }
    for (size_t k = 1; k < params.size(); ++k)
        if (!params[0].same_schema(params[k]))
            throw ProtocolError("aggregate: schema mismatch between centers 0 and " +
                                std::to_string(k));

    ParameterSet out = params[0].clone();
    const double n_total = static_cast<double>(total);
    for (auto& [name, t] : out) {
        const auto& base = params[0].get(name).data();
        auto& dst = t.data();
        std::vector<double> acc(dst.size(), 0.0);
        for (size_t k = 1; k < params.size(); ++k) {
            const double nk = static_cast<double>(sizes[k]);
            const auto& src = params[k].get(name).data();
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += nk * (src[i] - base[i]);
        }
        // Skip exact-zero corrections so agreeing elements keep their bytes
        // (adding 0.0 would rewrite -0.0 as +0.0).
        for (size_t i = 0; i < dst.size(); ++i)
            if (acc[i] != 0.0) dst[i] += acc[i] / n_total;
    }
    return out;
}

/// Throws unless the message's parameter schema is free of personalized
/// (DA-network) tensors. Exercised on every outbound message.
inline void audit_message_schema(const RoundMessage& msg) {
    ParameterSet p = from_blob(msg.blob);
    for (const auto& [name, t] : p)
        if (name.rfind("da.", 0) == 0)
            throw ProtocolError("privacy audit: personalized tensor '" + name +
                                "' found in message from center " + std::to_string(msg.center_id));
}

namespace detail {

inline Tensor onehot_label(const Mask& m, int classes) {
    Tensor y({classes, m.h, m.w});
    const size_t hw = static_cast<size_t>(m.h) * m.w;
    for (size_t i = 0; i < hw; ++i) {
        const int cls = m.v[i] ? 1 : 0;
        y.data()[static_cast<size_t>(cls) * hw + i] = 1.0;
    }
    return y;
}

}  // namespace detail

/// Train one center in place for `epochs` epochs of the given phase.
/// Deterministic in (state, seed): batch order, augmentation, and latent
/// noise all derive from `seed`. Returns per-epoch mean loss terms.
inline std::vector<EpochMetrics> local_train(const NetConfig& cfg, const LossWeights& weights,
                                             Method method, CenterState& st,
                                             const TrainSchedule& sched, int epochs, Phase phase,
                                             uint64_t seed) {
    cfg.validate();
    weights.validate();
    sched.validate();
    if (epochs < 0) throw ValidationError("local_train: negative epoch count");
    if (st.train_data.empty()) throw ValidationError("local_train: center has no training data");

    Rng base(seed);
    Rng shuffle_rng = base.fork(1);
    Rng eps_rng = base.fork(2);
    Rng aug_rng = base.fork(3);

    const bool adapted = method_has_adaptation(method);
    const AdaptMode mode = adapted ? method_adapt_mode(method) : AdaptMode::fixed;
    const int n = static_cast<int>(st.train_data.size());

    std::vector<EpochMetrics> out;
    for (int e = 0; e < epochs; ++e) {
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);

        EpochMetrics em;
        em.phase = phase;
        int batches = 0;
        for (int start = 0; start < n; start += sched.batch_size) {
            const int bsz = std::min(sched.batch_size, n - start);
            Tape tape;
            Tensor loss_sum = Tensor::scalar(0.0);
            double bce = 0, bnr = 0, btr = 0, bkl = 0, btrace = 0;
            for (int bi = 0; bi < bsz; ++bi) {
                SegSample s = st.train_data[static_cast<size_t>(order[start + bi])];
                if (sched.augment) s = augment(s, aug_rng);
                const Tensor& x = s.image;
                Tensor y = detail::onehot_label(s.label, cfg.classes);

                Tensor loss_i;
                if (!adapted) {
                    Tensor z = Tensor::zeros({cfg.latent_dim});
                    Tensor f = forward_seg(cfg, st.theta_s, x, z);
                    Tensor ce = ce_loss(f, y);
                    bce += ce.value();
                    loss_i = ce;
                } else {
                    GaussianDiag post = forward_posterior(cfg, st.phi, x, y);
                    GaussianDiag prior = forward_prior(cfg, st.psi, x);
                    Tensor eps({cfg.latent_dim});
                    for (auto& v : eps.data()) v = eps_rng.normal();
                    Tensor z = sample_latent(post, eps);
                    Tensor f = forward_seg(cfg, st.theta_s, x, z);
                    Tensor cond;
                    if (mode == AdaptMode::distribution)
                        cond = broadcast_channels(z, cfg.height, cfg.width);
                    else if (mode == AdaptMode::image)
                        cond = x;
                    Tensor w = forward_da(cfg, st.theta_p, cond, mode);

                    Tensor kl = kl_diag_gauss(post, prior);
                    Tensor tr = tr_loss(w);
                    bkl += kl.value();
                    btr += tr.value();
                    btrace += tr.value();
                    if (phase == Phase::warmup) {
                        // warmup_loss composition: ce(f) + beta*KL - tr
                        Tensor ce = ce_loss(f, y);
                        bce += ce.value();
                        loss_i = sub(add(ce, mul_scalar(kl, weights.beta)), tr);
                    } else {
                        // total_loss composition: ce(W.f) + nr(f) + alpha*tr + beta*KL
                        Tensor local = apply_adaptation(w, f);
                        Tensor ce = ce_loss(local, y);
                        Tensor nr = nr_loss(f, y, weights.q);
                        bce += ce.value();
                        bnr += nr.value();
                        loss_i = add(add(ce, nr),
                                     add(mul_scalar(tr, weights.alpha), mul_scalar(kl, weights.beta)));
                    }
                }
                loss_sum = add(loss_sum, loss_i);
            }
            Tensor loss = mul_scalar(loss_sum, 1.0 / bsz);
            if (!std::isfinite(loss.value()))
                throw NumericError("local_train: non-finite batch loss at center " +
                                   std::to_string(st.center_id));
            backward(loss);
            adam_step(st.all_view, st.opt);

            em.ce += bce / bsz;
            em.nr += bnr / bsz;
            em.tr += btr / bsz;
            em.kl += bkl / bsz;
            em.total += loss.value();
            em.mean_trace += btrace / bsz;
            ++batches;
        }
        if (batches > 0) {
            em.ce /= batches;
            em.nr /= batches;
            em.tr /= batches;
            em.kl /= batches;
            em.total /= batches;
            em.mean_trace /= batches;
        }
        out.push_back(em);
        st.epochs_done += 1;
    }
    return out;
}

struct HistoryRow {
    int round = 0;
    int center = 0;
    int epoch = 0;  // center-local epoch index, cumulative
    EpochMetrics m;
};

struct RoundRow {
    int round = 0;
    int center = 0;
    double local_dice = 0.0;
};

struct ExperimentHistory {
    Method method = Method::ours;
    uint64_t seed = 0;
    std::vector<HistoryRow> rows;
    std::vector<RoundRow> round_rows;
    std::vector<std::string> round_digests;  // aggregated-blob digest per round
    std::vector<CenterState> centers;        // final states
};

using MessageSink = std::function<void(const RoundMessage&)>;

/// Mean Dice of a center's method-appropriate prediction on its own local
/// test set. Used for the per-round observability rows and by evaluation.
inline double center_local_dice(const NetConfig& cfg, Method method, const CenterState& st,
                                int samples, bool mean_latent, uint64_t seed) {
    if (st.local_test_data.empty())
        throw ValidationError("center_local_dice: empty local test set");
    PredictOptions opt;
    opt.samples = samples;
    opt.mean_latent = mean_latent;
    double acc = 0.0;
    for (size_t i = 0; i < st.local_test_data.size(); ++i) {
        const auto& s = st.local_test_data[i];
        Rng rng(mix_seed(seed, 0x7E57ull, static_cast<uint64_t>(i)));
        Tensor probs;
        if (method_has_adaptation(method))
            probs = predict_local(cfg, st.theta_s, st.psi, st.theta_p, method_adapt_mode(method),
                                  s.image, opt, rng);
        else
            probs = predict_global(cfg, st.theta_s, nullptr, s.image, opt, rng);
        acc += dice(argmax_mask(probs), s.label);
    }
    return acc / static_cast<double>(st.local_test_data.size());
}

/// Synchronous-round simulation: every round each center trains locally,
/// broadcasts its global part, and independently computes the size-weighted
/// aggregate. All centers must arrive at bitwise-identical global parameters;
/// anything else is a protocol error.
inline ExperimentHistory run_experiment(const NetConfig& cfg, const LossWeights& weights,
                                        const TrainSchedule& sched, Method method,
                                        const FederationData& data, uint64_t seed, int jobs = 1,
                                        const MessageSink& sink = nullptr) {
    cfg.validate();
    weights.validate();
    sched.validate();
    if (data.centers.empty()) throw ValidationError("run_experiment: no centers in dataset");
    if (jobs < 1) throw ValidationError("run_experiment: jobs must be >= 1");
    const int K = static_cast<int>(data.centers.size());
    const bool adapted = method_has_adaptation(method);

    // Every center starts from the same shared init; personalized nets get
    // per-center streams. Seeds derive only from the experiment seed.
    Rng init_rng(mix_seed(seed, 0x1217ull));
    ParameterSet theta_s0 = build_seg_params(cfg, init_rng);
    ParameterSet psi0, phi0;
    if (adapted) {
        psi0 = build_prior_params(cfg, init_rng);
        phi0 = build_posterior_params(cfg, init_rng);
    }

    ExperimentHistory hist;
    hist.method = method;
    hist.seed = seed;
    for (int k = 0; k < K; ++k) {
        CenterState st;
        st.center_id = data.centers[static_cast<size_t>(k)].spec.center_id;
        st.train_data = data.centers[static_cast<size_t>(k)].train;
        st.local_test_data = data.centers[static_cast<size_t>(k)].local_test;
        st.n_train = st.train_data.size();
        st.theta_s = theta_s0.clone();
        if (adapted) {
            st.psi = psi0.clone();
            st.phi = phi0.clone();
            Rng da_rng(mix_seed(seed, 0xDAull, static_cast<uint64_t>(st.center_id)));
            st.theta_p = build_da_params(cfg, da_rng, method_adapt_mode(method));
        }
        st.rebuild_views();
        st.opt.lr = sched.lr;
        hist.centers.push_back(std::move(st));
    }

    for (int r = 0; r < sched.rounds; ++r) {
        // --- local phase (parallelizable across centers) ---
        std::vector<std::vector<HistoryRow>> local_rows(static_cast<size_t>(K));
        auto train_center = [&](int k) {
            CenterState& st = hist.centers[static_cast<size_t>(k)];
            for (int e = 0; e < sched.local_epochs; ++e) {
                const Phase phase =
                    st.epochs_done < sched.warmup_epochs ? Phase::warmup : Phase::main;
                const Phase eff_phase = adapted ? phase : Phase::main;
                const uint64_t epoch_seed =
                    mix_seed(seed, static_cast<uint64_t>(st.center_id),
                             static_cast<uint64_t>(r) * sched.local_epochs + e + 1);
                std::vector<EpochMetrics> ms;
                try {
                    ms = local_train(cfg, weights, method, st, sched, 1, eff_phase, epoch_seed);
                } catch (const NumericError& ex) {
                    throw NumericError("round " + std::to_string(r) + ": " + ex.what());
                }
                HistoryRow row;
                row.round = r;
                row.center = st.center_id;
                row.epoch = st.epochs_done - 1;
                row.m = ms.at(0);
                local_rows[static_cast<size_t>(k)].push_back(row);
            }
        };
        if (jobs <= 1 || K == 1) {
            for (int k = 0; k < K; ++k) train_center(k);
        } else {
            std::vector<std::thread> pool;
            std::vector<std::exception_ptr> errs(static_cast<size_t>(K));
            std::atomic<int> next{0};
            const int nw = std::min(jobs, K);
            for (int t = 0; t < nw; ++t)
                pool.emplace_back([&] {
                    for (int k = next.fetch_add(1); k < K; k = next.fetch_add(1)) {
                        try {
                            train_center(k);
                        } catch (...) {
                            errs[static_cast<size_t>(k)] = std::current_exception();
                        }
                    }
                });
            for (auto& t : pool) t.join();
            for (auto& e : errs)
                if (e) std::rethrow_exception(e);
        }
        for (auto& rows : local_rows)
            for (auto& row : rows) hist.rows.push_back(row);

        // --- exchange + aggregation barrier ---
        if (method_aggregates(method)) {
            std::vector<std::vector<uint8_t>> frames;
            for (const auto& st : hist.centers) {
                RoundMessage msg;
                msg.center_id = static_cast<uint32_t>(st.center_id);
                msg.round = static_cast<uint32_t>(r);
                msg.n_train = st.n_train;
                msg.blob = to_blob(st.shared_view);
                audit_message_schema(msg);
                if (sink) sink(msg);
                frames.push_back(msg.encode());
            }

            // Every center independently decodes all frames and aggregates in
            // ascending center_id order.
            std::string round_digest;
            std::vector<uint8_t> reference_blob;
            for (int k = 0; k < K; ++k) {
                std::vector<RoundMessage> msgs;
                for (const auto& f : frames) msgs.push_back(RoundMessage::decode(f));
                std::sort(msgs.begin(), msgs.end(),
                          [](const RoundMessage& a, const RoundMessage& b) {
                              return a.center_id < b.center_id;
                          });
                std::vector<ParameterSet> sets;
                std::vector<uint64_t> sizes;
                for (const auto& m : msgs) {
                    sets.push_back(from_blob(m.blob));
                    sizes.push_back(m.n_train);
                }
                ParameterSet agg = aggregate(sets, sizes);
                const auto agg_blob = to_blob(agg);
                if (k == 0) {
                    reference_blob = agg_blob;
                    round_digest = hex64(fnv1a64(agg_blob.data(), agg_blob.size()));
                } else if (agg_blob != reference_blob) {
                    throw ProtocolError("round " + std::to_string(r) + ": center " +
                                        std::to_string(hist.centers[static_cast<size_t>(k)].center_id) +
                                        " computed a divergent aggregate");
                }
                hist.centers[static_cast<size_t>(k)].shared_view.load_values(agg);
            }
            hist.round_digests.push_back(round_digest);
        } else {
            hist.round_digests.emplace_back("");
        }

        // --- per-round local-test dice (observability; mean-latent, cheap) ---
        for (const auto& st : hist.centers) {
            RoundRow rr;
            rr.round = r;
            rr.center = st.center_id;
            rr.local_dice = center_local_dice(cfg, method, st, 1, true,
                                              mix_seed(seed, 0xD1CEull, static_cast<uint64_t>(r),
                                                       static_cast<uint64_t>(st.center_id)));
            hist.round_rows.push_back(rr);
        }
    }
    return hist;
}

/// The paper's method end to end.
inline ExperimentHistory run_swarm(const NetConfig& cfg, const LossWeights& weights,
                                   const TrainSchedule& sched, const FederationData& data,
                                   uint64_t seed, int jobs = 1, const MessageSink& sink = nullptr) {
    return run_experiment(cfg, weights, sched, Method::ours, data, seed, jobs, sink);
}

/// Comparison methods share the harness; `method` selects structure and loss.
inline ExperimentHistory run_baseline(const NetConfig& cfg, const LossWeights& weights,
                                      const TrainSchedule& sched, Method method,
                                      const FederationData& data, uint64_t seed, int jobs = 1,
                                      const MessageSink& sink = nullptr) {
    if (method == Method::ours)
        throw ValidationError("run_baseline: use run_swarm for the primary method");
    return run_experiment(cfg, weights, sched, method, data, seed, jobs, sink);
}

// ---------------------------------------------------------------------------
// History CSV emission (one row per center-epoch, plus per-round dice rows)
// ---------------------------------------------------------------------------

inline std::string history_to_csv(const ExperimentHistory& h) {
    std::string out = "round,center,epoch,phase,ce,nr,tr,kl,total,mean_trace\n";
    char buf[320];
    for (const auto& r : h.rows) {
        std::snprintf(buf, sizeof(buf), "%d,%d,%d,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                      r.round, r.center, r.epoch, to_string(r.m.phase).c_str(), r.m.ce, r.m.nr,
                      r.m.tr, r.m.kl, r.m.total, r.m.mean_trace);
        out += buf;
    }
    return out;
}

inline std::string rounds_to_csv(const ExperimentHistory& h) {
    std::string out = "round,center,local_dice,agg_digest\n";
    char buf[160];
    for (const auto& r : h.round_rows) {
        const auto& dig = h.round_digests[static_cast<size_t>(r.round)];
        std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%s\n", r.round, r.center, r.local_dice,
                      dig.c_str());
        out += buf;
    }
    return out;
}

}  // namespace swarmseg
