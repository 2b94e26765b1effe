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
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "swarmseg/common.hpp"
#include "swarmseg/rng.hpp"
#include "swarmseg/tensor.hpp"

namespace swarmseg {

/// Named, insertion-ordered collection of trainable tensors. Iteration order
/// is the order of add() calls, which fixes the layout used by serialization
/// and aggregation.
class ParameterSet {
public:
    void add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ValidationError("ParameterSet: duplicate parameter '" + name + "'");
        t.set_requires_grad(true);
        index_[name] = items_.size();
        items_.emplace_back(name, std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("ParameterSet: unknown parameter '" + name + "'");
        return items_[it->second].second;
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ValidationError("ParameterSet: unknown parameter '" + name + "'");
        return items_[it->second].second;
    }

    size_t size() const { return items_.size(); }
    bool empty() const { return items_.empty(); }

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& [name, t] : items_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : items_) t.zero_grad();
    }

    /// Deep copy: fresh tensors, same names and order.
    ParameterSet clone() const {
        ParameterSet out;
        for (const auto& [name, t] : items_) out.add(name, t.clone());
        return out;
    }

    /// True when both sets declare the same names, order, and shapes.
    bool same_schema(const ParameterSet& other) const {
        if (items_.size() != other.items_.size()) return false;
        for (size_t i = 0; i < items_.size(); ++i) {
            if (items_[i].first != other.items_[i].first) return false;
            if (items_[i].second.shape() != other.items_[i].second.shape()) return false;
        }
        return true;
    }

    /// Copy values (not gradients) from a schema-identical set.
    void load_values(const ParameterSet& src) {
        if (!same_schema(src)) throw ValidationError("ParameterSet: load_values schema mismatch");
        for (size_t i = 0; i < items_.size(); ++i)
            items_[i].second.data() = src.items_[i].second.data();
    }

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::map<std::string, size_t> index_;
};

/// Adam with bias correction. Moment buffers are keyed by parameter name and
/// created lazily; a single step counter is shared by every parameter so the
/// bias correction stays consistent across the whole set.
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments;
};

/// One Adam update over every parameter in the set. Each parameter must carry
/// an accumulated gradient; a missing one means the graph was wired wrong, so
/// the error names the offending parameter. Gradients are cleared afterwards.
inline void adam_step(ParameterSet& params, AdamState& st) {
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (auto& [name, t] : params) {
        if (!t.has_grad())
            throw Error("adam_step: parameter '" + name + "' has no accumulated gradient");
        auto& [m, v] = st.moments[name];
        if (m.empty()) {
            m.assign(t.data().size(), 0.0);
            v.assign(t.data().size(), 0.0);
        } else if (m.size() != t.data().size()) {
            throw ShapeError("adam_step: moment size mismatch for '" + name + "'");
        }
        const auto& g = t.grad();
        auto& x = t.data();
        for (size_t i = 0; i < x.size(); ++i) {
            if (!std::isfinite(g[i]))
                throw NumericError("adam_step: non-finite gradient in '" + name + "'");
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            x[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
        t.zero_grad();
    }
}

// ---------------------------------------------------------------------------
// Initialization helpers
// ---------------------------------------------------------------------------

/// He-style normal init: stddev sqrt(2 / fan_in).
inline Tensor init_conv3x3(Rng& rng, int c_out, int c_in) {
    Tensor t({c_out, c_in, 3, 3});
    const double s = std::sqrt(2.0 / (9.0 * c_in));
    for (auto& v : t.data()) v = rng.normal(0.0, s);
    return t;
}

inline Tensor init_conv1x1(Rng& rng, int c_out, int c_in) {
    Tensor t({c_out, c_in});
    const double s = std::sqrt(2.0 / c_in);
    for (auto& v : t.data()) v = rng.normal(0.0, s);
    return t;
}

/// Linear heads (mu / log-sigma) are not relu-followed, so gain 1 with fan-in
/// scaling keeps their outputs O(1); anything hotter lets exp(log_sigma)
/// explode at initialization and non-finite values cascade through the
/// adaptation network.
inline Tensor init_linear(Rng& rng, int rows, int cols) {
    Tensor t({rows, cols});
    const double s = std::sqrt(1.0 / rows);
    for (auto& v : t.data()) v = rng.normal(0.0, s);
    return t;
}

inline Tensor init_zeros(std::vector<int> shape) { return Tensor::zeros(std::move(shape)); }

}  // namespace swarmseg
