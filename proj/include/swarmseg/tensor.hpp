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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "swarmseg/common.hpp"

namespace swarmseg {

class Tape;

/// Dense row-major f64 tensor. Value-semantic handle over shared storage;
/// ops record themselves on the thread's active Tape when any input
/// requires gradients.
class Tensor {
public:
    struct Node {
        std::vector<int> shape;
        std::vector<double> data;
        std::vector<double> grad;  // allocated on first accumulation
        bool requires_grad = false;
    };

    Tensor() = default;

    explicit Tensor(std::vector<int> shape, bool requires_grad = false)
        : n_(std::make_shared<Node>()) {
        for (int d : shape)
            if (d <= 0) throw ShapeError("tensor: non-positive dim in shape " + shape_str(shape));
        n_->shape = std::move(shape);
        n_->data.assign(static_cast<size_t>(numel_of(n_->shape)), 0.0);
        n_->requires_grad = requires_grad;
    }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return Tensor(std::move(shape), requires_grad);
    }

    static Tensor full(std::vector<int> shape, double v, bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        Tensor t({1}, requires_grad);
        t.data()[0] = v;
        return t;
    }

    static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false) {
        Tensor t(std::move(shape), requires_grad);
        if (values.size() != t.data().size())
            throw ShapeError("tensor: data length " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(t.shape()));
        t.data() = std::move(values);
        return t;
    }

    bool valid() const { return static_cast<bool>(n_); }
    const std::vector<int>& shape() const { return n_->shape; }
    int64_t numel() const { return static_cast<int64_t>(n_->data.size()); }
    bool is_scalar() const { return n_->data.size() == 1; }

    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }

    double value() const {
        if (!is_scalar()) throw ShapeError("value(): tensor is not scalar, shape " + shape_str(shape()));
        return n_->data[0];
    }

    bool requires_grad() const { return n_ && n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }

    bool has_grad() const { return n_ && !n_->grad.empty(); }
    std::vector<double>& grad() {
        if (n_->grad.empty()) throw Error("grad(): no gradient accumulated");
        return n_->grad;
    }
    const std::vector<double>& grad() const {
        if (n_->grad.empty()) throw Error("grad(): no gradient accumulated");
        return n_->grad;
    }

    void zero_grad() {
        if (n_ && !n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
    }
    void drop_grad() {
        if (n_) n_->grad.clear();
    }

    /// Deep copy of values (fresh storage, no shared state).
    Tensor clone() const {
        Tensor t(n_->shape, n_->requires_grad);
        t.data() = n_->data;
        return t;
    }

    std::shared_ptr<Node> node() const { return n_; }

    /// Accumulate into the node's grad buffer, allocating it on first use.
    static void accum_grad(const std::shared_ptr<Node>& n, const double* g, size_t len) {
        if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
        double* dst = n->grad.data();
        for (size_t i = 0; i < len; ++i) dst[i] += g[i];
    }
    static std::vector<double>* grad_buf(const std::shared_ptr<Node>& n) {
        if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
        return &n->grad;
    }

private:
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}
    std::shared_ptr<Node> n_;
};

/// Per-forward-pass record of primitive applications. Recording order is
/// execution order, so each node's inputs precede it; the backward pass
/// replays entries exactly once, in reverse. One tape per thread at a time.
class Tape {
public:
    Tape() : prev_(active_ref()) { active_ref() = this; }
    ~Tape() { active_ref() = prev_; }

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_ref(); }

    void record(std::function<void()> backward_step) { entries_.push_back(std::move(backward_step)); }

    size_t size() const { return entries_.size(); }

    /// Run recorded steps newest-to-oldest, then discard them.
    void run_backward() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
        entries_.clear();
    }

private:
    static Tape*& active_ref() {
        thread_local Tape* t = nullptr;
        return t;
    }
    std::vector<std::function<void()>> entries_;
    Tape* prev_;
};

namespace detail {

inline bool tracing(const Tensor& a) { return Tape::active() != nullptr && a.requires_grad(); }
inline bool tracing(const Tensor& a, const Tensor& b) {
    return Tape::active() != nullptr && (a.requires_grad() || b.requires_grad());
}

inline void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v)
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite output value");
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline void require_rank(const char* op, const Tensor& t, size_t rank) {
    if (t.shape().size() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                         ", got shape " + shape_str(t.shape()));
}

/// Grad of `out` if anything flowed into it, else nullptr (branch unused by root).
inline const std::vector<double>* out_grad(const std::shared_ptr<Tensor::Node>& out) {
    return out->grad.empty() ? nullptr : &out->grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar primitives
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("add", a, b);
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    detail::check_finite("add", out.data());
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            if (an->requires_grad) Tensor::accum_grad(an, go->data(), go->size());
            if (bn->requires_grad) Tensor::accum_grad(bn, go->data(), go->size());
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("sub", a, b);
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    detail::check_finite("sub", out.data());
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            if (an->requires_grad) Tensor::accum_grad(an, go->data(), go->size());
            if (bn->requires_grad) {
                auto* gb = Tensor::grad_buf(bn);
                for (size_t i = 0; i < go->size(); ++i) (*gb)[i] -= (*go)[i];
            }
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("mul", a, b);
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    detail::check_finite("mul", out.data());
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            if (an->requires_grad) {
                auto* ga = Tensor::grad_buf(an);
                for (size_t i = 0; i < go->size(); ++i) (*ga)[i] += (*go)[i] * bn->data[i];
            }
            if (bn->requires_grad) {
                auto* gb = Tensor::grad_buf(bn);
                for (size_t i = 0; i < go->size(); ++i) (*gb)[i] += (*go)[i] * an->data[i];
            }
        });
    }
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + s;
    detail::check_finite("add_scalar", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            const auto* go = detail::out_grad(on);
            if (go) Tensor::accum_grad(an, go->data(), go->size());
        });
    }
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    detail::check_finite("mul_scalar", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, s] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (size_t i = 0; i < go->size(); ++i) (*ga)[i] += s * (*go)[i];
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (size_t i = 0; i < go->size(); ++i)
                if (an->data[i] > 0.0) (*ga)[i] += (*go)[i];
        });
    }
    return out;
}

inline Tensor softplus(const Tensor& a) {
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        out.data()[i] = x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    detail::check_finite("softplus", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (size_t i = 0; i < go->size(); ++i) {
                const double x = an->data[i];
                const double sig = x > 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
                (*ga)[i] += (*go)[i] * sig;
            }
        });
    }
    return out;
}

inline Tensor exp_t(const Tensor& a) {
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = std::exp(a.data()[i]);
    detail::check_finite("exp", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (size_t i = 0; i < go->size(); ++i) (*ga)[i] += (*go)[i] * on->data[i];
        });
    }
    return out;
}

inline Tensor log_t(const Tensor& a) {
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = std::log(a.data()[i]);
    detail::check_finite("log", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (size_t i = 0; i < go->size(); ++i) (*ga)[i] += (*go)[i] / an->data[i];
        });
    }
    return out;
}

/// Elementwise x^q for x >= 0 and constant exponent q. The derivative at
/// x == 0 with q < 1 is unbounded; it is clamped to 0 there so probability
/// underflow cannot inject infinities into the backward pass.
inline Tensor pow_const(const Tensor& a, double q) {
    for (double x : a.data())
        if (x < 0.0) throw ValidationError("pow_const: negative base");
    Tensor out(a.shape());
    const size_t n = a.data().size();
    for (size_t i = 0; i < n; ++i) out.data()[i] = std::pow(a.data()[i], q);
    detail::check_finite("pow_const", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, q] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (size_t i = 0; i < go->size(); ++i) {
                const double x = an->data[i];
                if (x > 0.0) (*ga)[i] += (*go)[i] * q * std::pow(x, q - 1.0);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    Tensor out = Tensor::scalar(s);
    detail::check_finite("sum", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            const double g = (*go)[0];
            for (auto& v : *ga) v += g;
        });
    }
    return out;
}

inline Tensor mean(const Tensor& a) {
    const double inv = 1.0 / static_cast<double>(a.numel());
    double s = 0.0;
    for (double x : a.data()) s += x;
    Tensor out = Tensor::scalar(s * inv);
    detail::check_finite("mean", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, inv] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            const double g = (*go)[0] * inv;
            for (auto& v : *ga) v += g;
        });
    }
    return out;
}

inline Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    if (numel_of(new_shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    Tensor out(new_shape);
    out.data() = a.data();
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on] {
            const auto* go = detail::out_grad(on);
            if (go) Tensor::accum_grad(an, go->data(), go->size());
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank("matmul", a, 2);
    detail::require_rank("matmul", b, 2);
    const int m = a.shape()[0], k = a.shape()[1];
    const int k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul: inner dims differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out({m, n});
    const double* A = a.data().data();
    const double* B = b.data().data();
    double* O = out.data().data();
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const double av = A[i * k + l];
            const double* brow = B + l * n;
            double* orow = O + i * n;
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    detail::check_finite("matmul", out.data());
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        Tape::active()->record([an, bn, on, m, k, n] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            const double* G = go->data();
            if (an->requires_grad) {
                auto* ga = Tensor::grad_buf(an);
                const double* B = bn->data.data();
                for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                        double s = 0.0;
                        const double* grow = G + i * n;
                        const double* brow = B + l * n;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        (*ga)[i * k + l] += s;
                    }
            }
            if (bn->requires_grad) {
                auto* gb = Tensor::grad_buf(bn);
                const double* A = an->data.data();
                for (int i = 0; i < m; ++i)
                    for (int l = 0; l < k; ++l) {
                        const double av = A[i * k + l];
                        const double* grow = G + i * n;
                        double* gbrow = gb->data() + l * n;
                        for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Spatial primitives (C,H,W layout)
// ---------------------------------------------------------------------------

/// 3x3 convolution, stride 1, zero padding; spatial dims are preserved.
/// input (C_in,H,W), kernel (C_out,C_in,3,3), optional bias (C_out).
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias = Tensor()) {
    detail::require_rank("conv2d", input, 3);
    detail::require_rank("conv2d", kernel, 4);
    const int ci = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    const int co = kernel.shape()[0];
    if (kernel.shape()[1] != ci || kernel.shape()[2] != 3 || kernel.shape()[3] != 3)
        throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
    const bool has_bias = bias.valid();
    if (has_bias && (bias.shape().size() != 1 || bias.shape()[0] != co))
        throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " incompatible with C_out " +
                         std::to_string(co));

    Tensor out({co, h, w});
    {
        const double* I = input.data().data();
        const double* K = kernel.data().data();
        double* O = out.data().data();
        for (int c = 0; c < co; ++c) {
            double* oplane = O + static_cast<size_t>(c) * h * w;
            if (has_bias) {
                const double bv = bias.data()[c];
                for (int i = 0; i < h * w; ++i) oplane[i] = bv;
            }
            for (int b = 0; b < ci; ++b) {
                const double* iplane = I + static_cast<size_t>(b) * h * w;
                const double* kk = K + (static_cast<size_t>(c) * ci + b) * 9;
                for (int dy = 0; dy < 3; ++dy)
                    for (int dx = 0; dx < 3; ++dx) {
                        const double kv = kk[dy * 3 + dx];
                        if (kv == 0.0) continue;
                        const int y0 = std::max(0, 1 - dy), y1 = std::min(h, h + 1 - dy);
                        const int x0 = std::max(0, 1 - dx), x1 = std::min(w, w + 1 - dx);
                        for (int y = y0; y < y1; ++y) {
                            const double* irow = iplane + (y + dy - 1) * w + (dx - 1);
                            double* orow = oplane + y * w;
                            for (int x = x0; x < x1; ++x) orow[x] += kv * irow[x];
                        }
                    }
            }
        }
    }
    detail::check_finite("conv2d", out.data());

    const bool trace = Tape::active() != nullptr &&
                       (input.requires_grad() || kernel.requires_grad() ||
                        (has_bias && bias.requires_grad()));
    if (trace) {
        out.set_requires_grad(true);
        auto in_n = input.node(), k_n = kernel.node(), o_n = out.node();
        auto b_n = has_bias ? bias.node() : nullptr;
        Tape::active()->record([in_n, k_n, b_n, o_n, ci, co, h, w] {
            const auto* go = detail::out_grad(o_n);
            if (!go) return;
            const double* G = go->data();
            if (b_n && b_n->requires_grad) {
                auto* gb = Tensor::grad_buf(b_n);
                for (int c = 0; c < co; ++c) {
                    const double* gplane = G + static_cast<size_t>(c) * h * w;
                    double s = 0.0;
                    for (int i = 0; i < h * w; ++i) s += gplane[i];
                    (*gb)[c] += s;
                }
            }
            const bool want_din = in_n->requires_grad;
            const bool want_dk = k_n->requires_grad;
            if (!want_din && !want_dk) return;
            std::vector<double>* gi = want_din ? Tensor::grad_buf(in_n) : nullptr;
            std::vector<double>* gk = want_dk ? Tensor::grad_buf(k_n) : nullptr;
            const double* K = k_n->data.data();
            const double* I = in_n->data.data();
            for (int c = 0; c < co; ++c) {
                const double* gplane = G + static_cast<size_t>(c) * h * w;
                for (int b = 0; b < ci; ++b) {
                    const size_t koff = (static_cast<size_t>(c) * ci + b) * 9;
                    const double* iplane = I + static_cast<size_t>(b) * h * w;
                    double* giplane = want_din ? gi->data() + static_cast<size_t>(b) * h * w : nullptr;
                    for (int dy = 0; dy < 3; ++dy)
                        for (int dx = 0; dx < 3; ++dx) {
                            const double kv = K[koff + dy * 3 + dx];
                            const int y0 = std::max(0, 1 - dy), y1 = std::min(h, h + 1 - dy);
                            const int x0 = std::max(0, 1 - dx), x1 = std::min(w, w + 1 - dx);
                            double ksum = 0.0;
                            for (int y = y0; y < y1; ++y) {
                                const int shift = (y + dy - 1) * w + (dx - 1);
                                const double* grow = gplane + y * w;
                                if (want_din) {
                                    double* girow = giplane + shift;
                                    for (int x = x0; x < x1; ++x) girow[x] += kv * grow[x];
                                }
                                if (want_dk) {
                                    const double* irow = iplane + shift;
                                    for (int x = x0; x < x1; ++x) ksum += grow[x] * irow[x];
                                }
                            }
                            if (want_dk) (*gk)[koff + dy * 3 + dx] += ksum;
                        }
                }
            }
        });
    }
    return out;
}

/// 1x1 convolution (per-pixel channel mix): input (C_in,H,W), kernel (C_out,C_in).
inline Tensor conv1x1(const Tensor& input, const Tensor& kernel, const Tensor& bias = Tensor()) {
    detail::require_rank("conv1x1", input, 3);
    detail::require_rank("conv1x1", kernel, 2);
    const int ci = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
    const int co = kernel.shape()[0];
    if (kernel.shape()[1] != ci)
        throw ShapeError("conv1x1: kernel " + shape_str(kernel.shape()) + " incompatible with input " +
                         shape_str(input.shape()));
    const bool has_bias = bias.valid();
    if (has_bias && (bias.shape().size() != 1 || bias.shape()[0] != co))
        throw ShapeError("conv1x1: bias " + shape_str(bias.shape()) + " incompatible with C_out " +
                         std::to_string(co));
    Tensor out({co, h, w});
    const int hw = h * w;
    {
        const double* I = input.data().data();
        const double* K = kernel.data().data();
        double* O = out.data().data();
        for (int c = 0; c < co; ++c) {
            double* oplane = O + static_cast<size_t>(c) * hw;
            if (has_bias) {
                const double bv = bias.data()[c];
                for (int i = 0; i < hw; ++i) oplane[i] = bv;
            }
            for (int b = 0; b < ci; ++b) {
                const double kv = K[c * ci + b];
                const double* iplane = I + static_cast<size_t>(b) * hw;
                for (int i = 0; i < hw; ++i) oplane[i] += kv * iplane[i];
            }
        }
    }
    detail::check_finite("conv1x1", out.data());
    const bool trace = Tape::active() != nullptr &&
                       (input.requires_grad() || kernel.requires_grad() ||
                        (has_bias && bias.requires_grad()));
    if (trace) {
        out.set_requires_grad(true);
        auto in_n = input.node(), k_n = kernel.node(), o_n = out.node();
        auto b_n = has_bias ? bias.node() : nullptr;
        Tape::active()->record([in_n, k_n, b_n, o_n, ci, co, hw] {
            const auto* go = detail::out_grad(o_n);
            if (!go) return;
            const double* G = go->data();
            if (b_n && b_n->requires_grad) {
                auto* gb = Tensor::grad_buf(b_n);
                for (int c = 0; c < co; ++c) {
                    const double* gplane = G + static_cast<size_t>(c) * hw;
                    double s = 0.0;
                    for (int i = 0; i < hw; ++i) s += gplane[i];
                    (*gb)[c] += s;
                }
            }
            if (in_n->requires_grad) {
                auto* gi = Tensor::grad_buf(in_n);
                const double* K = k_n->data.data();
                for (int c = 0; c < co; ++c) {
                    const double* gplane = G + static_cast<size_t>(c) * hw;
                    for (int b = 0; b < ci; ++b) {
                        const double kv = K[c * ci + b];
                        double* giplane = gi->data() + static_cast<size_t>(b) * hw;
                        for (int i = 0; i < hw; ++i) giplane[i] += kv * gplane[i];
                    }
                }
            }
            if (k_n->requires_grad) {
                auto* gk = Tensor::grad_buf(k_n);
                const double* I = in_n->data.data();
                for (int c = 0; c < co; ++c) {
                    const double* gplane = G + static_cast<size_t>(c) * hw;
                    for (int b = 0; b < ci; ++b) {
                        const double* iplane = I + static_cast<size_t>(b) * hw;
                        double s = 0.0;
                        for (int i = 0; i < hw; ++i) s += gplane[i] * iplane[i];
                        (*gk)[c * ci + b] += s;
                    }
                }
            }
        });
    }
    return out;
}

/// Per-pixel softmax over the channel dimension of a (C,H,W) tensor.
inline Tensor channel_softmax(const Tensor& a) {
    detail::require_rank("channel_softmax", a, 3);
    const int c = a.shape()[0], hw = a.shape()[1] * a.shape()[2];
    Tensor out(a.shape());
    const double* I = a.data().data();
    double* O = out.data().data();
    for (int p = 0; p < hw; ++p) {
        double m = I[p];
        for (int j = 1; j < c; ++j) m = std::max(m, I[j * hw + p]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) {
            const double e = std::exp(I[j * hw + p] - m);
            O[j * hw + p] = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (int j = 0; j < c; ++j) O[j * hw + p] *= inv;
    }
    detail::check_finite("channel_softmax", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, c, hw] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            const double* G = go->data();
            const double* Y = on->data.data();
            for (int p = 0; p < hw; ++p) {
                double dot = 0.0;
                for (int j = 0; j < c; ++j) dot += G[j * hw + p] * Y[j * hw + p];
                for (int j = 0; j < c; ++j)
                    (*ga)[j * hw + p] += Y[j * hw + p] * (G[j * hw + p] - dot);
            }
        });
    }
    return out;
}

/// 2x2 max pooling with stride 2; H and W must be even.
inline Tensor maxpool2(const Tensor& a) {
    detail::require_rank("maxpool2", a, 3);
    const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
    if (h % 2 || w % 2)
        throw ShapeError("maxpool2: odd spatial dims in " + shape_str(a.shape()));
    const int oh = h / 2, ow = w / 2;
    Tensor out({c, oh, ow});
    auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(c) * oh * ow);
    const double* I = a.data().data();
    double* O = out.data().data();
    for (int b = 0; b < c; ++b) {
        const double* iplane = I + static_cast<size_t>(b) * h * w;
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x) {
                const int base = 2 * y * w + 2 * x;
                int best = base;
                double bv = iplane[base];
                for (int k = 1; k < 4; ++k) {
                    const int idx = base + (k >> 1) * w + (k & 1);
                    if (iplane[idx] > bv) {
                        bv = iplane[idx];
                        best = idx;
                    }
                }
                O[(static_cast<size_t>(b) * oh + y) * ow + x] = bv;
                (*argmax)[(static_cast<size_t>(b) * oh + y) * ow + x] = best;
            }
    }
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, argmax, c, h, w, oh, ow] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (int b = 0; b < c; ++b) {
                const size_t obase = static_cast<size_t>(b) * oh * ow;
                double* giplane = ga->data() + static_cast<size_t>(b) * h * w;
                for (size_t i = 0; i < static_cast<size_t>(oh) * ow; ++i)
                    giplane[(*argmax)[obase + i]] += (*go)[obase + i];
            }
        });
    }
    return out;
}

/// Nearest-neighbor 2x upsampling.
inline Tensor upsample_nearest2(const Tensor& a) {
    detail::require_rank("upsample_nearest2", a, 3);
    const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
    Tensor out({c, 2 * h, 2 * w});
    const double* I = a.data().data();
    double* O = out.data().data();
    for (int b = 0; b < c; ++b)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double v = I[(static_cast<size_t>(b) * h + y) * w + x];
                const size_t o = (static_cast<size_t>(b) * 2 * h + 2 * y) * 2 * w + 2 * x;
                O[o] = v;
                O[o + 1] = v;
                O[o + 2 * w] = v;
                O[o + 2 * w + 1] = v;
            }
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, c, h, w] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            const double* G = go->data();
            for (int b = 0; b < c; ++b)
                for (int y = 0; y < h; ++y)
                    for (int x = 0; x < w; ++x) {
                        const size_t o = (static_cast<size_t>(b) * 2 * h + 2 * y) * 2 * w + 2 * x;
                        (*ga)[(static_cast<size_t>(b) * h + y) * w + x] +=
                            G[o] + G[o + 1] + G[o + 2 * w] + G[o + 2 * w + 1];
                    }
        });
    }
    return out;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::require_rank("concat_channels", a, 3);
    detail::require_rank("concat_channels", b, 3);
    if (a.shape()[1] != b.shape()[1] || a.shape()[2] != b.shape()[2])
        throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    const int ca = a.shape()[0], cb = b.shape()[0];
    Tensor out({ca + cb, a.shape()[1], a.shape()[2]});
    std::copy(a.data().begin(), a.data().end(), out.data().begin());
    std::copy(b.data().begin(), b.data().end(), out.data().begin() + a.data().size());
    if (detail::tracing(a, b)) {
        out.set_requires_grad(true);
        auto an = a.node(), bn = b.node(), on = out.node();
        const size_t na = a.data().size();
        Tape::active()->record([an, bn, on, na] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            if (an->requires_grad) Tensor::accum_grad(an, go->data(), na);
            if (bn->requires_grad) Tensor::accum_grad(bn, go->data() + na, go->size() - na);
        });
    }
    return out;
}

/// Channels [c0, c1) of a (C,H,W) tensor.
inline Tensor slice_channels(const Tensor& a, int c0, int c1) {
    detail::require_rank("slice_channels", a, 3);
    const int c = a.shape()[0];
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw ShapeError("slice_channels: range [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for " + shape_str(a.shape()));
    const size_t hw = static_cast<size_t>(a.shape()[1]) * a.shape()[2];
    Tensor out({c1 - c0, a.shape()[1], a.shape()[2]});
    std::copy(a.data().begin() + c0 * hw, a.data().begin() + c1 * hw, out.data().begin());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, c0, hw] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (size_t i = 0; i < go->size(); ++i) (*ga)[c0 * hw + i] += (*go)[i];
        });
    }
    return out;
}

/// Tile a length-C vector into a (C,H,W) constant-per-channel map.
inline Tensor broadcast_channels(const Tensor& v, int h, int w) {
    detail::require_rank("broadcast_channels", v, 1);
    const int c = v.shape()[0];
    Tensor out({c, h, w});
    const size_t hw = static_cast<size_t>(h) * w;
    for (int b = 0; b < c; ++b)
        std::fill_n(out.data().begin() + b * hw, hw, v.data()[b]);
    if (detail::tracing(v)) {
        out.set_requires_grad(true);
        auto vn = v.node(), on = out.node();
        Tape::active()->record([vn, on, c, hw] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* gv = Tensor::grad_buf(vn);
            for (int b = 0; b < c; ++b) {
                double s = 0.0;
                for (size_t i = 0; i < hw; ++i) s += (*go)[b * hw + i];
                (*gv)[b] += s;
            }
        });
    }
    return out;
}

/// Spatial mean per channel: (C,H,W) -> (C).
inline Tensor global_avg_pool(const Tensor& a) {
    detail::require_rank("global_avg_pool", a, 3);
    const int c = a.shape()[0];
    const size_t hw = static_cast<size_t>(a.shape()[1]) * a.shape()[2];
    const double inv = 1.0 / static_cast<double>(hw);
    Tensor out({c});
    for (int b = 0; b < c; ++b) {
        double s = 0.0;
        for (size_t i = 0; i < hw; ++i) s += a.data()[b * hw + i];
        out.data()[b] = s * inv;
    }
    detail::check_finite("global_avg_pool", out.data());
    if (detail::tracing(a)) {
        out.set_requires_grad(true);
        auto an = a.node(), on = out.node();
        Tape::active()->record([an, on, c, hw, inv] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* ga = Tensor::grad_buf(an);
            for (int b = 0; b < c; ++b) {
                const double g = (*go)[b] * inv;
                for (size_t i = 0; i < hw; ++i) (*ga)[b * hw + i] += g;
            }
        });
    }
    return out;
}

/// Per-pixel matrix-vector product: w (C,C,H,W), p (C,H,W) -> (C,H,W),
/// out[c] = sum_j w[c,j] * p[j] at every pixel.
inline Tensor pixelwise_matvec(const Tensor& w, const Tensor& p) {
    detail::require_rank("pixelwise_matvec", w, 4);
    detail::require_rank("pixelwise_matvec", p, 3);
    const int c = p.shape()[0], h = p.shape()[1], ww = p.shape()[2];
    if (w.shape()[0] != c || w.shape()[1] != c || w.shape()[2] != h || w.shape()[3] != ww)
        throw ShapeError("pixelwise_matvec: field " + shape_str(w.shape()) + " incompatible with probs " +
                         shape_str(p.shape()));
    const size_t hw = static_cast<size_t>(h) * ww;
    Tensor out({c, h, ww});
    {
        const double* W = w.data().data();
        const double* P = p.data().data();
        double* O = out.data().data();
        for (int a = 0; a < c; ++a)
            for (int j = 0; j < c; ++j) {
                const double* wpl = W + (static_cast<size_t>(a) * c + j) * hw;
                const double* ppl = P + static_cast<size_t>(j) * hw;
                double* opl = O + static_cast<size_t>(a) * hw;
                for (size_t i = 0; i < hw; ++i) opl[i] += wpl[i] * ppl[i];
            }
    }
    detail::check_finite("pixelwise_matvec", out.data());
    if (detail::tracing(w, p)) {
        out.set_requires_grad(true);
        auto wn = w.node(), pn = p.node(), on = out.node();
        Tape::active()->record([wn, pn, on, c, hw] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            const double* G = go->data();
            if (wn->requires_grad) {
                auto* gw = Tensor::grad_buf(wn);
                const double* P = pn->data.data();
                for (int a = 0; a < c; ++a)
                    for (int j = 0; j < c; ++j) {
                        double* gwpl = gw->data() + (static_cast<size_t>(a) * c + j) * hw;
                        const double* ppl = P + static_cast<size_t>(j) * hw;
                        const double* gpl = G + static_cast<size_t>(a) * hw;
                        for (size_t i = 0; i < hw; ++i) gwpl[i] += gpl[i] * ppl[i];
                    }
            }
            if (pn->requires_grad) {
                auto* gp = Tensor::grad_buf(pn);
                const double* W = wn->data.data();
                for (int a = 0; a < c; ++a)
                    for (int j = 0; j < c; ++j) {
                        const double* wpl = W + (static_cast<size_t>(a) * c + j) * hw;
                        double* gppl = gp->data() + static_cast<size_t>(j) * hw;
                        const double* gpl = G + static_cast<size_t>(a) * hw;
                        for (size_t i = 0; i < hw; ++i) gppl[i] += wpl[i] * gpl[i];
                    }
            }
        });
    }
    return out;
}

/// Normalize each per-pixel column of a (C,C,H,W) field to sum 1.
/// Entry layout matches pixelwise_matvec: axis 0 indexes the output class
/// (row), axis 1 the input class (column).
inline Tensor normalize_columns(const Tensor& w) {
    detail::require_rank("normalize_columns", w, 4);
    const int c = w.shape()[0];
    if (w.shape()[1] != c)
        throw ShapeError("normalize_columns: field not square, " + shape_str(w.shape()));
    const size_t hw = static_cast<size_t>(w.shape()[2]) * w.shape()[3];
    Tensor out(w.shape());
    {
        const double* W = w.data().data();
        double* O = out.data().data();
        for (int j = 0; j < c; ++j)
            for (size_t i = 0; i < hw; ++i) {
                double s = 0.0;
                for (int a = 0; a < c; ++a) s += W[(static_cast<size_t>(a) * c + j) * hw + i];
                const double inv = 1.0 / s;
                for (int a = 0; a < c; ++a) {
                    const size_t idx = (static_cast<size_t>(a) * c + j) * hw + i;
                    O[idx] = W[idx] * inv;
                }
            }
    }
    detail::check_finite("normalize_columns", out.data());
    if (detail::tracing(w)) {
        out.set_requires_grad(true);
        auto wn = w.node(), on = out.node();
        Tape::active()->record([wn, on, c, hw] {
            const auto* go = detail::out_grad(on);
            if (!go) return;
            auto* gw = Tensor::grad_buf(wn);
            const double* G = go->data();
            const double* W = wn->data.data();
            const double* Y = on->data.data();
            for (int j = 0; j < c; ++j)
                for (size_t i = 0; i < hw; ++i) {
                    double s = 0.0, dot = 0.0;
                    for (int a = 0; a < c; ++a) {
                        const size_t idx = (static_cast<size_t>(a) * c + j) * hw + i;
                        s += W[idx];
                        dot += G[idx] * Y[idx];
                    }
                    const double inv = 1.0 / s;
                    for (int a = 0; a < c; ++a) {
                        const size_t idx = (static_cast<size_t>(a) * c + j) * hw + i;
                        (*gw)[idx] += (G[idx] - dot) * inv;
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Backward driver and gradient checking
// ---------------------------------------------------------------------------

/// Reverse pass from a scalar root over the thread's active tape. Seeds the
/// root gradient with 1, accumulates into every requires-grad leaf reached,
/// then discards the tape entries.
inline void backward(const Tensor& root) {
    if (!root.is_scalar())
        throw ShapeError("backward: root must be scalar, got shape " + shape_str(root.shape()));
    Tape* tape = Tape::active();
    if (!tape) throw Error("backward: no active tape on this thread");
    auto rn = root.node();
    if (rn->grad.empty()) rn->grad.assign(1, 0.0);
    rn->grad[0] = 1.0;
    tape->run_backward();
}

/// Max relative disagreement between the analytic gradient of f at x and a
/// central-difference estimate: max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5) {
    if (eps < 1e-7 || eps > 1e-3)
        throw ValidationError("grad_check: eps " + std::to_string(eps) + " outside [1e-7, 1e-3]");

    auto eval_plain = [&](const Tensor& p) {
        Tensor arg = p.clone();
        arg.set_requires_grad(false);
        Tensor y = f(arg);
        if (!y.is_scalar()) throw ShapeError("grad_check: f must be scalar-valued");
        return y.value();
    };

    const double v1 = eval_plain(x);
    const double v2 = eval_plain(x);
    if (std::memcmp(&v1, &v2, sizeof(double)) != 0)
        throw Error("grad_check: f is not deterministic (two evaluations disagree)");

    Tensor leaf = x.clone();
    leaf.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor y = f(leaf);
        if (!y.is_scalar()) throw ShapeError("grad_check: f must be scalar-valued");
        backward(y);
        analytic = leaf.has_grad() ? leaf.grad() : std::vector<double>(leaf.data().size(), 0.0);
    }

    double worst = 0.0;
    Tensor probe = x.clone();
    probe.set_requires_grad(false);
    for (size_t i = 0; i < probe.data().size(); ++i) {
        const double keep = probe.data()[i];
        probe.data()[i] = keep + eps;
        const double fp = eval_plain(probe);
        probe.data()[i] = keep - eps;
        const double fm = eval_plain(probe);
        probe.data()[i] = keep;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double rel = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace swarmseg
