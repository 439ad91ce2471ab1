#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <utility>
#include <vector>

#include "sandwich/core/rng.hpp"
#include "sandwich/core/tensor.hpp"

namespace sandwich {

// Reverse-mode autodiff over Tensor<S>. Ops execute eagerly and record a
// backward closure; backward() replays closures in reverse creation order,
// which is a valid topological order by construction. All accumulation uses
// fixed loop order, so results are bitwise reproducible run to run.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

template <typename S>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor<S> value, bool requires_grad) {
        return push(std::move(value), requires_grad, {});
    }

    Var zero_scalar() { return leaf(Tensor<S>({1}), false); }

    const Tensor<S>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    Tensor<S>& grad(Var v) { return nodes_[static_cast<std::size_t>(v.id)].grad; }
    const Tensor<S>& grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad; }
    bool requires_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs; }
    S scalar(Var v) const {
        const auto& t = value(v);
        if (t.size() != 1) throw ShapeError("scalar() on non-scalar var of shape " + shape_str(t.shape));
        return t.data[0];
    }

    void backward(Var root) {
        auto& g = grad(root);
        if (g.size() != 1) throw ShapeError("backward root must be scalar");
        g.data[0] = S(1);
        sweep();
    }

    // Seeds gradients at selected vars (split-learning boundary) and, if any
    // seed is a scalar loss, its upstream terms as well, then runs one sweep.
    void backward_seeded(const std::vector<std::pair<Var, Tensor<S>>>& seeds) {
        for (const auto& [v, seed] : seeds) {
            auto& g = grad(v);
            if (g.shape != seed.shape)
                throw ShapeError("gradient seed shape " + shape_str(seed.shape) + " does not match var shape " +
                                 shape_str(g.shape));
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] += seed[i];
        }
        sweep();
    }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        const auto &x = value(a), &y = value(b);
        if (!x.same_shape(y)) throw ShapeError("add: shape mismatch " + shape_str(x.shape) + " vs " + shape_str(y.shape));
        Tensor<S> out = x;
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] += y[i];
        return push(std::move(out), requires_grad(a) || requires_grad(b), [this, a, b](int self) {
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            if (requires_grad(a)) acc(a, g, S(1));
            if (requires_grad(b)) acc(b, g, S(1));
        });
    }

    Var sub(Var a, Var b) {
        const auto &x = value(a), &y = value(b);
        if (!x.same_shape(y)) throw ShapeError("sub: shape mismatch");
        Tensor<S> out = x;
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= y[i];
        return push(std::move(out), requires_grad(a) || requires_grad(b), [this, a, b](int self) {
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            if (requires_grad(a)) acc(a, g, S(1));
            if (requires_grad(b)) acc(b, g, S(-1));
        });
    }

    Var mul(Var a, Var b) {
        const auto &x = value(a), &y = value(b);
        if (!x.same_shape(y)) throw ShapeError("mul: shape mismatch");
        Tensor<S> out = x;
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= y[i];
        return push(std::move(out), requires_grad(a) || requires_grad(b), [this, a, b](int self) {
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            if (requires_grad(a)) {
                auto& da = grad(a);
                const auto& yv = value(b);
                for (std::int64_t i = 0; i < g.size(); ++i) da[i] += g[i] * yv[i];
            }
            if (requires_grad(b)) {
                auto& db = grad(b);
                const auto& xv = value(a);
                for (std::int64_t i = 0; i < g.size(); ++i) db[i] += g[i] * xv[i];
            }
        });
    }

    Var scale(Var a, double c) {
        Tensor<S> out = value(a);
        for (auto& v : out.data) v = static_cast<S>(v * c);
        return push(std::move(out), requires_grad(a), [this, a, c](int self) {
            if (!requires_grad(a)) return;
            acc(a, nodes_[static_cast<std::size_t>(self)].grad, static_cast<S>(c));
        });
    }

    Var square(Var a) {
        Tensor<S> out = value(a);
        for (auto& v : out.data) v *= v;
        return push(std::move(out), requires_grad(a), [this, a](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            const auto& x = value(a);
            auto& da = grad(a);
            for (std::int64_t i = 0; i < g.size(); ++i) da[i] += S(2) * x[i] * g[i];
        });
    }

    Var log_eps(Var a, double eps) {
        Tensor<S> out = value(a);
        for (auto& v : out.data) v = static_cast<S>(std::log(static_cast<double>(v) + eps));
        return push(std::move(out), requires_grad(a), [this, a, eps](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            const auto& x = value(a);
            auto& da = grad(a);
            for (std::int64_t i = 0; i < g.size(); ++i)
                da[i] += g[i] / static_cast<S>(static_cast<double>(x[i]) + eps);
        });
    }

    Var elu(Var a, double alpha = 1.0) {
        Tensor<S> out = value(a);
        for (auto& v : out.data)
            if (v < S(0)) v = static_cast<S>(alpha * (std::exp(static_cast<double>(v)) - 1.0));
        return push(std::move(out), requires_grad(a), [this, a, alpha](int self) {
            if (!requires_grad(a)) return;
            const auto& node = nodes_[static_cast<std::size_t>(self)];
            const auto& g = node.grad;
            const auto& x = value(a);
            const auto& y = node.value;
            auto& da = grad(a);
            for (std::int64_t i = 0; i < g.size(); ++i)
                da[i] += g[i] * (x[i] > S(0) ? S(1) : y[i] + static_cast<S>(alpha));
        });
    }

    Var exp_(Var a) {
        Tensor<S> out = value(a);
        for (auto& v : out.data) v = static_cast<S>(std::exp(static_cast<double>(v)));
        return push(std::move(out), requires_grad(a), [this, a](int self) {
            if (!requires_grad(a)) return;
            const auto& node = nodes_[static_cast<std::size_t>(self)];
            auto& da = grad(a);
            for (std::int64_t i = 0; i < node.grad.size(); ++i) da[i] += node.grad[i] * node.value[i];
        });
    }

    Var dropout(Var a, double p, Rng& rng, bool train) {
        if (p <= 0.0 || !train) return a;
        const auto& x = value(a);
        std::vector<S> mask(static_cast<std::size_t>(x.size()));
        const S keep_scale = static_cast<S>(1.0 / (1.0 - p));
        for (auto& m : mask) m = (rng.uniform() >= p) ? keep_scale : S(0);
        Tensor<S> out = x;
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= mask[static_cast<std::size_t>(i)];
        return push(std::move(out), requires_grad(a), [this, a, mask = std::move(mask)](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            auto& da = grad(a);
            for (std::int64_t i = 0; i < g.size(); ++i) da[i] += g[i] * mask[static_cast<std::size_t>(i)];
        });
    }

    // ---- shape ops ----

    Var reshape(Var a, std::vector<int> new_shape) {
        const auto& x = value(a);
        if (Tensor<S>::numel(new_shape) != x.size())
            throw ShapeError("reshape: numel mismatch " + shape_str(x.shape) + " -> " + shape_str(new_shape));
        Tensor<S> out(std::move(new_shape), x.data);
        return push(std::move(out), requires_grad(a), [this, a](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            auto& da = grad(a);
            for (std::int64_t i = 0; i < g.size(); ++i) da[i] += g[i];
        });
    }

    // Concatenate along axis 0; trailing dims must agree.
    Var concat_axis0(const std::vector<Var>& parts) {
        if (parts.empty()) throw ShapeError("concat_axis0: empty");
        std::vector<int> sh = value(parts[0]).shape;
        int total = 0;
        bool req = false;
        for (Var p : parts) {
            const auto& v = value(p);
            if (std::vector<int>(v.shape.begin() + 1, v.shape.end()) !=
                std::vector<int>(sh.begin() + 1, sh.end()))
                throw ShapeError("concat_axis0: trailing dims differ");
            total += v.dim(0);
            req = req || requires_grad(p);
        }
        sh[0] = total;
        Tensor<S> out(sh);
        std::int64_t off = 0;
        for (Var p : parts) {
            const auto& v = value(p);
            std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
            off += v.size();
        }
        return push(std::move(out), req, [this, parts](int self) {
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            std::int64_t off = 0;
            for (Var p : parts) {
                auto& dp = grad(p);
                if (requires_grad(p))
                    for (std::int64_t i = 0; i < dp.size(); ++i) dp[i] += g[off + i];
                off += dp.size();
            }
        });
    }

    // Concatenate rank-4 tensors along a middle axis (1 or 2).
    Var concat4(int axis, const std::vector<Var>& parts) {
        if (parts.empty() || (axis != 1 && axis != 2)) throw ShapeError("concat4: bad arguments");
        std::vector<int> sh = value(parts[0]).shape;
        if (sh.size() != 4) throw ShapeError("concat4: rank-4 required");
        int total = 0;
        bool req = false;
        for (Var p : parts) {
            const auto& v = value(p);
            if (v.rank() != 4) throw ShapeError("concat4: rank-4 required");
            for (int d = 0; d < 4; ++d)
                if (d != axis && v.shape[static_cast<std::size_t>(d)] != sh[static_cast<std::size_t>(d)])
                    throw ShapeError("concat4: dims differ off-axis");
            total += v.dim(axis);
            req = req || requires_grad(p);
        }
        sh[static_cast<std::size_t>(axis)] = total;
        Tensor<S> out(sh);
        {
            int off = 0;
            for (Var p : parts) {
                const auto& v = value(p);
                concat4_block(out, const_cast<Tensor<S>&>(v), axis, off, /*scatter=*/false);
                off += v.dim(axis);
            }
        }
        return push(std::move(out), req, [this, parts, axis](int self) {
            auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            int off = 0;
            for (Var p : parts) {
                if (requires_grad(p)) concat4_block(g, grad(p), axis, off, /*scatter=*/true);
                off += value(p).dim(axis);
            }
        });
    }

    // Crop along the last (W) axis of a rank-4 tensor.
    Var crop_w(Var a, int offset, int len) {
        const auto& x = value(a);
        if (x.rank() != 4 || offset < 0 || offset + len > x.dim(3))
            throw ShapeError("crop_w: invalid window on shape " + shape_str(x.shape));
        const int B = x.dim(0), C = x.dim(1), H = x.dim(2);
        Tensor<S> out({B, C, H, len});
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < H; ++h) {
                    const S* src = &x.at4(b, c, h, offset);
                    S* dst = &out.at4(b, c, h, 0);
                    std::copy(src, src + len, dst);
                }
        return push(std::move(out), requires_grad(a), [this, a, offset, len](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            auto& da = grad(a);
            const int B = da.dim(0), C = da.dim(1), H = da.dim(2);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    for (int h = 0; h < H; ++h) {
                        const S* src = &g.at4(b, c, h, 0);
                        S* dst = &da.at4(b, c, h, offset);
                        for (int w = 0; w < len; ++w) dst[w] += src[w];
                    }
        });
    }

    // Gather rows along axis 0 (row = flattened trailing dims). Backward
    // scatter-adds, so repeated indices are handled.
    Var gather_rows(Var a, std::vector<int> idx) {
        const auto& x = value(a);
        if (x.rank() < 1) throw ShapeError("gather_rows: rank >= 1 required");
        const std::int64_t row = x.size() / std::max(1, x.dim(0));
        for (int i : idx)
            if (i < 0 || i >= x.dim(0)) throw ShapeError("gather_rows: index out of range");
        std::vector<int> sh = x.shape;
        sh[0] = static_cast<int>(idx.size());
        Tensor<S> out(sh);
        for (std::size_t r = 0; r < idx.size(); ++r)
            std::copy(x.data.begin() + idx[r] * row, x.data.begin() + (idx[r] + 1) * row,
                      out.data.begin() + static_cast<std::int64_t>(r) * row);
        return push(std::move(out), requires_grad(a), [this, a, idx = std::move(idx), row](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            auto& da = grad(a);
            for (std::size_t r = 0; r < idx.size(); ++r) {
                const S* src = &g.data[static_cast<std::size_t>(static_cast<std::int64_t>(r) * row)];
                S* dst = &da.data[static_cast<std::size_t>(idx[r] * row)];
                for (std::int64_t i = 0; i < row; ++i) dst[i] += src[i];
            }
        });
    }

    // ---- reductions / broadcasts on (S, T, N, f) set batches ----

    Var mean_axis1_keep(Var a) {
        const auto& x = value(a);
        if (x.rank() != 4) throw ShapeError("mean_axis1_keep: rank-4 required");
        const int A = x.dim(0), T = x.dim(1), N = x.dim(2), F = x.dim(3);
        Tensor<S> out({A, 1, N, F});
        for (int s = 0; s < A; ++s)
            for (int t = 0; t < T; ++t)
                for (int n = 0; n < N; ++n) {
                    const S* src = &x.at4(s, t, n, 0);
                    S* dst = &out.at4(s, 0, n, 0);
                    for (int f = 0; f < F; ++f) dst[f] += src[f];
                }
        const S inv = S(1) / static_cast<S>(T);
        for (auto& v : out.data) v *= inv;
        return push(std::move(out), requires_grad(a), [this, a, T](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            auto& da = grad(a);
            const int A = da.dim(0), N = da.dim(2), F = da.dim(3);
            const S inv = S(1) / static_cast<S>(T);
            for (int s = 0; s < A; ++s)
                for (int t = 0; t < T; ++t)
                    for (int n = 0; n < N; ++n) {
                        const S* src = &g.at4(s, 0, n, 0);
                        S* dst = &da.at4(s, t, n, 0);
                        for (int f = 0; f < F; ++f) dst[f] += src[f] * inv;
                    }
        });
    }

    Var repeat_axis1(Var a, int reps) {
        const auto& x = value(a);
        if (x.rank() != 4 || x.dim(1) != 1) throw ShapeError("repeat_axis1: (S,1,N,f) required");
        const int A = x.dim(0), N = x.dim(2), F = x.dim(3);
        Tensor<S> out({A, reps, N, F});
        for (int s = 0; s < A; ++s)
            for (int t = 0; t < reps; ++t)
                std::copy(&x.at4(s, 0, 0, 0), &x.at4(s, 0, 0, 0) + static_cast<std::int64_t>(N) * F,
                          &out.at4(s, t, 0, 0));
        return push(std::move(out), requires_grad(a), [this, a, reps](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            auto& da = grad(a);
            const int A = da.dim(0), N = da.dim(2), F = da.dim(3);
            const std::int64_t blk = static_cast<std::int64_t>(N) * F;
            for (int s = 0; s < A; ++s)
                for (int t = 0; t < reps; ++t) {
                    const S* src = &g.at4(s, t, 0, 0);
                    S* dst = &da.at4(s, 0, 0, 0);
                    for (std::int64_t i = 0; i < blk; ++i) dst[i] += src[i];
                }
        });
    }

    // Linear map over axis 2 of (S, T, N, f): weight (M, N), bias (M).
    Var linear_axis2(Var a, Var w, Var b) {
        const auto &x = value(a), &wv = value(w), &bv = value(b);
        if (x.rank() != 4 || wv.rank() != 2 || wv.dim(1) != x.dim(2) || bv.dim(0) != wv.dim(0))
            throw ShapeError("linear_axis2: incompatible shapes");
        const int A = x.dim(0), T = x.dim(1), N = x.dim(2), F = x.dim(3), M = wv.dim(0);
        Tensor<S> out({A, T, M, F});
        for (int s = 0; s < A; ++s)
            for (int t = 0; t < T; ++t)
                for (int m = 0; m < M; ++m) {
                    S* dst = &out.at4(s, t, m, 0);
                    for (int f = 0; f < F; ++f) dst[f] = bv[m];
                    for (int n = 0; n < N; ++n) {
                        const S wmn = wv.at2(m, n);
                        const S* src = &x.at4(s, t, n, 0);
                        for (int f = 0; f < F; ++f) dst[f] += wmn * src[f];
                    }
                }
        return push(std::move(out), requires_grad(a) || requires_grad(w) || requires_grad(b),
                    [this, a, w, b](int self) {
                        const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
                        const auto& x = value(a);
                        const auto& wv = value(w);
                        const int A = x.dim(0), T = x.dim(1), N = x.dim(2), F = x.dim(3), M = wv.dim(0);
                        if (requires_grad(a)) {
                            auto& da = grad(a);
                            for (int s = 0; s < A; ++s)
                                for (int t = 0; t < T; ++t)
                                    for (int m = 0; m < M; ++m) {
                                        const S* gg = &g.at4(s, t, m, 0);
                                        for (int n = 0; n < N; ++n) {
                                            const S wmn = wv.at2(m, n);
                                            S* dst = &da.at4(s, t, n, 0);
                                            for (int f = 0; f < F; ++f) dst[f] += wmn * gg[f];
                                        }
                                    }
                        }
                        if (requires_grad(w)) {
                            auto& dw = grad(w);
                            for (int s = 0; s < A; ++s)
                                for (int t = 0; t < T; ++t)
                                    for (int m = 0; m < M; ++m) {
                                        const S* gg = &g.at4(s, t, m, 0);
                                        for (int n = 0; n < N; ++n) {
                                            const S* src = &x.at4(s, t, n, 0);
                                            S acc = S(0);
                                            for (int f = 0; f < F; ++f) acc += gg[f] * src[f];
                                            dw.at2(m, n) += acc;
                                        }
                                    }
                        }
                        if (requires_grad(b)) {
                            auto& db = grad(b);
                            for (int s = 0; s < A; ++s)
                                for (int t = 0; t < T; ++t)
                                    for (int m = 0; m < M; ++m) {
                                        const S* gg = &g.at4(s, t, m, 0);
                                        S acc = S(0);
                                        for (int f = 0; f < F; ++f) acc += gg[f];
                                        db[m] += acc;
                                    }
                        }
                    });
    }

    // ---- dense / conv layers ----

    // y = x @ w^T + b with x (B, D), w (K, D), b (K).
    Var linear(Var a, Var w, Var b) {
        const auto &x = value(a), &wv = value(w), &bv = value(b);
        if (x.rank() != 2 || wv.rank() != 2 || x.dim(1) != wv.dim(1) || bv.dim(0) != wv.dim(0))
            throw ShapeError("linear: incompatible shapes " + shape_str(x.shape) + " vs " + shape_str(wv.shape));
        const int B = x.dim(0), D = x.dim(1), K = wv.dim(0);
        Tensor<S> out({B, K});
        for (int i = 0; i < B; ++i) {
            const S* xr = &x.at2(i, 0);
            for (int k = 0; k < K; ++k) {
                const S* wr = &wv.at2(k, 0);
                S acc = bv[k];
                for (int d = 0; d < D; ++d) acc += xr[d] * wr[d];
                out.at2(i, k) = acc;
            }
        }
        return push(std::move(out), requires_grad(a) || requires_grad(w) || requires_grad(b),
                    [this, a, w, b](int self) {
                        const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
                        const auto& x = value(a);
                        const auto& wv = value(w);
                        const int B = x.dim(0), D = x.dim(1), K = wv.dim(0);
                        if (requires_grad(a)) {
                            auto& da = grad(a);
                            for (int i = 0; i < B; ++i)
                                for (int k = 0; k < K; ++k) {
                                    const S gv = g.at2(i, k);
                                    const S* wr = &wv.at2(k, 0);
                                    S* dst = &da.at2(i, 0);
                                    for (int d = 0; d < D; ++d) dst[d] += gv * wr[d];
                                }
                        }
                        if (requires_grad(w)) {
                            auto& dw = grad(w);
                            for (int i = 0; i < B; ++i)
                                for (int k = 0; k < K; ++k) {
                                    const S gv = g.at2(i, k);
                                    const S* xr = &x.at2(i, 0);
                                    S* dst = &dw.at2(k, 0);
                                    for (int d = 0; d < D; ++d) dst[d] += gv * xr[d];
                                }
                        }
                        if (requires_grad(b)) {
                            auto& db = grad(b);
                            for (int i = 0; i < B; ++i)
                                for (int k = 0; k < K; ++k) db[k] += g.at2(i, k);
                        }
                    });
    }

    // Valid (unpadded) 2-D convolution, stride 1, dilation (dh, dw).
    // x (B, Ci, H, W), w (Co, Ci, kh, kw), b (Co) -> (B, Co, H', W').
    Var conv2d(Var a, Var w, Var b, int dh = 1, int dw = 1) {
        const auto &x = value(a), &wv = value(w), &bv = value(b);
        if (x.rank() != 4 || wv.rank() != 4) throw ShapeError("conv2d: rank-4 input and weight required");
        if (x.dim(1) != wv.dim(1))
            throw ShapeError("conv2d: input depth " + std::to_string(x.dim(1)) + " != weight depth " +
                             std::to_string(wv.dim(1)));
        const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
        const int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
        const int OH = H - (kh - 1) * dh, OW = W - (kw - 1) * dw;
        if (OH < 1 || OW < 1)
            throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) + " dilation " +
                             std::to_string(dh) + "x" + std::to_string(dw) + " does not fit input " +
                             shape_str(x.shape));
        if (bv.dim(0) != Co) throw ShapeError("conv2d: bias size mismatch");
        Tensor<S> out({B, Co, OH, OW});
        for (int bi = 0; bi < B; ++bi)
            for (int co = 0; co < Co; ++co) {
                S* ob = &out.at4(bi, co, 0, 0);
                const S bias = bv[co];
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) ob[i] = bias;
                for (int ci = 0; ci < Ci; ++ci)
                    for (int ki = 0; ki < kh; ++ki)
                        for (int kj = 0; kj < kw; ++kj) {
                            const S wgt = wv.at4(co, ci, ki, kj);
                            for (int oh = 0; oh < OH; ++oh) {
                                const S* xr = &x.at4(bi, ci, oh + ki * dh, kj * dw);
                                S* yr = ob + static_cast<std::int64_t>(oh) * OW;
                                for (int ow = 0; ow < OW; ++ow) yr[ow] += wgt * xr[ow];
                            }
                        }
            }
        return push(std::move(out), requires_grad(a) || requires_grad(w) || requires_grad(b),
                    [this, a, w, b, dh, dw](int self) { conv2d_backward(self, a, w, b, dh, dw); });
    }

    // Valid average pooling.
    Var avg_pool2d(Var a, int kh, int kw, int sh, int sw) {
        const auto& x = value(a);
        if (x.rank() != 4) throw ShapeError("avg_pool2d: rank-4 required");
        const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        if (kh > H || kw > W)
            throw ShapeError("avg_pool2d: window " + std::to_string(kh) + "x" + std::to_string(kw) +
                             " larger than input " + shape_str(x.shape));
        const int OH = (H - kh) / sh + 1, OW = (W - kw) / sw + 1;
        Tensor<S> out({B, C, OH, OW});
        const S inv = S(1) / static_cast<S>(static_cast<std::int64_t>(kh) * kw);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        S acc = S(0);
                        for (int i = 0; i < kh; ++i) {
                            const S* xr = &x.at4(b, c, oh * sh + i, ow * sw);
                            for (int j = 0; j < kw; ++j) acc += xr[j];
                        }
                        out.at4(b, c, oh, ow) = acc * inv;
                    }
        return push(std::move(out), requires_grad(a), [this, a, kh, kw, sh, sw](int self) {
            if (!requires_grad(a)) return;
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            auto& da = grad(a);
            const int B = g.dim(0), C = g.dim(1), OH = g.dim(2), OW = g.dim(3);
            const S inv = S(1) / static_cast<S>(static_cast<std::int64_t>(kh) * kw);
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c)
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow) {
                            const S gv = g.at4(b, c, oh, ow) * inv;
                            for (int i = 0; i < kh; ++i) {
                                S* xr = &da.at4(b, c, oh * sh + i, ow * sw);
                                for (int j = 0; j < kw; ++j) xr[j] += gv;
                            }
                        }
        });
    }

    // Batch normalization over (B, H, W) per depth channel. In train mode the
    // batch statistics are used and running stats (plain tensors owned by the
    // caller) are updated in place; in eval mode the running stats are used.
    Var batch_norm(Var a, Var gamma, Var beta, Tensor<S>& running_mean, Tensor<S>& running_var, bool train,
                   double momentum = 0.1, double eps = 1e-5) {
        const auto &x = value(a), &gv = value(gamma);
        if (x.rank() != 4) throw ShapeError("batch_norm: rank-4 required");
        const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        if (gv.dim(0) != C || value(beta).dim(0) != C || running_mean.dim(0) != C || running_var.dim(0) != C)
            throw ShapeError("batch_norm: parameter size mismatch");
        const std::int64_t m = static_cast<std::int64_t>(B) * H * W;
        Tensor<S> mean({C}), var({C});
        if (train) {
            for (int c = 0; c < C; ++c) {
                S acc = S(0);
                for (int b = 0; b < B; ++b) {
                    const S* xr = &x.at4(b, c, 0, 0);
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) acc += xr[i];
                }
                mean[c] = acc / static_cast<S>(m);
            }
            for (int c = 0; c < C; ++c) {
                S acc = S(0);
                for (int b = 0; b < B; ++b) {
                    const S* xr = &x.at4(b, c, 0, 0);
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
                        const S d = xr[i] - mean[c];
                        acc += d * d;
                    }
                }
                var[c] = acc / static_cast<S>(m);
            }
            for (int c = 0; c < C; ++c) {
                running_mean[c] = static_cast<S>((1.0 - momentum) * running_mean[c] + momentum * mean[c]);
                running_var[c] = static_cast<S>((1.0 - momentum) * running_var[c] + momentum * var[c]);
            }
        } else {
            mean = running_mean;
            var = running_var;
        }
        Tensor<S> out(x.shape);
        Tensor<S> xhat(x.shape);
        const auto& bv = value(beta);
        for (int c = 0; c < C; ++c) {
            const S inv_std = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var[c]) + eps));
            const S gamma_c = gv[c], beta_c = bv[c], mean_c = mean[c];
            for (int b = 0; b < B; ++b) {
                const S* xr = &x.at4(b, c, 0, 0);
                S* hr = &xhat.at4(b, c, 0, 0);
                S* yr = &out.at4(b, c, 0, 0);
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(H) * W; ++i) {
                    hr[i] = (xr[i] - mean_c) * inv_std;
                    yr[i] = gamma_c * hr[i] + beta_c;
                }
            }
        }
        return push(std::move(out), requires_grad(a) || requires_grad(gamma) || requires_grad(beta),
                    [this, a, gamma, beta, xhat = std::move(xhat), var = std::move(var), train, eps](int self) {
                        bn_backward(self, a, gamma, beta, xhat, var, train, eps);
                    });
    }

    // ---- losses / kernels ----

    // Mean cross-entropy of logits (B, K) against integer labels.
    Var softmax_cross_entropy(Var a, const std::vector<int>& labels) {
        const auto& x = value(a);
        if (x.rank() != 2 || static_cast<std::size_t>(x.dim(0)) != labels.size())
            throw ShapeError("softmax_cross_entropy: logits (B,K) and B labels required");
        const int B = x.dim(0), K = x.dim(1);
        Tensor<S> probs({B, K});
        double loss = 0.0;
        for (int i = 0; i < B; ++i) {
            if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= K)
                throw ValidationError("softmax_cross_entropy: label out of range");
            const S* xr = &x.at2(i, 0);
            S mx = xr[0];
            for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
            double denom = 0.0;
            for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(xr[k] - mx));
            const double lse = std::log(denom) + static_cast<double>(mx);
            loss += lse - static_cast<double>(xr[labels[static_cast<std::size_t>(i)]]);
            for (int k = 0; k < K; ++k)
                probs.at2(i, k) = static_cast<S>(std::exp(static_cast<double>(xr[k]) - lse));
        }
        Tensor<S> out({1});
        out[0] = static_cast<S>(loss / B);
        return push(std::move(out), requires_grad(a),
                    [this, a, labels, probs = std::move(probs)](int self) {
                        if (!requires_grad(a)) return;
                        const S g = nodes_[static_cast<std::size_t>(self)].grad[0];
                        auto& da = grad(a);
                        const int B = da.dim(0), K = da.dim(1);
                        const S inv = g / static_cast<S>(B);
                        for (int i = 0; i < B; ++i)
                            for (int k = 0; k < K; ++k)
                                da.at2(i, k) +=
                                    inv * (probs.at2(i, k) - (k == labels[static_cast<std::size_t>(i)] ? S(1) : S(0)));
                    });
    }

    Var softmax_rows(Var a) {
        const auto& x = value(a);
        if (x.rank() != 2) throw ShapeError("softmax_rows: rank-2 required");
        const int B = x.dim(0), K = x.dim(1);
        Tensor<S> out({B, K});
        for (int i = 0; i < B; ++i) {
            const S* xr = &x.at2(i, 0);
            S mx = xr[0];
            for (int k = 1; k < K; ++k) mx = std::max(mx, xr[k]);
            double denom = 0.0;
            for (int k = 0; k < K; ++k) denom += std::exp(static_cast<double>(xr[k] - mx));
            for (int k = 0; k < K; ++k)
                out.at2(i, k) = static_cast<S>(std::exp(static_cast<double>(xr[k] - mx)) / denom);
        }
        return push(std::move(out), requires_grad(a), [this, a](int self) {
            if (!requires_grad(a)) return;
            const auto& node = nodes_[static_cast<std::size_t>(self)];
            const auto& p = node.value;
            const auto& g = node.grad;
            auto& da = grad(a);
            const int B = p.dim(0), K = p.dim(1);
            for (int i = 0; i < B; ++i) {
                S dot = S(0);
                for (int k = 0; k < K; ++k) dot += g.at2(i, k) * p.at2(i, k);
                for (int k = 0; k < K; ++k) da.at2(i, k) += p.at2(i, k) * (g.at2(i, k) - dot);
            }
        });
    }

    // D[i][j] = ||x_i - y_j||^2 for x (m, d), y (n, d).
    Var pairwise_sqdist(Var a, Var b) {
        const auto &x = value(a), &y = value(b);
        if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1))
            throw ShapeError("pairwise_sqdist: (m,d) and (n,d) required");
        const int M = x.dim(0), N = y.dim(0), D = x.dim(1);
        Tensor<S> out({M, N});
        for (int i = 0; i < M; ++i) {
            const S* xr = &x.at2(i, 0);
            for (int j = 0; j < N; ++j) {
                const S* yr = &y.at2(j, 0);
                S acc = S(0);
                for (int d = 0; d < D; ++d) {
                    const S diff = xr[d] - yr[d];
                    acc += diff * diff;
                }
                out.at2(i, j) = acc;
            }
        }
        return push(std::move(out), requires_grad(a) || requires_grad(b), [this, a, b](int self) {
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            const auto& x = value(a);
            const auto& y = value(b);
            const int M = x.dim(0), N = y.dim(0), D = x.dim(1);
            if (requires_grad(a)) {
                auto& da = grad(a);
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) {
                        const S gv = S(2) * g.at2(i, j);
                        const S* xr = &x.at2(i, 0);
                        const S* yr = &y.at2(j, 0);
                        S* dst = &da.at2(i, 0);
                        for (int d = 0; d < D; ++d) dst[d] += gv * (xr[d] - yr[d]);
                    }
            }
            if (requires_grad(b)) {
                auto& db = grad(b);
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) {
                        const S gv = S(2) * g.at2(i, j);
                        const S* xr = &x.at2(i, 0);
                        const S* yr = &y.at2(j, 0);
                        S* dst = &db.at2(j, 0);
                        for (int d = 0; d < D; ++d) dst[d] += gv * (yr[d] - xr[d]);
                    }
            }
        });
    }

    // G = x y^T for x (m, d), y (n, d).
    Var gram(Var a, Var b) {
        const auto &x = value(a), &y = value(b);
        if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(1))
            throw ShapeError("gram: (m,d) and (n,d) required");
        const int M = x.dim(0), N = y.dim(0), D = x.dim(1);
        Tensor<S> out({M, N});
        for (int i = 0; i < M; ++i)
            for (int j = 0; j < N; ++j) {
                const S* xr = &x.at2(i, 0);
                const S* yr = &y.at2(j, 0);
                S acc = S(0);
                for (int d = 0; d < D; ++d) acc += xr[d] * yr[d];
                out.at2(i, j) = acc;
            }
        return push(std::move(out), requires_grad(a) || requires_grad(b), [this, a, b](int self) {
            const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
            const auto& x = value(a);
            const auto& y = value(b);
            const int M = x.dim(0), N = y.dim(0), D = x.dim(1);
            if (requires_grad(a)) {
                auto& da = grad(a);
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) {
                        const S gv = g.at2(i, j);
                        const S* yr = &y.at2(j, 0);
                        S* dst = &da.at2(i, 0);
                        for (int d = 0; d < D; ++d) dst[d] += gv * yr[d];
                    }
            }
            if (requires_grad(b)) {
                auto& db = grad(b);
                for (int i = 0; i < M; ++i)
                    for (int j = 0; j < N; ++j) {
                        const S gv = g.at2(i, j);
                        const S* xr = &x.at2(i, 0);
                        S* dst = &db.at2(j, 0);
                        for (int d = 0; d < D; ++d) dst[d] += gv * xr[d];
                    }
            }
        });
    }

    Var mean_all(Var a) {
        const auto& x = value(a);
        double acc = 0.0;
        for (const S& v : x.data) acc += static_cast<double>(v);
        Tensor<S> out({1});
        out[0] = static_cast<S>(acc / static_cast<double>(std::max<std::int64_t>(1, x.size())));
        return push(std::move(out), requires_grad(a), [this, a](int self) {
            if (!requires_grad(a)) return;
            const S g = nodes_[static_cast<std::size_t>(self)].grad[0];
            auto& da = grad(a);
            const S inv = g / static_cast<S>(std::max<std::int64_t>(1, da.size()));
            for (auto& v : da.data) v += inv;
        });
    }

    std::size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<S> value;
        Tensor<S> grad;
        bool needs = false;
        std::function<void(int)> back;
    };

    std::deque<Node> nodes_;

    Var push(Tensor<S> value, bool needs, std::function<void(int)> back) {
        Node n;
        n.grad = Tensor<S>(value.shape);
        n.value = std::move(value);
        n.needs = needs;
        n.back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void sweep() {
        for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
            auto& n = nodes_[static_cast<std::size_t>(i)];
            if (n.needs && n.back) n.back(i);
        }
    }

    void acc(Var target, const Tensor<S>& g, S scale_by) {
        auto& d = grad(target);
        for (std::int64_t i = 0; i < d.size(); ++i) d[i] += g[i] * scale_by;
    }

    // Moves a part-sized block to/from the concatenated buffer at `off` along
    // `axis`. scatter=false copies part -> buf; scatter=true adds buf -> part.
    static void concat4_block(Tensor<S>& buf, Tensor<S>& part, int axis, int off, bool scatter) {
        const int A = part.dim(0), P1 = part.dim(1), P2 = part.dim(2), P3 = part.dim(3);
        for (int a = 0; a < A; ++a)
            for (int i = 0; i < P1; ++i)
                for (int j = 0; j < P2; ++j) {
                    S* bp = (axis == 1) ? &buf.at4(a, off + i, j, 0) : &buf.at4(a, i, off + j, 0);
                    S* pp = &part.at4(a, i, j, 0);
                    if (scatter)
                        for (int k = 0; k < P3; ++k) pp[k] += bp[k];
                    else
                        std::copy(pp, pp + P3, bp);
                }
    }

    void conv2d_backward(int self, Var a, Var w, Var b, int dh, int dw) {
        const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
        const auto& x = value(a);
        const auto& wv = value(w);
        const int B = x.dim(0), Ci = x.dim(1);
        const int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
        const int OH = g.dim(2), OW = g.dim(3);
        if (requires_grad(a)) {
            auto& da = grad(a);
            for (int bi = 0; bi < B; ++bi)
                for (int co = 0; co < Co; ++co)
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                const S wgt = wv.at4(co, ci, ki, kj);
                                for (int oh = 0; oh < OH; ++oh) {
                                    const S* gr = &g.at4(bi, co, oh, 0);
                                    S* xr = &da.at4(bi, ci, oh + ki * dh, kj * dw);
                                    for (int ow = 0; ow < OW; ++ow) xr[ow] += wgt * gr[ow];
                                }
                            }
        }
        if (requires_grad(w)) {
            auto& dwv = grad(w);
            for (int bi = 0; bi < B; ++bi)
                for (int co = 0; co < Co; ++co)
                    for (int ci = 0; ci < Ci; ++ci)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                S acc = S(0);
                                for (int oh = 0; oh < OH; ++oh) {
                                    const S* gr = &g.at4(bi, co, oh, 0);
                                    const S* xr = &x.at4(bi, ci, oh + ki * dh, kj * dw);
                                    for (int ow = 0; ow < OW; ++ow) acc += gr[ow] * xr[ow];
                                }
                                dwv.at4(co, ci, ki, kj) += acc;
                            }
        }
        if (requires_grad(b)) {
            auto& db = grad(b);
            for (int bi = 0; bi < B; ++bi)
                for (int co = 0; co < Co; ++co) {
                    const S* gr = &g.at4(bi, co, 0, 0);
                    S acc = S(0);
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(OH) * OW; ++i) acc += gr[i];
                    db[co] += acc;
                }
        }
    }

    void bn_backward(int self, Var a, Var gamma, Var beta, const Tensor<S>& xhat, const Tensor<S>& var,
                     bool train, double eps) {
        const auto& g = nodes_[static_cast<std::size_t>(self)].grad;
        const auto& gv = value(gamma);
        const int B = g.dim(0), C = g.dim(1), H = g.dim(2), W = g.dim(3);
        const std::int64_t plane = static_cast<std::int64_t>(H) * W;
        const std::int64_t m = static_cast<std::int64_t>(B) * plane;
        if (requires_grad(gamma)) {
            auto& dg = grad(gamma);
            for (int c = 0; c < C; ++c) {
                S acc = S(0);
                for (int b = 0; b < B; ++b) {
                    const S* gr = &g.at4(b, c, 0, 0);
                    const S* hr = &xhat.at4(b, c, 0, 0);
                    for (std::int64_t i = 0; i < plane; ++i) acc += gr[i] * hr[i];
                }
                dg[c] += acc;
            }
        }
        if (requires_grad(beta)) {
            auto& db = grad(beta);
            for (int c = 0; c < C; ++c) {
                S acc = S(0);
                for (int b = 0; b < B; ++b) {
                    const S* gr = &g.at4(b, c, 0, 0);
                    for (std::int64_t i = 0; i < plane; ++i) acc += gr[i];
                }
                db[c] += acc;
            }
        }
        if (!requires_grad(a)) return;
        auto& da = grad(a);
        for (int c = 0; c < C; ++c) {
            const S inv_std = static_cast<S>(1.0 / std::sqrt(static_cast<double>(var[c]) + eps));
            const S gamma_c = gv[c];
            if (!train) {
                const S k = gamma_c * inv_std;
                for (int b = 0; b < B; ++b) {
                    const S* gr = &g.at4(b, c, 0, 0);
                    S* dr = &da.at4(b, c, 0, 0);
                    for (std::int64_t i = 0; i < plane; ++i) dr[i] += k * gr[i];
                }
                continue;
            }
            S sum_g = S(0), sum_gh = S(0);
            for (int b = 0; b < B; ++b) {
                const S* gr = &g.at4(b, c, 0, 0);
                const S* hr = &xhat.at4(b, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i) {
                    sum_g += gr[i];
                    sum_gh += gr[i] * hr[i];
                }
            }
            const S k = gamma_c * inv_std / static_cast<S>(m);
            for (int b = 0; b < B; ++b) {
                const S* gr = &g.at4(b, c, 0, 0);
                const S* hr = &xhat.at4(b, c, 0, 0);
                S* dr = &da.at4(b, c, 0, 0);
                for (std::int64_t i = 0; i < plane; ++i)
                    dr[i] += k * (static_cast<S>(m) * gr[i] - sum_g - hr[i] * sum_gh);
            }
        }
    }
};

}  // namespace sandwich
