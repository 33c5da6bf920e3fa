#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "caat/tensor.hpp"

namespace caat {

// Handle into a Graph's node list.
struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

inline Var no_var() { return Var{-1}; }

template <typename T>
struct GradRecord {
    T value = T(0);
    std::map<std::string, Tensor<T>> grads;
};

// Reverse-mode tape over dense tensors. Forward values are computed eagerly;
// each op registers a closure that accumulates into its parents' gradients.
// One graph is single-threaded and single-use: build, evaluate, backward.
template <typename T>
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // --- leaves -----------------------------------------------------------

    Var input(const std::string& name, Tensor<T> v) {
        if (name.empty()) throw ContractError("input variables need a name");
        if (named_.count(name)) throw ContractError("duplicate variable name: " + name);
        Var r = push(std::move(v));
        nodes_[r.idx].name = name;
        named_[name] = r.idx;
        return r;
    }

    Var constant(Tensor<T> v) { return push(std::move(v)); }

    const Tensor<T>& value(Var v) const { return node(v).val; }

    Var lookup(const std::string& name) const {
        auto it = named_.find(name);
        if (it == named_.end()) throw ContractError("unknown variable: " + name);
        return Var{it->second};
    }

    // --- elementwise ------------------------------------------------------

    Var add(Var a, Var b) {
        check_same("add", a, b);
        Tensor<T> out = node(a).val;
        const Tensor<T>& vb = node(b).val;
        for (size_t i = 0; i < out.numel(); ++i) out.data[i] += vb.data[i];
        Var r = push(std::move(out));
        attach(r, [this, a, b, r]() {
            accumulate(a, node(r).grad.data);
            accumulate(b, node(r).grad.data);
        });
        return r;
    }

    Var sub(Var a, Var b) {
        check_same("sub", a, b);
        Tensor<T> out = node(a).val;
        const Tensor<T>& vb = node(b).val;
        for (size_t i = 0; i < out.numel(); ++i) out.data[i] -= vb.data[i];
        Var r = push(std::move(out));
        attach(r, [this, a, b, r]() {
            const auto& g = node(r).grad.data;
            accumulate(a, g);
            auto& gb = node(b).grad.data;
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        });
        return r;
    }

    Var mul(Var a, Var b) {
        check_same("mul", a, b);
        Tensor<T> out = node(a).val;
        const Tensor<T>& vb = node(b).val;
        for (size_t i = 0; i < out.numel(); ++i) out.data[i] *= vb.data[i];
        Var r = push(std::move(out));
        attach(r, [this, a, b, r]() {
            const auto& g = node(r).grad.data;
            const auto& va = node(a).val.data;
            const auto& vb2 = node(b).val.data;
            auto& ga = node(a).grad.data;
            auto& gb = node(b).grad.data;
            for (size_t i = 0; i < g.size(); ++i) {
                ga[i] += g[i] * vb2[i];
                gb[i] += g[i] * va[i];
            }
        });
        return r;
    }

    Var square(Var a) { return mul(a, a); }

    // out = scale*x + shift with scalar constants
    Var affine(Var x, T scale, T shift) {
        Tensor<T> out = node(x).val;
        for (auto& v : out.data) v = scale * v + shift;
        Var r = push(std::move(out));
        attach(r, [this, x, r, scale]() {
            const auto& g = node(r).grad.data;
            auto& gx = node(x).grad.data;
            for (size_t i = 0; i < g.size(); ++i) gx[i] += scale * g[i];
        });
        return r;
    }

    Var silu(Var x) {
        Tensor<T> out = node(x).val;
        for (auto& v : out.data) v = v * sigmoid(v);
        Var r = push(std::move(out));
        attach(r, [this, x, r]() {
            const auto& g = node(r).grad.data;
            const auto& vx = node(x).val.data;
            auto& gx = node(x).grad.data;
            for (size_t i = 0; i < g.size(); ++i) {
                const T s = sigmoid(vx[i]);
                gx[i] += g[i] * s * (T(1) + vx[i] * (T(1) - s));
            }
        });
        return r;
    }

    // Per-first-axis scaling by a constant coefficient vector: row b of x is
    // multiplied by coeffs[b]. Realizes per-sample noise-schedule factors.
    Var scale_rows(Var x, std::vector<T> coeffs) {
        const Tensor<T>& vx = node(x).val;
        if (vx.rank() < 1 || static_cast<size_t>(vx.dim(0)) != coeffs.size()) {
            throw ShapeError("scale_rows: first axis of " + shape_str(vx.dims) + " vs " +
                             std::to_string(coeffs.size()) + " coefficients");
        }
        const size_t stride = vx.numel() / static_cast<size_t>(vx.dim(0));
        Tensor<T> out = vx;
        for (int b = 0; b < vx.dim(0); ++b) {
            T* p = out.ptr() + b * stride;
            for (size_t i = 0; i < stride; ++i) p[i] *= coeffs[static_cast<size_t>(b)];
        }
        Var r = push(std::move(out));
        attach(r, [this, x, r, coeffs = std::move(coeffs), stride]() {
            const auto& g = node(r).grad;
            auto& gx = node(x).grad;
            for (int b = 0; b < g.dim(0); ++b) {
                const T* gp = g.ptr() + b * stride;
                T* xp = gx.ptr() + b * stride;
                for (size_t i = 0; i < stride; ++i) xp[i] += coeffs[static_cast<size_t>(b)] * gp[i];
            }
        });
        return r;
    }

    // --- shape ops ---------------------------------------------------------

    Var reshape(Var x, Shape dims) {
        const Tensor<T>& vx = node(x).val;
        if (numel_of(dims) != vx.numel()) {
            throw ShapeError("reshape: " + shape_str(vx.dims) + " to " + shape_str(dims));
        }
        Tensor<T> out(dims, vx.data);
        Var r = push(std::move(out));
        attach(r, [this, x, r]() { accumulate(x, node(r).grad.data); });
        return r;
    }

    Var transpose(Var x, std::vector<int> perm) {
        const Tensor<T>& vx = node(x).val;
        const int rk = vx.rank();
        if (static_cast<int>(perm.size()) != rk || rk > 4) {
            throw ShapeError("transpose: perm size " + std::to_string(perm.size()) +
                             " for tensor " + shape_str(vx.dims));
        }
        Tensor<T> out = permute_tensor(vx, perm);
        std::vector<int> inv(perm.size());
        for (size_t i = 0; i < perm.size(); ++i) inv[static_cast<size_t>(perm[i])] = static_cast<int>(i);
        Var r = push(std::move(out));
        attach(r, [this, x, r, inv = std::move(inv)]() {
            Tensor<T> gt = permute_tensor(node(r).grad, inv);
            accumulate(x, gt.data);
        });
        return r;
    }

    Var concat_channels(Var a, Var b) {
        const Tensor<T>& va = node(a).val;
        const Tensor<T>& vb = node(b).val;
        if (va.rank() != 4 || vb.rank() != 4 || va.dim(0) != vb.dim(0) ||
            va.dim(2) != vb.dim(2) || va.dim(3) != vb.dim(3)) {
            throw ShapeError("concat_channels: " + shape_str(va.dims) + " vs " + shape_str(vb.dims));
        }
        const int B = va.dim(0), C1 = va.dim(1), C2 = vb.dim(1);
        const size_t hw = static_cast<size_t>(va.dim(2)) * va.dim(3);
        Tensor<T> out(Shape{B, C1 + C2, va.dim(2), va.dim(3)});
        for (int n = 0; n < B; ++n) {
            std::copy_n(va.ptr() + n * C1 * hw, C1 * hw, out.ptr() + n * (C1 + C2) * hw);
            std::copy_n(vb.ptr() + n * C2 * hw, C2 * hw, out.ptr() + (n * (C1 + C2) + C1) * hw);
        }
        Var r = push(std::move(out));
        attach(r, [this, a, b, r, B, C1, C2, hw]() {
            const auto& g = node(r).grad;
            auto& ga = node(a).grad;
            auto& gb = node(b).grad;
            for (int n = 0; n < B; ++n) {
                const T* gp = g.ptr() + n * (C1 + C2) * hw;
                T* pa = ga.ptr() + n * C1 * hw;
                T* pb = gb.ptr() + n * C2 * hw;
                for (size_t i = 0; i < C1 * hw; ++i) pa[i] += gp[i];
                for (size_t i = 0; i < C2 * hw; ++i) pb[i] += gp[C1 * hw + i];
            }
        });
        return r;
    }

    // --- linear algebra -----------------------------------------------------

    // [m,k] x [k,n]
    Var matmul(Var a, Var b) {
        const Tensor<T>& va = node(a).val;
        const Tensor<T>& vb = node(b).val;
        if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0)) {
            throw ShapeError("matmul: " + shape_str(va.dims) + " x " + shape_str(vb.dims));
        }
        const int m = va.dim(0), k = va.dim(1), n = vb.dim(1);
        Tensor<T> out(Shape{m, n});
        gemm_nn(m, k, n, va.ptr(), vb.ptr(), out.ptr(), false);
        Var r = push(std::move(out));
        attach(r, [this, a, b, r, m, k, n]() {
            const auto& g = node(r).grad;
            gemm_nt(m, n, k, g.ptr(), node(b).val.ptr(), node(a).grad.ptr(), true);
            gemm_tn(n, m, k, node(a).val.ptr(), g.ptr(), node(b).grad.ptr(), true);
        });
        return r;
    }

    // [B,m,k] x ([B,k,n] or shared [k,n])
    Var bmm(Var a, Var b) {
        const Tensor<T>& va = node(a).val;
        const Tensor<T>& vb = node(b).val;
        const bool shared = vb.rank() == 2;
        if (va.rank() != 3 || (vb.rank() != 2 && vb.rank() != 3) ||
            va.dim(2) != vb.dim(shared ? 0 : 1) ||
            (!shared && va.dim(0) != vb.dim(0))) {
            throw ShapeError("bmm: " + shape_str(va.dims) + " x " + shape_str(vb.dims));
        }
        const int B = va.dim(0), m = va.dim(1), k = va.dim(2);
        const int n = vb.dim(shared ? 1 : 2);
        Tensor<T> out(Shape{B, m, n});
        for (int i = 0; i < B; ++i) {
            const T* bp = shared ? vb.ptr() : vb.ptr() + static_cast<size_t>(i) * k * n;
            gemm_nn(m, k, n, va.ptr() + static_cast<size_t>(i) * m * k, bp,
                    out.ptr() + static_cast<size_t>(i) * m * n, false);
        }
        Var r = push(std::move(out));
        attach(r, [this, a, b, r, B, m, k, n, shared]() {
            const auto& g = node(r).grad;
            const auto& va2 = node(a).val;
            const auto& vb2 = node(b).val;
            auto& ga = node(a).grad;
            auto& gb = node(b).grad;
            for (int i = 0; i < B; ++i) {
                const T* gp = g.ptr() + static_cast<size_t>(i) * m * n;
                const T* bp = shared ? vb2.ptr() : vb2.ptr() + static_cast<size_t>(i) * k * n;
                T* gbp = shared ? gb.ptr() : gb.ptr() + static_cast<size_t>(i) * k * n;
                gemm_nt(m, n, k, gp, bp, ga.ptr() + static_cast<size_t>(i) * m * k, true);
                gemm_tn(k, m, n, va2.ptr() + static_cast<size_t>(i) * m * k, gp, gbp, true);
            }
        });
        return r;
    }

    // --- conv / spatial -----------------------------------------------------

    // x [B,Ci,H,W], w [Co,Ci,kh,kw], optional bias [Co]; stride 1 or 2,
    // zero padding kh/2.
    Var conv2d(Var x, Var w, Var bias, int stride) {
        const Tensor<T>& vx = node(x).val;
        const Tensor<T>& vw = node(w).val;
        if (vx.rank() != 4 || vw.rank() != 4 || vx.dim(1) != vw.dim(1)) {
            throw ShapeError("conv2d: " + shape_str(vx.dims) + " with kernel " + shape_str(vw.dims));
        }
        if (stride != 1 && stride != 2) throw ConfigError("conv2d stride must be 1 or 2");
        const int kh = vw.dim(2);
        if (kh != vw.dim(3) || (kh != 1 && kh != 3)) {
            throw ConfigError("conv2d kernel must be 1x1 or 3x3");
        }
        const int B = vx.dim(0), Ci = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
        const int Co = vw.dim(0), pad = kh / 2;
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kh) / stride + 1;
        if (bias.valid()) {
            const Tensor<T>& vb = node(bias).val;
            if (vb.rank() != 1 || vb.dim(0) != Co) {
                throw ShapeError("conv2d bias: " + shape_str(vb.dims) + " for Co=" + std::to_string(Co));
            }
        }
        Tensor<T> out(Shape{B, Co, Ho, Wo});
        const int ck = Ci * kh * kh;
        std::vector<T> col(static_cast<size_t>(ck) * Ho * Wo);
        for (int b = 0; b < B; ++b) {
            im2col(vx.ptr() + static_cast<size_t>(b) * Ci * H * W, Ci, H, W, kh, stride, pad, Ho, Wo,
                   col.data());
            gemm_nn(Co, ck, Ho * Wo, vw.ptr(), col.data(),
                    out.ptr() + static_cast<size_t>(b) * Co * Ho * Wo, false);
        }
        if (bias.valid()) {
            const Tensor<T>& vb = node(bias).val;
            for (int b = 0; b < B; ++b)
                for (int co = 0; co < Co; ++co) {
                    T* p = out.ptr() + (static_cast<size_t>(b) * Co + co) * Ho * Wo;
                    for (int i = 0; i < Ho * Wo; ++i) p[i] += vb.data[static_cast<size_t>(co)];
                }
        }
        Var r = push(std::move(out));
        attach(r, [this, x, w, bias, r, B, Ci, H, W, Co, kh, stride, pad, Ho, Wo, ck]() {
            const auto& g = node(r).grad;
            const auto& vx2 = node(x).val;
            const auto& vw2 = node(w).val;
            std::vector<T> col(static_cast<size_t>(ck) * Ho * Wo);
            std::vector<T> gcol(static_cast<size_t>(ck) * Ho * Wo);
            for (int b = 0; b < B; ++b) {
                const T* gp = g.ptr() + static_cast<size_t>(b) * Co * Ho * Wo;
                im2col(vx2.ptr() + static_cast<size_t>(b) * Ci * H * W, Ci, H, W, kh, stride, pad,
                       Ho, Wo, col.data());
                // dW += g * col^T
                gemm_nt(Co, Ho * Wo, ck, gp, col.data(), node(w).grad.ptr(), true);
                // dcol = W^T * g, scattered back
                gemm_tn(ck, Co, Ho * Wo, vw2.ptr(), gp, gcol.data(), false);
                col2im_add(gcol.data(), Ci, H, W, kh, stride, pad, Ho, Wo,
                           node(x).grad.ptr() + static_cast<size_t>(b) * Ci * H * W);
            }
            if (bias.valid()) {
                auto& gb = node(bias).grad;
                for (int b = 0; b < B; ++b)
                    for (int co = 0; co < Co; ++co) {
                        const T* gp = g.ptr() + (static_cast<size_t>(b) * Co + co) * Ho * Wo;
                        T s = 0;
                        for (int i = 0; i < Ho * Wo; ++i) s += gp[i];
                        gb.data[static_cast<size_t>(co)] += s;
                    }
            }
        });
        return r;
    }

    Var upsample_nearest2x(Var x) {
        const Tensor<T>& vx = node(x).val;
        if (vx.rank() != 4) throw ShapeError("upsample_nearest2x: " + shape_str(vx.dims));
        const int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
        Tensor<T> out(Shape{B, C, 2 * H, 2 * W});
        for (int bc = 0; bc < B * C; ++bc) {
            const T* src = vx.ptr() + static_cast<size_t>(bc) * H * W;
            T* dst = out.ptr() + static_cast<size_t>(bc) * 4 * H * W;
            for (int y = 0; y < 2 * H; ++y)
                for (int x2 = 0; x2 < 2 * W; ++x2) dst[y * 2 * W + x2] = src[(y / 2) * W + x2 / 2];
        }
        Var r = push(std::move(out));
        attach(r, [this, x, r, B, C, H, W]() {
            const auto& g = node(r).grad;
            auto& gx = node(x).grad;
            for (int bc = 0; bc < B * C; ++bc) {
                const T* gp = g.ptr() + static_cast<size_t>(bc) * 4 * H * W;
                T* xp = gx.ptr() + static_cast<size_t>(bc) * H * W;
                for (int y = 0; y < 2 * H; ++y)
                    for (int x2 = 0; x2 < 2 * W; ++x2) xp[(y / 2) * W + x2 / 2] += gp[y * 2 * W + x2];
            }
        });
        return r;
    }

    // --- normalization ------------------------------------------------------

    // Normalizes over each (batch, group) slice of an NCHW tensor; no affine.
    Var group_norm(Var x, int groups, T eps) {
        const Tensor<T>& vx = node(x).val;
        if (vx.rank() != 4 || vx.dim(1) % groups != 0) {
            throw ShapeError("group_norm: " + shape_str(vx.dims) + " with " +
                             std::to_string(groups) + " groups");
        }
        const int B = vx.dim(0), C = vx.dim(1), H = vx.dim(2), W = vx.dim(3);
        const size_t gsz = static_cast<size_t>(C / groups) * H * W;
        Tensor<T> out(vx.dims);
        std::vector<T> mean(static_cast<size_t>(B) * groups), inv(static_cast<size_t>(B) * groups);
        for (int bg = 0; bg < B * groups; ++bg) {
            const T* p = vx.ptr() + bg * gsz;
            T mu = 0;
            for (size_t i = 0; i < gsz; ++i) mu += p[i];
            mu /= static_cast<T>(gsz);
            T var = 0;
            for (size_t i = 0; i < gsz; ++i) var += (p[i] - mu) * (p[i] - mu);
            var /= static_cast<T>(gsz);
            const T iv = T(1) / std::sqrt(var + eps);
            mean[static_cast<size_t>(bg)] = mu;
            inv[static_cast<size_t>(bg)] = iv;
            T* o = out.ptr() + bg * gsz;
            for (size_t i = 0; i < gsz; ++i) o[i] = (p[i] - mu) * iv;
        }
        Var r = push(std::move(out));
        attach(r, [this, x, r, B, groups, gsz, mean = std::move(mean), inv = std::move(inv)]() {
            const auto& g = node(r).grad;
            const auto& vx2 = node(x).val;
            auto& gx = node(x).grad;
            for (int bg = 0; bg < B * groups; ++bg) {
                const T* gp = g.ptr() + bg * gsz;
                const T* xp = vx2.ptr() + bg * gsz;
                T* dst = gx.ptr() + bg * gsz;
                const T mu = mean[static_cast<size_t>(bg)], iv = inv[static_cast<size_t>(bg)];
                T s1 = 0, s2 = 0;
                for (size_t i = 0; i < gsz; ++i) {
                    const T xh = (xp[i] - mu) * iv;
                    s1 += gp[i];
                    s2 += gp[i] * xh;
                }
                const T n = static_cast<T>(gsz);
                for (size_t i = 0; i < gsz; ++i) {
                    const T xh = (xp[i] - mu) * iv;
                    dst[i] += iv * (gp[i] - s1 / n - xh * s2 / n);
                }
            }
        });
        return r;
    }

    // Normalizes over the last axis; no affine.
    Var layer_norm(Var x, T eps) {
        const Tensor<T>& vx = node(x).val;
        if (vx.rank() < 1) throw ShapeError("layer_norm: scalar input");
        const size_t n = static_cast<size_t>(vx.dim(vx.rank() - 1));
        const size_t rows = vx.numel() / n;
        Tensor<T> out(vx.dims);
        std::vector<T> mean(rows), inv(rows);
        for (size_t rr = 0; rr < rows; ++rr) {
            const T* p = vx.ptr() + rr * n;
            T mu = 0;
            for (size_t i = 0; i < n; ++i) mu += p[i];
            mu /= static_cast<T>(n);
            T var = 0;
            for (size_t i = 0; i < n; ++i) var += (p[i] - mu) * (p[i] - mu);
            var /= static_cast<T>(n);
            const T iv = T(1) / std::sqrt(var + eps);
            mean[rr] = mu;
            inv[rr] = iv;
            T* o = out.ptr() + rr * n;
            for (size_t i = 0; i < n; ++i) o[i] = (p[i] - mu) * iv;
        }
        Var r = push(std::move(out));
        attach(r, [this, x, r, n, rows, mean = std::move(mean), inv = std::move(inv)]() {
            const auto& g = node(r).grad;
            const auto& vx2 = node(x).val;
            auto& gx = node(x).grad;
            for (size_t rr = 0; rr < rows; ++rr) {
                const T* gp = g.ptr() + rr * n;
                const T* xp = vx2.ptr() + rr * n;
                T* dst = gx.ptr() + rr * n;
                const T mu = mean[rr], iv = inv[rr];
                T s1 = 0, s2 = 0;
                for (size_t i = 0; i < n; ++i) {
                    const T xh = (xp[i] - mu) * iv;
                    s1 += gp[i];
                    s2 += gp[i] * xh;
                }
                const T nn = static_cast<T>(n);
                for (size_t i = 0; i < n; ++i) {
                    const T xh = (xp[i] - mu) * iv;
                    dst[i] += iv * (gp[i] - s1 / nn - xh * s2 / nn);
                }
            }
        });
        return r;
    }

    // x [B,C,H,W] * gamma[C] + beta[C]
    Var channel_affine(Var x, Var gamma, Var beta) {
        const Tensor<T>& vx = node(x).val;
        const Tensor<T>& vg = node(gamma).val;
        const Tensor<T>& vb = node(beta).val;
        if (vx.rank() != 4 || vg.rank() != 1 || vb.rank() != 1 || vg.dim(0) != vx.dim(1) ||
            vb.dim(0) != vx.dim(1)) {
            throw ShapeError("channel_affine: " + shape_str(vx.dims) + " with gamma " +
                             shape_str(vg.dims) + ", beta " + shape_str(vb.dims));
        }
        const int B = vx.dim(0), C = vx.dim(1);
        const size_t hw = static_cast<size_t>(vx.dim(2)) * vx.dim(3);
        Tensor<T> out(vx.dims);
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T* p = vx.ptr() + (static_cast<size_t>(b) * C + c) * hw;
                T* o = out.ptr() + (static_cast<size_t>(b) * C + c) * hw;
                const T ga = vg.data[static_cast<size_t>(c)], be = vb.data[static_cast<size_t>(c)];
                for (size_t i = 0; i < hw; ++i) o[i] = p[i] * ga + be;
            }
        Var r = push(std::move(out));
        attach(r, [this, x, gamma, beta, r, B, C, hw]() {
            const auto& g = node(r).grad;
            const auto& vx2 = node(x).val;
            const auto& vg2 = node(gamma).val;
            auto& gx = node(x).grad;
            auto& gg = node(gamma).grad;
            auto& gb = node(beta).grad;
            for (int b = 0; b < B; ++b)
                for (int c = 0; c < C; ++c) {
                    const size_t off = (static_cast<size_t>(b) * C + c) * hw;
                    const T* gp = g.ptr() + off;
                    const T* xp = vx2.ptr() + off;
                    T* dx = gx.ptr() + off;
                    const T ga = vg2.data[static_cast<size_t>(c)];
                    T sg = 0, sb = 0;
                    for (size_t i = 0; i < hw; ++i) {
                        dx[i] += gp[i] * ga;
                        sg += gp[i] * xp[i];
                        sb += gp[i];
                    }
                    gg.data[static_cast<size_t>(c)] += sg;
                    gb.data[static_cast<size_t>(c)] += sb;
                }
        });
        return r;
    }

    // x [B,C,H,W] + bc [B,C] broadcast over spatial positions
    Var add_bias_bc(Var x, Var bc) {
        const Tensor<T>& vx = node(x).val;
        const Tensor<T>& vb = node(bc).val;
        if (vx.rank() != 4 || vb.rank() != 2 || vb.dim(0) != vx.dim(0) || vb.dim(1) != vx.dim(1)) {
            throw ShapeError("add_bias_bc: " + shape_str(vx.dims) + " with " + shape_str(vb.dims));
        }
        const int BC = vx.dim(0) * vx.dim(1);
        const size_t hw = static_cast<size_t>(vx.dim(2)) * vx.dim(3);
        Tensor<T> out = vx;
        for (int i = 0; i < BC; ++i) {
            T* p = out.ptr() + static_cast<size_t>(i) * hw;
            const T v = vb.data[static_cast<size_t>(i)];
            for (size_t j = 0; j < hw; ++j) p[j] += v;
        }
        Var r = push(std::move(out));
        attach(r, [this, x, bc, r, BC, hw]() {
            const auto& g = node(r).grad;
            accumulate(x, g.data);
            auto& gb = node(bc).grad;
            for (int i = 0; i < BC; ++i) {
                const T* gp = g.ptr() + static_cast<size_t>(i) * hw;
                T s = 0;
                for (size_t j = 0; j < hw; ++j) s += gp[j];
                gb.data[static_cast<size_t>(i)] += s;
            }
        });
        return r;
    }

    // x [..., n] + b [n] broadcast over leading axes
    Var add_bias_rows(Var x, Var b) {
        const Tensor<T>& vx = node(x).val;
        const Tensor<T>& vb = node(b).val;
        const size_t n = vb.numel();
        if (vb.rank() != 1 || vx.rank() < 1 ||
            static_cast<size_t>(vx.dim(vx.rank() - 1)) != n) {
            throw ShapeError("add_bias_rows: " + shape_str(vx.dims) + " with " + shape_str(vb.dims));
        }
        const size_t rows = vx.numel() / n;
        Tensor<T> out = vx;
        for (size_t rr = 0; rr < rows; ++rr) {
            T* p = out.ptr() + rr * n;
            for (size_t i = 0; i < n; ++i) p[i] += vb.data[i];
        }
        Var r = push(std::move(out));
        attach(r, [this, x, b, r, rows, n]() {
            const auto& g = node(r).grad;
            accumulate(x, g.data);
            auto& gb = node(b).grad;
            for (size_t rr = 0; rr < rows; ++rr) {
                const T* gp = g.ptr() + rr * n;
                for (size_t i = 0; i < n; ++i) gb.data[i] += gp[i];
            }
        });
        return r;
    }

    // --- softmax / losses ----------------------------------------------------

    Var softmax(Var x, int axis) {
        const Tensor<T>& vx = node(x).val;
        if (axis < 0 || axis >= vx.rank()) {
            throw ShapeError("softmax: axis " + std::to_string(axis) + " for " + shape_str(vx.dims));
        }
        const int len = vx.dim(axis);
        size_t inner = 1;
        for (int i = axis + 1; i < vx.rank(); ++i) inner *= static_cast<size_t>(vx.dim(i));
        const size_t outer = vx.numel() / (static_cast<size_t>(len) * inner);
        Tensor<T> out(vx.dims);
        for (size_t o = 0; o < outer; ++o)
            for (size_t in = 0; in < inner; ++in) {
                const size_t base = o * len * inner + in;
                T mx = vx.data[base];
                for (int j = 1; j < len; ++j) mx = std::max(mx, vx.data[base + j * inner]);
                T sum = 0;
                for (int j = 0; j < len; ++j) {
                    const T e = std::exp(vx.data[base + j * inner] - mx);
                    out.data[base + j * inner] = e;
                    sum += e;
                }
                for (int j = 0; j < len; ++j) out.data[base + j * inner] /= sum;
            }
        Var r = push(std::move(out));
        attach(r, [this, x, r, len, inner, outer]() {
            const auto& g = node(r).grad;
            const auto& s = node(r).val;
            auto& gx = node(x).grad;
            for (size_t o = 0; o < outer; ++o)
                for (size_t in = 0; in < inner; ++in) {
                    const size_t base = o * len * inner + in;
                    T dot = 0;
                    for (int j = 0; j < len; ++j) dot += g.data[base + j * inner] * s.data[base + j * inner];
                    for (int j = 0; j < len; ++j) {
                        gx.data[base + j * inner] +=
                            s.data[base + j * inner] * (g.data[base + j * inner] - dot);
                    }
                }
        });
        return r;
    }

    // logits [B,K], labels [B] -> scalar mean cross-entropy
    Var softmax_cross_entropy(Var logits, std::vector<int> labels) {
        const Tensor<T>& vl = node(logits).val;
        if (vl.rank() != 2 || static_cast<size_t>(vl.dim(0)) != labels.size()) {
            throw ShapeError("softmax_cross_entropy: logits " + shape_str(vl.dims) + " with " +
                             std::to_string(labels.size()) + " labels");
        }
        const int B = vl.dim(0), K = vl.dim(1);
        T total = 0;
        for (int b = 0; b < B; ++b) {
            const T* p = vl.ptr() + static_cast<size_t>(b) * K;
            T mx = p[0];
            for (int j = 1; j < K; ++j) mx = std::max(mx, p[j]);
            T sum = 0;
            for (int j = 0; j < K; ++j) sum += std::exp(p[j] - mx);
            total += mx + std::log(sum) - p[labels[static_cast<size_t>(b)]];
        }
        Var r = push(Tensor<T>::scalar(total / static_cast<T>(B)));
        attach(r, [this, logits, r, B, K, labels = std::move(labels)]() {
            const T gs = node(r).grad.data[0] / static_cast<T>(B);
            const auto& vl2 = node(logits).val;
            auto& gl = node(logits).grad;
            for (int b = 0; b < B; ++b) {
                const T* p = vl2.ptr() + static_cast<size_t>(b) * K;
                T* gp = gl.ptr() + static_cast<size_t>(b) * K;
                T mx = p[0];
                for (int j = 1; j < K; ++j) mx = std::max(mx, p[j]);
                T sum = 0;
                for (int j = 0; j < K; ++j) sum += std::exp(p[j] - mx);
                for (int j = 0; j < K; ++j) {
                    const T prob = std::exp(p[j] - mx) / sum;
                    gp[j] += gs * (prob - (labels[static_cast<size_t>(b)] == j ? T(1) : T(0)));
                }
            }
        });
        return r;
    }

    // --- gather / pooling -----------------------------------------------------

    // table [V,d], ids -> [s,d]; repeated ids accumulate gradient
    Var embedding_lookup(Var table, std::vector<int> ids) {
        const Tensor<T>& vt = node(table).val;
        if (vt.rank() != 2) throw ShapeError("embedding_lookup: table " + shape_str(vt.dims));
        const int V = vt.dim(0), d = vt.dim(1);
        for (int id : ids) {
            if (id < 0 || id >= V) {
                throw VocabError("token id " + std::to_string(id) + " outside table of " +
                                 std::to_string(V));
            }
        }
        Tensor<T> out(Shape{static_cast<int>(ids.size()), d});
        for (size_t i = 0; i < ids.size(); ++i) {
            std::copy_n(vt.ptr() + static_cast<size_t>(ids[i]) * d, d, out.ptr() + i * d);
        }
        Var r = push(std::move(out));
        attach(r, [this, table, r, d, ids = std::move(ids)]() {
            const auto& g = node(r).grad;
            auto& gt = node(table).grad;
            for (size_t i = 0; i < ids.size(); ++i) {
                const T* gp = g.ptr() + i * d;
                T* tp = gt.ptr() + static_cast<size_t>(ids[i]) * d;
                for (int j = 0; j < d; ++j) tp[j] += gp[j];
            }
        });
        return r;
    }

    // [B,C,H,W] -> [B,C] spatial mean
    Var global_avg_pool(Var x) {
        const Tensor<T>& vx = node(x).val;
        if (vx.rank() != 4) throw ShapeError("global_avg_pool: " + shape_str(vx.dims));
        const int BC = vx.dim(0) * vx.dim(1);
        const size_t hw = static_cast<size_t>(vx.dim(2)) * vx.dim(3);
        Tensor<T> out(Shape{vx.dim(0), vx.dim(1)});
        for (int i = 0; i < BC; ++i) {
            const T* p = vx.ptr() + static_cast<size_t>(i) * hw;
            T s = 0;
            for (size_t j = 0; j < hw; ++j) s += p[j];
            out.data[static_cast<size_t>(i)] = s / static_cast<T>(hw);
        }
        Var r = push(std::move(out));
        attach(r, [this, x, r, BC, hw]() {
            const auto& g = node(r).grad;
            auto& gx = node(x).grad;
            for (int i = 0; i < BC; ++i) {
                const T v = g.data[static_cast<size_t>(i)] / static_cast<T>(hw);
                T* p = gx.ptr() + static_cast<size_t>(i) * hw;
                for (size_t j = 0; j < hw; ++j) p[j] += v;
            }
        });
        return r;
    }

    // --- reductions -------------------------------------------------------------

    Var sum_all(Var x) {
        const Tensor<T>& vx = node(x).val;
        T s = 0;
        for (T v : vx.data) s += v;
        Var r = push(Tensor<T>::scalar(s));
        attach(r, [this, x, r]() {
            const T g = node(r).grad.data[0];
            auto& gx = node(x).grad.data;
            for (auto& v : gx) v += g;
        });
        return r;
    }

    Var mean_all(Var x) {
        const Tensor<T>& vx = node(x).val;
        const T n = static_cast<T>(vx.numel());
        T s = 0;
        for (T v : vx.data) s += v;
        Var r = push(Tensor<T>::scalar(s / n));
        attach(r, [this, x, r, n]() {
            const T g = node(r).grad.data[0] / n;
            auto& gx = node(x).grad.data;
            for (auto& v : gx) v += g;
        });
        return r;
    }

    // --- evaluation -----------------------------------------------------------

    void backward(Var loss) {
        if (node(loss).val.numel() != 1) {
            throw ContractError("loss must be scalar, got " + shape_str(node(loss).val.dims));
        }
        if (backward_done_) throw ContractError("backward already ran on this graph");
        backward_done_ = true;
        for (auto& n : nodes_) n.grad = Tensor<T>::zeros(n.val.dims);
        nodes_[static_cast<size_t>(loss.idx)].grad.data[0] = T(1);
        for (int i = loss.idx; i >= 0; --i) {
            if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back();
        }
    }

    const Tensor<T>& gradient(const std::string& name) const {
        if (!backward_done_) throw ContractError("gradient requested before backward");
        return nodes_[static_cast<size_t>(lookup(name).idx)].grad;
    }

    const Tensor<T>& gradient(Var v) const {
        if (!backward_done_) throw ContractError("gradient requested before backward");
        return node(v).grad;
    }

    // Runs backward and reports one gradient per tracked variable. Tracked
    // variables must have been declared via input(); a tracked variable the
    // loss does not depend on reports an all-zero gradient.
    GradRecord<T> evaluate_with_grads(Var loss, const std::vector<std::string>& tracked) {
        for (const auto& name : tracked) {
            if (!named_.count(name)) throw ContractError("tracked variable not declared: " + name);
        }
        backward(loss);
        GradRecord<T> rec;
        rec.value = node(loss).val.data[0];
        for (const auto& name : tracked) rec.grads[name] = gradient(name);
        return rec;
    }

    size_t num_nodes() const { return nodes_.size(); }

    // Capability introspection: the op set the denoiser, losses and attack
    // gradients are built from.
    static std::vector<std::string> required_op_set() {
        return {
            "matmul",          "batched_matmul",     "conv2d_3x3_s1",  "conv2d_3x3_s2",
            "conv2d_1x1",      "upsample_nearest2x", "group_norm",     "layer_norm",
            "softmax_axis",    "silu",               "add",            "sub",
            "mul",             "affine_scale",       "embedding_lookup", "reshape",
            "transpose",       "mean_all",           "sum_all",        "scale_rows",
            "concat_channels", "channel_affine",     "add_bias_rows",  "add_bias_bc",
            "global_avg_pool", "softmax_cross_entropy",
        };
    }

private:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        std::function<void()> back;
        std::string name;
    };

    std::vector<Node> nodes_;
    std::map<std::string, int> named_;
    bool backward_done_ = false;

    Node& node(Var v) { return nodes_.at(static_cast<size_t>(v.idx)); }
    const Node& node(Var v) const { return nodes_.at(static_cast<size_t>(v.idx)); }

    Var push(Tensor<T> v) {
        nodes_.push_back(Node{std::move(v), Tensor<T>(), nullptr, ""});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void attach(Var v, std::function<void()> back) { node(v).back = std::move(back); }

    void check_same(const char* op, Var a, Var b) const {
        if (!node(a).val.same_shape(node(b).val)) {
            throw ShapeError(std::string(op) + ": " + shape_str(node(a).val.dims) + " vs " +
                             shape_str(node(b).val.dims));
        }
    }

    void accumulate(Var v, const std::vector<T>& g) {
        auto& dst = node(v).grad.data;
        for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }

    static T sigmoid(T v) { return T(1) / (T(1) + std::exp(-v)); }

    static Tensor<T> permute_tensor(const Tensor<T>& t, const std::vector<int>& perm) {
        const int rk = t.rank();
        Shape od(perm.size());
        for (int i = 0; i < rk; ++i) od[static_cast<size_t>(i)] = t.dim(perm[static_cast<size_t>(i)]);
        Tensor<T> out(od);
        std::vector<size_t> istr(static_cast<size_t>(rk), 1), ostr(static_cast<size_t>(rk), 1);
        for (int i = rk - 2; i >= 0; --i) {
            istr[static_cast<size_t>(i)] = istr[static_cast<size_t>(i) + 1] * static_cast<size_t>(t.dim(i + 1));
            ostr[static_cast<size_t>(i)] = ostr[static_cast<size_t>(i) + 1] * static_cast<size_t>(od[static_cast<size_t>(i) + 1]);
        }
        std::vector<int> coord(static_cast<size_t>(rk), 0);
        for (size_t o = 0; o < out.numel(); ++o) {
            size_t rem = o, src = 0;
            for (int i = 0; i < rk; ++i) {
                coord[static_cast<size_t>(i)] = static_cast<int>(rem / ostr[static_cast<size_t>(i)]);
                rem %= ostr[static_cast<size_t>(i)];
                src += static_cast<size_t>(coord[static_cast<size_t>(i)]) *
                       istr[static_cast<size_t>(perm[static_cast<size_t>(i)])];
            }
            out.data[o] = t.data[src];
        }
        return out;
    }

    static void im2col(const T* src, int C, int H, int W, int k, int stride, int pad, int Ho,
                       int Wo, T* col) {
        // col is [C*k*k, Ho*Wo]
        for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T* dst = col + ((static_cast<size_t>(c) * k + ky) * k + kx) *
                                       (static_cast<size_t>(Ho) * Wo);
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) {
                            for (int ox = 0; ox < Wo; ++ox) dst[oy * Wo + ox] = T(0);
                            continue;
                        }
                        const T* row = src + (static_cast<size_t>(c) * H + iy) * W;
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            dst[oy * Wo + ox] = (ix >= 0 && ix < W) ? row[ix] : T(0);
                        }
                    }
                }
    }

    static void col2im_add(const T* col, int C, int H, int W, int k, int stride, int pad, int Ho,
                           int Wo, T* dst) {
        for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T* src = col + ((static_cast<size_t>(c) * k + ky) * k + kx) *
                                             (static_cast<size_t>(Ho) * Wo);
                    for (int oy = 0; oy < Ho; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= H) continue;
                        T* row = dst + (static_cast<size_t>(c) * H + iy) * W;
                        for (int ox = 0; ox < Wo; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            if (ix >= 0 && ix < W) row[ix] += src[oy * Wo + ox];
                        }
                    }
                }
    }
};

}  // namespace caat
