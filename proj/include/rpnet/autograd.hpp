#ifndef RPNET_AUTOGRAD_HPP
#define RPNET_AUTOGRAD_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "rpnet/tensor.hpp"

namespace rpnet {

/// Learnable parameter with Adam state. Gradients accumulate across the
/// backward pass and are zeroed explicitly by the optimizer step.
struct Param {
    std::string name;
    Tensor value;
    Tensor grad;
    Tensor adam_m, adam_v;

    Param() = default;
    Param(std::string n, Tensor v)
        : name(std::move(n)), value(std::move(v)),
          grad(value.shape), adam_m(value.shape), adam_v(value.shape) {}

    void zero_grad() { grad.fill(0.f); }
};

namespace detail {
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}
/// Active MAC counter, if any. Convolutions add their multiply-accumulate
/// counts here during a forward pass.
inline long long*& mac_counter() {
    thread_local long long* ctr = nullptr;
    return ctr;
}
}  // namespace detail

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
};

struct MacCounterGuard {
    long long* prev;
    explicit MacCounterGuard(long long& ctr) : prev(detail::mac_counter()) {
        detail::mac_counter() = &ctr;
    }
    ~MacCounterGuard() { detail::mac_counter() = prev; }
};

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, scatters to parents/params
    bool needs_grad = false;

    Tensor& ensure_grad() {
        if (grad.shape != value.shape) grad = Tensor(value.shape);
        return grad;
    }
};

inline Var make_var(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

inline Var make_op(Tensor v, std::vector<Var> parents, std::function<void(Node&)> bp) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    if (detail::grad_mode()) {
        n->needs_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(bp);
    }
    return n;
}

/// Reverse-mode sweep from a scalar root. Node creation order is not
/// tracked, so we topo-sort by DFS over the parent links.
inline void backward(const Var& root) {
    if (root->value.size() != 1) throw ShapeError("backward: root must be scalar");
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->needs_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    root->ensure_grad().data[0] = 1.f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.shape == n->value.shape) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// Shared resampling kernels (also used by the non-autograd pyramid ops)
// ---------------------------------------------------------------------------

struct LinTap {
    int i0, i1;
    float w0, w1;
};

/// Per-output-coordinate source taps for 1-d linear interpolation with
/// half-pixel center alignment and edge clamping.
inline std::vector<LinTap> linear_taps(int in, int out) {
    std::vector<LinTap> taps(static_cast<std::size_t>(out));
    for (int x = 0; x < out; ++x) {
        double s = (x + 0.5) * static_cast<double>(in) / out - 0.5;
        s = std::min(std::max(s, 0.0), static_cast<double>(in - 1));
        int i0 = static_cast<int>(s);
        int i1 = std::min(i0 + 1, in - 1);
        float w1 = static_cast<float>(s - i0);
        taps[static_cast<std::size_t>(x)] = {i0, i1, 1.f - w1, w1};
    }
    return taps;
}

/// Bilinear resize of one C*Hin*Win plane stack into C*Hout*Wout.
inline void bilinear_resize_plane(const float* in, float* out, int C, int Hin, int Win,
                                  int Hout, int Wout) {
    auto ty = linear_taps(Hin, Hout);
    auto tx = linear_taps(Win, Wout);
    for (int c = 0; c < C; ++c) {
        const float* src = in + static_cast<std::size_t>(c) * Hin * Win;
        float* dst = out + static_cast<std::size_t>(c) * Hout * Wout;
        for (int y = 0; y < Hout; ++y) {
            const float* r0 = src + static_cast<std::size_t>(ty[y].i0) * Win;
            const float* r1 = src + static_cast<std::size_t>(ty[y].i1) * Win;
            for (int x = 0; x < Wout; ++x) {
                float top = tx[x].w0 * r0[tx[x].i0] + tx[x].w1 * r0[tx[x].i1];
                float bot = tx[x].w0 * r1[tx[x].i0] + tx[x].w1 * r1[tx[x].i1];
                dst[static_cast<std::size_t>(y) * Wout + x] = ty[y].w0 * top + ty[y].w1 * bot;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeom {
    int in_ch, out_ch, kh, kw, sh, sw, ph, pw;
    int out_h(int H) const { return (H + 2 * ph - kh) / sh + 1; }
    int out_w(int W) const { return (W + 2 * pw - kw) / sw + 1; }
};

namespace detail {

inline void im2col(const float* in, const ConvGeom& g, int H, int W, int Ho, int Wo, float* col) {
    for (int c = 0; c < g.in_ch; ++c) {
        const float* plane = in + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < g.kh; ++i) {
            for (int j = 0; j < g.kw; ++j) {
                float* dst = col + (static_cast<std::size_t>(c) * g.kh * g.kw + i * g.kw + j) *
                                       (static_cast<std::size_t>(Ho) * Wo);
                for (int y = 0; y < Ho; ++y) {
                    int sy = y * g.sh + i - g.ph;
                    float* row = dst + static_cast<std::size_t>(y) * Wo;
                    if (sy < 0 || sy >= H) {
                        std::fill(row, row + Wo, 0.f);
                        continue;
                    }
                    const float* src = plane + static_cast<std::size_t>(sy) * W;
                    for (int x = 0; x < Wo; ++x) {
                        int sx = x * g.sw + j - g.pw;
                        row[x] = (sx >= 0 && sx < W) ? src[sx] : 0.f;
                    }
                }
            }
        }
    }
}

inline void col2im(const float* col, const ConvGeom& g, int H, int W, int Ho, int Wo, float* in) {
    for (int c = 0; c < g.in_ch; ++c) {
        float* plane = in + static_cast<std::size_t>(c) * H * W;
        for (int i = 0; i < g.kh; ++i) {
            for (int j = 0; j < g.kw; ++j) {
                const float* src = col + (static_cast<std::size_t>(c) * g.kh * g.kw + i * g.kw + j) *
                                             (static_cast<std::size_t>(Ho) * Wo);
                for (int y = 0; y < Ho; ++y) {
                    int sy = y * g.sh + i - g.ph;
                    if (sy < 0 || sy >= H) continue;
                    float* row = plane + static_cast<std::size_t>(sy) * W;
                    for (int x = 0; x < Wo; ++x) {
                        int sx = x * g.sw + j - g.pw;
                        if (sx >= 0 && sx < W) row[sx] += src[static_cast<std::size_t>(y) * Wo + x];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-d convolution over an NCHW input. Bias optional (pass nullptr).
inline Var conv2d(const Var& x, Param& weight, Param* bias, const ConvGeom& g) {
    const Tensor& in = x->value;
    if (in.ndim() != 4 || in.dim(1) != g.in_ch)
        throw ShapeError("conv2d: bad input shape " + shape_str(in.shape));
    int N = in.dim(0), H = in.dim(2), W = in.dim(3);
    int Ho = g.out_h(H), Wo = g.out_w(W);
    if (Ho <= 0 || Wo <= 0) throw ShapeError("conv2d: input too small");

    Tensor out({N, g.out_ch, Ho, Wo});
    const std::size_t K = static_cast<std::size_t>(g.in_ch) * g.kh * g.kw;
    const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
    FloatVec col(K * P);
    Eigen::Map<const MatRM> Wm(weight.value.data.data(), g.out_ch, static_cast<Eigen::Index>(K));
    for (int n = 0; n < N; ++n) {
        const float* in_n = in.data.data() + static_cast<std::size_t>(n) * g.in_ch * H * W;
        float* out_n = out.data.data() + static_cast<std::size_t>(n) * g.out_ch * P;
        detail::im2col(in_n, g, H, W, Ho, Wo, col.data());
        Eigen::Map<const MatRM> Km(col.data(), static_cast<Eigen::Index>(K),
                                   static_cast<Eigen::Index>(P));
        Eigen::Map<MatRM> Om(out_n, g.out_ch, static_cast<Eigen::Index>(P));
        Om.noalias() = Wm * Km;
        if (bias) {
            for (int c = 0; c < g.out_ch; ++c)
                Om.row(c).array() += bias->value.data[static_cast<std::size_t>(c)];
        }
    }
    if (detail::mac_counter())
        *detail::mac_counter() +=
            static_cast<long long>(N) * g.out_ch * K * P;

    Param* wp = &weight;
    Param* bp = bias;
    ConvGeom geom = g;
    return make_op(std::move(out), {x}, [x, wp, bp, geom, H, W, Ho, Wo](Node& self) {
        const Tensor& in2 = x->value;
        int N2 = in2.dim(0);
        const std::size_t K2 = static_cast<std::size_t>(geom.in_ch) * geom.kh * geom.kw;
        const std::size_t P2 = static_cast<std::size_t>(Ho) * Wo;
        FloatVec col(K2 * P2), dcol(K2 * P2);
        Eigen::Map<const MatRM> Wm(wp->value.data.data(), geom.out_ch,
                                   static_cast<Eigen::Index>(K2));
        Eigen::Map<MatRM> dWm(wp->grad.data.data(), geom.out_ch, static_cast<Eigen::Index>(K2));
        bool need_dx = x->needs_grad;
        if (need_dx) x->ensure_grad();
        for (int n = 0; n < N2; ++n) {
            const float* in_n =
                in2.data.data() + static_cast<std::size_t>(n) * geom.in_ch * H * W;
            const float* dout_n =
                self.grad.data.data() + static_cast<std::size_t>(n) * geom.out_ch * P2;
            detail::im2col(in_n, geom, H, W, Ho, Wo, col.data());
            Eigen::Map<const MatRM> Km(col.data(), static_cast<Eigen::Index>(K2),
                                       static_cast<Eigen::Index>(P2));
            Eigen::Map<const MatRM> dOm(dout_n, geom.out_ch, static_cast<Eigen::Index>(P2));
            dWm.noalias() += dOm * Km.transpose();
            if (bp) {
                for (int c = 0; c < geom.out_ch; ++c)
                    bp->grad.data[static_cast<std::size_t>(c)] += dOm.row(c).sum();
            }
            if (need_dx) {
                Eigen::Map<MatRM> dKm(dcol.data(), static_cast<Eigen::Index>(K2),
                                      static_cast<Eigen::Index>(P2));
                dKm.noalias() = Wm.transpose() * dOm;
                float* dx_n =
                    x->grad.data.data() + static_cast<std::size_t>(n) * geom.in_ch * H * W;
                detail::col2im(dcol.data(), geom, H, W, Ho, Wo, dx_n);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pointwise and structural ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw ShapeError("add: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->needs_grad) {
            auto& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
        }
        if (b->needs_grad) {
            auto& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw ShapeError("sub: shape mismatch");
    Tensor out = a->value;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b->value.data[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->needs_grad) {
            auto& g = a->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
        }
        if (b->needs_grad) {
            auto& g = b->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g.data[i] -= self.grad.data[i];
        }
    });
}

inline Var scale(const Var& a, float s) {
    Tensor out = a->value;
    for (auto& v : out.data) v *= s;
    return make_op(std::move(out), {a}, [a, s](Node& self) {
        if (!a->needs_grad) return;
        auto& g = a->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s * self.grad.data[i];
    });
}

/// Channel concatenation of NCHW tensors.
inline Var concat_channels(const Var& a, const Var& b) {
    const Tensor &ta = a->value, &tb = b->value;
    if (ta.ndim() != 4 || tb.ndim() != 4 || ta.dim(0) != tb.dim(0) || ta.dim(2) != tb.dim(2) ||
        ta.dim(3) != tb.dim(3))
        throw ShapeError("concat: incompatible shapes " + shape_str(ta.shape) + " vs " +
                         shape_str(tb.shape));
    int N = ta.dim(0), Ca = ta.dim(1), Cb = tb.dim(1), H = ta.dim(2), W = ta.dim(3);
    std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor out({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(ta.data.data() + static_cast<std::size_t>(n) * Ca * plane, Ca * plane,
                    out.data.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane);
        std::copy_n(tb.data.data() + static_cast<std::size_t>(n) * Cb * plane, Cb * plane,
                    out.data.data() + (static_cast<std::size_t>(n) * (Ca + Cb) + Ca) * plane);
    }
    return make_op(std::move(out), {a, b}, [a, b, N, Ca, Cb, plane](Node& self) {
        for (int n = 0; n < N; ++n) {
            const float* g = self.grad.data.data() + static_cast<std::size_t>(n) * (Ca + Cb) * plane;
            if (a->needs_grad) {
                auto& ga = a->ensure_grad();
                float* dst = ga.data.data() + static_cast<std::size_t>(n) * Ca * plane;
                for (std::size_t i = 0; i < Ca * plane; ++i) dst[i] += g[i];
            }
            if (b->needs_grad) {
                auto& gb = b->ensure_grad();
                float* dst = gb.data.data() + static_cast<std::size_t>(n) * Cb * plane;
                for (std::size_t i = 0; i < Cb * plane; ++i) dst[i] += g[Ca * plane + i];
            }
        }
    });
}

/// Zero-pad channels up to out_ch (ENet downsampling main branch).
inline Var pad_channels(const Var& x, int out_ch) {
    const Tensor& in = x->value;
    int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    if (out_ch < C) throw ShapeError("pad_channels: shrinking not allowed");
    std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor out({N, out_ch, H, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(in.data.data() + static_cast<std::size_t>(n) * C * plane, C * plane,
                    out.data.data() + static_cast<std::size_t>(n) * out_ch * plane);
    return make_op(std::move(out), {x}, [x, N, C, out_ch, plane](Node& self) {
        if (!x->needs_grad) return;
        auto& g = x->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const float* src = self.grad.data.data() + static_cast<std::size_t>(n) * out_ch * plane;
            float* dst = g.data.data() + static_cast<std::size_t>(n) * C * plane;
            for (std::size_t i = 0; i < C * plane; ++i) dst[i] += src[i];
        }
    });
}

/// 2x2 max pooling with stride 2. Requires even spatial dims.
inline Var maxpool2x2(const Var& x) {
    const Tensor& in = x->value;
    int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    if (H % 2 || W % 2) throw ShapeError("maxpool2x2: odd spatial size " + shape_str(in.shape));
    int Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    auto idx = std::make_shared<std::vector<std::uint32_t>>(out.size());
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* plane =
                in.data.data() + (static_cast<std::size_t>(n) * C + c) * H * W;
            for (int y = 0; y < Ho; ++y)
                for (int xo = 0; xo < Wo; ++xo, ++o) {
                    std::size_t base = static_cast<std::size_t>(2 * y) * W + 2 * xo;
                    std::size_t best = base;
                    float v = plane[base];
                    for (std::size_t cand : {base + 1, base + W, base + W + 1})
                        if (plane[cand] > v) { v = plane[cand]; best = cand; }
                    out.data[o] = v;
                    (*idx)[o] = static_cast<std::uint32_t>(best);
                }
        }
    return make_op(std::move(out), {x}, [x, idx, N, C, H, W](Node& self) {
        if (!x->needs_grad) return;
        auto& g = x->ensure_grad();
        std::size_t plane_sz = static_cast<std::size_t>(H) * W;
        std::size_t o = 0, out_plane = self.value.size() / (static_cast<std::size_t>(N) * C);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float* plane = g.data.data() + (static_cast<std::size_t>(n) * C + c) * plane_sz;
                for (std::size_t i = 0; i < out_plane; ++i, ++o) plane[(*idx)[o]] += self.grad.data[o];
            }
    });
}

/// Per-channel PReLU.
inline Var prelu(const Var& x, Param& slope) {
    const Tensor& in = x->value;
    int N = in.dim(0), C = in.dim(1);
    std::size_t plane = in.size() / (static_cast<std::size_t>(N) * C);
    Tensor out = in;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float a = slope.value.data[static_cast<std::size_t>(c)];
            float* p = out.data.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i)
                if (p[i] < 0.f) p[i] *= a;
        }
    Param* sp = &slope;
    return make_op(std::move(out), {x}, [x, sp, N, C, plane](Node& self) {
        bool dx = x->needs_grad;
        if (dx) x->ensure_grad();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float a = sp->value.data[static_cast<std::size_t>(c)];
                std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
                const float* xin = x->value.data.data() + off;
                const float* go = self.grad.data.data() + off;
                float da = 0.f;
                float* gx = dx ? x->grad.data.data() + off : nullptr;
                for (std::size_t i = 0; i < plane; ++i) {
                    if (xin[i] >= 0.f) {
                        if (dx) gx[i] += go[i];
                    } else {
                        if (dx) gx[i] += a * go[i];
                        da += go[i] * xin[i];
                    }
                }
                sp->grad.data[static_cast<std::size_t>(c)] += da;
            }
    });
}

inline Var relu(const Var& x) {
    Tensor out = x->value;
    for (auto& v : out.data) v = std::max(v, 0.f);
    return make_op(std::move(out), {x}, [x](Node& self) {
        if (!x->needs_grad) return;
        auto& g = x->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x->value.data[i] > 0.f) g.data[i] += self.grad.data[i];
    });
}

/// Batch normalization over N,H,W per channel.
inline Var batchnorm(const Var& x, Param& gamma, Param& beta, Tensor& running_mean,
                     Tensor& running_var, bool training, float momentum = 0.1f,
                     float eps = 1e-5f) {
    const Tensor& in = x->value;
    int N = in.dim(0), C = in.dim(1);
    std::size_t plane = in.size() / (static_cast<std::size_t>(N) * C);
    std::size_t count = static_cast<std::size_t>(N) * plane;

    auto mean = std::make_shared<std::vector<float>>(static_cast<std::size_t>(C));
    auto invstd = std::make_shared<std::vector<float>>(static_cast<std::size_t>(C));
    if (training) {
        for (int c = 0; c < C; ++c) {
            double s = 0, s2 = 0;
            for (int n = 0; n < N; ++n) {
                const float* p = in.data.data() + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) { s += p[i]; s2 += double(p[i]) * p[i]; }
            }
            double m = s / count;
            double var = s2 / count - m * m;
            if (var < 0) var = 0;
            (*mean)[c] = static_cast<float>(m);
            (*invstd)[c] = static_cast<float>(1.0 / std::sqrt(var + eps));
            double unbiased = count > 1 ? var * count / (count - 1) : var;
            running_mean.data[c] = (1 - momentum) * running_mean.data[c] + momentum * float(m);
            running_var.data[c] = (1 - momentum) * running_var.data[c] + momentum * float(unbiased);
        }
    } else {
        for (int c = 0; c < C; ++c) {
            (*mean)[c] = running_mean.data[c];
            (*invstd)[c] = 1.f / std::sqrt(running_var.data[c] + eps);
        }
    }

    Tensor out(in.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float m = (*mean)[c], is = (*invstd)[c];
            float g = gamma.value.data[c], b = beta.value.data[c];
            const float* p = in.data.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            float* q = out.data.data() + (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) q[i] = g * (p[i] - m) * is + b;
        }

    Param* gp = &gamma;
    Param* bp = &beta;
    return make_op(std::move(out), {x}, [x, gp, bp, mean, invstd, training, N, C, plane,
                                         count](Node& self) {
        bool dx = x->needs_grad;
        if (dx) x->ensure_grad();
        for (int c = 0; c < C; ++c) {
            float m = (*mean)[c], is = (*invstd)[c];
            float g = gp->value.data[c];
            double sum_dy = 0, sum_dy_xhat = 0;
            for (int n = 0; n < N; ++n) {
                std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
                const float* xin = x->value.data.data() + off;
                const float* dy = self.grad.data.data() + off;
                for (std::size_t i = 0; i < plane; ++i) {
                    sum_dy += dy[i];
                    sum_dy_xhat += double(dy[i]) * (xin[i] - m) * is;
                }
            }
            gp->grad.data[c] += static_cast<float>(sum_dy_xhat);
            bp->grad.data[c] += static_cast<float>(sum_dy);
            if (!dx) continue;
            if (training) {
                float k1 = g * is / static_cast<float>(count);
                for (int n = 0; n < N; ++n) {
                    std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
                    const float* xin = x->value.data.data() + off;
                    const float* dy = self.grad.data.data() + off;
                    float* gx = x->grad.data.data() + off;
                    for (std::size_t i = 0; i < plane; ++i) {
                        float xhat = (xin[i] - m) * is;
                        gx[i] += k1 * (count * dy[i] - static_cast<float>(sum_dy) -
                                       xhat * static_cast<float>(sum_dy_xhat));
                    }
                }
            } else {
                float k = g * is;
                for (int n = 0; n < N; ++n) {
                    std::size_t off = (static_cast<std::size_t>(n) * C + c) * plane;
                    const float* dy = self.grad.data.data() + off;
                    float* gx = x->grad.data.data() + off;
                    for (std::size_t i = 0; i < plane; ++i) gx[i] += k * dy[i];
                }
            }
        }
    });
}

/// Spatial dropout: zeroes whole channels, scaling survivors by 1/(1-rate).
inline Var spatial_dropout(const Var& x, float rate, bool training, std::mt19937& rng) {
    if (!training || rate <= 0.f) return x;
    const Tensor& in = x->value;
    int N = in.dim(0), C = in.dim(1);
    std::size_t plane = in.size() / (static_cast<std::size_t>(N) * C);
    auto mask = std::make_shared<std::vector<float>>(static_cast<std::size_t>(N) * C);
    std::uniform_real_distribution<float> u(0.f, 1.f);
    float keep = 1.f / (1.f - rate);
    for (auto& m : *mask) m = (u(rng) < rate) ? 0.f : keep;
    Tensor out = in;
    for (std::size_t nc = 0; nc < mask->size(); ++nc) {
        float* p = out.data.data() + nc * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] *= (*mask)[nc];
    }
    return make_op(std::move(out), {x}, [x, mask, plane](Node& self) {
        if (!x->needs_grad) return;
        auto& g = x->ensure_grad();
        for (std::size_t nc = 0; nc < mask->size(); ++nc) {
            const float* go = self.grad.data.data() + nc * plane;
            float* gx = g.data.data() + nc * plane;
            for (std::size_t i = 0; i < plane; ++i) gx[i] += (*mask)[nc] * go[i];
        }
    });
}

/// Differentiable bilinear upsampling (half-pixel centers, clamped edges).
inline Var upsample_bilinear_nchw(const Var& x, int Hout, int Wout) {
    const Tensor& in = x->value;
    int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    if (Hout < H || Wout < W)
        throw ShapeError("upsample_bilinear: target smaller than source");
    Tensor out({N, C, Hout, Wout});
    for (int n = 0; n < N; ++n)
        bilinear_resize_plane(in.data.data() + static_cast<std::size_t>(n) * C * H * W,
                              out.data.data() + static_cast<std::size_t>(n) * C * Hout * Wout, C,
                              H, W, Hout, Wout);
    return make_op(std::move(out), {x}, [x, N, C, H, W, Hout, Wout](Node& self) {
        if (!x->needs_grad) return;
        auto& g = x->ensure_grad();
        auto ty = linear_taps(H, Hout);
        auto tx = linear_taps(W, Wout);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float* gx = g.data.data() + (static_cast<std::size_t>(n) * C + c) *
                                                static_cast<std::size_t>(H) * W;
                const float* go =
                    self.grad.data.data() + (static_cast<std::size_t>(n) * C + c) *
                                                static_cast<std::size_t>(Hout) * Wout;
                for (int y = 0; y < Hout; ++y)
                    for (int xo = 0; xo < Wout; ++xo) {
                        float d = go[static_cast<std::size_t>(y) * Wout + xo];
                        gx[ty[y].i0 * W + tx[xo].i0] += ty[y].w0 * tx[xo].w0 * d;
                        gx[ty[y].i0 * W + tx[xo].i1] += ty[y].w0 * tx[xo].w1 * d;
                        gx[ty[y].i1 * W + tx[xo].i0] += ty[y].w1 * tx[xo].w0 * d;
                        gx[ty[y].i1 * W + tx[xo].i1] += ty[y].w1 * tx[xo].w1 * d;
                    }
            }
    });
}

/// Class-weighted softmax cross-entropy with ignore index.
/// Reduction is the weighted mean over scored pixels; a batch with no scored
/// pixels yields exactly zero loss and zero gradient.
inline Var cross_entropy(const Var& logits, const std::vector<const LabelImage*>& labels,
                         const std::vector<float>& class_weights) {
    const Tensor& in = logits->value;
    int N = in.dim(0), C = in.dim(1), H = in.dim(2), W = in.dim(3);
    if (static_cast<int>(labels.size()) != N)
        throw ShapeError("cross_entropy: batch size mismatch");
    for (auto* l : labels)
        if (l->height != H || l->width != W)
            throw ShapeError("cross_entropy: label size mismatch");
    if (static_cast<int>(class_weights.size()) != C)
        throw ShapeError("cross_entropy: class weight count mismatch");

    std::size_t plane = static_cast<std::size_t>(H) * W;
    auto probs = std::make_shared<Tensor>(in.shape);
    double loss_sum = 0, weight_sum = 0;
    for (int n = 0; n < N; ++n) {
        const float* lg = in.data.data() + static_cast<std::size_t>(n) * C * plane;
        float* pr = probs->data.data() + static_cast<std::size_t>(n) * C * plane;
        const LabelImage& lab = *labels[static_cast<std::size_t>(n)];
        for (std::size_t i = 0; i < plane; ++i) {
            float mx = lg[i];
            for (int c = 1; c < C; ++c) mx = std::max(mx, lg[c * plane + i]);
            double denom = 0;
            for (int c = 0; c < C; ++c) denom += std::exp(double(lg[c * plane + i] - mx));
            for (int c = 0; c < C; ++c)
                pr[c * plane + i] = static_cast<float>(std::exp(double(lg[c * plane + i] - mx)) / denom);
            std::int32_t y = lab.data[i];
            if (y == lab.ignore_index) continue;
            float w = class_weights[static_cast<std::size_t>(y)];
            loss_sum += w * (std::log(denom) - (lg[y * plane + i] - mx));
            weight_sum += w;
        }
    }
    float loss = weight_sum > 0 ? static_cast<float>(loss_sum / weight_sum) : 0.f;
    auto labels_copy = labels;
    auto weights = class_weights;
    return make_op(Tensor::scalar(loss), {logits},
                   [logits, probs, labels_copy, weights, N, C, plane, weight_sum](Node& self) {
        if (!logits->needs_grad || weight_sum <= 0) return;
        auto& g = logits->ensure_grad();
        float up = self.grad.data[0] / static_cast<float>(weight_sum);
        for (int n = 0; n < N; ++n) {
            const LabelImage& lab = *labels_copy[static_cast<std::size_t>(n)];
            const float* pr = probs->data.data() + static_cast<std::size_t>(n) * C * plane;
            float* gx = g.data.data() + static_cast<std::size_t>(n) * C * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                std::int32_t y = lab.data[i];
                if (y == lab.ignore_index) continue;
                float w = weights[static_cast<std::size_t>(y)] * up;
                for (int c = 0; c < C; ++c) gx[c * plane + i] += w * pr[c * plane + i];
                gx[y * plane + i] -= w;
            }
        }
    });
}

/// Sum over all elements (scalar result).
inline Var sum_all(const Var& x) {
    double s = 0;
    for (float v : x->value.data) s += v;
    return make_op(Tensor::scalar(static_cast<float>(s)), {x}, [x](Node& self) {
        if (!x->needs_grad) return;
        auto& g = x->ensure_grad();
        for (auto& v : g.data) v += self.grad.data[0];
    });
}

}  // namespace rpnet

#endif
