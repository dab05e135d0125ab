// Reverse-mode autodiff over Tensor: dynamic tape, ops used by the models.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <functional>
#include <memory>
#include <unordered_set>

#include "sagiri/tensor.hpp"

namespace sagiri {

struct Node;
using NodeRef = std::shared_ptr<Node>;

struct Node {
    Tensor val;
    Tensor grad;  // allocated lazily, same shape as val
    std::vector<NodeRef> parents;
    std::function<void(Node&)> backward_fn;  // scatter node.grad into parents
    bool requires_grad = false;              // leaf flag, propagated transitively
    bool needs_grad = false;                 // set during backward traversal

    Tensor& ensure_grad() {
        if (grad.shape != val.shape) grad = Tensor::zeros(val.shape);
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor v, bool requires_grad = false) : n_(std::make_shared<Node>()) {
        n_->val = std::move(v);
        n_->requires_grad = requires_grad;
    }

    bool defined() const { return n_ != nullptr; }
    const Tensor& val() const { return n_->val; }
    Tensor& val() { return n_->val; }
    Tensor& grad() { return n_->ensure_grad(); }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }
    float item() const {
        assert(n_->val.numel() == 1);
        return n_->val.data[0];
    }
    NodeRef node() const { return n_; }

private:
    NodeRef n_;
};

inline Var constant(Tensor t) { return Var(std::move(t), false); }
inline Var scalar_var(float v) { return constant(Tensor::scalar(v)); }

namespace detail {

inline Var make_op(Tensor out, std::vector<Var> inputs, std::function<void(Node&)> bwd) {
    Var r(std::move(out), false);
    Node& n = *r.node();
    for (auto& v : inputs) n.parents.push_back(v.node());
    n.backward_fn = std::move(bwd);
    return r;
}

inline bool wants(const NodeRef& n) { return n->needs_grad; }

// C[m,n] (+)= A[m,k] * B[k,n], optional transposes on logical A/B.
inline void gemm(const float* A, const float* B, float* C, int m, int k, int n,
                 bool trans_a = false, bool trans_b = false, bool accumulate = false) {
    using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<Mat>;
    using Map = Eigen::Map<const Mat>;
    CMap c(C, m, n);
    auto run = [&](auto&& a, auto&& b) {
        if (accumulate)
            c.noalias() += a * b;
        else
            c.noalias() = a * b;
    };
    if (!trans_a && !trans_b)
        run(Map(A, m, k), Map(B, k, n));
    else if (trans_a && !trans_b)
        run(Map(A, k, m).transpose(), Map(B, k, n));
    else if (!trans_a && trans_b)
        run(Map(A, m, k), Map(B, n, k).transpose());
    else
        run(Map(A, k, m).transpose(), Map(B, n, k).transpose());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward driver
// ---------------------------------------------------------------------------

inline void backward(Var loss) {
    assert(loss.val().numel() == 1);
    // Topological order via iterative DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (!seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    // needs_grad: leaf requires_grad, or any parent needs it (order is
    // children-after-parents so a single pass works).
    for (Node* n : order) {
        n->needs_grad = n->requires_grad;
        for (auto& p : n->parents)
            if (p->needs_grad) n->needs_grad = true;
        if (n->needs_grad && n->grad.shape != n->val.shape) n->ensure_grad();
    }
    loss.node()->ensure_grad().data[0] = 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->needs_grad && n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise ops
// ---------------------------------------------------------------------------

inline Var add(Var a, Var b) {
    assert(a.val().same_shape(b.val()));
    Tensor out = a.val();
    const float* pb = b.val().ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] += pb[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        for (int s = 0; s < 2; ++s) {
            auto& p = n.parents[s];
            if (!detail::wants(p)) continue;
            float* g = p->ensure_grad().ptr();
            const float* up = n.grad.ptr();
            for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    assert(a.val().same_shape(b.val()));
    Tensor out = a.val();
    const float* pb = b.val().ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] -= pb[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        const float* up = n.grad.ptr();
        if (detail::wants(n.parents[0])) {
            float* g = n.parents[0]->ensure_grad().ptr();
            for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i];
        }
        if (detail::wants(n.parents[1])) {
            float* g = n.parents[1]->ensure_grad().ptr();
            for (int64_t i = 0; i < n.val.numel(); ++i) g[i] -= up[i];
        }
    });
}

inline Var mul(Var a, Var b) {
    assert(a.val().same_shape(b.val()));
    Tensor out = a.val();
    const float* pb = b.val().ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] *= pb[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        const float* up = n.grad.ptr();
        const float* va = n.parents[0]->val.ptr();
        const float* vb = n.parents[1]->val.ptr();
        if (detail::wants(n.parents[0])) {
            float* g = n.parents[0]->ensure_grad().ptr();
            for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i] * vb[i];
        }
        if (detail::wants(n.parents[1])) {
            float* g = n.parents[1]->ensure_grad().ptr();
            for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i] * va[i];
        }
    });
}

inline Var div(Var a, Var b) {
    assert(a.val().same_shape(b.val()));
    Tensor out = a.val();
    const float* pb = b.val().ptr();
    for (int64_t i = 0; i < out.numel(); ++i) out.data[i] /= pb[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        const float* up = n.grad.ptr();
        const float* va = n.parents[0]->val.ptr();
        const float* vb = n.parents[1]->val.ptr();
        if (detail::wants(n.parents[0])) {
            float* g = n.parents[0]->ensure_grad().ptr();
            for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i] / vb[i];
        }
        if (detail::wants(n.parents[1])) {
            float* g = n.parents[1]->ensure_grad().ptr();
            for (int64_t i = 0; i < n.val.numel(); ++i) g[i] -= up[i] * va[i] / (vb[i] * vb[i]);
        }
    });
}

inline Var mul_scalar(Var a, float s) {
    Tensor out = a.val();
    for (float& v : out.data) v *= s;
    return detail::make_op(std::move(out), {a}, [s](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i] * s;
    });
}

inline Var add_scalar(Var a, float s) {
    Tensor out = a.val();
    for (float& v : out.data) v += s;
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i];
    });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator*(Var a, float s) { return mul_scalar(a, s); }
inline Var operator*(float s, Var a) { return mul_scalar(a, s); }
inline Var operator+(Var a, float s) { return add_scalar(a, s); }

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

inline Var relu(Var a) {
    Tensor out = a.val();
    for (float& v : out.data) v = v > 0 ? v : 0.0f;
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        const float* x = n.parents[0]->val.ptr();
        for (int64_t i = 0; i < n.val.numel(); ++i)
            if (x[i] > 0) g[i] += up[i];
    });
}

inline Var sigmoid(Var a) {
    Tensor out = a.val();
    for (float& v : out.data) v = 1.0f / (1.0f + std::exp(-v));
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        const float* y = n.val.ptr();
        for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i] * y[i] * (1.0f - y[i]);
    });
}

inline Var silu(Var a) {
    Tensor out = a.val();
    for (float& v : out.data) v = v / (1.0f + std::exp(-v));
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        const float* x = n.parents[0]->val.ptr();
        for (int64_t i = 0; i < n.val.numel(); ++i) {
            float s = 1.0f / (1.0f + std::exp(-x[i]));
            g[i] += up[i] * (s + x[i] * s * (1.0f - s));
        }
    });
}

inline Var gelu(Var a) {
    // tanh approximation
    Tensor out = a.val();
    constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
    for (float& v : out.data) {
        float c = v + 0.044715f * v * v * v;
        v = 0.5f * v * (1.0f + std::tanh(k * c));
    }
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        constexpr float k = 0.7978845608028654f;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        const float* x = n.parents[0]->val.ptr();
        for (int64_t i = 0; i < n.val.numel(); ++i) {
            float v = x[i];
            float c = k * (v + 0.044715f * v * v * v);
            float th = std::tanh(c);
            float dcdv = k * (1.0f + 3.0f * 0.044715f * v * v);
            g[i] += up[i] * (0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * dcdv);
        }
    });
}

inline Var exp_op(Var a) {
    Tensor out = a.val();
    for (float& v : out.data) v = std::exp(v);
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        const float* y = n.val.ptr();
        for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i] * y[i];
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

inline Var reshape(Var a, std::vector<int> shape) {
    assert(Tensor::count(shape) == a.val().numel());
    Tensor out(shape, a.val().data);
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        for (int64_t i = 0; i < n.val.numel(); ++i) g[i] += up[i];
    });
}

inline Var concat_channels(Var a, Var b) {
    // NCHW along C
    const auto& sa = a.val().shape;
    const auto& sb = b.val().shape;
    assert(sa.size() == 4 && sb.size() == 4);
    assert(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3]);
    int N = sa[0], Ca = sa[1], Cb = sb[1], H = sa[2], W = sa[3];
    int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.val().ptr() + n * Ca * plane, Ca * plane, out.ptr() + n * (Ca + Cb) * plane);
        std::copy_n(b.val().ptr() + n * Cb * plane, Cb * plane,
                    out.ptr() + n * (Ca + Cb) * plane + Ca * plane);
    }
    return detail::make_op(std::move(out), {a, b}, [N, Ca, Cb, plane](Node& n) {
        for (int b2 = 0; b2 < N; ++b2) {
            const float* up = n.grad.ptr() + b2 * (Ca + Cb) * plane;
            if (detail::wants(n.parents[0])) {
                float* g = n.parents[0]->ensure_grad().ptr() + b2 * Ca * plane;
                for (int64_t i = 0; i < Ca * plane; ++i) g[i] += up[i];
            }
            if (detail::wants(n.parents[1])) {
                float* g = n.parents[1]->ensure_grad().ptr() + b2 * Cb * plane;
                for (int64_t i = 0; i < Cb * plane; ++i) g[i] += up[Ca * plane + i];
            }
        }
    });
}

inline Var slice_channels(Var a, int c0, int c1) {
    const auto& s = a.val().shape;
    assert(s.size() == 4 && c0 >= 0 && c1 <= s[1] && c0 < c1);
    int N = s[0], C = s[1], H = s[2], W = s[3], Cs = c1 - c0;
    int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out({N, Cs, H, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(a.val().ptr() + (n * C + c0) * plane, Cs * plane, out.ptr() + n * Cs * plane);
    return detail::make_op(std::move(out), {a}, [N, C, c0, Cs, plane](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        for (int b = 0; b < N; ++b) {
            float* g = n.parents[0]->ensure_grad().ptr() + (b * C + c0) * plane;
            const float* up = n.grad.ptr() + b * Cs * plane;
            for (int64_t i = 0; i < Cs * plane; ++i) g[i] += up[i];
        }
    });
}

// space-to-depth: [N,C,H,W] -> [N,C*s*s,H/s,W/s], channel index c*s*s + dy*s + dx
inline Var pixel_unshuffle(Var a, int s) {
    const auto& sh = a.val().shape;
    assert(sh.size() == 4);
    int N = sh[0], C = sh[1], H = sh[2], W = sh[3];
    if (H % s != 0 || W % s != 0)
        throw std::invalid_argument("pixel_unshuffle: spatial dims not divisible by scale");
    int Ho = H / s, Wo = W / s;
    Tensor out({N, C * s * s, Ho, Wo});
    const float* x = a.val().ptr();
    float* y = out.ptr();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < s; ++dy)
                for (int dx = 0; dx < s; ++dx) {
                    int co = (c * s + dy) * s + dx;
                    for (int ho = 0; ho < Ho; ++ho) {
                        const float* src = x + ((n * C + c) * static_cast<int64_t>(H) + (ho * s + dy)) * W + dx;
                        float* dst = y + ((n * C * s * s + co) * static_cast<int64_t>(Ho) + ho) * Wo;
                        for (int wo = 0; wo < Wo; ++wo) dst[wo] = src[wo * s];
                    }
                }
    return detail::make_op(std::move(out), {a}, [N, C, H, W, s, Ho, Wo](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c)
                for (int dy = 0; dy < s; ++dy)
                    for (int dx = 0; dx < s; ++dx) {
                        int co = (c * s + dy) * s + dx;
                        for (int ho = 0; ho < Ho; ++ho) {
                            float* dst = g + ((b * C + c) * static_cast<int64_t>(H) + (ho * s + dy)) * W + dx;
                            const float* src = up + ((b * C * s * s + co) * static_cast<int64_t>(Ho) + ho) * Wo;
                            for (int wo = 0; wo < Wo; ++wo) dst[wo * s] += src[wo];
                        }
                    }
    });
}

// depth-to-space, exact inverse of pixel_unshuffle
inline Var pixel_shuffle(Var a, int s) {
    const auto& sh = a.val().shape;
    assert(sh.size() == 4);
    int N = sh[0], Ci = sh[1], Hi = sh[2], Wi = sh[3];
    if (Ci % (s * s) != 0) throw std::invalid_argument("pixel_shuffle: channels not divisible by s^2");
    int C = Ci / (s * s), H = Hi * s, W = Wi * s;
    Tensor out({N, C, H, W});
    const float* x = a.val().ptr();
    float* y = out.ptr();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int dy = 0; dy < s; ++dy)
                for (int dx = 0; dx < s; ++dx) {
                    int ci = (c * s + dy) * s + dx;
                    for (int hi = 0; hi < Hi; ++hi) {
                        const float* src = x + ((n * Ci + ci) * static_cast<int64_t>(Hi) + hi) * Wi;
                        float* dst = y + ((n * C + c) * static_cast<int64_t>(H) + (hi * s + dy)) * W + dx;
                        for (int wi = 0; wi < Wi; ++wi) dst[wi * s] = src[wi];
                    }
                }
    return detail::make_op(std::move(out), {a}, [N, C, Ci, Hi, Wi, s](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        int W = Wi * s;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        for (int b = 0; b < N; ++b)
            for (int c = 0; c < C; ++c)
                for (int dy = 0; dy < s; ++dy)
                    for (int dx = 0; dx < s; ++dx) {
                        int ci = (c * s + dy) * s + dx;
                        for (int hi = 0; hi < Hi; ++hi) {
                            float* dst = g + ((b * Ci + ci) * static_cast<int64_t>(Hi) + hi) * Wi;
                            const float* src = up + ((b * C + c) * static_cast<int64_t>(Hi * s) + (hi * s + dy)) * W + dx;
                            for (int wi = 0; wi < Wi; ++wi) dst[wi] += src[wi * s];
                        }
                    }
    });
}

inline Var upsample_nearest2x(Var a) {
    const auto& s = a.val().shape;
    assert(s.size() == 4);
    int N = s[0], C = s[1], H = s[2], W = s[3];
    Tensor out({N, C, H * 2, W * 2});
    const float* x = a.val().ptr();
    float* y = out.ptr();
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc)
        for (int h = 0; h < H; ++h) {
            const float* src = x + (nc * H + h) * W;
            float* d0 = y + (nc * H * 2 + 2 * h) * (W * 2);
            float* d1 = d0 + W * 2;
            for (int w = 0; w < W; ++w) {
                d0[2 * w] = d0[2 * w + 1] = src[w];
                d1[2 * w] = d1[2 * w + 1] = src[w];
            }
        }
    return detail::make_op(std::move(out), {a}, [N, C, H, W](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* g = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc)
            for (int h = 0; h < H; ++h) {
                float* dst = g + (nc * H + h) * W;
                const float* u0 = up + (nc * H * 2 + 2 * h) * (W * 2);
                const float* u1 = u0 + W * 2;
                for (int w = 0; w < W; ++w)
                    dst[w] += u0[2 * w] + u0[2 * w + 1] + u1[2 * w] + u1[2 * w + 1];
            }
    });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// x [R,in] * w^T [in,out] + b -> [R,out]
inline Var linear(Var x, Var w, Var b) {
    const auto& sx = x.val().shape;
    const auto& sw = w.val().shape;
    assert(sx.size() == 2 && sw.size() == 2 && sx[1] == sw[1]);
    int R = sx[0], in = sx[1], out = sw[0];
    Tensor y({R, out});
    detail::gemm(x.val().ptr(), w.val().ptr(), y.ptr(), R, in, out, false, true);
    if (b.defined()) {
        assert(b.val().numel() == out);
        const float* pb = b.val().ptr();
        for (int r = 0; r < R; ++r)
            for (int o = 0; o < out; ++o) y.data[static_cast<size_t>(r) * out + o] += pb[o];
    }
    std::vector<Var> ins = {x, w};
    if (b.defined()) ins.push_back(b);
    return detail::make_op(std::move(y), std::move(ins), [R, in, out](Node& n) {
        const float* up = n.grad.ptr();
        auto& px = n.parents[0];
        auto& pw = n.parents[1];
        if (detail::wants(px))
            detail::gemm(up, pw->val.ptr(), px->ensure_grad().ptr(), R, out, in, false, false, true);
        if (detail::wants(pw))
            detail::gemm(up, px->val.ptr(), pw->ensure_grad().ptr(), out, R, in, true, false, true);
        if (n.parents.size() > 2 && detail::wants(n.parents[2])) {
            float* gb = n.parents[2]->ensure_grad().ptr();
            for (int r = 0; r < R; ++r)
                for (int o = 0; o < out; ++o) gb[o] += up[static_cast<size_t>(r) * out + o];
        }
    });
}

// batched matmul: a [B,m,k] x b [B,k,n] -> [B,m,n]; trans_b treats b as [B,n,k]
inline Var bmm(Var a, Var b, bool trans_b = false) {
    const auto& sa = a.val().shape;
    const auto& sb = b.val().shape;
    assert(sa.size() == 3 && sb.size() == 3 && sa[0] == sb[0]);
    int B = sa[0], m = sa[1], k = sa[2];
    int n = trans_b ? sb[1] : sb[2];
    assert(trans_b ? sb[2] == k : sb[1] == k);
    Tensor y({B, m, n});
    for (int i = 0; i < B; ++i)
        detail::gemm(a.val().ptr() + static_cast<int64_t>(i) * m * k,
                     b.val().ptr() + static_cast<int64_t>(i) * (trans_b ? n * k : k * n),
                     y.ptr() + static_cast<int64_t>(i) * m * n, m, k, n, false, trans_b);
    return detail::make_op(std::move(y), {a, b}, [B, m, k, n, trans_b](Node& nd) {
        const float* up = nd.grad.ptr();
        auto& pa = nd.parents[0];
        auto& pb = nd.parents[1];
        for (int i = 0; i < B; ++i) {
            const float* g = up + static_cast<int64_t>(i) * m * n;
            const float* av = pa->val.ptr() + static_cast<int64_t>(i) * m * k;
            const float* bv = pb->val.ptr() + static_cast<int64_t>(i) * (trans_b ? n * k : k * n);
            if (detail::wants(pa)) {
                float* ga = pa->ensure_grad().ptr() + static_cast<int64_t>(i) * m * k;
                // dA = dC * B^T (or dC * B when b stored transposed)
                detail::gemm(g, bv, ga, m, n, k, false, !trans_b, true);
            }
            if (detail::wants(pb)) {
                float* gb = pb->ensure_grad().ptr() + static_cast<int64_t>(i) * (trans_b ? n * k : k * n);
                if (trans_b)
                    detail::gemm(g, av, gb, n, m, k, true, false, true);  // dB[n,k] = dC^T * A
                else
                    detail::gemm(av, g, gb, k, m, n, true, false, true);  // dB[k,n] = A^T * dC
            }
        }
    });
}

// ---------------------------------------------------------------------------
// conv2d, NCHW, zero padding
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const float* x, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, float* col) {
    // col [C*kh*kw, Ho*Wo]
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                float* dst = col + ((c * kh + i) * static_cast<int64_t>(kw) + j) * Ho * Wo;
                for (int ho = 0; ho < Ho; ++ho) {
                    int hi = ho * stride - pad + i;
                    if (hi < 0 || hi >= H) {
                        std::fill_n(dst + static_cast<int64_t>(ho) * Wo, Wo, 0.0f);
                        continue;
                    }
                    const float* src = x + (c * static_cast<int64_t>(H) + hi) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        int wi = wo * stride - pad + j;
                        dst[static_cast<int64_t>(ho) * Wo + wo] =
                            (wi >= 0 && wi < W) ? src[wi] : 0.0f;
                    }
                }
            }
}

inline void col2im(const float* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Ho, int Wo, float* x) {
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < kh; ++i)
            for (int j = 0; j < kw; ++j) {
                const float* src = col + ((c * kh + i) * static_cast<int64_t>(kw) + j) * Ho * Wo;
                for (int ho = 0; ho < Ho; ++ho) {
                    int hi = ho * stride - pad + i;
                    if (hi < 0 || hi >= H) continue;
                    float* dst = x + (c * static_cast<int64_t>(H) + hi) * W;
                    for (int wo = 0; wo < Wo; ++wo) {
                        int wi = wo * stride - pad + j;
                        if (wi >= 0 && wi < W) dst[wi] += src[static_cast<int64_t>(ho) * Wo + wo];
                    }
                }
            }
}

}  // namespace detail

// x [N,C,H,W], w [OC,C,kh,kw], b [OC] (optional Var()), same-style zero padding
inline Var conv2d(Var x, Var w, Var b, int stride = 1, int pad = -1) {
    const auto& sx = x.val().shape;
    const auto& sw = w.val().shape;
    assert(sx.size() == 4 && sw.size() == 4 && sx[1] == sw[1]);
    int N = sx[0], C = sx[1], H = sx[2], W = sx[3];
    int OC = sw[0], kh = sw[2], kw = sw[3];
    if (pad < 0) pad = kh / 2;
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    int64_t K = static_cast<int64_t>(C) * kh * kw;
    Tensor y({N, OC, Ho, Wo});
    std::vector<float> col(K * Ho * Wo);
    for (int n = 0; n < N; ++n) {
        detail::im2col(x.val().ptr() + n * static_cast<int64_t>(C) * H * W, C, H, W, kh, kw,
                       stride, pad, Ho, Wo, col.data());
        detail::gemm(w.val().ptr(), col.data(), y.ptr() + n * static_cast<int64_t>(OC) * Ho * Wo,
                     OC, static_cast<int>(K), Ho * Wo);
    }
    if (b.defined()) {
        const float* pb = b.val().ptr();
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < OC; ++oc) {
                float* dst = y.ptr() + ((n * static_cast<int64_t>(OC)) + oc) * Ho * Wo;
                for (int i = 0; i < Ho * Wo; ++i) dst[i] += pb[oc];
            }
    }
    std::vector<Var> ins = {x, w};
    if (b.defined()) ins.push_back(b);
    return detail::make_op(std::move(y), std::move(ins),
                           [N, C, H, W, OC, kh, kw, stride, pad, Ho, Wo, K](Node& nd) {
        const float* up = nd.grad.ptr();
        auto& px = nd.parents[0];
        auto& pw = nd.parents[1];
        std::vector<float> col(K * Ho * Wo);
        for (int n = 0; n < N; ++n) {
            const float* g = up + n * static_cast<int64_t>(OC) * Ho * Wo;
            if (detail::wants(pw)) {
                detail::im2col(px->val.ptr() + n * static_cast<int64_t>(C) * H * W, C, H, W, kh,
                               kw, stride, pad, Ho, Wo, col.data());
                // dW [OC,K] += g [OC,HoWo] * col^T [HoWo,K]
                detail::gemm(g, col.data(), pw->ensure_grad().ptr(), OC, Ho * Wo,
                             static_cast<int>(K), false, true, true);
            }
            if (detail::wants(px)) {
                // dcol [K,HoWo] = W^T [K,OC] * g [OC,HoWo]
                detail::gemm(pw->val.ptr(), g, col.data(), static_cast<int>(K), OC, Ho * Wo, true,
                             false, false);
                detail::col2im(col.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                               px->ensure_grad().ptr() + n * static_cast<int64_t>(C) * H * W);
            }
        }
        if (nd.parents.size() > 2 && detail::wants(nd.parents[2])) {
            float* gb = nd.parents[2]->ensure_grad().ptr();
            for (int n = 0; n < N; ++n)
                for (int oc = 0; oc < OC; ++oc) {
                    const float* g = up + ((n * static_cast<int64_t>(OC)) + oc) * Ho * Wo;
                    float acc = 0;
                    for (int i = 0; i < Ho * Wo; ++i) acc += g[i];
                    gb[oc] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// normalization / softmax / reductions
// ---------------------------------------------------------------------------

// LayerNorm over the last dim of a rank-2/3 tensor; gamma/beta [D]
inline Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f) {
    const auto& s = x.val().shape;
    int D = s.back();
    int64_t R = x.val().numel() / D;
    Tensor y = x.val();
    Tensor stats({static_cast<int>(R), 2});  // mean, inv_std per row
    for (int64_t r = 0; r < R; ++r) {
        float* row = y.ptr() + r * D;
        double m = 0;
        for (int i = 0; i < D; ++i) m += row[i];
        m /= D;
        double v = 0;
        for (int i = 0; i < D; ++i) v += (row[i] - m) * (row[i] - m);
        v /= D;
        float inv = 1.0f / std::sqrt(static_cast<float>(v) + eps);
        stats.data[r * 2] = static_cast<float>(m);
        stats.data[r * 2 + 1] = inv;
        const float* g = gamma.val().ptr();
        const float* b = beta.val().ptr();
        for (int i = 0; i < D; ++i) row[i] = (row[i] - static_cast<float>(m)) * inv * g[i] + b[i];
    }
    return detail::make_op(std::move(y), {x, gamma, beta}, [D, R, st = std::move(stats)](Node& n) {
        const float* up = n.grad.ptr();
        auto& px = n.parents[0];
        auto& pg = n.parents[1];
        auto& pb = n.parents[2];
        const float* xv = px->val.ptr();
        const float* g = pg->val.ptr();
        for (int64_t r = 0; r < R; ++r) {
            float mean = st.data[r * 2], inv = st.data[r * 2 + 1];
            const float* u = up + r * D;
            const float* xr = xv + r * D;
            if (detail::wants(pg) || detail::wants(pb)) {
                float* gg = detail::wants(pg) ? pg->ensure_grad().ptr() : nullptr;
                float* gb = detail::wants(pb) ? pb->ensure_grad().ptr() : nullptr;
                for (int i = 0; i < D; ++i) {
                    float xhat = (xr[i] - mean) * inv;
                    if (gg) gg[i] += u[i] * xhat;
                    if (gb) gb[i] += u[i];
                }
            }
            if (detail::wants(px)) {
                float* gx = px->ensure_grad().ptr() + r * D;
                // dL/dx = inv * (dy*g - mean(dy*g) - xhat*mean(dy*g*xhat))
                double s1 = 0, s2 = 0;
                for (int i = 0; i < D; ++i) {
                    float t = u[i] * g[i];
                    float xhat = (xr[i] - mean) * inv;
                    s1 += t;
                    s2 += t * xhat;
                }
                s1 /= D;
                s2 /= D;
                for (int i = 0; i < D; ++i) {
                    float t = u[i] * g[i];
                    float xhat = (xr[i] - mean) * inv;
                    gx[i] += inv * (t - static_cast<float>(s1) - xhat * static_cast<float>(s2));
                }
            }
        }
    });
}

// GroupNorm over NCHW; gamma/beta [C]
inline Var group_norm(Var x, int groups, Var gamma, Var beta, float eps = 1e-5f) {
    const auto& s = x.val().shape;
    assert(s.size() == 4 && s[1] % groups == 0);
    int N = s[0], C = s[1], H = s[2], W = s[3];
    int cg = C / groups;
    int64_t gsize = static_cast<int64_t>(cg) * H * W;
    Tensor y = x.val();
    Tensor stats({N * groups, 2});
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            float* base = y.ptr() + (n * static_cast<int64_t>(C) + g * cg) * H * W;
            double m = 0;
            for (int64_t i = 0; i < gsize; ++i) m += base[i];
            m /= static_cast<double>(gsize);
            double v = 0;
            for (int64_t i = 0; i < gsize; ++i) v += (base[i] - m) * (base[i] - m);
            v /= static_cast<double>(gsize);
            float inv = 1.0f / std::sqrt(static_cast<float>(v) + eps);
            stats.data[(n * groups + g) * 2] = static_cast<float>(m);
            stats.data[(n * groups + g) * 2 + 1] = inv;
            const float* ga = gamma.val().ptr();
            const float* be = beta.val().ptr();
            for (int c = 0; c < cg; ++c) {
                float* row = base + c * static_cast<int64_t>(H) * W;
                float gc = ga[g * cg + c], bc = be[g * cg + c];
                for (int64_t i = 0; i < static_cast<int64_t>(H) * W; ++i)
                    row[i] = (row[i] - static_cast<float>(m)) * inv * gc + bc;
            }
        }
    return detail::make_op(std::move(y), {x, gamma, beta},
                           [N, C, H, W, groups, cg, gsize, st = std::move(stats)](Node& nd) {
        const float* up = nd.grad.ptr();
        auto& px = nd.parents[0];
        auto& pg = nd.parents[1];
        auto& pb = nd.parents[2];
        const float* xv = px->val.ptr();
        const float* ga = pg->val.ptr();
        int64_t plane = static_cast<int64_t>(H) * W;
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                float mean = st.data[(n * groups + g) * 2];
                float inv = st.data[(n * groups + g) * 2 + 1];
                int64_t off = (n * static_cast<int64_t>(C) + g * cg) * plane;
                if (detail::wants(pg) || detail::wants(pb)) {
                    float* gg = detail::wants(pg) ? pg->ensure_grad().ptr() : nullptr;
                    float* gb = detail::wants(pb) ? pb->ensure_grad().ptr() : nullptr;
                    for (int c = 0; c < cg; ++c)
                        for (int64_t i = 0; i < plane; ++i) {
                            float u = up[off + c * plane + i];
                            float xhat = (xv[off + c * plane + i] - mean) * inv;
                            if (gg) gg[g * cg + c] += u * xhat;
                            if (gb) gb[g * cg + c] += u;
                        }
                }
                if (detail::wants(px)) {
                    double s1 = 0, s2 = 0;
                    for (int c = 0; c < cg; ++c) {
                        float gc = ga[g * cg + c];
                        for (int64_t i = 0; i < plane; ++i) {
                            float t = up[off + c * plane + i] * gc;
                            float xhat = (xv[off + c * plane + i] - mean) * inv;
                            s1 += t;
                            s2 += t * xhat;
                        }
                    }
                    s1 /= static_cast<double>(gsize);
                    s2 /= static_cast<double>(gsize);
                    float* gx = px->ensure_grad().ptr();
                    for (int c = 0; c < cg; ++c) {
                        float gc = ga[g * cg + c];
                        for (int64_t i = 0; i < plane; ++i) {
                            float t = up[off + c * plane + i] * gc;
                            float xhat = (xv[off + c * plane + i] - mean) * inv;
                            gx[off + c * plane + i] +=
                                inv * (t - static_cast<float>(s1) - xhat * static_cast<float>(s2));
                        }
                    }
                }
            }
    });
}

inline Var softmax_lastdim(Var x) {
    const auto& s = x.val().shape;
    int D = s.back();
    int64_t R = x.val().numel() / D;
    Tensor y = x.val();
    for (int64_t r = 0; r < R; ++r) {
        float* row = y.ptr() + r * D;
        float mx = row[0];
        for (int i = 1; i < D; ++i) mx = std::max(mx, row[i]);
        double sum = 0;
        for (int i = 0; i < D; ++i) {
            row[i] = std::exp(row[i] - mx);
            sum += row[i];
        }
        float invs = static_cast<float>(1.0 / sum);
        for (int i = 0; i < D; ++i) row[i] *= invs;
    }
    return detail::make_op(std::move(y), {x}, [D, R](Node& n) {
        if (!detail::wants(n.parents[0])) return;
        float* gx = n.parents[0]->ensure_grad().ptr();
        const float* up = n.grad.ptr();
        const float* y = n.val.ptr();
        for (int64_t r = 0; r < R; ++r) {
            const float* u = up + r * D;
            const float* yr = y + r * D;
            double dot = 0;
            for (int i = 0; i < D; ++i) dot += u[i] * yr[i];
            for (int i = 0; i < D; ++i) gx[r * D + i] += yr[i] * (u[i] - static_cast<float>(dot));
        }
    });
}

inline Var mean_all(Var x) {
    double s = 0;
    for (float v : x.val().data) s += v;
    int64_t n = x.val().numel();
    Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
    return detail::make_op(std::move(out), {x}, [n](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float g = nd.grad.data[0] / static_cast<float>(n);
        float* gx = nd.parents[0]->ensure_grad().ptr();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
}

inline Var sum_all(Var x) {
    double s = 0;
    for (float v : x.val().data) s += v;
    int64_t n = x.val().numel();
    Tensor out = Tensor::scalar(static_cast<float>(s));
    return detail::make_op(std::move(out), {x}, [n](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float g = nd.grad.data[0];
        float* gx = nd.parents[0]->ensure_grad().ptr();
        for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
}

inline Var mse_loss(Var pred, Var target) {
    assert(pred.val().same_shape(target.val()));
    int64_t n = pred.val().numel();
    double s = 0;
    const float* a = pred.val().ptr();
    const float* b = target.val().ptr();
    for (int64_t i = 0; i < n; ++i) {
        double d = static_cast<double>(a[i]) - b[i];
        s += d * d;
    }
    Tensor out = Tensor::scalar(static_cast<float>(s / static_cast<double>(n)));
    return detail::make_op(std::move(out), {pred, target}, [n](Node& nd) {
        const float* a = nd.parents[0]->val.ptr();
        const float* b = nd.parents[1]->val.ptr();
        float g = nd.grad.data[0] * 2.0f / static_cast<float>(n);
        if (detail::wants(nd.parents[0])) {
            float* gx = nd.parents[0]->ensure_grad().ptr();
            for (int64_t i = 0; i < n; ++i) gx[i] += g * (a[i] - b[i]);
        }
        if (detail::wants(nd.parents[1])) {
            float* gx = nd.parents[1]->ensure_grad().ptr();
            for (int64_t i = 0; i < n; ++i) gx[i] -= g * (a[i] - b[i]);
        }
    });
}

// mean over N,H,W per channel: [N,C,H,W] -> [N,C]
inline Var mean_spatial(Var x) {
    const auto& s = x.val().shape;
    assert(s.size() == 4);
    int N = s[0], C = s[1];
    int64_t plane = static_cast<int64_t>(s[2]) * s[3];
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* p = x.val().ptr() + (n * static_cast<int64_t>(C) + c) * plane;
            double acc = 0;
            for (int64_t i = 0; i < plane; ++i) acc += p[i];
            out.data[static_cast<size_t>(n) * C + c] =
                static_cast<float>(acc / static_cast<double>(plane));
        }
    return detail::make_op(std::move(out), {x}, [N, C, plane](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float* gx = nd.parents[0]->ensure_grad().ptr();
        const float* up = nd.grad.ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                float g = up[static_cast<size_t>(n) * C + c] / static_cast<float>(plane);
                float* p = gx + (n * static_cast<int64_t>(C) + c) * plane;
                for (int64_t i = 0; i < plane; ++i) p[i] += g;
            }
    });
}

// x [N,C,H,W] + bias[N,C] broadcast over spatial dims (time-embedding injection)
inline Var add_rowbias_spatial(Var x, Var bias) {
    const auto& s = x.val().shape;
    assert(s.size() == 4);
    int N = s[0], C = s[1];
    int64_t plane = static_cast<int64_t>(s[2]) * s[3];
    assert(bias.val().shape == (std::vector<int>{N, C}));
    Tensor y = x.val();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            float b = bias.val().data[static_cast<size_t>(n) * C + c];
            float* p = y.ptr() + (n * static_cast<int64_t>(C) + c) * plane;
            for (int64_t i = 0; i < plane; ++i) p[i] += b;
        }
    return detail::make_op(std::move(y), {x, bias}, [N, C, plane](Node& nd) {
        const float* up = nd.grad.ptr();
        if (detail::wants(nd.parents[0])) {
            float* gx = nd.parents[0]->ensure_grad().ptr();
            for (int64_t i = 0; i < nd.val.numel(); ++i) gx[i] += up[i];
        }
        if (detail::wants(nd.parents[1])) {
            float* gb = nd.parents[1]->ensure_grad().ptr();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const float* p = up + (n * static_cast<int64_t>(C) + c) * plane;
                    float acc = 0;
                    for (int64_t i = 0; i < plane; ++i) acc += p[i];
                    gb[static_cast<size_t>(n) * C + c] += acc;
                }
        }
    });
}

// ---------------------------------------------------------------------------
// window partition/merge for windowed self-attention
// ---------------------------------------------------------------------------

// [N,C,H,W] -> [N*nwh*nww, win*win, C], windows in raster order
inline Var window_partition(Var x, int win) {
    const auto& s = x.val().shape;
    assert(s.size() == 4);
    int N = s[0], C = s[1], H = s[2], W = s[3];
    if (H % win != 0 || W % win != 0)
        throw std::invalid_argument("window_partition: dims not divisible by window");
    int nwh = H / win, nww = W / win;
    Tensor out({N * nwh * nww, win * win, C});
    const float* xv = x.val().ptr();
    float* y = out.ptr();
    for (int n = 0; n < N; ++n)
        for (int wh = 0; wh < nwh; ++wh)
            for (int ww = 0; ww < nww; ++ww) {
                int64_t wbase =
                    ((static_cast<int64_t>(n) * nwh + wh) * nww + ww) * win * win * C;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx) {
                        int tok = dy * win + dx;
                        for (int c = 0; c < C; ++c)
                            y[wbase + static_cast<int64_t>(tok) * C + c] =
                                xv[((n * static_cast<int64_t>(C) + c) * H + (wh * win + dy)) * W +
                                   (ww * win + dx)];
                    }
            }
    return detail::make_op(std::move(out), {x}, [N, C, H, W, win, nwh, nww](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float* gx = nd.parents[0]->ensure_grad().ptr();
        const float* up = nd.grad.ptr();
        for (int n = 0; n < N; ++n)
            for (int wh = 0; wh < nwh; ++wh)
                for (int ww = 0; ww < nww; ++ww) {
                    int64_t wbase =
                        ((static_cast<int64_t>(n) * nwh + wh) * nww + ww) * win * win * C;
                    for (int dy = 0; dy < win; ++dy)
                        for (int dx = 0; dx < win; ++dx) {
                            int tok = dy * win + dx;
                            for (int c = 0; c < C; ++c)
                                gx[((n * static_cast<int64_t>(C) + c) * H + (wh * win + dy)) * W +
                                   (ww * win + dx)] += up[wbase + static_cast<int64_t>(tok) * C + c];
                        }
                }
    });
}

// inverse of window_partition
inline Var window_merge(Var x, int win, int N, int C, int H, int W) {
    int nwh = H / win, nww = W / win;
    assert(x.val().shape == (std::vector<int>{N * nwh * nww, win * win, C}));
    Tensor out({N, C, H, W});
    const float* xv = x.val().ptr();
    float* y = out.ptr();
    for (int n = 0; n < N; ++n)
        for (int wh = 0; wh < nwh; ++wh)
            for (int ww = 0; ww < nww; ++ww) {
                int64_t wbase =
                    ((static_cast<int64_t>(n) * nwh + wh) * nww + ww) * win * win * C;
                for (int dy = 0; dy < win; ++dy)
                    for (int dx = 0; dx < win; ++dx) {
                        int tok = dy * win + dx;
                        for (int c = 0; c < C; ++c)
                            y[((n * static_cast<int64_t>(C) + c) * H + (wh * win + dy)) * W +
                              (ww * win + dx)] = xv[wbase + static_cast<int64_t>(tok) * C + c];
                    }
            }
    return detail::make_op(std::move(out), {x}, [N, C, H, W, win, nwh, nww](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float* gx = nd.parents[0]->ensure_grad().ptr();
        const float* up = nd.grad.ptr();
        for (int n = 0; n < N; ++n)
            for (int wh = 0; wh < nwh; ++wh)
                for (int ww = 0; ww < nww; ++ww) {
                    int64_t wbase =
                        ((static_cast<int64_t>(n) * nwh + wh) * nww + ww) * win * win * C;
                    for (int dy = 0; dy < win; ++dy)
                        for (int dx = 0; dx < win; ++dx) {
                            int tok = dy * win + dx;
                            for (int c = 0; c < C; ++c)
                                gx[wbase + static_cast<int64_t>(tok) * C + c] +=
                                    up[((n * static_cast<int64_t>(C) + c) * H + (wh * win + dy)) *
                                           W +
                                       (ww * win + dx)];
                        }
                }
    });
}

// [N,C,H,W] -> [N, H*W, C]
inline Var nchw_to_tokens(Var x) {
    const auto& s = x.val().shape;
    assert(s.size() == 4);
    int N = s[0], C = s[1];
    int64_t T = static_cast<int64_t>(s[2]) * s[3];
    Tensor out({N, static_cast<int>(T), C});
    const float* xv = x.val().ptr();
    float* y = out.ptr();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int64_t t = 0; t < T; ++t)
                y[(n * T + t) * C + c] = xv[(n * static_cast<int64_t>(C) + c) * T + t];
    return detail::make_op(std::move(out), {x}, [N, C, T](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float* gx = nd.parents[0]->ensure_grad().ptr();
        const float* up = nd.grad.ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int64_t t = 0; t < T; ++t)
                    gx[(n * static_cast<int64_t>(C) + c) * T + t] += up[(n * T + t) * C + c];
    });
}

// [N, H*W, C] -> [N,C,H,W]
inline Var tokens_to_nchw(Var x, int H, int W) {
    const auto& s = x.val().shape;
    assert(s.size() == 3 && s[1] == H * W);
    int N = s[0], C = s[2];
    int64_t T = static_cast<int64_t>(H) * W;
    Tensor out({N, C, H, W});
    const float* xv = x.val().ptr();
    float* y = out.ptr();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int64_t t = 0; t < T; ++t)
                y[(n * static_cast<int64_t>(C) + c) * T + t] = xv[(n * T + t) * C + c];
    return detail::make_op(std::move(out), {x}, [N, C, T](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float* gx = nd.parents[0]->ensure_grad().ptr();
        const float* up = nd.grad.ptr();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int64_t t = 0; t < T; ++t)
                    gx[(n * T + t) * C + c] += up[(n * static_cast<int64_t>(C) + c) * T + t];
    });
}

// [B,T,D] -> [B*h, T, D/h]
inline Var split_heads(Var x, int heads) {
    const auto& s = x.val().shape;
    assert(s.size() == 3 && s[2] % heads == 0);
    int B = s[0], T = s[1], D = s[2], dh = D / heads;
    Tensor out({B * heads, T, dh});
    const float* xv = x.val().ptr();
    float* y = out.ptr();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int t = 0; t < T; ++t)
                std::copy_n(xv + (static_cast<int64_t>(b) * T + t) * D + h * dh, dh,
                            y + ((static_cast<int64_t>(b) * heads + h) * T + t) * dh);
    return detail::make_op(std::move(out), {x}, [B, T, D, heads, dh](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float* gx = nd.parents[0]->ensure_grad().ptr();
        const float* up = nd.grad.ptr();
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int t = 0; t < T; ++t) {
                    const float* src = up + ((static_cast<int64_t>(b) * heads + h) * T + t) * dh;
                    float* dst = gx + (static_cast<int64_t>(b) * T + t) * D + h * dh;
                    for (int i = 0; i < dh; ++i) dst[i] += src[i];
                }
    });
}

// [B*h, T, dh] -> [B,T,D]
inline Var merge_heads(Var x, int heads) {
    const auto& s = x.val().shape;
    assert(s.size() == 3 && s[0] % heads == 0);
    int B = s[0] / heads, T = s[1], dh = s[2], D = dh * heads;
    Tensor out({B, T, D});
    const float* xv = x.val().ptr();
    float* y = out.ptr();
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h)
            for (int t = 0; t < T; ++t)
                std::copy_n(xv + ((static_cast<int64_t>(b) * heads + h) * T + t) * dh, dh,
                            y + (static_cast<int64_t>(b) * T + t) * D + h * dh);
    return detail::make_op(std::move(out), {x}, [B, T, D, heads, dh](Node& nd) {
        if (!detail::wants(nd.parents[0])) return;
        float* gx = nd.parents[0]->ensure_grad().ptr();
        const float* up = nd.grad.ptr();
        for (int b = 0; b < B; ++b)
            for (int h = 0; h < heads; ++h)
                for (int t = 0; t < T; ++t) {
                    const float* src = up + (static_cast<int64_t>(b) * T + t) * D + h * dh;
                    float* dst = gx + ((static_cast<int64_t>(b) * heads + h) * T + t) * dh;
                    for (int i = 0; i < dh; ++i) dst[i] += src[i];
                }
    });
}

}  // namespace sagiri
