#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "normlab/tape.hpp"
#include "normlab/tensor.hpp"

namespace normlab {

namespace detail {

// Right-aligned strides for 4-slot iteration; broadcast (singleton) axes get
// stride 0 so the same element is revisited.
inline std::array<std::int64_t, 4> strides4(const Shape& s) {
    std::array<std::int64_t, 4> st{};
    std::int64_t acc = 1;
    for (int i = 3; i >= 0; --i) {
        st[static_cast<std::size_t>(i)] = s.dim4(i) == 1 ? 0 : acc;
        acc *= s.dim4(i);
    }
    return st;
}

// Visits every output element of a broadcast pair in row-major order.
// body(out_idx, a_idx, b_idx).
template <class Body>
void for_each_broadcast(const Shape& out, const Shape& a, const Shape& b, Body body) {
    if (a == b) {
        std::int64_t n = out.numel();
        for (std::int64_t i = 0; i < n; ++i) body(i, i, i);
        return;
    }
    const auto sa = strides4(a), sb = strides4(b);
    const int d0 = out.dim4(0), d1 = out.dim4(1), d2 = out.dim4(2), d3 = out.dim4(3);
    std::int64_t o = 0;
    for (int i0 = 0; i0 < d0; ++i0)
        for (int i1 = 0; i1 < d1; ++i1)
            for (int i2 = 0; i2 < d2; ++i2) {
                std::int64_t ab = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                std::int64_t bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for (int i3 = 0; i3 < d3; ++i3, ++o) body(o, ab + i3 * sa[3], bb + i3 * sb[3]);
            }
}

template <typename T>
int tape_record(const char* op, std::vector<int> parents, std::function<void()> pull, Tensor<T>& out) {
    auto* tape = GradientTape<T>::active();
    out.ptr()->requires_grad = true;
    out.ptr()->tape_id = tape->record(op, std::move(parents), std::move(pull), out.ptr());
    return out.ptr()->tape_id;
}

template <typename T>
bool recording(const Tensor<T>& a) {
    return GradientTape<T>::active() != nullptr && a.requires_grad();
}

template <typename T>
bool recording(const Tensor<T>& a, const Tensor<T>& b) {
    return GradientTape<T>::active() != nullptr && (a.requires_grad() || b.requires_grad());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with singleton broadcasting
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Shape os = Shape::broadcast(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::empty(os);
    auto ov = out.values_mut();
    auto av = a.values(), bv = b.values();
    detail::for_each_broadcast(os, a.shape(), b.shape(),
                               [&](std::int64_t o, std::int64_t i, std::int64_t j) { ov[o] = av[i] + bv[j]; });
    if (detail::recording(a, b)) {
        Tensor<T> ac = a, bc = b, oc = out;
        detail::tape_record<T>(
            "add", {a.tape_id(), b.tape_id()},
            [ac, bc, oc]() mutable {
                auto g = oc.grad();
                std::span<T> ga = ac.requires_grad() ? ac.grad_mut() : std::span<T>{};
                std::span<T> gb = bc.requires_grad() ? bc.grad_mut() : std::span<T>{};
                detail::for_each_broadcast(oc.shape(), ac.shape(), bc.shape(),
                                           [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                                               if (!ga.empty()) ga[i] += g[o];
                                               if (!gb.empty()) gb[j] += g[o];
                                           });
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    Shape os = Shape::broadcast(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::empty(os);
    auto ov = out.values_mut();
    auto av = a.values(), bv = b.values();
    detail::for_each_broadcast(os, a.shape(), b.shape(),
                               [&](std::int64_t o, std::int64_t i, std::int64_t j) { ov[o] = av[i] - bv[j]; });
    if (detail::recording(a, b)) {
        Tensor<T> ac = a, bc = b, oc = out;
        detail::tape_record<T>(
            "sub", {a.tape_id(), b.tape_id()},
            [ac, bc, oc]() mutable {
                auto g = oc.grad();
                std::span<T> ga = ac.requires_grad() ? ac.grad_mut() : std::span<T>{};
                std::span<T> gb = bc.requires_grad() ? bc.grad_mut() : std::span<T>{};
                detail::for_each_broadcast(oc.shape(), ac.shape(), bc.shape(),
                                           [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                                               if (!ga.empty()) ga[i] += g[o];
                                               if (!gb.empty()) gb[j] -= g[o];
                                           });
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    Shape os = Shape::broadcast(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::empty(os);
    auto ov = out.values_mut();
    auto av = a.values(), bv = b.values();
    detail::for_each_broadcast(os, a.shape(), b.shape(),
                               [&](std::int64_t o, std::int64_t i, std::int64_t j) { ov[o] = av[i] * bv[j]; });
    if (detail::recording(a, b)) {
        Tensor<T> ac = a, bc = b, oc = out;
        detail::tape_record<T>(
            "mul", {a.tape_id(), b.tape_id()},
            [ac, bc, oc]() mutable {
                auto g = oc.grad();
                auto av2 = ac.values();
                auto bv2 = bc.values();
                std::span<T> ga = ac.requires_grad() ? ac.grad_mut() : std::span<T>{};
                std::span<T> gb = bc.requires_grad() ? bc.grad_mut() : std::span<T>{};
                detail::for_each_broadcast(oc.shape(), ac.shape(), bc.shape(),
                                           [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                                               if (!ga.empty()) ga[i] += g[o] * bv2[j];
                                               if (!gb.empty()) gb[j] += g[o] * av2[i];
                                           });
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    Shape os = Shape::broadcast(a.shape(), b.shape());
    Tensor<T> out = Tensor<T>::empty(os);
    auto ov = out.values_mut();
    auto av = a.values(), bv = b.values();
    detail::for_each_broadcast(os, a.shape(), b.shape(),
                               [&](std::int64_t o, std::int64_t i, std::int64_t j) { ov[o] = av[i] / bv[j]; });
    if (detail::recording(a, b)) {
        Tensor<T> ac = a, bc = b, oc = out;
        detail::tape_record<T>(
            "div", {a.tape_id(), b.tape_id()},
            [ac, bc, oc]() mutable {
                auto g = oc.grad();
                auto ov2 = oc.values();
                auto bv2 = bc.values();
                std::span<T> ga = ac.requires_grad() ? ac.grad_mut() : std::span<T>{};
                std::span<T> gb = bc.requires_grad() ? bc.grad_mut() : std::span<T>{};
                detail::for_each_broadcast(oc.shape(), ac.shape(), bc.shape(),
                                           [&](std::int64_t o, std::int64_t i, std::int64_t j) {
                                               if (!ga.empty()) ga[i] += g[o] / bv2[j];
                                               if (!gb.empty()) gb[j] -= g[o] * ov2[o] / bv2[j];
                                           });
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Scalar variants
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::empty(a.shape());
    auto ov = out.values_mut();
    auto av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] * c;
    if (detail::recording(a)) {
        Tensor<T> ac = a, oc = out;
        detail::tape_record<T>(
            "mul_scalar", {a.tape_id()},
            [ac, oc, c]() mutable {
                auto g = oc.grad();
                auto ga = ac.grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::empty(a.shape());
    auto ov = out.values_mut();
    auto av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] + c;
    if (detail::recording(a)) {
        Tensor<T> ac = a, oc = out;
        detail::tape_record<T>(
            "add_scalar", {a.tape_id()},
            [ac, oc]() mutable {
                auto g = oc.grad();
                auto ga = ac.grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            },
            out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reshape (copying view; rank and extents may change, numel may not)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& s) {
    if (s.numel() != a.numel())
        throw ShapeError("reshape " + a.shape().str() + " -> " + s.str() + " changes element count");
    Tensor<T> out = Tensor<T>::empty(s);
    std::copy(a.values().begin(), a.values().end(), out.values_mut().begin());
    if (detail::recording(a)) {
        Tensor<T> ac = a, oc = out;
        detail::tape_record<T>(
            "reshape", {a.tape_id()},
            [ac, oc]() mutable {
                auto g = oc.grad();
                auto ga = ac.grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            },
            out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

namespace detail {

inline bool reduced_axis(int axis4, const Shape& in, const std::vector<int>& axes) {
    int shift = Shape::kMaxRank - in.rank();
    for (int a : axes)
        if (a + shift == axis4) return true;
    return false;
}

}  // namespace detail

// Sum over the given axes (indices into the tensor's own rank). keepdim
// retains the reduced axes as size 1.
template <typename T>
Tensor<T> sum_axes(const Tensor<T>& a, const std::vector<int>& axes, bool keepdim) {
    const Shape& in = a.shape();
    for (int ax : axes)
        if (ax < 0 || ax >= in.rank()) throw ShapeError("reduction axis out of range");
    std::vector<int> out_dims;
    for (int i = 0; i < in.rank(); ++i) {
        bool red = false;
        for (int ax : axes) red = red || (ax == i);
        if (red) {
            if (keepdim) out_dims.push_back(1);
        } else {
            out_dims.push_back(in[i]);
        }
    }
    if (out_dims.empty()) out_dims.push_back(1);
    Shape os(out_dims);

    // out strides aligned to the input's 4-slot view, 0 on reduced axes
    std::array<std::int64_t, 4> ostr{};
    {
        std::int64_t acc = 1;
        for (int i = 3; i >= 0; --i) {
            if (detail::reduced_axis(i, in, axes) || in.dim4(i) == 1) {
                ostr[static_cast<std::size_t>(i)] = 0;
            } else {
                ostr[static_cast<std::size_t>(i)] = acc;
            }
            if (!detail::reduced_axis(i, in, axes)) acc *= in.dim4(i);
        }
    }

    Tensor<T> out = Tensor<T>::zeros(os);  // accumulated into, must start at zero
    auto ov = out.values_mut();
    auto av = a.values();
    const int d0 = in.dim4(0), d1 = in.dim4(1), d2 = in.dim4(2), d3 = in.dim4(3);
    std::int64_t i = 0;
    for (int i0 = 0; i0 < d0; ++i0)
        for (int i1 = 0; i1 < d1; ++i1)
            for (int i2 = 0; i2 < d2; ++i2)
                for (int i3 = 0; i3 < d3; ++i3, ++i)
                    ov[i0 * ostr[0] + i1 * ostr[1] + i2 * ostr[2] + i3 * ostr[3]] += av[i];

    if (detail::recording(a)) {
        Tensor<T> ac = a, oc = out;
        detail::tape_record<T>(
            "sum_axes", {a.tape_id()},
            [ac, oc, ostr]() mutable {
                auto g = oc.grad();
                auto ga = ac.grad_mut();
                const Shape& s = ac.shape();
                const int e0 = s.dim4(0), e1 = s.dim4(1), e2 = s.dim4(2), e3 = s.dim4(3);
                std::int64_t k = 0;
                for (int i0 = 0; i0 < e0; ++i0)
                    for (int i1 = 0; i1 < e1; ++i1)
                        for (int i2 = 0; i2 < e2; ++i2)
                            for (int i3 = 0; i3 < e3; ++i3, ++k)
                                ga[k] += g[i0 * ostr[0] + i1 * ostr[1] + i2 * ostr[2] + i3 * ostr[3]];
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> mean_axes(const Tensor<T>& a, const std::vector<int>& axes, bool keepdim) {
    std::int64_t count = 1;
    for (int ax : axes) count *= a.shape()[ax];
    return mul_scalar(sum_axes(a, axes, keepdim), T(1) / static_cast<T>(count));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    std::vector<int> axes(static_cast<std::size_t>(a.shape().rank()));
    for (int i = 0; i < a.shape().rank(); ++i) axes[static_cast<std::size_t>(i)] = i;
    return sum_axes(a, axes, false);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    return mul_scalar(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class ActKind { sigmoid, tanh, relu, softmax_channels };

inline const char* act_name(ActKind k) {
    switch (k) {
        case ActKind::sigmoid: return "sigmoid";
        case ActKind::tanh: return "tanh";
        case ActKind::relu: return "relu";
        case ActKind::softmax_channels: return "softmax";
    }
    return "?";
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::empty(a.shape());
    auto ov = out.values_mut();
    auto av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = T(1) / (T(1) + std::exp(-av[i]));
    if (detail::recording(a)) {
        Tensor<T> ac = a, oc = out;
        detail::tape_record<T>(
            "sigmoid", {a.tape_id()},
            [ac, oc]() mutable {
                auto g = oc.grad();
                auto y = oc.values();
                auto ga = ac.grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (T(1) - y[i]);
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> tanh_act(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::empty(a.shape());
    auto ov = out.values_mut();
    auto av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = std::tanh(av[i]);
    if (detail::recording(a)) {
        Tensor<T> ac = a, oc = out;
        detail::tape_record<T>(
            "tanh", {a.tape_id()},
            [ac, oc]() mutable {
                auto g = oc.grad();
                auto y = oc.values();
                auto ga = ac.grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (T(1) - y[i] * y[i]);
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = Tensor<T>::empty(a.shape());
    auto ov = out.values_mut();
    auto av = a.values();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = av[i] > T(0) ? av[i] : T(0);
    if (detail::recording(a)) {
        Tensor<T> ac = a, oc = out;
        detail::tape_record<T>(
            "relu", {a.tape_id()},
            [ac, oc]() mutable {
                auto g = oc.grad();
                auto x = ac.values();
                auto ga = ac.grad_mut();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += x[i] > T(0) ? g[i] : T(0);
            },
            out);
    }
    return out;
}

// Softmax normalized across the channel axis of a [B, C] tensor, one
// distribution per instance.
template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& a) {
    if (a.shape().rank() != 2) throw ShapeError("softmax_channels expects [B,C], got " + a.shape().str());
    const int B = a.shape()[0], C = a.shape()[1];
    Tensor<T> out = Tensor<T>::empty(a.shape());
    auto ov = out.values_mut();
    auto av = a.values();
    for (int b = 0; b < B; ++b) {
        const T* row = av.data() + static_cast<std::ptrdiff_t>(b) * C;
        T* orow = ov.data() + static_cast<std::ptrdiff_t>(b) * C;
        T mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T denom = T(0);
        for (int c = 0; c < C; ++c) {
            orow[c] = std::exp(row[c] - mx);
            denom += orow[c];
        }
        for (int c = 0; c < C; ++c) orow[c] /= denom;
    }
    if (detail::recording(a)) {
        Tensor<T> ac = a, oc = out;
        detail::tape_record<T>(
            "softmax", {a.tape_id()},
            [ac, oc, B, C]() mutable {
                auto g = oc.grad();
                auto y = oc.values();
                auto ga = ac.grad_mut();
                for (int b = 0; b < B; ++b) {
                    std::ptrdiff_t off = static_cast<std::ptrdiff_t>(b) * C;
                    T dot = T(0);
                    for (int c = 0; c < C; ++c) dot += g[off + c] * y[off + c];
                    for (int c = 0; c < C; ++c) ga[off + c] += y[off + c] * (g[off + c] - dot);
                }
            },
            out);
    }
    return out;
}

template <typename T>
Tensor<T> activation(const Tensor<T>& a, ActKind kind) {
    switch (kind) {
        case ActKind::sigmoid: return sigmoid(a);
        case ActKind::tanh: return tanh_act(a);
        case ActKind::relu: return relu(a);
        case ActKind::softmax_channels: return softmax_channels(a);
    }
    throw ConfigError("unknown activation kind");
}

// ---------------------------------------------------------------------------
// Channel average pooling: [B,C,H,W] -> [B,C]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avgpool_channel(const Tensor<T>& x) {
    if (x.shape().rank() != 4) throw ShapeError("avgpool_channel expects [B,C,H,W], got " + x.shape().str());
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    Tensor<T> out = Tensor<T>::zeros(Shape{B, C});
    auto ov = out.values_mut();
    auto xv = x.values();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* p = xv.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            double acc = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
            ov[static_cast<std::size_t>(b) * C + c] = static_cast<T>(acc / static_cast<double>(hw));
        }
    if (detail::recording(x)) {
        Tensor<T> xc = x, oc = out;
        detail::tape_record<T>(
            "avgpool_channel", {x.tape_id()},
            [xc, oc, B, C, hw]() mutable {
                auto g = oc.grad();
                auto gx = xc.grad_mut();
                const T inv = T(1) / static_cast<T>(hw);
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        T gv = g[static_cast<std::size_t>(b) * C + c] * inv;
                        T* p = gx.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) p[i] += gv;
                    }
            },
            out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fused per-channel affine maps (the hot path of every normalization site)
// ---------------------------------------------------------------------------

// Which reparameterization parameter the per-instance gate multiplies.
enum class ExcitePos { gamma_only, beta_only, both };

// y[b,c,h,w] = x[b,c,h,w] * scale[c] + shift[c]
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift) {
    if (x.shape().rank() != 4) throw ShapeError("channel_affine expects [B,C,H,W], got " + x.shape().str());
    const int B = x.shape()[0], C = x.shape()[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    if (scale.numel() != C || shift.numel() != C) throw ShapeError("channel_affine scale/shift must be [C]");
    Tensor<T> out = Tensor<T>::empty(x.shape());
    {
        auto xv = x.values();
        auto sv = scale.values();
        auto tv = shift.values();
        auto ov = out.values_mut();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T s = sv[static_cast<std::size_t>(c)], t = tv[static_cast<std::size_t>(c)];
                const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) ov[off + i] = xv[off + i] * s + t;
            }
    }
    bool rec = GradientTape<T>::active() &&
               (x.requires_grad() || scale.requires_grad() || shift.requires_grad());
    if (rec) {
        Tensor<T> xc = x, sc = scale, tc = shift, oc = out;
        detail::tape_record<T>(
            "channel_affine", {x.tape_id(), scale.tape_id(), shift.tape_id()},
            [xc, sc, tc, oc, B, C, hw]() mutable {
                auto g = oc.grad();
                auto xv = xc.values();
                auto sv = sc.values();
                std::span<T> gx = xc.requires_grad() ? xc.grad_mut() : std::span<T>{};
                std::span<T> gs = sc.requires_grad() ? sc.grad_mut() : std::span<T>{};
                std::span<T> gt = tc.requires_grad() ? tc.grad_mut() : std::span<T>{};
                for (int c = 0; c < C; ++c) {
                    double acc_s = 0.0, acc_t = 0.0;
                    const T s = sv[static_cast<std::size_t>(c)];
                    for (int b = 0; b < B; ++b) {
                        const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const T gi = g[off + i];
                            if (!gx.empty()) gx[off + i] += gi * s;
                            acc_s += static_cast<double>(gi) * static_cast<double>(xv[off + i]);
                            acc_t += static_cast<double>(gi);
                        }
                    }
                    if (!gs.empty()) gs[static_cast<std::size_t>(c)] += static_cast<T>(acc_s);
                    if (!gt.empty()) gt[static_cast<std::size_t>(c)] += static_cast<T>(acc_t);
                }
            },
            out);
    }
    return out;
}

// Gated reparameterization with a per-instance per-channel gate delta [B,C]:
//   gamma_only: y = x * (gamma[c]*delta[b,c]) + beta[c]
//   beta_only:  y = x * gamma[c] + beta[c]*delta[b,c]
//   both:       y = x * (gamma[c]*delta[b,c]) + beta[c]*delta[b,c]
template <typename T>
Tensor<T> gated_channel_affine(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& gamma,
                               const Tensor<T>& beta, ExcitePos pos) {
    if (x.shape().rank() != 4) throw ShapeError("gated_channel_affine expects [B,C,H,W], got " + x.shape().str());
    const int B = x.shape()[0], C = x.shape()[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    if (delta.shape() != Shape{B, C}) throw ShapeError("gate must be [B,C]");
    if (gamma.numel() != C || beta.numel() != C) throw ShapeError("gamma/beta must be [C]");

    Tensor<T> out = Tensor<T>::empty(x.shape());
    {
        auto xv = x.values();
        auto dv = delta.values();
        auto gv = gamma.values();
        auto bv = beta.values();
        auto ov = out.values_mut();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T d = dv[static_cast<std::size_t>(b) * C + c];
                const T gm = gv[static_cast<std::size_t>(c)], bt = bv[static_cast<std::size_t>(c)];
                const T s = pos == ExcitePos::beta_only ? gm : gm * d;
                const T t = pos == ExcitePos::gamma_only ? bt : bt * d;
                const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) ov[off + i] = xv[off + i] * s + t;
            }
    }
    bool rec = GradientTape<T>::active() && (x.requires_grad() || delta.requires_grad() ||
                                             gamma.requires_grad() || beta.requires_grad());
    if (rec) {
        Tensor<T> xc = x, dc = delta, gc = gamma, bc = beta, oc = out;
        detail::tape_record<T>(
            "gated_channel_affine", {x.tape_id(), delta.tape_id(), gamma.tape_id(), beta.tape_id()},
            [xc, dc, gc, bc, oc, B, C, hw, pos]() mutable {
                auto g = oc.grad();
                auto xv = xc.values();
                auto dv = dc.values();
                auto gv = gc.values();
                auto bv = bc.values();
                std::span<T> gx = xc.requires_grad() ? xc.grad_mut() : std::span<T>{};
                std::span<T> gd = dc.requires_grad() ? dc.grad_mut() : std::span<T>{};
                std::span<T> gg = gc.requires_grad() ? gc.grad_mut() : std::span<T>{};
                std::span<T> gb = bc.requires_grad() ? bc.grad_mut() : std::span<T>{};
                for (int c = 0; c < C; ++c) {
                    const T gm = gv[static_cast<std::size_t>(c)], bt = bv[static_cast<std::size_t>(c)];
                    double acc_gamma = 0.0, acc_beta = 0.0;
                    for (int b = 0; b < B; ++b) {
                        const T d = dv[static_cast<std::size_t>(b) * C + c];
                        const T s = pos == ExcitePos::beta_only ? gm : gm * d;
                        const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
                        double acc_gx = 0.0, acc_g = 0.0;  // sum g*x and sum g over this (b,c)
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const T gi = g[off + i];
                            if (!gx.empty()) gx[off + i] += gi * s;
                            acc_gx += static_cast<double>(gi) * static_cast<double>(xv[off + i]);
                            acc_g += static_cast<double>(gi);
                        }
                        switch (pos) {
                            case ExcitePos::gamma_only:
                                if (!gd.empty()) gd[static_cast<std::size_t>(b) * C + c] += static_cast<T>(acc_gx * gm);
                                acc_gamma += acc_gx * static_cast<double>(d);
                                acc_beta += acc_g;
                                break;
                            case ExcitePos::beta_only:
                                if (!gd.empty()) gd[static_cast<std::size_t>(b) * C + c] += static_cast<T>(acc_g * bt);
                                acc_gamma += acc_gx;
                                acc_beta += acc_g * static_cast<double>(d);
                                break;
                            case ExcitePos::both:
                                if (!gd.empty())
                                    gd[static_cast<std::size_t>(b) * C + c] +=
                                        static_cast<T>(acc_gx * gm + acc_g * bt);
                                acc_gamma += acc_gx * static_cast<double>(d);
                                acc_beta += acc_g * static_cast<double>(d);
                                break;
                        }
                    }
                    if (!gg.empty()) gg[static_cast<std::size_t>(c)] += static_cast<T>(acc_gamma);
                    if (!gb.empty()) gb[static_cast<std::size_t>(c)] += static_cast<T>(acc_beta);
                }
            },
            out);
    }
    return out;
}

// y[b,c,h,w] = x[b,c,h,w] * gate[b,c]  (SE rescaling)
template <typename T>
Tensor<T> scale_by_gate(const Tensor<T>& x, const Tensor<T>& gate) {
    if (x.shape().rank() != 4) throw ShapeError("scale_by_gate expects [B,C,H,W], got " + x.shape().str());
    const int B = x.shape()[0], C = x.shape()[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
    if (gate.shape() != Shape{B, C}) throw ShapeError("gate must be [B,C]");
    Tensor<T> out = Tensor<T>::empty(x.shape());
    {
        auto xv = x.values();
        auto dv = gate.values();
        auto ov = out.values_mut();
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                const T d = dv[static_cast<std::size_t>(b) * C + c];
                const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) ov[off + i] = xv[off + i] * d;
            }
    }
    if (detail::recording(x, gate)) {
        Tensor<T> xc = x, dc = gate, oc = out;
        detail::tape_record<T>(
            "scale_by_gate", {x.tape_id(), gate.tape_id()},
            [xc, dc, oc, B, C, hw]() mutable {
                auto g = oc.grad();
                auto xv = xc.values();
                auto dv = dc.values();
                std::span<T> gx = xc.requires_grad() ? xc.grad_mut() : std::span<T>{};
                std::span<T> gd = dc.requires_grad() ? dc.grad_mut() : std::span<T>{};
                for (int b = 0; b < B; ++b)
                    for (int c = 0; c < C; ++c) {
                        const T d = dv[static_cast<std::size_t>(b) * C + c];
                        const std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            const T gi = g[off + i];
                            if (!gx.empty()) gx[off + i] += gi * d;
                            acc += static_cast<double>(gi) * static_cast<double>(xv[off + i]);
                        }
                        if (!gd.empty()) gd[static_cast<std::size_t>(b) * C + c] += static_cast<T>(acc);
                    }
            },
            out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Fused normalization over batch or instance statistics
// ---------------------------------------------------------------------------

template <typename T>
struct Moments {
    std::vector<T> mean;  // per group
    std::vector<T> var;   // biased, per group
};

// y = (x - mu) / sqrt(var + eps), with statistics taken per channel over
// (B,H,W) when per_instance is false, or per (b,c) over (H,W) when true.
// Biased variance. Backward uses the closed form
//   dx = (g - mean(g) - y * mean(g*y)) / s
// with means over the same statistic group and s = sqrt(var + eps).
template <typename T>
Tensor<T> normalize_over(const Tensor<T>& x, bool per_instance, T eps, Moments<T>* moments = nullptr) {
    if (x.shape().rank() != 4) throw ShapeError("normalize_over expects [B,C,H,W], got " + x.shape().str());
    if (eps <= T(0)) throw ConfigError("eps must be positive");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t group_sz = per_instance ? hw : static_cast<std::int64_t>(B) * hw;
    if (group_sz < 2)
        throw StatisticsError(std::string(per_instance ? "instance" : "batch") +
                              " statistics need at least 2 elements per group, got " + std::to_string(group_sz));
    const int groups = per_instance ? B * C : C;

    std::vector<T> mean(static_cast<std::size_t>(groups)), var(static_cast<std::size_t>(groups)),
        sdev(static_cast<std::size_t>(groups));
    auto xv = x.values();
    // elements of group g live at {g*hw + r*step + [0,hw)} for r in [0,reps)
    const int reps = per_instance ? 1 : B;
    const std::int64_t step = static_cast<std::int64_t>(C) * hw;

    for (int g = 0; g < groups; ++g) {
        double acc = 0.0;
        for (int r = 0; r < reps; ++r) {
            const T* p = xv.data() + static_cast<std::int64_t>(g) * hw + static_cast<std::int64_t>(r) * step;
            for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
        }
        double mu = acc / static_cast<double>(group_sz);
        double vacc = 0.0;
        for (int r = 0; r < reps; ++r) {
            const T* p = xv.data() + static_cast<std::int64_t>(g) * hw + static_cast<std::int64_t>(r) * step;
            for (std::int64_t i = 0; i < hw; ++i) {
                double d = static_cast<double>(p[i]) - mu;
                vacc += d * d;
            }
        }
        double v = vacc / static_cast<double>(group_sz);
        mean[static_cast<std::size_t>(g)] = static_cast<T>(mu);
        var[static_cast<std::size_t>(g)] = static_cast<T>(v);
        sdev[static_cast<std::size_t>(g)] = static_cast<T>(std::sqrt(v + static_cast<double>(eps)));
    }

    Tensor<T> out = Tensor<T>::empty(x.shape());
    auto ov = out.values_mut();
    for (int g = 0; g < groups; ++g) {
        const T mu = mean[static_cast<std::size_t>(g)];
        const T inv = T(1) / sdev[static_cast<std::size_t>(g)];
        for (int r = 0; r < reps; ++r) {
            std::int64_t off = static_cast<std::int64_t>(g) * hw + static_cast<std::int64_t>(r) * step;
            for (std::int64_t i = 0; i < hw; ++i) ov[off + i] = (xv[off + i] - mu) * inv;
        }
    }
    if (moments) {
        moments->mean = mean;
        moments->var = var;
    }

    if (detail::recording(x)) {
        Tensor<T> xc = x, oc = out;
        detail::tape_record<T>(
            "normalize", {x.tape_id()},
            [xc, oc, sdev, groups, reps, step, hw, group_sz]() mutable {
                auto g = oc.grad();
                auto y = oc.values();
                auto gx = xc.grad_mut();
                for (int q = 0; q < groups; ++q) {
                    double gsum = 0.0, gysum = 0.0;
                    for (int r = 0; r < reps; ++r) {
                        std::int64_t off = static_cast<std::int64_t>(q) * hw + static_cast<std::int64_t>(r) * step;
                        for (std::int64_t i = 0; i < hw; ++i) {
                            gsum += static_cast<double>(g[off + i]);
                            gysum += static_cast<double>(g[off + i]) * static_cast<double>(y[off + i]);
                        }
                    }
                    const T gm = static_cast<T>(gsum / static_cast<double>(group_sz));
                    const T gym = static_cast<T>(gysum / static_cast<double>(group_sz));
                    const T inv = T(1) / sdev[static_cast<std::size_t>(q)];
                    for (int r = 0; r < reps; ++r) {
                        std::int64_t off = static_cast<std::int64_t>(q) * hw + static_cast<std::int64_t>(r) * step;
                        for (std::int64_t i = 0; i < hw; ++i)
                            gx[off + i] += (g[off + i] - gm - y[off + i] * gym) * inv;
                    }
                }
            },
            out);
    }
    return out;
}

}  // namespace normlab
