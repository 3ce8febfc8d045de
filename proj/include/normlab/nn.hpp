#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <vector>

#include "normlab/ops.hpp"

namespace normlab {

namespace detail {

template <typename T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Unfolds one image [C,H,W] into columns [C*kh*kw, OH*OW] for GEMM-based
// convolution. Out-of-range taps read as zero padding.
template <typename T>
void im2col(const T* img, int C, int H, int W, int kh, int kw, int stride, int pad, int OH, int OW, T* col) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                T* dst = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) *
                                   (static_cast<std::int64_t>(OH) * OW);
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride + ki - pad;
                    for (int ow = 0; ow < OW; ++ow) {
                        int iw = ow * stride + kj - pad;
                        bool in = ih >= 0 && ih < H && iw >= 0 && iw < W;
                        dst[static_cast<std::int64_t>(oh) * OW + ow] =
                            in ? img[(static_cast<std::int64_t>(c) * H + ih) * W + iw] : T(0);
                    }
                }
            }
}

// Scatter-adds columns back into the image gradient (transpose of im2col).
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int kh, int kw, int stride, int pad, int OH, int OW, T* img) {
    for (int c = 0; c < C; ++c)
        for (int ki = 0; ki < kh; ++ki)
            for (int kj = 0; kj < kw; ++kj) {
                const T* src = col + ((static_cast<std::int64_t>(c) * kh + ki) * kw + kj) *
                                         (static_cast<std::int64_t>(OH) * OW);
                for (int oh = 0; oh < OH; ++oh) {
                    int ih = oh * stride + ki - pad;
                    if (ih < 0 || ih >= H) continue;
                    for (int ow = 0; ow < OW; ++ow) {
                        int iw = ow * stride + kj - pad;
                        if (iw < 0 || iw >= W) continue;
                        img[(static_cast<std::int64_t>(c) * H + ih) * W + iw] +=
                            src[static_cast<std::int64_t>(oh) * OW + ow];
                    }
                }
            }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation of [B,C,H,W] with [K,C,kh,kw]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride = 1, int pad = 0) {
    if (x.shape().rank() != 4 || w.shape().rank() != 4)
        throw ShapeError("conv2d expects 4-D input and weight, got " + x.shape().str() + " / " + w.shape().str());
    if (stride < 1 || pad < 0) throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int K = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != C)
        throw ShapeError("conv2d channel mismatch: input C=" + std::to_string(C) + ", weight C=" +
                         std::to_string(w.shape()[1]));
    if (kh > H + 2 * pad || kw > W + 2 * pad) throw ShapeError("conv2d kernel larger than padded input");
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    const std::int64_t ckk = static_cast<std::int64_t>(C) * kh * kw;
    const std::int64_t ohw = static_cast<std::int64_t>(OH) * OW;

    Tensor<T> out = Tensor<T>::zeros(Shape{B, K, OH, OW});
    {
        std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
        detail::ConstMatMap<T> wm(w.values().data(), K, ckk);
        for (int b = 0; b < B; ++b) {
            detail::im2col(x.values().data() + static_cast<std::int64_t>(b) * C * H * W, C, H, W, kh, kw, stride,
                           pad, OH, OW, col.data());
            detail::ConstMatMap<T> cm(col.data(), ckk, ohw);
            detail::MatMap<T> om(out.values_mut().data() + static_cast<std::int64_t>(b) * K * ohw, K, ohw);
            om.noalias() = wm * cm;
        }
    }

    if (detail::recording(x, w)) {
        Tensor<T> xc = x, wc = w, oc = out;
        detail::tape_record<T>(
            "conv2d", {x.tape_id(), w.tape_id()},
            [xc, wc, oc, B, C, H, W, K, kh, kw, stride, pad, OH, OW, ckk, ohw]() mutable {
                auto g = oc.grad();
                detail::ConstMatMap<T> wm(wc.values().data(), K, ckk);
                const bool need_x = xc.requires_grad();
                const bool need_w = wc.requires_grad();
                std::span<T> gx = need_x ? xc.grad_mut() : std::span<T>{};
                std::span<T> gw = need_w ? wc.grad_mut() : std::span<T>{};
                std::vector<T> col(static_cast<std::size_t>(ckk * ohw));
                std::vector<T> colg(need_x ? static_cast<std::size_t>(ckk * ohw) : 0);
                for (int b = 0; b < B; ++b) {
                    detail::ConstMatMap<T> gm(g.data() + static_cast<std::int64_t>(b) * K * ohw, K, ohw);
                    if (need_w) {
                        // recomputing im2col trades time for not retaining B col buffers
                        detail::im2col(xc.values().data() + static_cast<std::int64_t>(b) * C * H * W, C, H, W, kh,
                                       kw, stride, pad, OH, OW, col.data());
                        detail::ConstMatMap<T> cm(col.data(), ckk, ohw);
                        detail::MatMap<T> gwm(gw.data(), K, ckk);
                        gwm.noalias() += gm * cm.transpose();
                    }
                    if (need_x) {
                        detail::MatMap<T> cgm(colg.data(), ckk, ohw);
                        cgm.noalias() = wm.transpose() * gm;
                        detail::col2im_add(colg.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                                           gx.data() + static_cast<std::int64_t>(b) * C * H * W);
                    }
                }
            },
            out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear: x[B,N] * w[M,N]^T (+ bias[M]) -> [B,M]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias = nullptr) {
    if (x.shape().rank() != 2 || w.shape().rank() != 2)
        throw ShapeError("linear expects [B,N] and [M,N], got " + x.shape().str() + " / " + w.shape().str());
    const int B = x.shape()[0], N = x.shape()[1], M = w.shape()[0];
    if (w.shape()[1] != N) throw ShapeError("linear inner-dimension mismatch");
    if (bias && (bias->shape().rank() != 1 || (*bias).shape()[0] != M))
        throw ShapeError("linear bias must be [M]");

    Tensor<T> out = Tensor<T>::zeros(Shape{B, M});
    {
        detail::ConstMatMap<T> xm(x.values().data(), B, N);
        detail::ConstMatMap<T> wm(w.values().data(), M, N);
        detail::MatMap<T> om(out.values_mut().data(), B, M);
        om.noalias() = xm * wm.transpose();
        if (bias) {
            auto bv = bias->values();
            auto ov = out.values_mut();
            for (int b = 0; b < B; ++b)
                for (int m = 0; m < M; ++m) ov[static_cast<std::size_t>(b) * M + m] += bv[static_cast<std::size_t>(m)];
        }
    }

    bool rec = GradientTape<T>::active() &&
               (x.requires_grad() || w.requires_grad() || (bias && bias->requires_grad()));
    if (rec) {
        Tensor<T> xc = x, wc = w, oc = out;
        std::optional<Tensor<T>> bcopt;
        if (bias) bcopt = *bias;
        detail::tape_record<T>(
            "linear", {x.tape_id(), w.tape_id(), bias ? bias->tape_id() : -1},
            [xc, wc, oc, bcopt, B, N, M]() mutable {
                auto g = oc.grad();
                detail::ConstMatMap<T> gm(g.data(), B, M);
                if (xc.requires_grad()) {
                    detail::ConstMatMap<T> wm(wc.values().data(), M, N);
                    detail::MatMap<T> gxm(xc.grad_mut().data(), B, N);
                    gxm.noalias() += gm * wm;
                }
                if (wc.requires_grad()) {
                    detail::ConstMatMap<T> xm(xc.values().data(), B, N);
                    detail::MatMap<T> gwm(wc.grad_mut().data(), M, N);
                    gwm.noalias() += gm.transpose() * xm;
                }
                if (bcopt && bcopt->requires_grad()) {
                    auto gb = bcopt->grad_mut();
                    for (int b = 0; b < B; ++b)
                        for (int m = 0; m < M; ++m) gb[static_cast<std::size_t>(m)] += g[static_cast<std::size_t>(b) * M + m];
                }
            },
            out);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-entropy over logits with integer labels; optional sample mask.
// Masked-out samples contribute nothing to the loss or its gradient.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                        const std::vector<std::uint8_t>* mask = nullptr) {
    if (logits.shape().rank() != 2) throw ShapeError("cross_entropy expects [B,C] logits");
    const int B = logits.shape()[0], C = logits.shape()[1];
    if (static_cast<int>(labels.size()) != B) throw DataError("label count does not match batch size");
    if (mask && static_cast<int>(mask->size()) != B) throw DataError("mask length does not match batch size");

    int active = 0;
    for (int b = 0; b < B; ++b) {
        bool on = !mask || (*mask)[static_cast<std::size_t>(b)] != 0;
        if (!on) continue;
        ++active;
        if (labels[static_cast<std::size_t>(b)] < 0 || labels[static_cast<std::size_t>(b)] >= C)
            throw DataError("label " + std::to_string(labels[static_cast<std::size_t>(b)]) + " out of range [0," +
                            std::to_string(C) + ") at sample " + std::to_string(b));
    }
    if (active == 0) throw DataError("cross_entropy: no active samples in batch");

    // softmax probabilities, saved for the backward pass
    std::vector<T> probs(static_cast<std::size_t>(B) * C);
    auto lv = logits.values();
    double loss_acc = 0.0;
    for (int b = 0; b < B; ++b) {
        const T* row = lv.data() + static_cast<std::ptrdiff_t>(b) * C;
        T* prow = probs.data() + static_cast<std::ptrdiff_t>(b) * C;
        T mx = row[0];
        for (int c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (int c = 0; c < C; ++c) denom += std::exp(static_cast<double>(row[c] - mx));
        double lse = std::log(denom) + static_cast<double>(mx);
        for (int c = 0; c < C; ++c) prow[c] = static_cast<T>(std::exp(static_cast<double>(row[c]) - lse));
        bool on = !mask || (*mask)[static_cast<std::size_t>(b)] != 0;
        if (on) loss_acc += lse - static_cast<double>(row[labels[static_cast<std::size_t>(b)]]);
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(loss_acc / active));

    if (detail::recording(logits)) {
        Tensor<T> lc = logits, oc = out;
        std::vector<std::uint8_t> mcopy = mask ? *mask : std::vector<std::uint8_t>();
        detail::tape_record<T>(
            "cross_entropy", {logits.tape_id()},
            [lc, oc, probs = std::move(probs), labels, mcopy, B, C, active]() mutable {
                T g = oc.grad()[0];
                auto gl = lc.grad_mut();
                const T inv = g / static_cast<T>(active);
                for (int b = 0; b < B; ++b) {
                    bool on = mcopy.empty() || mcopy[static_cast<std::size_t>(b)] != 0;
                    if (!on) continue;
                    std::ptrdiff_t off = static_cast<std::ptrdiff_t>(b) * C;
                    for (int c = 0; c < C; ++c) gl[off + c] += inv * probs[off + c];
                    gl[off + labels[static_cast<std::size_t>(b)]] -= inv;
                }
            },
            out);
    }
    return out;
}

// Top-1 accuracy in percent over active samples.
template <typename T>
double accuracy(const Tensor<T>& logits, const std::vector<int>& labels,
                const std::vector<std::uint8_t>* mask = nullptr) {
    const int B = logits.shape()[0], C = logits.shape()[1];
    auto lv = logits.values();
    int hit = 0, active = 0;
    for (int b = 0; b < B; ++b) {
        if (mask && (*mask)[static_cast<std::size_t>(b)] == 0) continue;
        ++active;
        const T* row = lv.data() + static_cast<std::ptrdiff_t>(b) * C;
        int best = 0;
        for (int c = 1; c < C; ++c)
            if (row[c] > row[best]) best = c;
        if (best == labels[static_cast<std::size_t>(b)]) ++hit;
    }
    return active ? 100.0 * hit / active : 0.0;
}

// ---------------------------------------------------------------------------
// SGD with momentum and weight decay:
//   v <- momentum*v + (g + wd*w);  w <- w - lr*v
// ---------------------------------------------------------------------------

template <typename T>
void sgd_step(Tensor<T>& w, std::vector<T>& velocity, T lr, T momentum, T weight_decay) {
    auto wv = w.values_mut();
    if (velocity.size() != wv.size()) velocity.assign(wv.size(), T(0));
    std::span<const T> g = w.has_grad() ? w.grad() : std::span<const T>{};
    for (std::size_t i = 0; i < wv.size(); ++i) {
        T gi = (g.empty() ? T(0) : g[i]) + weight_decay * wv[i];
        velocity[i] = momentum * velocity[i] + gi;
        wv[i] -= lr * velocity[i];
    }
}

template <typename T>
class Sgd {
public:
    Sgd(std::vector<Tensor<T>*> params, T lr, T momentum, T weight_decay)
        : params_(std::move(params)), vel_(params_.size()), lr_(lr), momentum_(momentum), wd_(weight_decay) {}

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }

    void step() {
        for (std::size_t i = 0; i < params_.size(); ++i) sgd_step(*params_[i], vel_[i], lr_, momentum_, wd_);
    }

    void zero_grad() {
        for (auto* p : params_) p->zero_grad();
    }

private:
    std::vector<Tensor<T>*> params_;
    std::vector<std::vector<T>> vel_;
    T lr_, momentum_, wd_;
};

}  // namespace normlab
