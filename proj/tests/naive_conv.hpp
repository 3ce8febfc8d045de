#pragma once

#include <vector>

// Six-loop cross-correlation reference, independent of the engine's
// im2col/GEMM path. Kept as the permanent conv oracle.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, int B, int C, int H, int W,
                                        const std::vector<double>& w, int K, int kh, int kw, int stride, int pad) {
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    std::vector<double> out(static_cast<std::size_t>(B) * K * OH * OW, 0.0);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k)
            for (int oh = 0; oh < OH; ++oh)
                for (int ow = 0; ow < OW; ++ow) {
                    double acc = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int ki = 0; ki < kh; ++ki)
                            for (int kj = 0; kj < kw; ++kj) {
                                int ih = oh * stride + ki - pad;
                                int iw = ow * stride + kj - pad;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += x[((static_cast<std::size_t>(b) * C + c) * H + ih) * W + iw] *
                                       w[((static_cast<std::size_t>(k) * C + c) * kh + ki) * kw + kj];
                            }
                    out[((static_cast<std::size_t>(b) * K + k) * OH + oh) * OW + ow] = acc;
                }
    return out;
}
