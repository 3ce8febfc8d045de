#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <span>
#include <vector>

#include "normlab/attack_spec.hpp"
#include "normlab/dataset.hpp"
#include "normlab/norm_layers.hpp"

namespace normlab {

// A training batch contaminated with out-of-distribution images. Contaminants
// carry sentinel label -1 and a zero loss mask; they still flow through every
// batch statistic.
struct MixedBatch {
    Tensor<float> images;
    std::vector<int> labels;
    std::vector<std::uint8_t> loss_mask;
    int active = 0;
};

// Concatenates `primary_indices` in-distribution samples with 120*k
// contaminants drawn (with replacement) from the contaminant set, shuffles
// the combined order, optionally augments, and normalizes everything with
// the primary dataset's statistics.
MixedBatch compose_mixed_batch(const data::Dataset& primary, std::span<const int> primary_indices,
                               const data::Dataset& contaminant, const MixDatasetSpec& spec, std::mt19937& rng,
                               bool augment = false);

// ---------------------------------------------------------------------------
// Noise-neutralization identities. Each identity pits the engine's attacked
// forward against a flat-loop expansion of the corresponding closed form:
//   (a) attacked BN with (gamma/Na, beta - Nb*gamma/Na)  ==  clean BN with (gamma, beta)
//   (b) attacked gamma-gated IEBN  ==  D*(Na*gamma*delta) + (Nb*gamma*delta + beta)
//   (c) attacked beta-gated IEBN   ==  D*(Na*gamma) + (Nb*gamma + beta*delta)
// with D = (X - mu)/sd the clean normalized input.
// ---------------------------------------------------------------------------

struct NeutralizationReport {
    double bn_reparam = 0.0;
    double iebn_gamma = 0.0;
    double iebn_beta = 0.0;
    double max() const { return std::max({bn_reparam, iebn_gamma, iebn_beta}); }
};

template <typename T>
NeutralizationReport neutralization_oracle(const Tensor<T>& x, const ConstantNoiseSpec& spec,
                                           const std::vector<T>& gamma, const std::vector<T>& beta,
                                           const std::vector<T>& gamma_hat = {},
                                           const std::vector<T>& beta_hat = {}, double eps = 1e-5) {
    spec.validate();
    NoGradScope<T> ng;
    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const double na = spec.n_a, nb = spec.n_b;

    NormLayerConfig cfg;
    cfg.eps = eps;
    cfg.attack = spec;

    // flat clean batch statistics and per-(b,c) channel means
    std::vector<double> mu(static_cast<std::size_t>(C), 0.0), sd(static_cast<std::size_t>(C), 0.0);
    auto xv = x.values();
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
            const T* p = xv.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
        }
        double m = acc / (static_cast<double>(B) * hw);
        double v = 0.0;
        for (int b = 0; b < B; ++b) {
            const T* p = xv.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                double d = static_cast<double>(p[i]) - m;
                v += d * d;
            }
        }
        mu[static_cast<std::size_t>(c)] = m;
        sd[static_cast<std::size_t>(c)] = std::sqrt(v / (static_cast<double>(B) * hw) + eps);
    }
    std::vector<double> chan_mean(static_cast<std::size_t>(B) * C, 0.0);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const T* p = xv.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            double acc = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
            chan_mean[static_cast<std::size_t>(b) * C + c] = acc / static_cast<double>(hw);
        }

    auto max_diff = [&](const Tensor<T>& engine, const std::vector<double>& expanded) {
        auto ev = engine.values();
        double mx = 0.0;
        for (std::size_t i = 0; i < ev.size(); ++i)
            mx = std::max(mx, std::abs(static_cast<double>(ev[i]) - expanded[i]));
        return mx;
    };

    NeutralizationReport rep;

    // (a) adjusted parameters neutralize the noise exactly
    {
        BatchNorm<T> attacked(C, cfg);
        auto gv = attacked.gamma().values_mut();
        auto bv = attacked.beta().values_mut();
        for (int c = 0; c < C; ++c) {
            gv[static_cast<std::size_t>(c)] = static_cast<T>(static_cast<double>(gamma[static_cast<std::size_t>(c)]) / na);
            bv[static_cast<std::size_t>(c)] = static_cast<T>(static_cast<double>(beta[static_cast<std::size_t>(c)]) -
                                                             nb * static_cast<double>(gamma[static_cast<std::size_t>(c)]) / na);
        }
        Tensor<T> engine = attacked.forward(x, Mode::train);
        std::vector<double> clean(static_cast<std::size_t>(x.numel()));
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    double delta_norm = (static_cast<double>(xv[off + i]) - mu[static_cast<std::size_t>(c)]) / sd[static_cast<std::size_t>(c)];
                    clean[static_cast<std::size_t>(off + i)] =
                        delta_norm * static_cast<double>(gamma[static_cast<std::size_t>(c)]) +
                        static_cast<double>(beta[static_cast<std::size_t>(c)]);
                }
            }
        rep.bn_reparam = max_diff(engine, clean);
    }

    // gate values shared by (b) and (c)
    std::vector<double> gh(static_cast<std::size_t>(C), 0.0), bh(static_cast<std::size_t>(C), -1.0);
    for (int c = 0; c < C; ++c) {
        if (!gamma_hat.empty()) gh[static_cast<std::size_t>(c)] = static_cast<double>(gamma_hat[static_cast<std::size_t>(c)]);
        if (!beta_hat.empty()) bh[static_cast<std::size_t>(c)] = static_cast<double>(beta_hat[static_cast<std::size_t>(c)]);
    }
    std::vector<double> delta(static_cast<std::size_t>(B) * C);
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            delta[static_cast<std::size_t>(b) * C + c] =
                1.0 / (1.0 + std::exp(-(gh[static_cast<std::size_t>(c)] * chan_mean[static_cast<std::size_t>(b) * C + c] +
                                        bh[static_cast<std::size_t>(c)])));

    auto run_iebn = [&](ExcitePos pos, double& out_disc) {
        NormLayerConfig icfg = cfg;
        icfg.kind = NormKind::iebn;
        icfg.position = pos;
        std::mt19937 rng(0);
        Iebn<T> layer(C, icfg, rng);
        auto gv = layer.bn().gamma().values_mut();
        auto bv = layer.bn().beta().values_mut();
        auto ghv = layer.gamma_hat().values_mut();
        auto bhv = layer.beta_hat().values_mut();
        for (int c = 0; c < C; ++c) {
            gv[static_cast<std::size_t>(c)] = gamma[static_cast<std::size_t>(c)];
            bv[static_cast<std::size_t>(c)] = beta[static_cast<std::size_t>(c)];
            ghv[static_cast<std::size_t>(c)] = static_cast<T>(gh[static_cast<std::size_t>(c)]);
            bhv[static_cast<std::size_t>(c)] = static_cast<T>(bh[static_cast<std::size_t>(c)]);
        }
        Tensor<T> engine = layer.forward(x, Mode::train);
        std::vector<double> expanded(static_cast<std::size_t>(x.numel()));
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                double d = delta[static_cast<std::size_t>(b) * C + c];
                double gam = static_cast<double>(gamma[static_cast<std::size_t>(c)]);
                double bet = static_cast<double>(beta[static_cast<std::size_t>(c)]);
                std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    double D = (static_cast<double>(xv[off + i]) - mu[static_cast<std::size_t>(c)]) / sd[static_cast<std::size_t>(c)];
                    expanded[static_cast<std::size_t>(off + i)] =
                        pos == ExcitePos::gamma_only ? D * (na * gam * d) + (nb * gam * d + bet)
                                                     : D * (na * gam) + (nb * gam + bet * d);
                }
            }
        out_disc = max_diff(engine, expanded);
    };
    run_iebn(ExcitePos::gamma_only, rep.iebn_gamma);
    run_iebn(ExcitePos::beta_only, rep.iebn_beta);
    return rep;
}

}  // namespace normlab
