#include "normlab/oracle.hpp"

#include <cmath>
#include <ostream>
#include <random>

#include "normlab/attack.hpp"
#include "normlab/norm_layers.hpp"

namespace normlab::oracle {

namespace {

double flat_sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void channel_stats(const std::vector<double>& x, RefDims d, double eps, std::vector<double>& mu,
                   std::vector<double>& sd) {
    const std::size_t hw = static_cast<std::size_t>(d.H) * d.W;
    mu.assign(static_cast<std::size_t>(d.C), 0.0);
    sd.assign(static_cast<std::size_t>(d.C), 0.0);
    for (int c = 0; c < d.C; ++c) {
        double acc = 0.0;
        for (int b = 0; b < d.B; ++b)
            for (std::size_t i = 0; i < hw; ++i) acc += x[(static_cast<std::size_t>(b) * d.C + c) * hw + i];
        double m = acc / (static_cast<double>(d.B) * hw);
        double v = 0.0;
        for (int b = 0; b < d.B; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
                double diff = x[(static_cast<std::size_t>(b) * d.C + c) * hw + i] - m;
                v += diff * diff;
            }
        mu[static_cast<std::size_t>(c)] = m;
        sd[static_cast<std::size_t>(c)] = std::sqrt(v / (static_cast<double>(d.B) * hw) + eps);
    }
}

}  // namespace

std::vector<double> ref_bn(const std::vector<double>& x, RefDims d, const std::vector<double>& gamma,
                           const std::vector<double>& beta, double eps) {
    const std::size_t hw = static_cast<std::size_t>(d.H) * d.W;
    std::vector<double> mu, sd;
    channel_stats(x, d, eps, mu, sd);
    std::vector<double> y(x.size());
    for (int b = 0; b < d.B; ++b)
        for (int c = 0; c < d.C; ++c)
            for (std::size_t i = 0; i < hw; ++i) {
                std::size_t idx = (static_cast<std::size_t>(b) * d.C + c) * hw + i;
                double xhat = (x[idx] - mu[static_cast<std::size_t>(c)]) / sd[static_cast<std::size_t>(c)];
                y[idx] = xhat * gamma[static_cast<std::size_t>(c)] + beta[static_cast<std::size_t>(c)];
            }
    return y;
}

std::vector<double> ref_in(const std::vector<double>& x, RefDims d, const std::vector<double>& gamma,
                           const std::vector<double>& beta, double eps) {
    const std::size_t hw = static_cast<std::size_t>(d.H) * d.W;
    std::vector<double> y(x.size());
    for (int b = 0; b < d.B; ++b)
        for (int c = 0; c < d.C; ++c) {
            std::size_t off = (static_cast<std::size_t>(b) * d.C + c) * hw;
            double m = 0.0;
            for (std::size_t i = 0; i < hw; ++i) m += x[off + i];
            m /= static_cast<double>(hw);
            double v = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
                double diff = x[off + i] - m;
                v += diff * diff;
            }
            double sd = std::sqrt(v / static_cast<double>(hw) + eps);
            for (std::size_t i = 0; i < hw; ++i)
                y[off + i] = (x[off + i] - m) / sd * gamma[static_cast<std::size_t>(c)] + beta[static_cast<std::size_t>(c)];
        }
    return y;
}

std::vector<double> ref_se(const std::vector<double>& x, RefDims d, const std::vector<double>& fc1,
                           const std::vector<double>& fc2, int hidden) {
    const std::size_t hw = static_cast<std::size_t>(d.H) * d.W;
    std::vector<double> y(x.size());
    for (int b = 0; b < d.B; ++b) {
        std::vector<double> m(static_cast<std::size_t>(d.C), 0.0);
        for (int c = 0; c < d.C; ++c) {
            std::size_t off = (static_cast<std::size_t>(b) * d.C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) m[static_cast<std::size_t>(c)] += x[off + i];
            m[static_cast<std::size_t>(c)] /= static_cast<double>(hw);
        }
        std::vector<double> hid(static_cast<std::size_t>(hidden), 0.0);
        for (int h = 0; h < hidden; ++h) {
            double acc = 0.0;
            for (int c = 0; c < d.C; ++c) acc += fc1[static_cast<std::size_t>(h) * d.C + c] * m[static_cast<std::size_t>(c)];
            hid[static_cast<std::size_t>(h)] = acc > 0.0 ? acc : 0.0;
        }
        for (int c = 0; c < d.C; ++c) {
            double acc = 0.0;
            for (int h = 0; h < hidden; ++h) acc += fc2[static_cast<std::size_t>(c) * hidden + h] * hid[static_cast<std::size_t>(h)];
            double gate = flat_sigmoid(acc);
            std::size_t off = (static_cast<std::size_t>(b) * d.C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) y[off + i] = x[off + i] * gate;
        }
    }
    return y;
}

std::vector<double> ref_iebn(const std::vector<double>& x, RefDims d, const std::vector<double>& gamma,
                             const std::vector<double>& beta, const std::vector<double>& gamma_hat,
                             const std::vector<double>& beta_hat, double eps, RefIebnKnobs knobs,
                             const std::vector<double>& fc1, const std::vector<double>& fc2, int hidden) {
    const std::size_t hw = static_cast<std::size_t>(d.H) * d.W;
    std::vector<double> mu, sd;
    channel_stats(x, d, eps, mu, sd);

    std::vector<double> y(x.size());
    for (int b = 0; b < d.B; ++b) {
        // squeeze the raw input of instance b
        std::vector<double> m(static_cast<std::size_t>(d.C), 0.0);
        for (int c = 0; c < d.C; ++c) {
            std::size_t off = (static_cast<std::size_t>(b) * d.C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) m[static_cast<std::size_t>(c)] += x[off + i];
            m[static_cast<std::size_t>(c)] /= static_cast<double>(hw);
        }
        // process the squeezed feature
        std::vector<double> z(static_cast<std::size_t>(d.C), 0.0);
        if (knobs.op == 0) {
            for (int c = 0; c < d.C; ++c)
                z[static_cast<std::size_t>(c)] = gamma_hat[static_cast<std::size_t>(c)] * m[static_cast<std::size_t>(c)] +
                                                 beta_hat[static_cast<std::size_t>(c)];
        } else if (knobs.op == 1) {
            z = m;
        } else {
            std::vector<double> hid(static_cast<std::size_t>(hidden), 0.0);
            for (int h = 0; h < hidden; ++h) {
                double acc = 0.0;
                for (int c = 0; c < d.C; ++c) acc += fc1[static_cast<std::size_t>(h) * d.C + c] * m[static_cast<std::size_t>(c)];
                hid[static_cast<std::size_t>(h)] = acc > 0.0 ? acc : 0.0;
            }
            for (int c = 0; c < d.C; ++c) {
                double acc = 0.0;
                for (int h = 0; h < hidden; ++h) acc += fc2[static_cast<std::size_t>(c) * hidden + h] * hid[static_cast<std::size_t>(h)];
                z[static_cast<std::size_t>(c)] = acc;
            }
        }
        // gate
        std::vector<double> delta(static_cast<std::size_t>(d.C), 0.0);
        if (knobs.activation == 0) {
            for (int c = 0; c < d.C; ++c) delta[static_cast<std::size_t>(c)] = flat_sigmoid(z[static_cast<std::size_t>(c)]);
        } else if (knobs.activation == 1) {
            for (int c = 0; c < d.C; ++c) delta[static_cast<std::size_t>(c)] = std::tanh(z[static_cast<std::size_t>(c)]);
        } else if (knobs.activation == 2) {
            for (int c = 0; c < d.C; ++c) delta[static_cast<std::size_t>(c)] = z[static_cast<std::size_t>(c)] > 0.0 ? z[static_cast<std::size_t>(c)] : 0.0;
        } else {
            double mx = z[0];
            for (int c = 1; c < d.C; ++c) mx = std::max(mx, z[static_cast<std::size_t>(c)]);
            double denom = 0.0;
            for (int c = 0; c < d.C; ++c) {
                delta[static_cast<std::size_t>(c)] = std::exp(z[static_cast<std::size_t>(c)] - mx);
                denom += delta[static_cast<std::size_t>(c)];
            }
            for (int c = 0; c < d.C; ++c) delta[static_cast<std::size_t>(c)] /= denom;
        }
        // normalize and embed the recalibration
        for (int c = 0; c < d.C; ++c) {
            std::size_t off = (static_cast<std::size_t>(b) * d.C + c) * hw;
            double dl = delta[static_cast<std::size_t>(c)];
            for (std::size_t i = 0; i < hw; ++i) {
                double xhat = (x[off + i] - mu[static_cast<std::size_t>(c)]) / sd[static_cast<std::size_t>(c)];
                double g = gamma[static_cast<std::size_t>(c)], be = beta[static_cast<std::size_t>(c)];
                if (knobs.position == 0)
                    y[off + i] = xhat * (g * dl) + be;
                else if (knobs.position == 1)
                    y[off + i] = xhat * g + be * dl;
                else
                    y[off + i] = xhat * (g * dl) + be * dl;
            }
        }
    }
    return y;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

namespace {

RefDims dims_for(std::mt19937& rng) {
    std::uniform_int_distribution<int> db(2, 4), dc(2, 8), ds(2, 8);
    return RefDims{db(rng), dc(rng), ds(rng), ds(rng)};
}

std::vector<double> rand_vec(std::size_t n, std::mt19937& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    return v;
}

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
    double mx = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) mx = std::max(mx, std::abs(a[i] - b[i]));
    return mx;
}

std::string fp(unsigned seed, const RefDims& d) {
    return "seed=" + std::to_string(seed) + " shape=" + std::to_string(d.B) + "x" + std::to_string(d.C) + "x" +
           std::to_string(d.H) + "x" + std::to_string(d.W);
}

}  // namespace

std::vector<OracleReport> equivalence_suite(int runs_per_kind, double tol) {
    std::vector<OracleReport> out;
    const double eps = 1e-5;
    for (int run = 0; run < runs_per_kind; ++run) {
        unsigned seed = static_cast<unsigned>(run);
        std::mt19937 rng(seed);
        RefDims d = dims_for(rng);
        std::vector<double> xv = rand_vec(d.numel(), rng, -2.0, 2.0);
        std::vector<double> gamma = rand_vec(static_cast<std::size_t>(d.C), rng, 0.2, 2.0);
        std::vector<double> beta = rand_vec(static_cast<std::size_t>(d.C), rng);
        Tensor<double> x = Tensor<double>::from(Shape{d.B, d.C, d.H, d.W}, xv);

        NormLayerConfig cfg;
        cfg.eps = eps;

        {  // batch norm
            BatchNorm<double> layer(d.C, cfg);
            std::copy(gamma.begin(), gamma.end(), layer.gamma().values_mut().begin());
            std::copy(beta.begin(), beta.end(), layer.beta().values_mut().begin());
            Tensor<double> engine = layer.forward(x, Mode::train);
            out.push_back(make_report("equivalence/bn", max_abs_diff(engine.values(), ref_bn(xv, d, gamma, beta, eps)),
                                      tol, fp(seed, d)));
        }
        {  // instance norm
            InstanceNorm<double> layer(d.C, cfg);
            std::copy(gamma.begin(), gamma.end(), layer.gamma().values_mut().begin());
            std::copy(beta.begin(), beta.end(), layer.beta().values_mut().begin());
            Tensor<double> engine = layer.forward(x, Mode::train);
            out.push_back(make_report("equivalence/in", max_abs_diff(engine.values(), ref_in(xv, d, gamma, beta, eps)),
                                      tol, fp(seed, d)));
        }
        {  // SE rescaling on the raw input
            std::mt19937 lrng(seed + 1000);
            SeModule<double> layer(d.C, 4, lrng);
            int hidden = layer.hidden();
            std::vector<double> fc1 = rand_vec(static_cast<std::size_t>(hidden) * d.C, rng);
            std::vector<double> fc2 = rand_vec(static_cast<std::size_t>(d.C) * hidden, rng);
            std::copy(fc1.begin(), fc1.end(), layer.fc1().values_mut().begin());
            std::copy(fc2.begin(), fc2.end(), layer.fc2().values_mut().begin());
            Tensor<double> engine = layer.forward(x);
            out.push_back(make_report("equivalence/se", max_abs_diff(engine.values(), ref_se(xv, d, fc1, fc2, hidden)),
                                      tol, fp(seed, d)));
        }
        {  // IEBN, cycling through every knob combination
            RefIebnKnobs knobs;
            knobs.op = run % 3;
            knobs.activation = (run / 3) % 4;
            knobs.position = (run / 12) % 3;
            NormLayerConfig icfg = cfg;
            icfg.kind = NormKind::iebn;
            icfg.op = knobs.op == 0 ? OperatorKind::linear : knobs.op == 1 ? OperatorKind::identity : OperatorKind::fc;
            icfg.activation = knobs.activation == 0   ? ActKind::sigmoid
                              : knobs.activation == 1 ? ActKind::tanh
                              : knobs.activation == 2 ? ActKind::relu
                                                      : ActKind::softmax_channels;
            icfg.position = knobs.position == 0   ? ExcitePos::gamma_only
                            : knobs.position == 1 ? ExcitePos::beta_only
                                                  : ExcitePos::both;
            icfg.se_reduction = 4;
            std::mt19937 lrng(seed + 2000);
            Iebn<double> layer(d.C, icfg, lrng);
            std::copy(gamma.begin(), gamma.end(), layer.bn().gamma().values_mut().begin());
            std::copy(beta.begin(), beta.end(), layer.bn().beta().values_mut().begin());
            std::vector<double> gh = rand_vec(static_cast<std::size_t>(d.C), rng);
            std::vector<double> bh = rand_vec(static_cast<std::size_t>(d.C), rng);
            std::vector<double> fc1, fc2;
            int hidden = 0;
            if (icfg.op == OperatorKind::linear) {
                std::copy(gh.begin(), gh.end(), layer.gamma_hat().values_mut().begin());
                std::copy(bh.begin(), bh.end(), layer.beta_hat().values_mut().begin());
            } else if (icfg.op == OperatorKind::fc) {
                hidden = std::max(d.C / icfg.se_reduction, 1);
                fc1 = rand_vec(static_cast<std::size_t>(hidden) * d.C, rng);
                fc2 = rand_vec(static_cast<std::size_t>(d.C) * hidden, rng);
                std::copy(fc1.begin(), fc1.end(), layer.fc1().values_mut().begin());
                std::copy(fc2.begin(), fc2.end(), layer.fc2().values_mut().begin());
            }
            Tensor<double> engine = layer.forward(x, Mode::train);
            out.push_back(make_report(
                std::string("equivalence/iebn_") + to_string(icfg.op) + "_" + act_name(icfg.activation) + "_" +
                    to_string(icfg.position),
                max_abs_diff(engine.values(), ref_iebn(xv, d, gamma, beta, gh, bh, eps, knobs, fc1, fc2, hidden)),
                tol, fp(seed, d)));
        }
    }
    return out;
}

std::vector<OracleReport> gradcheck_suite(double tol) {
    std::vector<OracleReport> out;
    const RefDims d{2, 3, 4, 4};
    const Shape xs{d.B, d.C, d.H, d.W};

    auto check = [&](const std::string& name, auto make_loss, std::vector<Tensor<double>*> inputs, unsigned seed) {
        GradcheckResult r = gradcheck(make_loss, std::move(inputs));
        out.push_back(make_report("gradcheck/" + name, r.max_rel_err, tol, fp(seed, d)));
    };

    // Losses project the layer output against fixed random weights: plain
    // means of normalized tensors are nearly input-invariant, which starves
    // finite differences of signal.
    {
        std::mt19937 rng(7);
        Tensor<double> x = Tensor<double>::randn(xs, rng);
        Tensor<double> proj = Tensor<double>::randn(xs, rng);
        x.set_requires_grad();
        NormLayerConfig cfg;
        BatchNorm<double> bn(d.C, cfg);
        check("bn", [&]() { return mean_all(mul(bn.forward(x, Mode::train), proj)); },
              {&x, &bn.gamma(), &bn.beta()}, 7);
        BatchNorm<double> bn_eval(d.C, cfg);
        bn_eval.set_running(rand_vec(static_cast<std::size_t>(d.C), rng),
                            rand_vec(static_cast<std::size_t>(d.C), rng, 0.5, 2.0));
        check("bn_eval", [&]() { return mean_all(mul(bn_eval.forward(x, Mode::eval), proj)); },
              {&x, &bn_eval.gamma(), &bn_eval.beta()}, 7);
        InstanceNorm<double> in(d.C, cfg);
        check("in", [&]() { return mean_all(mul(in.forward(x, Mode::train), proj)); },
              {&x, &in.gamma(), &in.beta()}, 7);
        std::mt19937 serng(8);
        SeModule<double> se(d.C, 2, serng);
        check("se", [&]() { return mean_all(mul(se.forward(x), proj)); }, {&x, &se.fc1(), &se.fc2()}, 7);
        NormLayerConfig secfg;
        secfg.kind = NormKind::bn_se;
        secfg.se_reduction = 2;
        BnSe<double> bnse(d.C, secfg, serng);
        check("bn_se", [&]() { return mean_all(mul(bnse.forward(x, Mode::train), proj)); },
              {&x, &bnse.bn().gamma(), &bnse.bn().beta(), &bnse.se().fc1(), &bnse.se().fc2()}, 7);
    }

    // IEBN across 3 operators x 3 positions x 4 activations
    for (int op = 0; op < 3; ++op)
        for (int pos = 0; pos < 3; ++pos)
            for (int act = 0; act < 4; ++act) {
                unsigned seed = static_cast<unsigned>(100 + op * 16 + pos * 4 + act);
                std::mt19937 rng(seed);
                // keep channel means away from 0 so the relu gate never sits on its kink
                Tensor<double> x = Tensor<double>::randn(xs, rng, 1.0, 0.5);
                Tensor<double> proj = Tensor<double>::randn(xs, rng);
                x.set_requires_grad();
                NormLayerConfig cfg;
                cfg.kind = NormKind::iebn;
                cfg.op = op == 0 ? OperatorKind::linear : op == 1 ? OperatorKind::identity : OperatorKind::fc;
                cfg.position = pos == 0 ? ExcitePos::gamma_only : pos == 1 ? ExcitePos::beta_only : ExcitePos::both;
                cfg.activation = act == 0   ? ActKind::sigmoid
                                 : act == 1 ? ActKind::tanh
                                 : act == 2 ? ActKind::relu
                                            : ActKind::softmax_channels;
                cfg.se_reduction = 2;
                cfg.gamma_hat_init = 0.4;  // gate stays active and off the relu kink
                cfg.beta_hat_init = 0.1;
                Iebn<double> layer(d.C, cfg, rng);
                std::vector<Tensor<double>*> inputs{&x, &layer.bn().gamma(), &layer.bn().beta()};
                if (cfg.op == OperatorKind::linear) {
                    inputs.push_back(&layer.gamma_hat());
                    inputs.push_back(&layer.beta_hat());
                } else if (cfg.op == OperatorKind::fc) {
                    inputs.push_back(&layer.fc1());
                    inputs.push_back(&layer.fc2());
                }
                std::string name = std::string("iebn_") + to_string(cfg.op) + "_" + to_string(cfg.position) + "_" +
                                   act_name(cfg.activation);
                check(name, [&]() { return mean_all(mul(layer.forward(x, Mode::train), proj)); }, inputs, seed);
            }
    return out;
}

std::vector<OracleReport> identity_suite(double tol) {
    std::vector<OracleReport> out;
    const std::vector<std::pair<double, double>> noise_pairs{{1.0, 0.0}, {0.8, 0.8}, {0.8, 0.5}, {0.5, 0.5}, {0.5, 0.2}};
    for (unsigned seed = 0; seed < 10; ++seed) {
        std::mt19937 rng(seed);
        RefDims d = dims_for(rng);
        Shape xs{d.B, d.C, d.H, d.W};
        Tensor<double> x = Tensor<double>::randn(xs, rng);
        std::vector<double> gamma = rand_vec(static_cast<std::size_t>(d.C), rng, 0.2, 2.0);
        std::vector<double> beta = rand_vec(static_cast<std::size_t>(d.C), rng);
        std::vector<double> gh = rand_vec(static_cast<std::size_t>(d.C), rng);
        std::vector<double> bh = rand_vec(static_cast<std::size_t>(d.C), rng);

        NormLayerConfig cfg;
        {
            BatchNorm<double> bn(d.C, cfg);
            std::copy(gamma.begin(), gamma.end(), bn.gamma().values_mut().begin());
            std::copy(beta.begin(), beta.end(), bn.beta().values_mut().begin());
            out.push_back(make_report("rescaling_form/bn", rescaling_form_check(bn, x), tol, fp(seed, d)));

            InstanceNorm<double> in(d.C, cfg);
            std::copy(gamma.begin(), gamma.end(), in.gamma().values_mut().begin());
            std::copy(beta.begin(), beta.end(), in.beta().values_mut().begin());
            out.push_back(make_report("rescaling_form/in", rescaling_form_check(in, x), tol, fp(seed, d)));

            NormLayerConfig icfg;
            icfg.kind = NormKind::iebn;
            std::mt19937 lrng(seed);
            Iebn<double> iebn(d.C, icfg, lrng);
            std::copy(gamma.begin(), gamma.end(), iebn.bn().gamma().values_mut().begin());
            std::copy(beta.begin(), beta.end(), iebn.bn().beta().values_mut().begin());
            std::copy(gh.begin(), gh.end(), iebn.gamma_hat().values_mut().begin());
            std::copy(bh.begin(), bh.end(), iebn.beta_hat().values_mut().begin());
            out.push_back(make_report("rescaling_form/iebn", rescaling_form_check(iebn, x), tol, fp(seed, d)));

            NormLayerConfig scfg;
            scfg.kind = NormKind::bn_se;
            scfg.se_reduction = 2;
            BnSe<double> bnse(d.C, scfg, lrng);
            std::copy(gamma.begin(), gamma.end(), bnse.bn().gamma().values_mut().begin());
            std::copy(beta.begin(), beta.end(), bnse.bn().beta().values_mut().begin());
            out.push_back(make_report("rescaling_form/bn_se", rescaling_form_check(bnse, x), tol, fp(seed, d)));
        }

        for (auto [na, nb] : noise_pairs) {
            ConstantNoiseSpec spec;
            spec.n_a = na;
            spec.n_b = nb;
            NeutralizationReport rep = neutralization_oracle(x, spec, gamma, beta, gh, bh);
            std::string suffix = "(" + std::to_string(na) + "," + std::to_string(nb) + ")";
            out.push_back(make_report("neutralize/bn_reparam" + suffix, rep.bn_reparam, tol, fp(seed, d)));
            out.push_back(make_report("neutralize/iebn_gamma" + suffix, rep.iebn_gamma, tol, fp(seed, d)));
            out.push_back(make_report("neutralize/iebn_beta" + suffix, rep.iebn_beta, tol, fp(seed, d)));
        }
    }
    return out;
}

std::vector<OracleReport> run_all_suites() {
    std::vector<OracleReport> all = equivalence_suite();
    for (auto& r : gradcheck_suite()) all.push_back(std::move(r));
    for (auto& r : identity_suite()) all.push_back(std::move(r));
    return all;
}

void write_reports_csv(std::ostream& os, const std::vector<OracleReport>& reports) {
    os << "check,discrepancy,tolerance,pass,fingerprint\n";
    char buf[64];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof(buf), "%.6e", r.discrepancy);
        os << r.name << "," << buf << ",";
        std::snprintf(buf, sizeof(buf), "%.1e", r.tolerance);
        os << buf << "," << (r.pass ? 1 : 0) << "," << r.fingerprint << "\n";
    }
}

}  // namespace normlab::oracle
