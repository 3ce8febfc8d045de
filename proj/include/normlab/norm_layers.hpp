#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "normlab/attack_spec.hpp"
#include "normlab/nn.hpp"
#include "normlab/ops.hpp"

namespace normlab {

enum class Mode { train, eval };
enum class NormKind { batch, instance, iebn, bn_se };
enum class OperatorKind { linear, identity, fc };
// ExcitePos lives beside the gated affine op in ops.hpp

inline const char* to_string(NormKind k) {
    switch (k) {
        case NormKind::batch: return "bn";
        case NormKind::instance: return "in";
        case NormKind::iebn: return "iebn";
        case NormKind::bn_se: return "bn_se";
    }
    return "?";
}

inline const char* to_string(ExcitePos p) {
    switch (p) {
        case ExcitePos::gamma_only: return "gamma";
        case ExcitePos::beta_only: return "beta";
        case ExcitePos::both: return "both";
    }
    return "?";
}

inline const char* to_string(OperatorKind o) {
    switch (o) {
        case OperatorKind::linear: return "linear";
        case OperatorKind::identity: return "identity";
        case OperatorKind::fc: return "fc";
    }
    return "?";
}

// Every ablation knob in one place. Knobs that do not apply to `kind` are
// ignored by construction but still validated.
struct NormLayerConfig {
    NormKind kind = NormKind::batch;
    double eps = 1e-5;
    double momentum = 0.1;
    ActKind activation = ActKind::sigmoid;
    ExcitePos position = ExcitePos::gamma_only;
    OperatorKind op = OperatorKind::linear;
    double gamma_hat_init = 0.0;
    double beta_hat_init = -1.0;
    int se_reduction = 16;
    std::optional<ConstantNoiseSpec> attack;

    void validate() const {
        if (eps <= 0.0) throw ConfigError("norm eps must be positive");
        if (momentum < 0.0 || momentum > 1.0) throw ConfigError("norm momentum must lie in [0,1]");
        if (se_reduction < 1) throw ConfigError("se reduction ratio must be >= 1");
        if (attack) attack->validate();
    }
};

namespace detail {

inline void check_channels(const Shape& s, int C, const char* who) {
    if (s.rank() != 4) throw ShapeError(std::string(who) + " expects [B,C,H,W], got " + s.str());
    if (s[1] != C)
        throw ShapeError(std::string(who) + " channel mismatch: input has " + std::to_string(s[1]) +
                         ", layer has " + std::to_string(C));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// BatchNorm
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm {
public:
    BatchNorm(int channels, const NormLayerConfig& cfg)
        : channels_(channels),
          eps_(static_cast<T>(cfg.eps)),
          momentum_(static_cast<T>(cfg.momentum)),
          gamma_(Tensor<T>::full(Shape{channels}, T(1))),
          beta_(Tensor<T>::zeros(Shape{channels})),
          running_mean_(static_cast<std::size_t>(channels), T(0)),
          running_var_(static_cast<std::size_t>(channels), T(1)),
          attack_(cfg.attack) {
        cfg.validate();
        gamma_.set_requires_grad();
        beta_.set_requires_grad();
    }

    // Normalized (pre-affine) features; the constant-noise hook lives here,
    // between the normalized step and the reparameterization step.
    Tensor<T> normalized(const Tensor<T>& x, Mode mode) {
        detail::check_channels(x.shape(), channels_, "bn_forward");
        Tensor<T> xhat;
        if (mode == Mode::train) {
            Moments<T> mo;
            xhat = normalize_over(x, /*per_instance=*/false, eps_, &mo);
            for (int c = 0; c < channels_; ++c) {
                running_mean_[static_cast<std::size_t>(c)] =
                    (T(1) - momentum_) * running_mean_[static_cast<std::size_t>(c)] + momentum_ * mo.mean[static_cast<std::size_t>(c)];
                running_var_[static_cast<std::size_t>(c)] =
                    (T(1) - momentum_) * running_var_[static_cast<std::size_t>(c)] + momentum_ * mo.var[static_cast<std::size_t>(c)];
            }
        } else {
            // frozen affine map from the running statistics
            std::vector<T> scale(static_cast<std::size_t>(channels_)), shift(static_cast<std::size_t>(channels_));
            for (int c = 0; c < channels_; ++c) {
                T inv = T(1) / std::sqrt(running_var_[static_cast<std::size_t>(c)] + eps_);
                scale[static_cast<std::size_t>(c)] = inv;
                shift[static_cast<std::size_t>(c)] = -running_mean_[static_cast<std::size_t>(c)] * inv;
            }
            xhat = channel_affine(x, Tensor<T>::from(Shape{channels_}, scale),
                                  Tensor<T>::from(Shape{channels_}, shift));
        }
        if (attack_ && (mode == Mode::train || attack_->apply_in_eval))
            xhat = inject_constant_noise(xhat, *attack_);
        return xhat;
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        return channel_affine(normalized(x, mode), gamma_, beta_);
    }

    std::vector<Tensor<T>*> params() { return {&gamma_, &beta_}; }
    std::size_t param_count() const { return 2 * static_cast<std::size_t>(channels_); }

    Tensor<T>& gamma() { return gamma_; }
    Tensor<T>& beta() { return beta_; }
    int channels() const { return channels_; }
    T eps() const { return eps_; }
    const std::vector<T>& running_mean() const { return running_mean_; }
    const std::vector<T>& running_var() const { return running_var_; }
    void set_running(std::vector<T> mean, std::vector<T> var) {
        running_mean_ = std::move(mean);
        running_var_ = std::move(var);
    }
    void set_attack(std::optional<ConstantNoiseSpec> a) { attack_ = std::move(a); }
    const std::optional<ConstantNoiseSpec>& attack() const { return attack_; }

    template <class Fn>
    void visit_state(Fn&& fn) {
        fn("gamma", gamma_);
        fn("beta", beta_);
        fn("running_mean", running_mean_);
        fn("running_var", running_var_);
    }

private:
    int channels_;
    T eps_, momentum_;
    Tensor<T> gamma_, beta_;
    std::vector<T> running_mean_, running_var_;
    std::optional<ConstantNoiseSpec> attack_;
};

// ---------------------------------------------------------------------------
// InstanceNorm: statistics of each (instance, channel) alone
// ---------------------------------------------------------------------------

template <typename T>
class InstanceNorm {
public:
    InstanceNorm(int channels, const NormLayerConfig& cfg)
        : channels_(channels),
          eps_(static_cast<T>(cfg.eps)),
          gamma_(Tensor<T>::full(Shape{channels}, T(1))),
          beta_(Tensor<T>::zeros(Shape{channels})) {
        cfg.validate();
        gamma_.set_requires_grad();
        beta_.set_requires_grad();
    }

    Tensor<T> forward(const Tensor<T>& x, Mode /*mode*/) {
        detail::check_channels(x.shape(), channels_, "in_forward");
        return channel_affine(normalize_over(x, /*per_instance=*/true, eps_), gamma_, beta_);
    }

    std::vector<Tensor<T>*> params() { return {&gamma_, &beta_}; }
    std::size_t param_count() const { return 2 * static_cast<std::size_t>(channels_); }

    Tensor<T>& gamma() { return gamma_; }
    Tensor<T>& beta() { return beta_; }
    int channels() const { return channels_; }
    T eps() const { return eps_; }

    template <class Fn>
    void visit_state(Fn&& fn) {
        fn("gamma", gamma_);
        fn("beta", beta_);
    }

private:
    int channels_;
    T eps_;
    Tensor<T> gamma_, beta_;
};

// ---------------------------------------------------------------------------
// Squeeze-and-excitation block: sigmoid(FC(avg(x))) rescales channels
// ---------------------------------------------------------------------------

template <typename T>
class SeModule {
public:
    SeModule(int channels, int reduction, std::mt19937& rng)
        : channels_(channels), hidden_(std::max(channels / reduction, 1)) {
        T s1 = static_cast<T>(std::sqrt(2.0 / channels_));
        T s2 = static_cast<T>(std::sqrt(2.0 / hidden_));
        fc1_ = Tensor<T>::randn(Shape{hidden_, channels_}, rng, s1);
        fc2_ = Tensor<T>::randn(Shape{channels_, hidden_}, rng, s2);
        fc1_.set_requires_grad();
        fc2_.set_requires_grad();
    }

    // The per-channel rescaling coefficient, shape [B,C].
    Tensor<T> gate(const Tensor<T>& x) {
        detail::check_channels(x.shape(), channels_, "se_forward");
        Tensor<T> m = avgpool_channel(x);
        Tensor<T> a = relu(linear(m, fc1_));
        return sigmoid(linear(a, fc2_));
    }

    Tensor<T> forward(const Tensor<T>& x) { return scale_by_gate(x, gate(x)); }

    std::vector<Tensor<T>*> params() { return {&fc1_, &fc2_}; }
    std::size_t param_count() const { return 2 * static_cast<std::size_t>(channels_) * static_cast<std::size_t>(hidden_); }

    Tensor<T>& fc1() { return fc1_; }
    Tensor<T>& fc2() { return fc2_; }
    int hidden() const { return hidden_; }
    int channels() const { return channels_; }

    template <class Fn>
    void visit_state(Fn&& fn) {
        fn("se_fc1", fc1_);
        fn("se_fc2", fc2_);
    }

private:
    int channels_, hidden_;
    Tensor<T> fc1_, fc2_;
};

// ---------------------------------------------------------------------------
// Instance enhancement BN: delta = act(op(avg(X))) gates the BN affine
// ---------------------------------------------------------------------------

template <typename T>
class Iebn {
public:
    Iebn(int channels, const NormLayerConfig& cfg, std::mt19937& rng)
        : bn_(channels, cfg),
          channels_(channels),
          act_(cfg.activation),
          pos_(cfg.position),
          op_(cfg.op),
          gamma_hat_(Tensor<T>::full(Shape{channels}, static_cast<T>(cfg.gamma_hat_init))),
          beta_hat_(Tensor<T>::full(Shape{channels}, static_cast<T>(cfg.beta_hat_init))) {
        if (op_ == OperatorKind::linear) {
            gamma_hat_.set_requires_grad();
            beta_hat_.set_requires_grad();
        } else if (op_ == OperatorKind::fc) {
            hidden_ = std::max(channels / cfg.se_reduction, 1);
            T s1 = static_cast<T>(std::sqrt(2.0 / channels_));
            T s2 = static_cast<T>(std::sqrt(2.0 / hidden_));
            fc1_ = Tensor<T>::randn(Shape{hidden_, channels_}, rng, s1);
            fc2_ = Tensor<T>::randn(Shape{channels_, hidden_}, rng, s2);
            fc1_.set_requires_grad();
            fc2_.set_requires_grad();
        }
    }

    // delta_bc for the given input, shape [B,C]. Squeezes the raw
    // (pre-normalization) features in every mode.
    Tensor<T> gate(const Tensor<T>& x) {
        Tensor<T> m = avgpool_channel(x);
        Tensor<T> z;
        switch (op_) {
            case OperatorKind::linear: z = add(mul(m, gamma_hat_), beta_hat_); break;
            case OperatorKind::identity: z = m; break;
            case OperatorKind::fc:
                if (!fc1_.defined() || !fc2_.defined())
                    throw ConfigError("iebn fc operator used with uninitialized weights");
                z = linear(relu(linear(m, fc1_)), fc2_);
                break;
        }
        return activation(z, act_);
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        detail::check_channels(x.shape(), channels_, "iebn_forward");
        Tensor<T> delta = gate(x);
        last_delta_ = delta;
        Tensor<T> xhat = bn_.normalized(x, mode);
        return gated_channel_affine(xhat, delta, bn_.gamma(), bn_.beta(), pos_);
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> p = bn_.params();
        if (op_ == OperatorKind::linear) {
            p.push_back(&gamma_hat_);
            p.push_back(&beta_hat_);
        } else if (op_ == OperatorKind::fc) {
            p.push_back(&fc1_);
            p.push_back(&fc2_);
        }
        return p;
    }

    std::size_t param_count() const {
        std::size_t n = bn_.param_count();
        if (op_ == OperatorKind::linear) n += 2 * static_cast<std::size_t>(channels_);
        if (op_ == OperatorKind::fc) n += 2 * static_cast<std::size_t>(channels_) * static_cast<std::size_t>(hidden_);
        return n;
    }

    BatchNorm<T>& bn() { return bn_; }
    Tensor<T>& gamma_hat() { return gamma_hat_; }
    Tensor<T>& beta_hat() { return beta_hat_; }
    Tensor<T>& fc1() { return fc1_; }
    Tensor<T>& fc2() { return fc2_; }
    const Tensor<T>& last_delta() const { return last_delta_; }
    int channels() const { return channels_; }
    ActKind activation_kind() const { return act_; }
    ExcitePos position() const { return pos_; }
    OperatorKind operator_kind() const { return op_; }

    template <class Fn>
    void visit_state(Fn&& fn) {
        bn_.visit_state(fn);
        if (op_ == OperatorKind::linear) {
            fn("gamma_hat", gamma_hat_);
            fn("beta_hat", beta_hat_);
        } else if (op_ == OperatorKind::fc) {
            fn("iebn_fc1", fc1_);
            fn("iebn_fc2", fc2_);
        }
    }

private:
    BatchNorm<T> bn_;
    int channels_;
    ActKind act_;
    ExcitePos pos_;
    OperatorKind op_;
    Tensor<T> gamma_hat_, beta_hat_;
    Tensor<T> fc1_, fc2_;
    int hidden_ = 0;
    Tensor<T> last_delta_;
};

// ---------------------------------------------------------------------------
// BN followed by an SE module that squeezes the BN output; the gate lands on
// both the scale and the shift.
// ---------------------------------------------------------------------------

template <typename T>
class BnSe {
public:
    BnSe(int channels, const NormLayerConfig& cfg, std::mt19937& rng)
        : bn_(channels, cfg), se_(channels, cfg.se_reduction, rng) {}

    Tensor<T> forward(const Tensor<T>& x, Mode mode) { return se_.forward(bn_.forward(x, mode)); }

    std::vector<Tensor<T>*> params() {
        auto p = bn_.params();
        for (auto* q : se_.params()) p.push_back(q);
        return p;
    }
    std::size_t param_count() const { return bn_.param_count() + se_.param_count(); }

    BatchNorm<T>& bn() { return bn_; }
    SeModule<T>& se() { return se_; }
    int channels() const { return bn_.channels(); }

    template <class Fn>
    void visit_state(Fn&& fn) {
        bn_.visit_state(fn);
        se_.visit_state(fn);
    }

private:
    BatchNorm<T> bn_;
    SeModule<T> se_;
};

// ---------------------------------------------------------------------------
// The pluggable normalization slot used by model builders
// ---------------------------------------------------------------------------

template <typename T>
class NormLayer {
public:
    static NormLayer make(int channels, const NormLayerConfig& cfg, std::mt19937& rng) {
        cfg.validate();
        switch (cfg.kind) {
            case NormKind::batch: return NormLayer(BatchNorm<T>(channels, cfg));
            case NormKind::instance: return NormLayer(InstanceNorm<T>(channels, cfg));
            case NormKind::iebn: return NormLayer(Iebn<T>(channels, cfg, rng));
            case NormKind::bn_se: return NormLayer(BnSe<T>(channels, cfg, rng));
        }
        throw ConfigError("unknown norm kind");
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        return std::visit([&](auto& l) { return l.forward(x, mode); }, impl_);
    }

    std::vector<Tensor<T>*> params() {
        return std::visit([](auto& l) { return l.params(); }, impl_);
    }

    std::size_t param_count() const {
        return std::visit([](const auto& l) { return l.param_count(); }, impl_);
    }

    int channels() const {
        return std::visit([](const auto& l) { return l.channels(); }, impl_);
    }

    template <class Fn>
    void visit_state(Fn&& fn) {
        std::visit([&](auto& l) { l.visit_state(fn); }, impl_);
    }

    template <typename L>
    L* as() {
        return std::get_if<L>(&impl_);
    }

private:
    template <typename L>
    explicit NormLayer(L&& l) : impl_(std::forward<L>(l)) {}

    std::variant<BatchNorm<T>, InstanceNorm<T>, Iebn<T>, BnSe<T>> impl_;
};

// ---------------------------------------------------------------------------
// Rescaling-form identities: the normalized-then-affine composition must
// equal the expanded (scale*X + shift) form. The expansion is evaluated with
// plain loops that share nothing with the engine ops.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void flat_batch_stats(std::span<const T> x, int B, int C, int H, int W, T eps, std::vector<double>& mu,
                      std::vector<double>& sd) {
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    mu.assign(static_cast<std::size_t>(C), 0.0);
    sd.assign(static_cast<std::size_t>(C), 0.0);
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int b = 0; b < B; ++b) {
            const T* p = x.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) acc += static_cast<double>(p[i]);
        }
        double m = acc / (static_cast<double>(B) * hw);
        double v = 0.0;
        for (int b = 0; b < B; ++b) {
            const T* p = x.data() + (static_cast<std::int64_t>(b) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                double d = static_cast<double>(p[i]) - m;
                v += d * d;
            }
        }
        mu[static_cast<std::size_t>(c)] = m;
        sd[static_cast<std::size_t>(c)] = std::sqrt(v / (static_cast<double>(B) * hw) + static_cast<double>(eps));
    }
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, std::span<const double> b) {
    auto av = a.values();
    double mx = 0.0;
    for (std::size_t i = 0; i < av.size(); ++i) mx = std::max(mx, std::abs(static_cast<double>(av[i]) - b[i]));
    return mx;
}

}  // namespace detail

// BN: gamma/sd * X + (beta - mu/sd * gamma)
template <typename T>
double rescaling_form_check(BatchNorm<T>& layer, const Tensor<T>& x) {
    NoGradScope<T> ng;
    auto saved_mean = layer.running_mean();
    auto saved_var = layer.running_var();
    Tensor<T> engine = layer.forward(x, Mode::train);
    layer.set_running(saved_mean, saved_var);

    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<double> mu, sd;
    detail::flat_batch_stats(x.values(), B, C, H, W, layer.eps(), mu, sd);
    auto g = layer.gamma().values();
    auto be = layer.beta().values();
    std::vector<double> expanded(static_cast<std::size_t>(x.numel()));
    auto xv = x.values();
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            double scale = static_cast<double>(g[static_cast<std::size_t>(c)]) / sd[static_cast<std::size_t>(c)];
            double shift = static_cast<double>(be[static_cast<std::size_t>(c)]) -
                           mu[static_cast<std::size_t>(c)] / sd[static_cast<std::size_t>(c)] * static_cast<double>(g[static_cast<std::size_t>(c)]);
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i)
                expanded[static_cast<std::size_t>(off + i)] = scale * static_cast<double>(xv[off + i]) + shift;
        }
    return detail::max_abs_diff(engine, expanded);
}

// IN: gamma/sd_bc * X + (beta - mu_bc/sd_bc * gamma)
template <typename T>
double rescaling_form_check(InstanceNorm<T>& layer, const Tensor<T>& x) {
    NoGradScope<T> ng;
    Tensor<T> engine = layer.forward(x, Mode::train);

    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    auto g = layer.gamma().values();
    auto be = layer.beta().values();
    auto xv = x.values();
    std::vector<double> expanded(static_cast<std::size_t>(x.numel()));
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
            double m = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) m += static_cast<double>(xv[off + i]);
            m /= static_cast<double>(hw);
            double v = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) {
                double d = static_cast<double>(xv[off + i]) - m;
                v += d * d;
            }
            double sd = std::sqrt(v / static_cast<double>(hw) + static_cast<double>(layer.eps()));
            double scale = static_cast<double>(g[static_cast<std::size_t>(c)]) / sd;
            double shift = static_cast<double>(be[static_cast<std::size_t>(c)]) -
                           m / sd * static_cast<double>(g[static_cast<std::size_t>(c)]);
            for (std::int64_t i = 0; i < hw; ++i)
                expanded[static_cast<std::size_t>(off + i)] = scale * static_cast<double>(xv[off + i]) + shift;
        }
    return detail::max_abs_diff(engine, expanded);
}

// IEBN: gamma*delta/sd * X + (beta - mu/sd * gamma*delta), delta from the raw input
template <typename T>
double rescaling_form_check(Iebn<T>& layer, const Tensor<T>& x) {
    if (layer.position() != ExcitePos::gamma_only)
        throw ConfigError("rescaling form stated for gamma-gated IEBN");
    NoGradScope<T> ng;
    auto saved_mean = layer.bn().running_mean();
    auto saved_var = layer.bn().running_var();
    Tensor<T> engine = layer.forward(x, Mode::train);
    layer.bn().set_running(saved_mean, saved_var);

    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<double> mu, sd;
    detail::flat_batch_stats(x.values(), B, C, H, W, layer.bn().eps(), mu, sd);
    auto g = layer.bn().gamma().values();
    auto be = layer.bn().beta().values();
    auto gh = layer.gamma_hat().values();
    auto bh = layer.beta_hat().values();
    auto xv = x.values();
    std::vector<double> expanded(static_cast<std::size_t>(x.numel()));
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
            double m = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) m += static_cast<double>(xv[off + i]);
            m /= static_cast<double>(hw);
            double delta = 1.0 / (1.0 + std::exp(-(static_cast<double>(gh[static_cast<std::size_t>(c)]) * m +
                                                   static_cast<double>(bh[static_cast<std::size_t>(c)]))));
            double gd = static_cast<double>(g[static_cast<std::size_t>(c)]) * delta;
            double scale = gd / sd[static_cast<std::size_t>(c)];
            double shift = static_cast<double>(be[static_cast<std::size_t>(c)]) -
                           mu[static_cast<std::size_t>(c)] / sd[static_cast<std::size_t>(c)] * gd;
            for (std::int64_t i = 0; i < hw; ++i)
                expanded[static_cast<std::size_t>(off + i)] = scale * static_cast<double>(xv[off + i]) + shift;
        }
    return detail::max_abs_diff(engine, expanded);
}

// BN+SE: gamma*d/sd * X + (beta*d - mu/sd * gamma*d), d from the BN output
template <typename T>
double rescaling_form_check(BnSe<T>& layer, const Tensor<T>& x) {
    NoGradScope<T> ng;
    auto saved_mean = layer.bn().running_mean();
    auto saved_var = layer.bn().running_var();
    Tensor<T> engine = layer.forward(x, Mode::train);
    layer.bn().set_running(saved_mean, saved_var);

    const int B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int hidden = layer.se().hidden();
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    std::vector<double> mu, sd;
    detail::flat_batch_stats(x.values(), B, C, H, W, layer.bn().eps(), mu, sd);
    auto g = layer.bn().gamma().values();
    auto be = layer.bn().beta().values();
    auto w1 = layer.se().fc1().values();
    auto w2 = layer.se().fc2().values();
    auto xv = x.values();
    std::vector<double> expanded(static_cast<std::size_t>(x.numel()));
    for (int b = 0; b < B; ++b) {
        // squeeze the BN output of instance b
        std::vector<double> mhat(static_cast<std::size_t>(C));
        for (int c = 0; c < C; ++c) {
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
            double acc = 0.0;
            for (std::int64_t i = 0; i < hw; ++i) {
                double xh = (static_cast<double>(xv[off + i]) - mu[static_cast<std::size_t>(c)]) / sd[static_cast<std::size_t>(c)];
                acc += xh * static_cast<double>(g[static_cast<std::size_t>(c)]) + static_cast<double>(be[static_cast<std::size_t>(c)]);
            }
            mhat[static_cast<std::size_t>(c)] = acc / static_cast<double>(hw);
        }
        std::vector<double> hid(static_cast<std::size_t>(hidden), 0.0);
        for (int h = 0; h < hidden; ++h) {
            double acc = 0.0;
            for (int c = 0; c < C; ++c)
                acc += static_cast<double>(w1[static_cast<std::size_t>(h) * C + c]) * mhat[static_cast<std::size_t>(c)];
            hid[static_cast<std::size_t>(h)] = acc > 0.0 ? acc : 0.0;
        }
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int h = 0; h < hidden; ++h)
                acc += static_cast<double>(w2[static_cast<std::size_t>(c) * hidden + h]) * hid[static_cast<std::size_t>(h)];
            double d = 1.0 / (1.0 + std::exp(-acc));
            double gd = static_cast<double>(g[static_cast<std::size_t>(c)]) * d;
            double scale = gd / sd[static_cast<std::size_t>(c)];
            double shift = static_cast<double>(be[static_cast<std::size_t>(c)]) * d -
                           mu[static_cast<std::size_t>(c)] / sd[static_cast<std::size_t>(c)] * gd;
            std::int64_t off = (static_cast<std::int64_t>(b) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i)
                expanded[static_cast<std::size_t>(off + i)] = scale * static_cast<double>(xv[off + i]) + shift;
        }
    }
    return detail::max_abs_diff(engine, expanded);
}

}  // namespace normlab
