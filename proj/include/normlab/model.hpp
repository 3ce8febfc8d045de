#pragma once

#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "normlab/norm_layers.hpp"

namespace normlab {

struct BlockSpec {
    enum class Kind { basic_residual, preact_residual };
    Kind kind = Kind::basic_residual;
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    NormLayerConfig norm;
    bool post_se = false;
};

// Desk-scale residual classifier: stages of basic blocks with a pluggable
// normalization slot at every site the reference backbones would place one.
struct ModelSpec {
    std::vector<int> stage_widths{16, 32, 64};
    int blocks_per_stage = 3;
    int num_classes = 10;
    int input_channels = 3;
    NormLayerConfig norm;
    bool post_block_se = false;  // SE after each block's last norm
    BlockSpec::Kind block_kind = BlockSpec::Kind::basic_residual;

    void validate() const {
        if (stage_widths.empty()) throw ConfigError("model needs at least one stage");
        if (blocks_per_stage < 1) throw ConfigError("model needs at least one block per stage");
        if (num_classes < 2) throw ConfigError("model needs at least two classes");
        if (input_channels < 1) throw ConfigError("model input channels must be positive");
        norm.validate();
    }
};

namespace detail {

template <typename T>
Tensor<T> kaiming_conv(int out_ch, int in_ch, int k, std::mt19937& rng) {
    T stddev = static_cast<T>(std::sqrt(2.0 / (static_cast<double>(out_ch) * k * k)));
    Tensor<T> w = Tensor<T>::randn(Shape{out_ch, in_ch, k, k}, rng, stddev);
    w.set_requires_grad();
    return w;
}

}  // namespace detail

template <typename T>
class ResidualBlock {
public:
    ResidualBlock(const BlockSpec& spec, std::mt19937& rng)
        : kind_(spec.kind),
          stride_(spec.stride),
          conv1_(detail::kaiming_conv<T>(spec.out_channels, spec.in_channels, 3, rng)),
          norm1_(NormLayer<T>::make(spec.kind == BlockSpec::Kind::preact_residual ? spec.in_channels
                                                                                  : spec.out_channels,
                                    spec.norm, rng)),
          conv2_(detail::kaiming_conv<T>(spec.out_channels, spec.out_channels, 3, rng)),
          norm2_(NormLayer<T>::make(spec.out_channels, spec.norm, rng)) {
        bool project = spec.stride != 1 || spec.in_channels != spec.out_channels;
        if (project) {
            shortcut_conv_ = detail::kaiming_conv<T>(spec.out_channels, spec.in_channels, 1, rng);
            if (kind_ == BlockSpec::Kind::basic_residual)
                shortcut_norm_.emplace(NormLayer<T>::make(spec.out_channels, spec.norm, rng));
        }
        if (spec.post_se) se_.emplace(spec.out_channels, spec.norm.se_reduction, rng);
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        if (kind_ == BlockSpec::Kind::basic_residual) {
            Tensor<T> h = relu(norm1_.forward(conv2d(x, conv1_, stride_, 1), mode));
            h = norm2_.forward(conv2d(h, conv2_, 1, 1), mode);
            if (se_) h = se_->forward(h);
            Tensor<T> s = x;
            if (shortcut_conv_.defined()) {
                s = conv2d(x, shortcut_conv_, stride_, 0);
                s = shortcut_norm_->forward(s, mode);
            }
            return relu(add(h, s));
        }
        // pre-activation: norm-relu-conv twice, plain additive shortcut
        Tensor<T> h = conv2d(relu(norm1_.forward(x, mode)), conv1_, stride_, 1);
        h = conv2d(relu(norm2_.forward(h, mode)), conv2_, 1, 1);
        if (se_) h = se_->forward(h);
        Tensor<T> s = shortcut_conv_.defined() ? conv2d(x, shortcut_conv_, stride_, 0) : x;
        return add(h, s);
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> p{&conv1_, &conv2_};
        for (auto* q : norm1_.params()) p.push_back(q);
        for (auto* q : norm2_.params()) p.push_back(q);
        if (shortcut_conv_.defined()) p.push_back(&shortcut_conv_);
        if (shortcut_norm_)
            for (auto* q : shortcut_norm_->params()) p.push_back(q);
        if (se_)
            for (auto* q : se_->params()) p.push_back(q);
        return p;
    }

    template <class Fn>
    void visit(Fn&& fn) {
        fn.conv("conv1", conv1_);
        fn.norm("norm1", norm1_);
        fn.conv("conv2", conv2_);
        fn.norm("norm2", norm2_);
        if (shortcut_conv_.defined()) fn.conv("shortcut_conv", shortcut_conv_);
        if (shortcut_norm_) fn.norm("shortcut_norm", *shortcut_norm_);
        if (se_) fn.se("se", *se_);
    }

private:
    BlockSpec::Kind kind_;
    int stride_;
    Tensor<T> conv1_;
    NormLayer<T> norm1_;
    Tensor<T> conv2_;
    NormLayer<T> norm2_;
    Tensor<T> shortcut_conv_;
    std::optional<NormLayer<T>> shortcut_norm_;
    std::optional<SeModule<T>> se_;
};

template <typename T>
class Model {
public:
    struct ParamGroup {
        std::string site;
        std::string type;  // conv | norm | se | linear
        std::size_t count;
    };

    static Model build(const ModelSpec& spec, unsigned seed) {
        spec.validate();
        return Model(spec, seed);
    }

    Tensor<T> forward(const Tensor<T>& x, Mode mode) {
        if (x.shape().rank() != 4 || x.shape()[1] != spec_.input_channels)
            throw ShapeError("model expects [B," + std::to_string(spec_.input_channels) + ",H,W], got " +
                             x.shape().str());
        Tensor<T> h = relu(stem_norm_->forward(conv2d(x, stem_conv_, 1, 1), mode));
        for (auto& b : blocks_) h = b.forward(h, mode);
        Tensor<T> pooled = avgpool_channel(h);
        return linear(pooled, head_w_, &head_b_);
    }

    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> p{&stem_conv_};
        for (auto* q : stem_norm_->params()) p.push_back(q);
        for (auto& b : blocks_)
            for (auto* q : b.params()) p.push_back(q);
        p.push_back(&head_w_);
        p.push_back(&head_b_);
        return p;
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for (auto* p : params()) n += static_cast<std::size_t>(p->numel());
        return n;
    }

    std::vector<ParamGroup> param_breakdown() {
        std::vector<ParamGroup> out;
        out.push_back({"stem.conv", "conv", static_cast<std::size_t>(stem_conv_.numel())});
        out.push_back({"stem.norm", "norm", stem_norm_->param_count()});
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            std::string prefix = "block" + std::to_string(i);
            BreakdownVisitor v{prefix, &out};
            blocks_[i].visit(v);
        }
        out.push_back({"head", "linear", static_cast<std::size_t>(head_w_.numel() + head_b_.numel())});
        return out;
    }

    // Channel width of every normalization site, in construction order.
    std::vector<int> norm_site_channels() {
        std::vector<int> out{stem_norm_->channels()};
        for (auto& b : blocks_) {
            ChannelVisitor v{&out};
            b.visit(v);
        }
        return out;
    }

    template <class Fn>
    void visit_state(Fn&& fn) {
        fn("stem.conv.weight", stem_conv_);
        stem_norm_->visit_state([&](const std::string& n, auto& t) { fn("stem.norm." + n, t); });
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            StateVisitor<Fn> v{"block" + std::to_string(i) + ".", &fn};
            blocks_[i].visit(v);
        }
        fn("head.weight", head_w_);
        fn("head.bias", head_b_);
    }

    const ModelSpec& spec() const { return spec_; }
    int num_norm_sites() { return static_cast<int>(norm_site_channels().size()); }

private:
    struct BreakdownVisitor {
        std::string prefix;
        std::vector<ParamGroup>* out;
        void conv(const std::string& n, Tensor<T>& t) {
            out->push_back({prefix + "." + n, "conv", static_cast<std::size_t>(t.numel())});
        }
        void norm(const std::string& n, NormLayer<T>& l) { out->push_back({prefix + "." + n, "norm", l.param_count()}); }
        void se(const std::string& n, SeModule<T>& s) { out->push_back({prefix + "." + n, "se", s.param_count()}); }
    };

    struct ChannelVisitor {
        std::vector<int>* out;
        void conv(const std::string&, Tensor<T>&) {}
        void norm(const std::string&, NormLayer<T>& l) { out->push_back(l.channels()); }
        void se(const std::string&, SeModule<T>&) {}
    };

    template <class Fn>
    struct StateVisitor {
        std::string prefix;
        Fn* fn;
        void conv(const std::string& n, Tensor<T>& t) { (*fn)(prefix + n + ".weight", t); }
        void norm(const std::string& n, NormLayer<T>& l) {
            l.visit_state([&](const std::string& s, auto& t) { (*fn)(prefix + n + "." + s, t); });
        }
        void se(const std::string& n, SeModule<T>& s) {
            s.visit_state([&](const std::string& k, auto& t) { (*fn)(prefix + n + "." + k, t); });
        }
    };

    Model(const ModelSpec& spec, unsigned seed) : spec_(spec) {
        std::mt19937 rng(seed);
        int w0 = spec.stage_widths[0];
        stem_conv_ = detail::kaiming_conv<T>(w0, spec.input_channels, 3, rng);
        stem_norm_.emplace(NormLayer<T>::make(w0, spec.norm, rng));
        int in_ch = w0;
        for (std::size_t s = 0; s < spec.stage_widths.size(); ++s) {
            int width = spec.stage_widths[s];
            for (int b = 0; b < spec.blocks_per_stage; ++b) {
                BlockSpec bs;
                bs.kind = spec.block_kind;
                bs.in_channels = in_ch;
                bs.out_channels = width;
                bs.stride = (s > 0 && b == 0) ? 2 : 1;
                bs.norm = spec.norm;
                bs.post_se = spec.post_block_se;
                blocks_.emplace_back(bs, rng);
                in_ch = width;
            }
        }
        // zero head: uniform logits at initialization
        head_w_ = Tensor<T>::zeros(Shape{spec.num_classes, in_ch});
        head_b_ = Tensor<T>::zeros(Shape{spec.num_classes});
        head_w_.set_requires_grad();
        head_b_.set_requires_grad();
    }

    ModelSpec spec_;
    Tensor<T> stem_conv_;
    std::optional<NormLayer<T>> stem_norm_;
    std::vector<ResidualBlock<T>> blocks_;
    Tensor<T> head_w_, head_b_;
};

}  // namespace normlab
