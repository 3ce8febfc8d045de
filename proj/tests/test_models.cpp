#include <doctest.h>

#include <cmath>
#include <random>

#include "normlab/model.hpp"
#include "normlab/nn.hpp"

using namespace normlab;

namespace {

ModelSpec tiny_spec(NormKind kind) {
    ModelSpec spec;
    spec.stage_widths = {4, 8};
    spec.blocks_per_stage = 1;
    spec.num_classes = 5;
    spec.norm.kind = kind;
    return spec;
}

}  // namespace

TEST_CASE("forward shape contract") {
    ModelSpec spec;  // reference: 16/32/64 x3, 10 classes
    auto model = Model<float>::build(spec, 0);
    std::mt19937 rng(1);
    auto x = TensorF::randn(Shape{8, 3, 32, 32}, rng);
    auto logits = model.forward(x, Mode::train);
    CHECK(logits.shape() == Shape{8, 10});
}

TEST_CASE("zero-initialized head gives uniform logits and ln(C) loss") {
    auto model = Model<float>::build(tiny_spec(NormKind::batch), 3);
    std::mt19937 rng(2);
    auto x = TensorF::randn(Shape{4, 3, 32, 32}, rng);
    auto logits = model.forward(x, Mode::train);
    for (float v : logits.values()) CHECK(v == 0.0f);
    std::vector<int> labels{0, 1, 2, 3};
    auto loss = cross_entropy(logits, labels);
    CHECK(loss.item() == doctest::Approx(std::log(5.0)).epsilon(1e-6));
}

TEST_CASE("iebn variant costs exactly twice the norm-site channels") {
    for (auto kind : {BlockSpec::Kind::basic_residual, BlockSpec::Kind::preact_residual}) {
        ModelSpec bn_spec;  // full reference model
        bn_spec.block_kind = kind;
        auto bn_model = Model<float>::build(bn_spec, 0);
        ModelSpec ie_spec = bn_spec;
        ie_spec.norm.kind = NormKind::iebn;
        auto ie_model = Model<float>::build(ie_spec, 0);

        std::size_t channel_sum = 0;
        for (int c : bn_model.norm_site_channels()) channel_sum += static_cast<std::size_t>(c);
        CHECK(ie_model.param_count() - bn_model.param_count() == 2 * channel_sum);
        CHECK(ie_model.norm_site_channels() == bn_model.norm_site_channels());
    }
}

TEST_CASE("se variant adds exactly the per-site fc parameters") {
    ModelSpec base;
    auto plain = Model<float>::build(base, 0);
    ModelSpec se_spec = base;
    se_spec.post_block_se = true;
    auto se_model = Model<float>::build(se_spec, 0);

    std::size_t se_params = 0;
    for (const auto& g : se_model.param_breakdown())
        if (g.type == "se") se_params += g.count;
    CHECK(se_params > 0);
    CHECK(se_model.param_count() - plain.param_count() == se_params);
}

TEST_CASE("swapping the norm kind leaves conv and linear parameter counts unchanged") {
    auto count_by_type = [](Model<float>& m, const std::string& type) {
        std::size_t n = 0;
        for (const auto& g : m.param_breakdown())
            if (g.type == type) n += g.count;
        return n;
    };
    auto a = Model<float>::build(tiny_spec(NormKind::batch), 0);
    auto b = Model<float>::build(tiny_spec(NormKind::iebn), 0);
    auto c = Model<float>::build(tiny_spec(NormKind::instance), 0);
    auto d = Model<float>::build(tiny_spec(NormKind::bn_se), 0);
    for (const std::string type : {"conv", "linear"}) {
        CHECK(count_by_type(a, type) == count_by_type(b, type));
        CHECK(count_by_type(a, type) == count_by_type(c, type));
        CHECK(count_by_type(a, type) == count_by_type(d, type));
    }
}

TEST_CASE("degenerate model specs are rejected") {
    ModelSpec spec;
    spec.blocks_per_stage = 0;
    CHECK_THROWS_AS(Model<float>::build(spec, 0), ConfigError);
    spec = ModelSpec{};
    spec.stage_widths = {};
    CHECK_THROWS_AS(Model<float>::build(spec, 0), ConfigError);
    spec = ModelSpec{};
    spec.num_classes = 1;
    CHECK_THROWS_AS(Model<float>::build(spec, 0), ConfigError);
}

TEST_CASE("breakdown total matches param_count and floors at the head") {
    auto model = Model<float>::build(tiny_spec(NormKind::bn_se), 1);
    std::size_t total = 0;
    for (const auto& g : model.param_breakdown()) total += g.count;
    CHECK(total == model.param_count());
    CHECK(model.param_count() >= 5 * 8 + 5);  // at least the classifier head
}

TEST_CASE("frozen eval model is bit-deterministic") {
    auto model = Model<float>::build(tiny_spec(NormKind::iebn), 5);
    std::mt19937 rng(6);
    // one train pass to move the running statistics off their init
    model.forward(TensorF::randn(Shape{4, 3, 32, 32}, rng), Mode::train);
    auto x = TensorF::randn(Shape{2, 3, 32, 32}, rng);
    auto y1 = model.forward(x, Mode::eval);
    auto y2 = model.forward(x, Mode::eval);
    CHECK(std::equal(y1.values().begin(), y1.values().end(), y2.values().begin()));
}

TEST_CASE("a small sgd step on one sample decreases its loss") {
    for (auto kind : {NormKind::batch, NormKind::iebn}) {
        auto model = Model<float>::build(tiny_spec(kind), 7);
        std::mt19937 rng(8);
        auto x = TensorF::randn(Shape{1, 3, 32, 32}, rng);
        std::vector<int> labels{2};

        auto loss_value = [&](Mode mode) {
            NoGradScope<float> ng;
            return cross_entropy(model.forward(x, mode), labels).item();
        };

        // warm the head so the loss is not at the uniform saddle
        for (int i = 0; i < 2; ++i) {
            TapeScope<float> scope;
            auto loss = cross_entropy(model.forward(x, Mode::train), labels);
            scope.tape().backward(loss);
            Sgd<float> opt(model.params(), 0.05f, 0.0f, 0.0f);
            opt.step();
            opt.zero_grad();
        }

        bool decreased = false;
        for (float lr : {1e-3f, 1e-4f}) {
            float before = loss_value(Mode::train);
            std::vector<std::vector<float>> saved;
            for (auto* p : model.params()) saved.emplace_back(p->values().begin(), p->values().end());
            {
                TapeScope<float> scope;
                auto loss = cross_entropy(model.forward(x, Mode::train), labels);
                scope.tape().backward(loss);
                Sgd<float> opt(model.params(), lr, 0.0f, 0.0f);
                opt.step();
                opt.zero_grad();
            }
            float after = loss_value(Mode::train);
            if (after < before) {
                decreased = true;
                break;
            }
            auto params = model.params();
            for (std::size_t i = 0; i < params.size(); ++i)
                std::copy(saved[i].begin(), saved[i].end(), params[i]->values_mut().begin());
        }
        CHECK(decreased);
    }
}
