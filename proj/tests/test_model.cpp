#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "aqfn/model.hpp"
#include "aqfn/rng.hpp"
#include "aqfn/tensor.hpp"

using namespace aqfn;

namespace {

ModelConfig tiny_config(BackboneProfile profile) {
    ModelConfig c;
    c.backbone_profile = profile;
    c.image_size = 16;
    c.sensor_dim = 3;
    c.embed_dim = 8;
    c.fusion_dim = 8;
    c.proj_hidden_dim = 8;
    c.dropout_rate = 0.3;
    c.alpha = 0.4;
    return c;
}

TensorPtr rand_input(std::vector<int> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    auto t = zeros(std::move(shape), false);
    for (double& v : t->data) v = rng.uniform(lo, hi);
    return t;
}

void zero_all(ParameterStore& store) {
    for (auto& [name, t] : store.params) {
        std::fill(t->data.begin(), t->data.end(), 0.0);
    }
}

// Finite differences on a handful of elements of every parameter tensor;
// probing all ~25k backbone weights end to end would dominate the suite.
double sampled_param_rel_err(ParameterStore& store,
                             const std::function<TensorPtr()>& make_loss, double h,
                             int probes_per_tensor, Rng& rng) {
    auto loss = make_loss();
    store.zero_grad();
    for (auto& [name, t] : store.params) t->grad.clear();
    backward(loss);
    double worst = 0.0;
    for (auto& [name, t] : store.params) {
        REQUIRE_MESSAGE(t->grad.size() == t->numel(), name.c_str());
        for (int p = 0; p < probes_per_tensor; ++p) {
            const std::size_t j =
                static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(t->numel()) - 1));
            const double saved = t->data[j];
            t->data[j] = saved + h;
            const double up = make_loss()->value();
            t->data[j] = saved - h;
            const double down = make_loss()->value();
            t->data[j] = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = t->grad[j];
            worst = std::max(worst, std::abs(numeric - analytic) /
                                        std::max({1e-3, std::abs(numeric), std::abs(analytic)}));
        }
    }
    return worst;
}

} // namespace

TEST_SUITE_BEGIN("config and parameters");

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.alpha = 1.5;
    CHECK_THROWS_AS(c.validate(), ParamError);
    c.alpha = 0.4;
    c.dropout_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), ParamError);
    c.dropout_rate = 0.3;
    c.sensor_dim = 0;
    CHECK_THROWS_AS(c.validate(), ParamError);
    CHECK(backbone_profile_from_string("micro_residual") == BackboneProfile::micro_residual);
    CHECK_THROWS_AS(backbone_profile_from_string("resnet18"), ParamError);
    CHECK(std::string(backbone_profile_name(BackboneProfile::micro_depthwise)) ==
          "micro_depthwise");
}

TEST_CASE("init is deterministic per seed with zero biases") {
    const ModelConfig c;
    auto a = init_params(c, Rng(42));
    auto b = init_params(c, Rng(42));
    REQUIRE(a.params.size() == b.params.size());
    for (const auto& [name, t] : a.params) {
        CHECK(t->data == b.at(name)->data);
        CHECK(t->requires_grad);
        if (name.size() > 5 && name.substr(name.size() - 5) == ".bias") {
            for (const double v : t->data) CHECK(v == 0.0);
        }
    }
    auto d = init_params(c, Rng(43));
    CHECK(a.at("proj.fc1.weight")->data != d.at("proj.fc1.weight")->data);
    CHECK_THROWS_AS(a.at("nope.weight"), ContractError);
}

TEST_CASE("weight variance tracks 2/fan_in") {
    PrecisionScope hp(Precision::high64);
    const ModelConfig c; // proj.fc1.weight is 64x256 = 16384 draws, fan_in 64
    auto store = init_params(c, Rng(7));
    const auto& w = store.at("proj.fc1.weight");
    REQUIRE(w->numel() >= 10000);
    double m = 0.0, v = 0.0;
    for (const double x : w->data) m += x;
    m /= static_cast<double>(w->numel());
    for (const double x : w->data) v += (x - m) * (x - m);
    v /= static_cast<double>(w->numel());
    const double expect = 2.0 / 64.0;
    CHECK(v > 0.8 * expect);
    CHECK(v < 1.2 * expect);
}

TEST_CASE("depthwise profile has strictly fewer backbone parameters than plain") {
    auto count_backbone = [](const ParameterStore& s) {
        std::size_t n = 0;
        for (const auto& [name, t] : s.params) {
            if (name.rfind("backbone.", 0) == 0) n += t->numel();
        }
        return n;
    };
    const ModelConfig base;
    ModelConfig cd = base;
    cd.backbone_profile = BackboneProfile::micro_depthwise;
    ModelConfig cr = base;
    cr.backbone_profile = BackboneProfile::micro_residual;
    const auto plain = count_backbone(init_params(base, Rng(1)));
    const auto dw = count_backbone(init_params(cd, Rng(1)));
    const auto res = count_backbone(init_params(cr, Rng(1)));
    CHECK(dw < plain);
    CHECK(res > plain); // skip blocks add weights on top of the plain stages
    CHECK(init_params(base, Rng(1)).scalar_count() > plain);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("encoders");

TEST_CASE("image embedding has the configured width and is nonnegative") {
    ModelConfig c; // default 64px, embed 128
    auto store = init_params(c, Rng(3));
    Rng rng(4);
    auto x = rand_input({3, 64, 64}, rng, 0.0, 1.0);
    const ImageEncoding enc = encode_image(x, store, c, Mode::eval);
    REQUIRE(enc.h_i->shape == std::vector<int>{1, 128});
    for (const double v : enc.h_i->data) CHECK(v >= 0.0);
    REQUIRE(enc.conv_maps->shape == std::vector<int>{1, kBackboneOutChannels, 4, 4});

    CHECK_THROWS_AS(encode_image(rand_input({3, 32, 32}, rng), store, c, Mode::eval), ShapeError);
    CHECK_THROWS_AS(encode_image(rand_input({1, 64, 64}, rng), store, c, Mode::eval), ShapeError);
}

TEST_CASE("zero weights map any image to the zero embedding") {
    const ModelConfig c = tiny_config(BackboneProfile::micro_plain);
    auto store = init_params(c, Rng(3));
    zero_all(store);
    Rng rng(5);
    auto x = rand_input({3, 16, 16}, rng, 0.0, 1.0);
    const ImageEncoding enc = encode_image(x, store, c, Mode::eval);
    for (const double v : enc.h_i->data) CHECK(v == 0.0);
}

TEST_CASE("sensor encoder basics") {
    ModelConfig c;
    auto store = init_params(c, Rng(6));
    Rng rng(7);
    auto zero_x = zeros({1, 6});
    auto h = encode_sensors(zero_x, store, c, Mode::eval, rng);
    REQUIRE(h->shape == std::vector<int>{1, 128});
    for (const double v : h->data) CHECK(v == 0.0); // zero input, zero bias

    auto x = rand_input({1, 6}, rng);
    auto he = encode_sensors(x, store, c, Mode::eval, rng);
    for (const double v : he->data) CHECK(v >= 0.0);
    CHECK_THROWS_AS(encode_sensors(rand_input({1, 5}, rng), store, c, Mode::eval, rng),
                    ShapeError);
}

TEST_CASE("fusion concatenates the image block first") {
    ModelConfig c = tiny_config(BackboneProfile::micro_plain);
    c.embed_dim = 2;
    c.fusion_dim = 4;
    c.dropout_rate = 0.0;
    auto store = init_params(c, Rng(8));
    // identity fusion weight exposes the concatenation order directly
    auto& w = store.at("fusion.weight"); // [4,4]
    std::fill(w->data.begin(), w->data.end(), 0.0);
    for (int i = 0; i < 4; ++i) w->data[i * 4 + i] = 1.0;
    std::fill(store.at("fusion.bias")->data.begin(), store.at("fusion.bias")->data.end(), 0.0);

    auto h_i = tensor({0.3, 0.7}, {1, 2}, false);
    auto h_s = tensor({0.1, 0.9}, {1, 2}, false);
    Rng rng(9);
    auto fused = fuse(h_i, h_s, store, c, Mode::eval, rng);
    REQUIRE(fused->shape == std::vector<int>{1, 4});
    CHECK(fused->data[0] == doctest::Approx(0.3));
    CHECK(fused->data[1] == doctest::Approx(0.7));
    CHECK(fused->data[2] == doctest::Approx(0.1));
    CHECK(fused->data[3] == doctest::Approx(0.9));

    auto zf = fuse(zeros({1, 2}), zeros({1, 2}), store, c, Mode::eval, rng);
    for (const double v : zf->data) CHECK(v == 0.0);
    CHECK_THROWS_AS(fuse(tensor({0.1}, {1, 1}, false), h_s, store, c, Mode::eval, rng),
                    ShapeError);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("forward");

TEST_CASE("zero-initialized parameters predict zero") {
    const ModelConfig c = tiny_config(BackboneProfile::micro_plain);
    auto store = init_params(c, Rng(10));
    zero_all(store);
    Rng rng(11);
    auto x_i = rand_input({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto x_s = rand_input({1, 3}, rng);
    const ForwardOutput out = forward(x_i, x_s, store, c, Mode::eval, rng);
    CHECK(out.y_hat->value() == 0.0);
    for (const double v : out.x_hat_s->data) CHECK(v == 0.0);
}

TEST_CASE("sensor input influences the aqi head but never the sensor head") {
    PrecisionScope hp(Precision::high64);
    const ModelConfig c = tiny_config(BackboneProfile::micro_plain);
    auto store = init_params(c, Rng(12));
    Rng rng(13);
    auto x_i = rand_input({1, 3, 16, 16}, rng, 0.0, 1.0);
    auto x_s1 = rand_input({1, 3}, rng);
    auto x_s2 = rand_input({1, 3}, rng);
    Rng r1(1), r2(1);
    const ForwardOutput a = forward(x_i, x_s1, store, c, Mode::eval, r1);
    const ForwardOutput b = forward(x_i, x_s2, store, c, Mode::eval, r2);
    CHECK(a.y_hat->value() != b.y_hat->value());
    CHECK(a.x_hat_s->data == b.x_hat_s->data);
    REQUIRE(a.x_hat_s->shape == std::vector<int>{1, 3});
}

TEST_CASE("batched forward preserves per-sample results and order") {
    PrecisionScope hp(Precision::high64);
    const ModelConfig c = tiny_config(BackboneProfile::micro_residual);
    auto store = init_params(c, Rng(14));
    Rng rng(15);
    const int B = 3;
    auto x_i = rand_input({B, 3, 16, 16}, rng, 0.0, 1.0);
    auto x_s = rand_input({B, 3}, rng);
    Rng reval(0);
    const ForwardOutput batch = forward(x_i, x_s, store, c, Mode::eval, reval);
    REQUIRE(batch.y_hat->shape == std::vector<int>{B, 1});
    REQUIRE(batch.x_hat_s->shape == std::vector<int>{B, 3});
    const std::size_t img_block = 3 * 16 * 16;
    for (int b = 0; b < B; ++b) {
        std::vector<double> img(x_i->data.begin() + b * img_block,
                                x_i->data.begin() + (b + 1) * img_block);
        std::vector<double> sens(x_s->data.begin() + b * 3, x_s->data.begin() + (b + 1) * 3);
        Rng r1(0);
        const ForwardOutput one = forward(tensor(std::move(img), {1, 3, 16, 16}),
                                          tensor(std::move(sens), {1, 3}), store, c,
                                          Mode::eval, r1);
        CHECK(batch.y_hat->data[b] == doctest::Approx(one.y_hat->value()).epsilon(1e-12));
        for (int j = 0; j < 3; ++j) {
            CHECK(batch.x_hat_s->data[b * 3 + j] ==
                  doctest::Approx(one.x_hat_s->data[j]).epsilon(1e-12));
        }
    }
}

TEST_CASE("residual blocks initialized to zero reproduce the plain backbone") {
    PrecisionScope hp(Precision::high64);
    ModelConfig cr = tiny_config(BackboneProfile::micro_residual);
    ModelConfig cp = tiny_config(BackboneProfile::micro_plain);
    auto store_r = init_params(cr, Rng(16));
    auto store_p = init_params(cp, Rng(16)); // stage streams share names, hence values
    for (const char* name : {"backbone.block1.conv1", "backbone.block1.conv2",
                             "backbone.block2.conv1", "backbone.block2.conv2"}) {
        auto& t = store_r.at(name);
        std::fill(t->data.begin(), t->data.end(), 0.0);
    }
    Rng rng(17);
    auto x = rand_input({1, 3, 16, 16}, rng, 0.0, 1.0);
    const ImageEncoding er = encode_image(x, store_r, cr, Mode::eval);
    const ImageEncoding ep = encode_image(x, store_p, cp, Mode::eval);
    CHECK(er.conv_maps->data == ep.conv_maps->data);
    CHECK(er.h_i->data == ep.h_i->data);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("composite loss");

TEST_CASE("mixing arithmetic") {
    ForwardOutput out;
    out.y_hat = tensor({2.0, 0.0}, {2, 1}, false);
    out.x_hat_s = tensor({1.0, 0.0, 1.0, 0.0}, {2, 2}, false);
    auto y = zeros({2, 1});
    auto xs = zeros({2, 2});
    const CompositeLoss l = composite_loss(out, y, xs, 0.4);
    CHECK(l.aqi->value() == doctest::Approx(2.0));    // (4 + 0) / 2
    CHECK(l.sensor->value() == doctest::Approx(1.0)); // each row |r|^2 = 1
    CHECK(l.total->value() == doctest::Approx(1.6));  // 0.6*2 + 0.4*1

    const CompositeLoss perfect = composite_loss(out, out.y_hat, out.x_hat_s, 0.4);
    CHECK(perfect.total->value() == 0.0);
    CHECK(perfect.aqi->value() == 0.0);
    CHECK(perfect.sensor->value() == 0.0);

    const CompositeLoss a0 = composite_loss(out, y, xs, 0.0);
    CHECK(a0.total->value() == a0.aqi->value());
    CHECK_THROWS_AS(composite_loss(out, y, xs, 1.0001), ParamError);
    CHECK_THROWS_AS(composite_loss(out, zeros({3, 1}), xs, 0.4), ShapeError);
}

TEST_CASE("total is affine in alpha with slope sensor minus aqi") {
    PrecisionScope hp(Precision::high64);
    ForwardOutput out;
    Rng rng(18);
    out.y_hat = rand_input({4, 1}, rng);
    out.x_hat_s = rand_input({4, 5}, rng);
    auto y = rand_input({4, 1}, rng);
    auto xs = rand_input({4, 5}, rng);
    const double la = composite_loss(out, y, xs, 0.0).aqi->value();
    const double ls = composite_loss(out, y, xs, 0.0).sensor->value();
    for (const double alpha : {0.0, 0.25, 0.4, 0.75, 1.0}) {
        const CompositeLoss l = composite_loss(out, y, xs, alpha);
        CHECK(l.total->value() ==
              doctest::Approx((1 - alpha) * la + alpha * ls).epsilon(1e-12));
    }
    const double slope = composite_loss(out, y, xs, 1.0).total->value() -
                         composite_loss(out, y, xs, 0.0).total->value();
    CHECK(slope == doctest::Approx(ls - la).epsilon(1e-12));
}

TEST_CASE("sensor loss never reaches the sensor encoder weights") {
    PrecisionScope hp(Precision::high64);
    const ModelConfig c = tiny_config(BackboneProfile::micro_plain);
    auto store = init_params(c, Rng(19));
    Rng rng(20);
    auto x_i = rand_input({2, 3, 16, 16}, rng, 0.0, 1.0);
    auto x_s = rand_input({2, 3}, rng);
    auto y = rand_input({2, 1}, rng);

    Rng fwd_rng(21);
    const ForwardOutput out = forward(x_i, x_s, store, c, Mode::eval, fwd_rng);
    const CompositeLoss l = composite_loss(out, y, x_s, 0.4);

    store.zero_grad();
    for (auto& [name, t] : store.params) t->grad.clear();
    backward(l.sensor);
    CHECK(store.at("sensor_enc.weight")->grad.empty()); // not even reached
    CHECK(store.at("fusion.weight")->grad.empty());
    CHECK(store.at("head_sensor.weight")->grad.size() ==
          store.at("head_sensor.weight")->numel());

    // with alpha = 1 the aqi branch is scaled to zero: gradient reaches the
    // encoder but is exactly zero
    for (auto& [name, t] : store.params) t->grad.clear();
    Rng fwd2(21);
    const ForwardOutput out2 = forward(x_i, x_s, store, c, Mode::eval, fwd2);
    backward(composite_loss(out2, y, x_s, 1.0).total);
    const auto& g = store.at("sensor_enc.weight")->grad;
    REQUIRE(g.size() == store.at("sensor_enc.weight")->numel());
    for (const double v : g) CHECK(v == 0.0);
}

TEST_SUITE_END();

TEST_SUITE_BEGIN("end-to-end gradients");

TEST_CASE("sampled finite differences per profile") {
    PrecisionScope hp(Precision::high64);
    for (const BackboneProfile profile :
         {BackboneProfile::micro_plain, BackboneProfile::micro_residual,
          BackboneProfile::micro_depthwise}) {
        CAPTURE(backbone_profile_name(profile));
        const ModelConfig c = tiny_config(profile);
        auto store = init_params(c, Rng(22));
        Rng rng(23);
        auto x_i = rand_input({2, 3, 16, 16}, rng, 0.0, 1.0);
        auto x_s = rand_input({2, 3}, rng);
        auto y = rand_input({2, 1}, rng);
        auto make_loss = [&] {
            Rng fwd(5); // replayed so dropout masks are identical per probe
            const ForwardOutput out = forward(x_i, x_s, store, c, Mode::train, fwd);
            return composite_loss(out, y, x_s, c.alpha).total;
        };
        Rng probe_rng(24);
        CHECK(sampled_param_rel_err(store, make_loss, 1e-6, 5, probe_rng) < 1e-5);
    }
}

TEST_SUITE_END();
