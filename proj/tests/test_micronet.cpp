#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "test_support.hpp"
#include "triage/micronet.hpp"

namespace triage::micronet {
namespace {

using triage::testing::max_relative_error;
using triage::testing::numeric_gradient;
using triage::testing::random_parameters;
using triage::testing::random_tensor;

NetworkSpec three_layer_conv_net() {
    NetworkSpec spec;
    spec.input_channels = 1;
    spec.layers = {LayerSpec::conv2d(1, 3, 3, 1, Padding::Same), LayerSpec::relu(),
                   LayerSpec::maxpool2d(2, 2, Padding::Valid),   LayerSpec::conv2d(3, 4, 3, 1, Padding::Same),
                   LayerSpec::relu(),                            LayerSpec::conv2d(4, 2, 2, 2, Padding::Valid),
                   LayerSpec::global_avg_pool(),                 LayerSpec::dense(2, 1),
                   LayerSpec::sigmoid()};
    return spec;
}

// Direct definition of a zero-padded strided cross-correlation.
Tensor naive_conv(const Tensor& in, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t pad_top,
                  std::size_t pad_left, std::size_t out_h, std::size_t out_w) {
    const std::size_t C = in.dim(0), OC = w.dim(0), K = w.dim(2);
    Tensor out({OC, out_h, out_w});
    for (std::size_t oc = 0; oc < OC; ++oc)
        for (std::size_t oy = 0; oy < out_h; ++oy)
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                double s = b[oc];
                for (std::size_t ic = 0; ic < C; ++ic)
                    for (std::size_t ky = 0; ky < K; ++ky)
                        for (std::size_t kx = 0; kx < K; ++kx) {
                            const long y = static_cast<long>(oy * stride + ky) - static_cast<long>(pad_top);
                            const long x = static_cast<long>(ox * stride + kx) - static_cast<long>(pad_left);
                            if (y < 0 || x < 0 || y >= static_cast<long>(in.dim(1)) || x >= static_cast<long>(in.dim(2)))
                                continue;
                            s += static_cast<double>(w[((oc * C + ic) * K + ky) * K + kx]) *
                                 in.at(ic, static_cast<std::size_t>(y), static_cast<std::size_t>(x));
                        }
                out.at(oc, oy, ox) = static_cast<float>(s);
            }
    return out;
}

TEST(Forward, IdentityConvolutionReturnsInput) {
    NetworkSpec spec{2, {LayerSpec::conv2d(2, 2, 1, 1, Padding::Valid)}};
    Parameters params;
    params.emplace(weight_name(0), Tensor({2, 2, 1, 1}, std::vector<float>{1, 0, 0, 1}));
    params.emplace(bias_name(0), Tensor({2}));
    const auto x = random_tensor({2, 5, 7}, 11);
    EXPECT_EQ(forward(spec, params, x).back(), x);
}

TEST(Forward, GlobalAveragePoolOfConstantMap) {
    NetworkSpec spec{3, {LayerSpec::global_avg_pool()}};
    Tensor x({3, 6, 4}, 0.375f);
    const auto y = forward(spec, Parameters{}, x).back();
    ASSERT_EQ(y.shape(), Shape({3}));
    for (std::size_t c = 0; c < 3; ++c) EXPECT_FLOAT_EQ(y[c], 0.375f);
}

TEST(Forward, SigmoidOfZeroIsHalf) {
    NetworkSpec spec{1, {LayerSpec::global_avg_pool(), LayerSpec::dense(1, 1), LayerSpec::sigmoid()}};
    Parameters params;
    params.emplace(weight_name(1), Tensor({1, 1}));
    params.emplace(bias_name(1), Tensor({1}));
    EXPECT_EQ(predict(spec, params, random_tensor({1, 3, 3}, 2)), 0.5);
}

TEST(Forward, ConvMatchesDirectDefinition) {
    for (auto [stride, padding, h, w] : std::vector<std::tuple<std::size_t, Padding, std::size_t, std::size_t>>{
             {1, Padding::Same, 7, 6}, {2, Padding::Same, 9, 8}, {1, Padding::Valid, 6, 6}, {2, Padding::Valid, 9, 7}}) {
        NetworkSpec spec{2, {LayerSpec::conv2d(2, 3, 4, stride, padding)}};
        const auto params = random_parameters(spec, 5);
        const auto x = random_tensor({2, h, w}, 6);
        const auto y = forward(spec, params, x).back();
        const auto wy = *window_for(h, 4, stride, padding);
        const auto wx = *window_for(w, 4, stride, padding);
        const auto expect = naive_conv(x, params.at(weight_name(0)), params.at(bias_name(0)), stride, wy.pad_before,
                                       wx.pad_before, wy.out, wx.out);
        ASSERT_EQ(y.shape(), expect.shape());
        for (std::size_t j = 0; j < y.size(); ++j) EXPECT_NEAR(y[j], expect[j], 1e-5);
    }
}

TEST(Forward, SamePaddingPutsExtraPixelBottomRight) {
    // Even kernel on stride 1 needs one pad pixel: it goes after the image.
    auto win = *window_for(5, 2, 1, Padding::Same);
    EXPECT_EQ(win.out, 5u);
    EXPECT_EQ(win.pad_before, 0u);
    win = *window_for(5, 4, 1, Padding::Same);
    EXPECT_EQ(win.pad_before, 1u);  // total 3 -> 1 before, 2 after
}

TEST(Forward, ShapeMismatchNamesLayer) {
    NetworkSpec spec{1, {LayerSpec::conv2d(1, 2, 5, 1, Padding::Valid), LayerSpec::relu()}};
    const auto params = init_parameters(spec, 1);
    try {
        forward(spec, params, Tensor({1, 3, 3}));
        FAIL() << "expected a shape error";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
        EXPECT_NE(std::string(e.what()).find("layer 0 (conv2d)"), std::string::npos) << e.what();
    }
    NetworkSpec bad{1, {LayerSpec::conv2d(1, 2, 3, 1, Padding::Same), LayerSpec::conv2d(3, 1, 3, 1, Padding::Same)}};
    try {
        validate(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("layer 1 (conv2d)"), std::string::npos) << e.what();
    }
}

TEST(Forward, RejectsNonFiniteInput) {
    const auto spec = three_layer_conv_net();
    const auto params = init_parameters(spec, 1);
    auto x = random_tensor({1, 8, 8}, 3);
    x[10] = std::numeric_limits<float>::quiet_NaN();
    try {
        forward(spec, params, x);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFinite);
    }
    x[10] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(forward(spec, params, x), Error);
}

TEST(Forward, ShapeAlgebraAndFixedLengthPooling) {
    NetworkSpec spec{1,
                     {LayerSpec::conv2d(1, 4, 3, 1, Padding::Same), LayerSpec::relu(),
                      LayerSpec::maxpool2d(2, 2, Padding::Valid), LayerSpec::conv2d(4, 5, 3, 1, Padding::Same),
                      LayerSpec::relu(), LayerSpec::maxpool2d(2, 2, Padding::Valid), LayerSpec::global_avg_pool(),
                      LayerSpec::dense(5, 1), LayerSpec::sigmoid()}};
    const auto d = downsampling_factor(spec);
    ASSERT_EQ(d, 4u);
    const auto params = init_parameters(spec, 9);
    CounterRng rng(99);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t h = 4 + rng.below(40), w = 4 + rng.below(40);
        const auto acts = forward(spec, params, random_tensor({1, h, w}, 100 + trial));
        const auto& trunk = acts[6];
        EXPECT_EQ(trunk.shape(), Shape({5, h / d, w / d})) << h << "x" << w;
        EXPECT_EQ(acts[7].shape(), Shape({5}));
        const double p = acts.back()[0];
        EXPECT_GT(p, 0.0);
        EXPECT_LT(p, 1.0);
    }
    EXPECT_EQ(min_input_size(spec), 4u);
}

TEST(Forward, OutputStaysInsideOpenUnitInterval) {
    NetworkSpec spec{1, {LayerSpec::dense(4, 1), LayerSpec::sigmoid()}};
    Parameters params;
    params.emplace(weight_name(0), Tensor({1, 4}, 1000.0f));
    params.emplace(bias_name(0), Tensor({1}));
    const Tensor big({1, 2, 2}, 50.0f), small({1, 2, 2}, -50.0f);
    const double hi = predict(spec, params, big), lo = predict(spec, params, small);
    EXPECT_LT(hi, 1.0);
    EXPECT_GT(lo, 0.0);
}

TEST(Loss, AnalyticValues) {
    EXPECT_NEAR(loss_bce(0.5, 1), std::log(2.0), 1e-15);
    EXPECT_NEAR(loss_bce(1 - kBceEpsilon, 1), kBceEpsilon, 1e-13);
    EXPECT_NEAR(loss_bce(0.2, 0), -std::log(0.8), 1e-15);
    EXPECT_NEAR(loss_bce(0.2, 0), 0.22314355131420976, 1e-15);
    // Clamped: no infinities at the ends.
    EXPECT_NEAR(loss_bce(0.0, 1), -std::log(kBceEpsilon), 1e-9);
    EXPECT_TRUE(std::isfinite(loss_bce(1.0, 0)));
    EXPECT_GE(loss_bce(0.9, 1), 0.0);
}

TEST(Backward, ZeroWeightDenseBiasGradientIsResidual) {
    NetworkSpec spec{1, {LayerSpec::global_avg_pool(), LayerSpec::dense(1, 1), LayerSpec::sigmoid()}};
    Parameters params;
    params.emplace(weight_name(1), Tensor({1, 1}));
    params.emplace(bias_name(1), Tensor({1}, 0.3f));
    const Tensor x({1, 4, 4}, 0.5f);
    const double p = predict(spec, params, x);
    for (int y : {0, 1}) {
        const auto g = backward(spec, params, x, y);
        EXPECT_NEAR(g.at(bias_name(1))[0], p - y, 1e-7);
        EXPECT_NEAR(g.at(weight_name(1))[0], (p - y) * 0.5, 1e-7);
    }
}

struct LayerCase {
    const char* name;
    NetworkSpec spec;
    Shape input;
};

std::vector<LayerCase> layer_cases() {
    using L = LayerSpec;
    return {
        {"conv_same_stride1", {2, {L::conv2d(2, 3, 3, 1, Padding::Same), L::global_avg_pool(), L::dense(3, 1), L::sigmoid()}}, {2, 6, 5}},
        {"conv_same_stride2_even_kernel", {1, {L::conv2d(1, 2, 4, 2, Padding::Same), L::global_avg_pool(), L::dense(2, 1), L::sigmoid()}}, {1, 7, 8}},
        {"conv_valid_stride2", {1, {L::conv2d(1, 2, 3, 2, Padding::Valid), L::global_avg_pool(), L::dense(2, 1), L::sigmoid()}}, {1, 9, 8}},
        {"relu", {1, {L::conv2d(1, 3, 3, 1, Padding::Same), L::relu(), L::global_avg_pool(), L::dense(3, 1), L::sigmoid()}}, {1, 6, 6}},
        {"maxpool_valid", {1, {L::conv2d(1, 2, 3, 1, Padding::Same), L::maxpool2d(2, 2, Padding::Valid), L::global_avg_pool(), L::dense(2, 1), L::sigmoid()}}, {1, 8, 7}},
        {"maxpool_same_overlapping", {1, {L::conv2d(1, 2, 3, 1, Padding::Same), L::maxpool2d(3, 2, Padding::Same), L::global_avg_pool(), L::dense(2, 1), L::sigmoid()}}, {1, 7, 7}},
        {"dense_flatten", {1, {L::dense(12, 3), L::sigmoid(), L::dense(3, 1), L::sigmoid()}}, {1, 3, 4}},
        {"sigmoid_mid_network", {1, {L::conv2d(1, 2, 3, 1, Padding::Same), L::sigmoid(), L::global_avg_pool(), L::dense(2, 1), L::sigmoid()}}, {1, 5, 5}},
    };
}

TEST(Backward, EveryLayerKindMatchesFiniteDifferences) {
    for (const auto& c : layer_cases()) {
        for (std::uint64_t seed : {1u, 2u, 3u}) {
            const auto params = random_parameters(c.spec, seed * 31);
            const auto x = random_tensor<double>(c.input, seed * 17);
            const auto p64 = cast_parameters<double>(params);
            for (int label : {0, 1}) {
                const auto analytic = backward(c.spec, p64, x, label);
                const auto numeric = numeric_gradient(c.spec, p64, x, label, 1e-3);
                EXPECT_LT(max_relative_error(analytic, numeric), 1e-4) << c.name << " seed " << seed;
            }
        }
    }
}

TEST(Backward, MaxPoolTieRoutesGradientToFirstElement) {
    // Channel 0 feeds a tied 2x2 window; channel 1 only reveals (through the
    // weight gradient) which position received the upstream gradient.
    NetworkSpec spec{2,
                     {LayerSpec::conv2d(2, 1, 1, 1, Padding::Valid), LayerSpec::maxpool2d(2, 2, Padding::Valid),
                      LayerSpec::global_avg_pool(), LayerSpec::dense(1, 1), LayerSpec::sigmoid()}};
    Parameters params;
    params.emplace(weight_name(0), Tensor({1, 2, 1, 1}, std::vector<float>{1, 0}));
    params.emplace(bias_name(0), Tensor({1}));
    params.emplace(weight_name(3), Tensor({1, 1}, 1.0f));
    params.emplace(bias_name(3), Tensor({1}));
    const Tensor x({2, 2, 2}, std::vector<float>{1, 1, 1, 1, 10, 20, 30, 40});
    const double p = predict(spec, params, x);
    const auto g = backward(spec, params, x, 1);
    EXPECT_NEAR(g.at(weight_name(0))[1], (p - 1) * 10, 1e-6);
}

TEST(Backward, DuplicatedBatchEqualsSingleSample) {
    const auto spec = three_layer_conv_net();
    const auto params = random_parameters(spec, 4);
    const auto x = random_tensor({1, 8, 8}, 8);
    const auto single = backward(spec, params, x, 1);
    const Tensor* batch[] = {&x, &x};
    const int labels[] = {1, 1};
    const auto b = batch_gradient<float>(spec, params, batch, labels);
    for (const auto& [name, t] : single)
        for (std::size_t j = 0; j < t.size(); ++j) EXPECT_FLOAT_EQ(b.grads.at(name)[j], t[j]) << name;
    EXPECT_NEAR(b.mean_loss, loss_bce(predict(spec, params, x), 1), 1e-12);
}

TEST(Sgd, StepDefinitionAndFixedPoint) {
    Parameters theta, grad, zero;
    theta.emplace("w", Tensor({1}, 1.0f));
    grad.emplace("w", Tensor({1}, 0.5f));
    zero.emplace("w", Tensor({1}, 0.0f));
    EXPECT_FLOAT_EQ(sgd_step(theta, grad, 0.1).at("w")[0], 0.95f);
    EXPECT_EQ(sgd_step(theta, zero, 0.1), theta);
    EXPECT_THROW(sgd_step(theta, grad, 0.0), Error);
    Parameters wrong;
    wrong.emplace("w", Tensor({2}));
    EXPECT_THROW(sgd_step(theta, wrong, 0.1), Error);
}

TEST(Sgd, TwoStepsOnQuadratic) {
    // f(theta) = theta^2, gradient 2*theta: each step multiplies theta by (1 - 2*lr).
    Parameters theta;
    theta.emplace("w", Tensor({1}, 1.0f));
    for (int i = 0; i < 2; ++i) {
        Parameters g;
        g.emplace("w", Tensor({1}, 2.0f * theta.at("w")[0]));
        theta = sgd_step(theta, g, 0.1);
    }
    EXPECT_NEAR(theta.at("w")[0], 0.64, 1e-6);
}

TEST(Sgd, MomentumAccumulatesVelocity) {
    Parameters theta, g;
    theta.emplace("w", Tensor({1}, 1.0f));
    g.emplace("w", Tensor({1}, 1.0f));
    SgdOptimizer opt(0.9);
    opt.step(theta, g, 0.1);  // v = 1, theta = 0.9
    opt.step(theta, g, 0.1);  // v = 1.9, theta = 0.71
    EXPECT_NEAR(theta.at("w")[0], 0.71, 1e-6);
    SgdOptimizer frozen_opt(0.9);
    Parameters t2 = theta;
    frozen_opt.step(t2, g, 0.1, {"w"});
    EXPECT_EQ(t2, theta);
}

TEST(Init, DeterministicAndBounded) {
    const auto spec = three_layer_conv_net();
    const auto a = init_parameters(spec, 7), b = init_parameters(spec, 7), c = init_parameters(spec, 8);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
    const auto& w = a.at(weight_name(0));  // 1 -> 3 channels, 3x3
    const double limit = std::sqrt(6.0 / (9.0 + 27.0));
    for (float v : w.data()) EXPECT_LE(std::abs(v), limit);
    for (float v : a.at(bias_name(0)).data()) EXPECT_EQ(v, 0.0f);
}

TEST(GradCheck, LinearModelIsNearlyExact) {
    NetworkSpec spec{1, {LayerSpec::dense(16, 1), LayerSpec::sigmoid()}};
    const auto params = random_parameters(spec, 3);
    const auto x = random_tensor({1, 4, 4}, 4);
    EXPECT_LT(grad_check(spec, params, x, 1, 1e-5).max_relative_error, 1e-8);
    EXPECT_LT(grad_check(spec, params, x, 0, 1e-5).max_relative_error, 1e-8);
}

TEST(GradCheck, RandomThreeLayerConvNet) {
    const auto spec = three_layer_conv_net();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const auto params = init_parameters(spec, seed);
        const auto x = random_tensor({1, 8, 8}, 1000 + seed);
        const auto r = grad_check(spec, params, x, static_cast<int>(seed % 2));
        EXPECT_LT(r.max_relative_error, 1e-4) << "seed " << seed << " worst " << r.worst_parameter;
    }
}

TEST(GradCheck, DetectsCorruptedGradient) {
    const auto spec = three_layer_conv_net();
    const auto params = init_parameters(spec, 2);
    const auto x = random_tensor<double>({1, 8, 8}, 5);
    const auto p64 = cast_parameters<double>(params);
    auto grads = backward(spec, p64, x, 1);
    grads.at(weight_name(3))[2] += 0.1;
    const auto r = grad_check_against(spec, p64, x, 1, grads, 1e-3);
    EXPECT_GT(r.max_relative_error, 1e-2);
    EXPECT_EQ(r.worst_parameter, weight_name(3));
    EXPECT_EQ(r.worst_index, 2u);
}

TEST(Determinism, RepeatedTrainingStepsAreBitIdentical) {
    const auto spec = three_layer_conv_net();
    auto run = [&] {
        auto params = init_parameters(spec, 21);
        SgdOptimizer opt;
        for (int step = 0; step < 5; ++step) {
            const auto x = random_tensor({1, 8, 8}, 300 + step);
            opt.step(params, backward(spec, params, x, step % 2), 0.05);
        }
        return params;
    };
    EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace triage::micronet
