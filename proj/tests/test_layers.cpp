#include <catch2/catch_amalgamated.hpp>

#include "canalseg/layers.hpp"
#include "oracles.hpp"

using namespace canalseg;

TEST_CASE("conv3 forward") {
    SECTION("all-ones kernel counts the in-bounds neighborhood") {
        Tensor5D x({1, 1, 3, 3, 3});
        x.fill(1.0f);
        Conv3 conv(1, 1, 3);
        conv.w.value.fill(1.0f);
        const Tensor5D y = conv.forward(x);
        REQUIRE(y.at(0, 0, 1, 1, 1) == 27.0f);
        REQUIRE(y.at(0, 0, 0, 0, 0) == 8.0f);
        REQUIRE(y.at(0, 0, 0, 1, 1) == 18.0f);
    }
    SECTION("identity kernel reproduces the input") {
        Rng rng(31);
        const Tensor5D x = oracles::random_tensor({2, 1, 4, 5, 6}, rng);
        Conv3 conv(1, 1, 3);
        conv.w.value.at(0, 0, 1, 1, 1) = 1.0f;
        const Tensor5D y = conv.forward(x);
        REQUIRE(oracles::max_abs_diff(x, y) == 0.0);
    }
    SECTION("random case matches the direct-summation oracle") {
        Rng rng(32);
        const Tensor5D x = oracles::random_tensor({1, 2, 5, 5, 5}, rng);
        Conv3 conv(2, 3, 3);
        conv.init(rng);
        for (auto& b : conv.b.value.data) b = float(rng.uniform(-0.5, 0.5));
        const Tensor5D y = conv.forward(x);
        const Tensor5D ref = oracles::conv3_oracle(x, conv.w.value, conv.b.value, true);
        REQUIRE(oracles::max_abs_diff(y, ref) < 1e-5);
    }
    SECTION("wider rows exercise the vectorized path") {
        Rng rng(33);
        const Tensor5D x = oracles::random_tensor({2, 3, 6, 7, 9}, rng);
        Conv3 conv(3, 4, 3);
        conv.init(rng);
        const Tensor5D ref = oracles::conv3_oracle(x, conv.w.value, conv.b.value, true);
        REQUIRE(oracles::max_abs_diff(conv.forward(x), ref) < 1e-5);
    }
    SECTION("1x1x1 kernels mix channels pointwise") {
        Rng rng(34);
        const Tensor5D x = oracles::random_tensor({2, 4, 3, 3, 3}, rng);
        Conv3 conv(4, 2, 1);
        conv.init(rng);
        const Tensor5D ref = oracles::conv3_oracle(x, conv.w.value, conv.b.value, true);
        REQUIRE(oracles::max_abs_diff(conv.forward(x), ref) < 1e-5);
    }
    SECTION("valid padding shrinks the output") {
        Rng rng(35);
        const Tensor5D x = oracles::random_tensor({1, 2, 5, 6, 7}, rng);
        Conv3 conv(2, 2, 3, Padding::Valid);
        conv.init(rng);
        const Tensor5D y = conv.forward(x);
        REQUIRE(y.shape == Shape5{1, 2, 3, 4, 5});
        const Tensor5D ref = oracles::conv3_oracle(x, conv.w.value, conv.b.value, false);
        REQUIRE(oracles::max_abs_diff(y, ref) < 1e-5);
    }
    SECTION("channel mismatch is rejected") {
        Conv3 conv(2, 1, 3);
        Tensor5D x({1, 3, 4, 4, 4});
        REQUIRE_THROWS_AS(conv.forward(x), ShapeMismatch);
    }
}

TEST_CASE("conv3 adjoint identity") {
    // <conv(x), y> == <x, conv_backward(y)> with zero bias and shared weights.
    Rng rng(36);
    Conv3 conv(2, 3, 3);
    conv.init(rng);
    const Tensor5D x = oracles::random_tensor({1, 2, 4, 5, 6}, rng);
    const Tensor5D y = oracles::random_tensor({1, 3, 4, 5, 6}, rng);
    const Tensor5D cx = conv.forward(x);
    const Tensor5D aty = conv.backward(y);
    REQUIRE_THAT(oracles::dot(cx, y), Catch::Matchers::WithinAbs(oracles::dot(x, aty), 1e-4));
}

TEST_CASE("conv_transpose3") {
    SECTION("single input voxel broadcasts through the kernel") {
        Tensor5D x({1, 1, 1, 1, 1});
        x.data[0] = 3.0f;
        ConvTranspose3 up(1, 1);
        up.w.value.fill(1.0f);
        const Tensor5D y = up.forward(x);
        REQUIRE(y.shape == Shape5{1, 1, 2, 2, 2});
        for (float v : y.data) REQUIRE(v == 3.0f);
    }
    SECTION("zero input yields zero output") {
        Tensor5D x({1, 2, 3, 3, 3});
        ConvTranspose3 up(2, 1);
        Rng rng(37);
        up.init(rng);
        const Tensor5D y = up.forward(x);
        for (float v : y.data) REQUIRE(v == 0.0f);
    }
    SECTION("random case matches the scatter oracle") {
        Rng rng(38);
        const Tensor5D x = oracles::random_tensor({2, 3, 3, 4, 5}, rng);
        ConvTranspose3 up(3, 2);
        up.init(rng);
        for (auto& b : up.b.value.data) b = float(rng.uniform(-0.5, 0.5));
        const Tensor5D ref = oracles::conv_transpose3_oracle(x, up.w.value, up.b.value);
        REQUIRE(oracles::max_abs_diff(up.forward(x), ref) < 1e-5);
    }
    SECTION("forward and backward are numerically adjoint") {
        Rng rng(39);
        ConvTranspose3 up(2, 3);
        up.init(rng);
        const Tensor5D x = oracles::random_tensor({1, 2, 3, 3, 3}, rng);
        const Tensor5D y = oracles::random_tensor({1, 3, 6, 6, 6}, rng);
        const Tensor5D fx = up.forward(x);
        const Tensor5D aty = up.backward(y);
        REQUIRE_THAT(oracles::dot(fx, y), Catch::Matchers::WithinAbs(oracles::dot(x, aty), 1e-4));
    }
}

TEST_CASE("maxpool2") {
    SECTION("constant input pools to the constant at half dims") {
        Tensor5D x({1, 2, 4, 4, 4});
        x.fill(0.7f);
        MaxPool2 pool;
        const Tensor5D y = pool.forward(x);
        REQUIRE(y.shape == Shape5{1, 2, 2, 2, 2});
        for (float v : y.data) REQUIRE(v == 0.7f);
    }
    SECTION("a 2x2x2 block of 1..8 pools to 8") {
        Tensor5D x({1, 1, 2, 2, 2});
        for (int i = 0; i < 8; ++i) x.data[i] = float(i + 1);
        MaxPool2 pool;
        REQUIRE(pool.forward(x).data[0] == 8.0f);
    }
    SECTION("random tensors match the window-scan oracle") {
        Rng rng(41);
        const Tensor5D x = oracles::random_tensor({2, 3, 4, 6, 8}, rng);
        MaxPool2 pool;
        REQUIRE(oracles::max_abs_diff(pool.forward(x), oracles::maxpool2_oracle(x)) == 0.0);
    }
    SECTION("odd dims are rejected") {
        MaxPool2 pool;
        Tensor5D x({1, 1, 3, 4, 4});
        REQUIRE_THROWS_AS(pool.forward(x), OddDims);
    }
    SECTION("ties route the gradient to the lowest linear index") {
        Tensor5D x({1, 1, 2, 2, 2});
        x.fill(1.0f);
        MaxPool2 pool;
        pool.forward(x);
        Tensor5D gy({1, 1, 1, 1, 1});
        gy.data[0] = 5.0f;
        const Tensor5D gx = pool.backward(gy);
        REQUIRE(gx.data[0] == 5.0f);
        for (int i = 1; i < 8; ++i) REQUIRE(gx.data[i] == 0.0f);
    }
}

TEST_CASE("batchnorm") {
    SECTION("constant channel normalizes to zero in train mode") {
        Tensor5D x({2, 1, 2, 2, 2});
        x.fill(3.5f);
        BatchNorm bn(1);
        const Tensor5D y = bn.forward(x, true);
        for (float v : y.data) REQUIRE(v == 0.0f);
    }
    SECTION("gamma 0, beta 5 pins the output at 5") {
        Rng rng(42);
        Tensor5D x = oracles::random_tensor({1, 2, 2, 2, 2}, rng);
        BatchNorm bn(2);
        bn.gamma.value.fill(0.0f);
        bn.beta.value.fill(5.0f);
        const Tensor5D y = bn.forward(x, true);
        for (float v : y.data) REQUIRE(v == 5.0f);
    }
    SECTION("train-mode output is standardized per channel") {
        Rng rng(43);
        const Tensor5D x = oracles::random_tensor({2, 3, 4, 4, 4}, rng, -2.0, 5.0);
        BatchNorm bn(3);
        const Tensor5D y = bn.forward(x, true);
        const std::int64_t m = 2 * 4 * 4 * 4;
        for (int c = 0; c < 3; ++c) {
            double mean = 0.0, var = 0.0;
            for (int n = 0; n < 2; ++n)
                for (std::int64_t i = 0; i < 64; ++i) mean += y.plane(n, c)[i];
            mean /= double(m);
            for (int n = 0; n < 2; ++n)
                for (std::int64_t i = 0; i < 64; ++i) {
                    const double d = y.plane(n, c)[i] - mean;
                    var += d * d;
                }
            var /= double(m);
            REQUIRE(std::abs(mean) < 1e-4);
            REQUIRE(std::abs(var - 1.0) < 1e-3);
        }
    }
    SECTION("eval mode uses the running statistics") {
        Rng rng(44);
        BatchNorm bn(1);
        for (int i = 0; i < 50; ++i) {
            Tensor5D x = oracles::random_tensor({2, 1, 2, 2, 2}, rng, 2.0, 4.0);
            bn.forward(x, true);
        }
        Tensor5D probe({1, 1, 1, 1, 1});
        probe.data[0] = 3.0f;  // near the running mean
        const float y = bn.forward(probe, false).data[0];
        REQUIRE(std::abs(y) < 1.0f);
    }
}

TEST_CASE("activations") {
    SECTION("relu clamps negatives") {
        Tensor5D x({1, 1, 1, 1, 2});
        x.data = {-3.0f, 3.0f};
        ReLU relu;
        const Tensor5D y = relu.forward(x);
        REQUIRE(y.data[0] == 0.0f);
        REQUIRE(y.data[1] == 3.0f);
    }
    SECTION("sigmoid(0) is one half") {
        Tensor5D x({1, 1, 1, 1, 1});
        Sigmoid sig;
        REQUIRE(sig.forward(x).data[0] == 0.5f);
    }
    SECTION("sigmoid gradient at zero matches the central difference") {
        Sigmoid sig;
        auto value_at = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
        const double h = 1e-3;
        const double numeric = (value_at(h) - value_at(-h)) / (2 * h);

        Tensor5D x({1, 1, 1, 1, 1});
        sig.forward(x);
        Tensor5D gy({1, 1, 1, 1, 1});
        gy.data[0] = 1.0f;
        const double analytic = sig.backward(gy).data[0];
        REQUIRE_THAT(analytic, Catch::Matchers::WithinAbs(0.25, 1e-7));
        REQUIRE_THAT(analytic, Catch::Matchers::WithinAbs(numeric, 1e-6));
    }
}

TEST_CASE("dice loss") {
    SECTION("perfect binary overlap gives zero loss") {
        Rng rng(45);
        Tensor5D g = oracles::random_binary_tensor({1, 1, 5, 5, 8}, rng, 0.5);
        REQUIRE(dice_loss(g, g) == 0.0);
    }
    SECTION("all-zero prediction against 10 foreground voxels") {
        Tensor5D p({1, 1, 1, 2, 10});
        Tensor5D g({1, 1, 1, 2, 10});
        for (int i = 0; i < 10; ++i) g.data[i] = 1.0f;
        REQUIRE_THAT(dice_loss(p, g), Catch::Matchers::WithinAbs(1.0 - 1.0 / 11.0, 1e-9));
    }
    SECTION("analytic gradient matches central differences") {
        Rng rng(46);
        Tensor5D p = oracles::random_tensor({1, 1, 3, 3, 3}, rng, 0.05, 0.95);
        const Tensor5D g = oracles::random_binary_tensor({1, 1, 3, 3, 3}, rng);
        DiceLoss loss;
        loss.forward(p, g);
        const Tensor5D analytic = loss.backward();
        const double h = 1e-3;
        for (std::size_t i = 0; i < p.data.size(); i += 3) {
            const float orig = p.data[i];
            p.data[i] = float(orig + h);
            const double lp = dice_loss(p, g);
            p.data[i] = float(orig - h);
            const double lm = dice_loss(p, g);
            p.data[i] = orig;
            const double numeric = (lp - lm) / (2 * h);
            REQUIRE(grad_rel_err(analytic.data[i], numeric) < 1e-3);
        }
    }
    SECTION("loss stays inside [0,1] and is symmetric for binary inputs") {
        Rng rng(47);
        for (int trial = 0; trial < 20; ++trial) {
            const Tensor5D p = oracles::random_binary_tensor({1, 1, 4, 4, 4}, rng, 0.4);
            const Tensor5D g = oracles::random_binary_tensor({1, 1, 4, 4, 4}, rng, 0.2);
            const double l1 = dice_loss(p, g);
            const double l2 = dice_loss(g, p);
            REQUIRE(l1 >= 0.0);
            REQUIRE(l1 <= 1.0);
            REQUIRE(l1 == l2);
        }
    }
    SECTION("shape mismatch is rejected") {
        Tensor5D p({1, 1, 2, 2, 2}), g({1, 1, 2, 2, 3});
        REQUIRE_THROWS_AS(dice_loss(p, g), ShapeMismatch);
    }
}

namespace {

// Gradient-check head: fixed random +-1 projection of the sigmoid-squashed
// layer output. The analytic side runs the production layer; the
// finite-difference side evaluates a double-precision reference forward so
// the numeric derivative is not limited by float accumulation noise.
Tensor5D make_signs(Shape5 s, Rng& rng) {
    Tensor5D t(s);
    for (auto& v : t.data) v = rng.next_below(2) ? 1.0f : -1.0f;
    return t;
}

Tensor5D projection_grad(const Tensor5D& out, const Tensor5D& signs) {
    Tensor5D g(out.shape);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-double(out.data[i])));
        g.data[i] = static_cast<float>(double(signs.data[i]) * s * (1.0 - s));
    }
    return g;
}

}  // namespace

TEST_CASE("finite-difference gradient checks per layer") {
    Rng rng(48);

    SECTION("conv3, 3x3x3 and 1x1x1, including zero weights") {
        for (int variant = 0; variant < 3; ++variant) {
            const int k = variant == 1 ? 1 : 3;
            Conv3 conv(2, 2, k);
            if (variant != 2) conv.init(rng);  // variant 2 keeps zero weights
            Parameter input(Shape5{1, 2, 4, 4, 4});
            input.value = oracles::random_tensor(input.value.shape, rng);
            const Tensor5D signs = make_signs({1, 2, 4, 4, 4}, rng);

            auto ref_loss = [&]() {
                return oracles::projection_loss_ref(
                    oracles::conv3_ref(oracles::DTensor(input.value),
                                       oracles::DTensor(conv.w.value),
                                       oracles::DTensor(conv.b.value), true),
                    signs);
            };
            auto fwd_bwd = [&]() {
                const Tensor5D out = conv.forward(input.value);
                input.grad = conv.backward(projection_grad(out, signs));
                return 0.0;
            };
            const auto report = grad_check({&conv.w, &conv.b, &input}, fwd_bwd, ref_loss);
            INFO("variant " << variant << " max rel err " << report.max_rel_err);
            REQUIRE(report.passed(1e-3));
        }
    }
    SECTION("conv_transpose3") {
        ConvTranspose3 up(2, 2);
        up.init(rng);
        Parameter input(Shape5{1, 2, 2, 2, 2});
        input.value = oracles::random_tensor(input.value.shape, rng);
        const Tensor5D signs = make_signs({1, 2, 4, 4, 4}, rng);

        auto ref_loss = [&]() {
            return oracles::projection_loss_ref(
                oracles::conv_transpose3_ref(oracles::DTensor(input.value),
                                             oracles::DTensor(up.w.value),
                                             oracles::DTensor(up.b.value)),
                signs);
        };
        auto fwd_bwd = [&]() {
            const Tensor5D out = up.forward(input.value);
            input.grad = up.backward(projection_grad(out, signs));
            return 0.0;
        };
        const auto report = grad_check({&up.w, &up.b, &input}, fwd_bwd, ref_loss);
        INFO("max rel err " << report.max_rel_err);
        REQUIRE(report.passed(1e-3));
    }
    SECTION("batchnorm in train mode") {
        BatchNorm bn(2);
        Parameter input(Shape5{2, 2, 3, 3, 3});
        input.value = oracles::random_tensor(input.value.shape, rng, -1.5, 2.0);
        const Tensor5D signs = make_signs({2, 2, 3, 3, 3}, rng);

        auto ref_loss = [&]() {
            return oracles::projection_loss_ref(
                oracles::batchnorm_train_ref(oracles::DTensor(input.value),
                                             oracles::DTensor(bn.gamma.value),
                                             oracles::DTensor(bn.beta.value)),
                signs);
        };
        auto fwd_bwd = [&]() {
            const Tensor5D out = bn.forward(input.value, true);
            input.grad = bn.backward(projection_grad(out, signs));
            return 0.0;
        };
        const auto report = grad_check({&bn.gamma, &bn.beta, &input}, fwd_bwd, ref_loss);
        INFO("max rel err " << report.max_rel_err);
        REQUIRE(report.passed(1e-3));
    }
    SECTION("maxpool input gradient") {
        MaxPool2 pool;
        Parameter input(Shape5{1, 2, 4, 4, 4});
        input.value = oracles::random_tensor(input.value.shape, rng);
        const Tensor5D signs = make_signs({1, 2, 2, 2, 2}, rng);

        auto ref_loss = [&]() {
            return oracles::projection_loss_ref(
                oracles::maxpool2_ref(oracles::DTensor(input.value)), signs);
        };
        auto fwd_bwd = [&]() {
            const Tensor5D out = pool.forward(input.value);
            input.grad = pool.backward(projection_grad(out, signs));
            return 0.0;
        };
        REQUIRE(grad_check({&input}, fwd_bwd, ref_loss).passed(1e-3));
    }
    SECTION("relu input gradient") {
        ReLU relu;
        Parameter input(Shape5{1, 2, 4, 4, 4});
        input.value = oracles::random_tensor(input.value.shape, rng);
        const Tensor5D signs = make_signs({1, 2, 4, 4, 4}, rng);

        auto ref_loss = [&]() {
            return oracles::projection_loss_ref(oracles::relu_ref(oracles::DTensor(input.value)),
                                                signs);
        };
        auto fwd_bwd = [&]() {
            const Tensor5D out = relu.forward(input.value);
            input.grad = relu.backward(projection_grad(out, signs));
            return 0.0;
        };
        REQUIRE(grad_check({&input}, fwd_bwd, ref_loss).passed(1e-3));
    }
    SECTION("sigmoid input gradient") {
        // The projection head already contains the sigmoid, so the reference
        // is the head applied to the raw input.
        Sigmoid sig;
        Parameter input(Shape5{1, 2, 4, 4, 4});
        input.value = oracles::random_tensor(input.value.shape, rng);
        const Tensor5D signs = make_signs({1, 2, 4, 4, 4}, rng);

        auto ref_loss = [&]() {
            return oracles::projection_loss_ref(oracles::DTensor(input.value), signs);
        };
        auto fwd_bwd = [&]() {
            const Tensor5D out = sig.forward(input.value);
            Tensor5D g(out.shape);
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = signs.data[i];
            input.grad = sig.backward(g);
            return 0.0;
        };
        REQUIRE(grad_check({&input}, fwd_bwd, ref_loss).passed(1e-3));
    }
}

TEST_CASE("conv3 + dice fragment gradient check") {
    Rng rng(50);
    Conv3 conv(1, 1, 3);
    conv.init(rng);
    Sigmoid head;
    Parameter input(Shape5{1, 1, 6, 6, 6});
    input.value = oracles::random_tensor(input.value.shape, rng);
    const Tensor5D g = oracles::random_binary_tensor({1, 1, 6, 6, 6}, rng, 0.3);

    DiceLoss shared;
    auto forward_only = [&]() {
        DiceLoss l;
        return l.forward(head.forward(conv.forward(input.value, false), false), g, false);
    };
    auto forward_backward = [&]() {
        const double value = shared.forward(head.forward(conv.forward(input.value)), g);
        input.grad = conv.backward(head.backward(shared.backward()));
        return value;
    };
    const auto report = grad_check({&conv.w, &conv.b, &input}, forward_backward, forward_only);
    INFO("max rel err " << report.max_rel_err);
    REQUIRE(report.passed(1e-2));
}

TEST_CASE("resize3 is trilinear with an exact adjoint") {
    Rng rng(49);
    SECTION("doubling a constant keeps it constant") {
        Tensor5D x({1, 2, 3, 3, 3});
        x.fill(0.4f);
        Resize3 rs;
        const Tensor5D y = rs.forward(x, 6, 6, 6);
        REQUIRE(y.shape == Shape5{1, 2, 6, 6, 6});
        for (float v : y.data) REQUIRE(v == 0.4f);
    }
    SECTION("identity dims copy exactly") {
        const Tensor5D x = oracles::random_tensor({1, 1, 4, 5, 6}, rng);
        Resize3 rs;
        REQUIRE(oracles::max_abs_diff(rs.forward(x, 4, 5, 6), x) == 0.0);
    }
    SECTION("forward and backward are numerically adjoint") {
        const Tensor5D x = oracles::random_tensor({1, 2, 3, 4, 5}, rng);
        const Tensor5D y = oracles::random_tensor({1, 2, 5, 6, 7}, rng);
        Resize3 rs;
        const Tensor5D fx = rs.forward(x, 5, 6, 7);
        const Tensor5D aty = rs.backward(y);
        REQUIRE_THAT(oracles::dot(fx, y), Catch::Matchers::WithinAbs(oracles::dot(x, aty), 1e-5));
    }
}
