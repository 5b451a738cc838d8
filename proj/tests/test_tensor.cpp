#include <catch2/catch_amalgamated.hpp>

#include "canalseg/rng.hpp"
#include "canalseg/tensor.hpp"

using namespace canalseg;

TEST_CASE("tensor layout is W-fastest") {
    Tensor5D t({2, 3, 4, 5, 6});
    REQUIRE(t.data.size() == 2u * 3 * 4 * 5 * 6);
    REQUIRE(t.index(0, 0, 0, 0, 1) == 1);
    REQUIRE(t.index(0, 0, 0, 1, 0) == 6);
    REQUIRE(t.index(0, 0, 1, 0, 0) == 30);
    REQUIRE(t.index(0, 1, 0, 0, 0) == 120);
    REQUIRE(t.index(1, 0, 0, 0, 0) == 360);
}

TEST_CASE("adam_step") {
    SECTION("first step with unit gradient") {
        Parameter p(Shape5{1, 1, 1, 1, 4});
        p.grad.fill(1.0f);
        const double lr = 0.1;
        adam_step(p, lr);
        // m_hat = v_hat = 1 after bias correction, so the update is
        // -lr / (1 + 1e-8).
        for (float v : p.value.data)
            REQUIRE_THAT(v, Catch::Matchers::WithinAbs(-lr / (1.0 + 1e-8), 1e-7));
        REQUIRE(p.step_count == 1);
        for (float g : p.grad.data) REQUIRE(g == 0.0f);
    }
    SECTION("zero gradient leaves the value untouched but counts the step") {
        Parameter p(Shape5{1, 1, 1, 1, 3});
        p.value.fill(0.25f);
        adam_step(p, 0.5);
        for (float v : p.value.data) REQUIRE(v == 0.25f);
        REQUIRE(p.step_count == 1);
    }
    SECTION("second step with constant gradient keeps unit-scale updates") {
        Parameter p(Shape5{1, 1, 1, 1, 1});
        const double lr = 0.01;
        p.grad.fill(1.0f);
        adam_step(p, lr);
        const float after_one = p.value.data[0];
        p.grad.fill(1.0f);
        adam_step(p, lr);
        const double second_update = after_one - p.value.data[0];
        REQUIRE_THAT(second_update, Catch::Matchers::WithinAbs(lr, 1e-4 * lr));
    }
    SECTION("lr 0 is a no-op on the value") {
        Parameter p(Shape5{1, 1, 1, 1, 5});
        p.value.fill(1.5f);
        p.grad.fill(3.0f);
        adam_step(p, 0.0);
        for (float v : p.value.data) REQUIRE(v == 1.5f);
    }
}

TEST_CASE("rng reproducibility") {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
    bool differs = false;
    Rng a2(42);
    for (int i = 0; i < 100; ++i) differs |= a2.next_u64() != c.next_u64();
    REQUIRE(differs);

    std::vector<int> v1{1, 2, 3, 4, 5, 6, 7, 8}, v2 = v1;
    Rng s1(9), s2(9);
    s1.shuffle(v1);
    s2.shuffle(v2);
    REQUIRE(v1 == v2);
}

TEST_CASE("normal draws have sane moments") {
    Rng rng(5);
    double sum = 0.0, sum2 = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sum2 += x * x;
    }
    REQUIRE_THAT(sum / n, Catch::Matchers::WithinAbs(0.0, 0.05));
    REQUIRE_THAT(sum2 / n, Catch::Matchers::WithinAbs(1.0, 0.05));
}

TEST_CASE("he init stays inside the fan-in limit") {
    Rng rng(6);
    Parameter p(Shape5{8, 4, 3, 3, 3});
    he_uniform_init(p, 4 * 27, rng);
    const double limit = std::sqrt(6.0 / (4 * 27));
    bool any_nonzero = false;
    for (float v : p.value.data) {
        REQUIRE(std::abs(v) <= limit);
        any_nonzero |= v != 0.0f;
    }
    REQUIRE(any_nonzero);
}
