#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "canalseg/rng.hpp"

namespace canalseg {

struct ShapeMismatch : std::runtime_error {
    explicit ShapeMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct Shape5 {
    int n = 0, c = 0, d = 0, h = 0, w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * d * h * w;
    }
    std::int64_t voxels() const { return static_cast<std::int64_t>(d) * h * w; }
    bool operator==(const Shape5&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(d) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

// Dense (N,C,D,H,W) float tensor, W-fastest layout.
struct Tensor5D {
    Shape5 shape;
    std::vector<float> data;

    Tensor5D() = default;
    explicit Tensor5D(Shape5 s, float fill = 0.0f)
        : shape(s), data(static_cast<std::size_t>(s.numel()), fill) {}

    std::size_t index(int n, int c, int z, int y, int x) const {
        return ((((static_cast<std::size_t>(n) * shape.c + c) * shape.d + z) * shape.h + y) *
                shape.w) + x;
    }
    float at(int n, int c, int z, int y, int x) const { return data[index(n, c, z, y, x)]; }
    float& at(int n, int c, int z, int y, int x) { return data[index(n, c, z, y, x)]; }

    float* plane(int n, int c) { return data.data() + index(n, c, 0, 0, 0); }
    const float* plane(int n, int c) const { return data.data() + index(n, c, 0, 0, 0); }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
    void zero() { fill(0.0f); }
};

inline void require_same_shape(const Tensor5D& a, const Tensor5D& b, const char* where) {
    if (!(a.shape == b.shape))
        throw ShapeMismatch(std::string(where) + ": " + a.shape.str() + " vs " + b.shape.str());
}

// Learnable tensor with gradient and Adam moment accumulators.
struct Parameter {
    Tensor5D value;
    Tensor5D grad;
    Tensor5D adam_m;
    Tensor5D adam_v;
    std::int64_t step_count = 0;

    Parameter() = default;
    explicit Parameter(Shape5 s) : value(s), grad(s), adam_m(s), adam_v(s) {}
};

// Bias-corrected Adam update; zeroes the gradient afterwards.
inline void adam_step(Parameter& p, double lr, double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
    ++p.step_count;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p.step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p.step_count));
    for (std::size_t i = 0; i < p.value.data.size(); ++i) {
        const double g = p.grad.data[i];
        const double m = beta1 * p.adam_m.data[i] + (1.0 - beta1) * g;
        const double v = beta2 * p.adam_v.data[i] + (1.0 - beta2) * g * g;
        p.adam_m.data[i] = static_cast<float>(m);
        p.adam_v.data[i] = static_cast<float>(v);
        const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
        p.value.data[i] = static_cast<float>(p.value.data[i] - update);
        p.grad.data[i] = 0.0f;
    }
}

// He-uniform initialization for convolution weights (fan_in = Cin * k^3).
inline void he_uniform_init(Parameter& p, std::int64_t fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : p.value.data) v = static_cast<float>(rng.uniform(-limit, limit));
}

}  // namespace canalseg
