#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "canalseg/tensor.hpp"

namespace canalseg {

struct OddDims : std::runtime_error {
    explicit OddDims(const std::string& what) : std::runtime_error(what) {}
};

enum class Padding { Same, Valid };

namespace detail {

// acc[x] += w0*row[x-1] + w1*row[x] + w2*row[x+1], with the borders treated
// as zero. Independent-element updates vectorize while keeping a fixed
// per-element accumulation order regardless of SIMD width or thread count.
inline void corr_row3(float* __restrict acc, const float* __restrict row, float w0, float w1,
                      float w2, int width) {
    if (width == 1) {
        acc[0] += w1 * row[0];
        return;
    }
    acc[0] += w1 * row[0] + w2 * row[1];
    for (int x = 1; x < width - 1; ++x)
        acc[x] += w0 * row[x - 1] + w1 * row[x] + w2 * row[x + 1];
    acc[width - 1] += w0 * row[width - 2] + w1 * row[width - 1];
}

// 16 independent accumulator lanes. Lane updates are elementwise (no
// reduction semantics), so they vectorize into plain FMAs; the horizontal sum
// happens once per tap, in a fixed lane order, when the total is read.
struct LaneAcc {
    float lane[16] = {};

    void add_row(const float* __restrict a, const float* __restrict b, int n) {
        int x = 0;
        for (; x + 16 <= n; x += 16)
            for (int l = 0; l < 16; ++l) lane[l] += a[x + l] * b[x + l];
        for (int l = 0; x < n; ++x, ++l) lane[l] += a[x] * b[x];
    }
    void add_sum(const float* __restrict a, int n) {
        int x = 0;
        for (; x + 16 <= n; x += 16)
            for (int l = 0; l < 16; ++l) lane[l] += a[x + l];
        for (int l = 0; x < n; ++x, ++l) lane[l] += a[x];
    }
    double total() const {
        double s = 0.0;
        for (int l = 0; l < 16; ++l) s += lane[l];
        return s;
    }
};

inline double dot_rows(const float* __restrict a, const float* __restrict b, int n) {
    LaneAcc acc;
    acc.add_row(a, b, n);
    return acc.total();
}

// Accumulates the three kx-tap inner products of one row pair into lane
// accumulators: s[kx] += sum_x g[x] * padded[x + kx], where padded holds the
// source row with one zero border column on each side. Every tap is then a
// full-width dot with no scalar remainder from shifted lengths.
inline void dot3_row_padded(const float* __restrict g, const float* __restrict padded, int width,
                            LaneAcc* __restrict taps) {
    taps[0].add_row(g, padded, width);
    taps[1].add_row(g, padded + 1, width);
    taps[2].add_row(g, padded + 2, width);
}

// Fused neighborhood update over three source rows (the full 3x3 in-plane
// stencil): acc[x] += sum_{ky,kx} w[ky*3+kx] * rows[ky][x+kx-1].
inline void corr_rows9(float* __restrict acc, const float* __restrict r0,
                       const float* __restrict r1, const float* __restrict r2,
                       const float* __restrict w, int width) {
    if (width < 2) {
        acc[0] += w[1] * r0[0] + w[4] * r1[0] + w[7] * r2[0];
        return;
    }
    acc[0] += w[1] * r0[0] + w[2] * r0[1] + w[4] * r1[0] + w[5] * r1[1] + w[7] * r2[0] +
              w[8] * r2[1];
    for (int x = 1; x < width - 1; ++x)
        acc[x] += w[0] * r0[x - 1] + w[1] * r0[x] + w[2] * r0[x + 1] + w[3] * r1[x - 1] +
                  w[4] * r1[x] + w[5] * r1[x + 1] + w[6] * r2[x - 1] + w[7] * r2[x] +
                  w[8] * r2[x + 1];
    const int e = width - 1;
    acc[e] += w[0] * r0[e - 1] + w[1] * r0[e] + w[3] * r1[e - 1] + w[4] * r1[e] +
              w[6] * r2[e - 1] + w[7] * r2[e];
}

// acc[x] += w * row[x] (the 1x1x1 channel-mix row update).
inline void axpy(float* __restrict acc, const float* __restrict row, float w, int width) {
    for (int x = 0; x < width; ++x) acc[x] += w * row[x];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 3D convolution (cross-correlation), weights (Cout, Cin, k, k, k)
// ---------------------------------------------------------------------------

class Conv3 {
public:
    Conv3() = default;
    Conv3(int cin, int cout, int k, Padding pad = Padding::Same, int stride = 1)
        : w(Shape5{cout, cin, k, k, k}), b(Shape5{1, cout, 1, 1, 1}), cin_(cin), cout_(cout),
          k_(k), stride_(stride), pad_(pad) {
        if (pad == Padding::Same && stride != 1)
            throw std::invalid_argument("same padding requires stride 1");
        if (k % 2 == 0) throw std::invalid_argument("Conv3 expects odd kernels");
    }

    void init(Rng& rng) {
        he_uniform_init(w, static_cast<std::int64_t>(cin_) * k_ * k_ * k_, rng);
    }

    int in_channels() const { return cin_; }
    int out_channels() const { return cout_; }
    int kernel() const { return k_; }

    Tensor5D forward(const Tensor5D& x, bool cache = true) {
        if (x.shape.c != cin_)
            throw ShapeMismatch("Conv3: input channels " + std::to_string(x.shape.c) +
                                ", expected " + std::to_string(cin_));
        if (cache) x_cache_ = x;

        const Shape5 os = out_shape(x.shape);
        Tensor5D y(os);
        if (k_ == 3 && pad_ == Padding::Same) {
            forward_same3(x, y);
        } else if (k_ == 1) {
            forward_1x1(x, y);
        } else {
            forward_generic(x, y);
        }
        return y;
    }

    // Accumulates into w.grad / b.grad, returns the input gradient.
    Tensor5D backward(const Tensor5D& gy) {
        const Tensor5D& x = x_cache_;
        if (!(gy.shape == out_shape(x.shape))) throw ShapeMismatch("Conv3 backward shape");

        accumulate_bias_grad(gy);
        Tensor5D gx(x.shape);
        if (k_ == 3 && pad_ == Padding::Same) {
            weight_grad_same3(x, gy);
            input_grad_same3(gy, gx);
        } else if (k_ == 1) {
            weight_grad_1x1(x, gy);
            input_grad_1x1(gy, gx);
        } else {
            backward_generic(x, gy, gx);
        }
        return gx;
    }

    Shape5 out_shape(const Shape5& in) const {
        if (pad_ == Padding::Same) return {in.n, cout_, in.d, in.h, in.w};
        return {in.n, cout_, (in.d - k_) / stride_ + 1, (in.h - k_) / stride_ + 1,
                (in.w - k_) / stride_ + 1};
    }

    Parameter w;
    Parameter b;

private:
    // Channel-blocked layout: inputs stream once per (n, z) while the output
    // rows of every channel accumulate in cache. Each output element is owned
    // by exactly one (n, z) iteration, so parallel partitioning cannot change
    // the per-element accumulation order.
    void forward_same3(const Tensor5D& x, Tensor5D& y) const {
        const int N = x.shape.n, D = x.shape.d, H = x.shape.h, W = x.shape.w;
        const std::size_t plane = static_cast<std::size_t>(H) * W;
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < N; ++n) {
            for (int z = 0; z < D; ++z) {
                for (int co = 0; co < cout_; ++co) {
                    float* out = y.plane(n, co) + static_cast<std::size_t>(z) * plane;
                    const float bias = b.value.data[co];
                    for (std::size_t i = 0; i < plane; ++i) out[i] = bias;
                }
                for (int yy = 0; yy < H; ++yy) {
                    const bool interior = yy >= 1 && yy <= H - 2;
                    for (int ci = 0; ci < cin_; ++ci) {
                        const float* in = x.plane(n, ci);
                        for (int kz = 0; kz < 3; ++kz) {
                            const int iz = z + kz - 1;
                            if (iz < 0 || iz >= D) continue;
                            const float* slab = in + static_cast<std::size_t>(iz) * plane;
                            for (int co = 0; co < cout_; ++co) {
                                float* acc = y.plane(n, co) +
                                             static_cast<std::size_t>(z) * plane +
                                             static_cast<std::size_t>(yy) * W;
                                const float* wk = w.value.plane(co, ci) + kz * 9;
                                if (interior) {
                                    detail::corr_rows9(
                                        acc, slab + static_cast<std::size_t>(yy - 1) * W,
                                        slab + static_cast<std::size_t>(yy) * W,
                                        slab + static_cast<std::size_t>(yy + 1) * W, wk, W);
                                    continue;
                                }
                                for (int ky = 0; ky < 3; ++ky) {
                                    const int iy = yy + ky - 1;
                                    if (iy < 0 || iy >= H) continue;
                                    const float* row = slab + static_cast<std::size_t>(iy) * W;
                                    detail::corr_row3(acc, row, wk[ky * 3], wk[ky * 3 + 1],
                                                      wk[ky * 3 + 2], W);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    void forward_1x1(const Tensor5D& x, Tensor5D& y) const {
        const int N = x.shape.n, D = x.shape.d;
        const std::size_t plane = static_cast<std::size_t>(x.shape.h) * x.shape.w;
        const int pw = static_cast<int>(plane);
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < N; ++n) {
            for (int z = 0; z < D; ++z) {
                for (int co = 0; co < cout_; ++co) {
                    float* out = y.plane(n, co) + static_cast<std::size_t>(z) * plane;
                    const float bias = b.value.data[co];
                    for (std::size_t i = 0; i < plane; ++i) out[i] = bias;
                }
                for (int ci = 0; ci < cin_; ++ci) {
                    const float* in = x.plane(n, ci) + static_cast<std::size_t>(z) * plane;
                    for (int co = 0; co < cout_; ++co)
                        detail::axpy(y.plane(n, co) + static_cast<std::size_t>(z) * plane, in,
                                     w.value.at(co, ci, 0, 0, 0), pw);
                }
            }
        }
    }

    void forward_generic(const Tensor5D& x, Tensor5D& y) const {
        const Shape5 os = y.shape;
        const int off = pad_ == Padding::Same ? k_ / 2 : 0;
        for (int n = 0; n < os.n; ++n)
            for (int co = 0; co < cout_; ++co)
                for (int oz = 0; oz < os.d; ++oz)
                    for (int oy = 0; oy < os.h; ++oy)
                        for (int ox = 0; ox < os.w; ++ox) {
                            double acc = b.value.data[co];
                            for (int ci = 0; ci < cin_; ++ci)
                                for (int kz = 0; kz < k_; ++kz)
                                    for (int ky = 0; ky < k_; ++ky)
                                        for (int kx = 0; kx < k_; ++kx) {
                                            const int iz = oz * stride_ + kz - off;
                                            const int iy = oy * stride_ + ky - off;
                                            const int ix = ox * stride_ + kx - off;
                                            if (iz < 0 || iy < 0 || ix < 0 || iz >= x.shape.d ||
                                                iy >= x.shape.h || ix >= x.shape.w)
                                                continue;
                                            acc += static_cast<double>(
                                                       w.value.at(co, ci, kz, ky, kx)) *
                                                   x.at(n, ci, iz, iy, ix);
                                        }
                            y.at(n, co, oz, oy, ox) = static_cast<float>(acc);
                        }
    }

    void accumulate_bias_grad(const Tensor5D& gy) {
        const std::int64_t vox = gy.shape.voxels();
#pragma omp parallel for schedule(static)
        for (int co = 0; co < cout_; ++co) {
            detail::LaneAcc acc;
            for (int n = 0; n < gy.shape.n; ++n)
                acc.add_sum(gy.plane(n, co), static_cast<int>(vox));
            b.grad.data[co] += static_cast<float>(acc.total());
        }
    }

    // Streams the tensors once, accumulating all cin*27 tap products per
    // output channel into a local buffer; rows stay cache-resident.
    void weight_grad_same3(const Tensor5D& x, const Tensor5D& gy) {
        const int N = x.shape.n, D = x.shape.d, H = x.shape.h, W = x.shape.w;
        const std::size_t plane = static_cast<std::size_t>(H) * W;

        // Zero-padded copy of the input along x (one border column per side),
        // shared read-only across the parallel output channels.
        const int WP = W + 2;
        const std::size_t pplane = static_cast<std::size_t>(H) * WP;
        std::vector<float> xpad(static_cast<std::size_t>(N) * cin_ * D * pplane, 0.0f);
        for (int n = 0; n < N; ++n)
            for (int ci = 0; ci < cin_; ++ci) {
                const float* src = x.plane(n, ci);
                float* dst = xpad.data() +
                             (static_cast<std::size_t>(n) * cin_ + ci) * D * pplane;
                for (std::size_t r = 0; r < static_cast<std::size_t>(D) * H; ++r)
                    std::copy_n(src + r * W, W, dst + r * WP + 1);
            }

#pragma omp parallel for schedule(static)
        for (int co = 0; co < cout_; ++co) {
            std::vector<detail::LaneAcc> acc(static_cast<std::size_t>(cin_) * 27);
            for (int n = 0; n < N; ++n) {
                const float* g = gy.plane(n, co);
                for (int z = 0; z < D; ++z) {
                    for (int yy = 0; yy < H; ++yy) {
                        const float* grow = g + static_cast<std::size_t>(z) * plane +
                                            static_cast<std::size_t>(yy) * W;
                        for (int ci = 0; ci < cin_; ++ci) {
                            const float* in =
                                xpad.data() +
                                (static_cast<std::size_t>(n) * cin_ + ci) * D * pplane;
                            detail::LaneAcc* a = acc.data() + static_cast<std::size_t>(ci) * 27;
                            for (int kz = 0; kz < 3; ++kz) {
                                const int iz = z + kz - 1;
                                if (iz < 0 || iz >= D) continue;
                                const float* slab = in + static_cast<std::size_t>(iz) * pplane;
                                for (int ky = 0; ky < 3; ++ky) {
                                    const int iy = yy + ky - 1;
                                    if (iy < 0 || iy >= H) continue;
                                    const float* prow = slab + static_cast<std::size_t>(iy) * WP;
                                    detail::dot3_row_padded(grow, prow, W,
                                                            a + (kz * 3 + ky) * 3);
                                }
                            }
                        }
                    }
                }
            }
            for (int ci = 0; ci < cin_; ++ci) {
                float* wg = w.grad.plane(co, ci);
                const detail::LaneAcc* a = acc.data() + static_cast<std::size_t>(ci) * 27;
                for (int t = 0; t < 27; ++t) wg[t] += static_cast<float>(a[t].total());
            }
        }
    }

    // Input gradient of a same-padded 3x3x3 correlation: correlate gy with the
    // spatially flipped kernel, summing over output channels. Same
    // channel-blocked layout as the forward pass with the roles swapped.
    void input_grad_same3(const Tensor5D& gy, Tensor5D& gx) const {
        const int N = gx.shape.n, D = gx.shape.d, H = gx.shape.h, W = gx.shape.w;
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        std::vector<float> wt(static_cast<std::size_t>(cin_) * cout_ * 27);
        for (int ci = 0; ci < cin_; ++ci)
            for (int co = 0; co < cout_; ++co)
                for (int kz = 0; kz < 3; ++kz)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx)
                            wt[(((static_cast<std::size_t>(ci) * cout_ + co) * 3 + kz) * 3 + ky) *
                                   3 + kx] = w.value.at(co, ci, 2 - kz, 2 - ky, 2 - kx);

#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < N; ++n) {
            for (int z = 0; z < D; ++z) {
                for (int yy = 0; yy < H; ++yy) {
                    const bool interior = yy >= 1 && yy <= H - 2;
                    for (int co = 0; co < cout_; ++co) {
                        const float* g = gy.plane(n, co);
                        for (int kz = 0; kz < 3; ++kz) {
                            const int iz = z + kz - 1;
                            if (iz < 0 || iz >= D) continue;
                            const float* slab = g + static_cast<std::size_t>(iz) * plane;
                            for (int ci = 0; ci < cin_; ++ci) {
                                float* acc = gx.plane(n, ci) +
                                             static_cast<std::size_t>(z) * plane +
                                             static_cast<std::size_t>(yy) * W;
                                const float* wk =
                                    wt.data() +
                                    (static_cast<std::size_t>(ci) * cout_ + co) * 27 + kz * 9;
                                if (interior) {
                                    detail::corr_rows9(
                                        acc, slab + static_cast<std::size_t>(yy - 1) * W,
                                        slab + static_cast<std::size_t>(yy) * W,
                                        slab + static_cast<std::size_t>(yy + 1) * W, wk, W);
                                    continue;
                                }
                                for (int ky = 0; ky < 3; ++ky) {
                                    const int iy = yy + ky - 1;
                                    if (iy < 0 || iy >= H) continue;
                                    const float* row = slab + static_cast<std::size_t>(iy) * W;
                                    detail::corr_row3(acc, row, wk[ky * 3], wk[ky * 3 + 1],
                                                      wk[ky * 3 + 2], W);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    void weight_grad_1x1(const Tensor5D& x, const Tensor5D& gy) {
        const int D = x.shape.d;
        const std::size_t plane = static_cast<std::size_t>(x.shape.h) * x.shape.w;
        const int pw = static_cast<int>(plane);
#pragma omp parallel for schedule(static)
        for (int co = 0; co < cout_; ++co) {
            std::vector<detail::LaneAcc> acc(static_cast<std::size_t>(cin_));
            for (int n = 0; n < x.shape.n; ++n) {
                const float* g = gy.plane(n, co);
                for (int z = 0; z < D; ++z) {
                    const float* grow = g + static_cast<std::size_t>(z) * plane;
                    for (int ci = 0; ci < cin_; ++ci)
                        acc[ci].add_row(grow,
                                        x.plane(n, ci) + static_cast<std::size_t>(z) * plane, pw);
                }
            }
            for (int ci = 0; ci < cin_; ++ci)
                w.grad.at(co, ci, 0, 0, 0) += static_cast<float>(acc[ci].total());
        }
    }

    void input_grad_1x1(const Tensor5D& gy, Tensor5D& gx) const {
        const int D = gx.shape.d;
        const std::size_t plane = static_cast<std::size_t>(gx.shape.h) * gx.shape.w;
        const int pw = static_cast<int>(plane);
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < gx.shape.n; ++n)
            for (int z = 0; z < D; ++z)
                for (int co = 0; co < cout_; ++co) {
                    const float* g = gy.plane(n, co) + static_cast<std::size_t>(z) * plane;
                    for (int ci = 0; ci < cin_; ++ci)
                        detail::axpy(gx.plane(n, ci) + static_cast<std::size_t>(z) * plane, g,
                                     w.value.at(co, ci, 0, 0, 0), pw);
                }
    }

    void backward_generic(const Tensor5D& x, const Tensor5D& gy, Tensor5D& gx) {
        const Shape5 os = gy.shape;
        const int off = pad_ == Padding::Same ? k_ / 2 : 0;
        for (int n = 0; n < os.n; ++n)
            for (int co = 0; co < cout_; ++co)
                for (int oz = 0; oz < os.d; ++oz)
                    for (int oy = 0; oy < os.h; ++oy)
                        for (int ox = 0; ox < os.w; ++ox) {
                            const float g = gy.at(n, co, oz, oy, ox);
                            for (int ci = 0; ci < cin_; ++ci)
                                for (int kz = 0; kz < k_; ++kz)
                                    for (int ky = 0; ky < k_; ++ky)
                                        for (int kx = 0; kx < k_; ++kx) {
                                            const int iz = oz * stride_ + kz - off;
                                            const int iy = oy * stride_ + ky - off;
                                            const int ix = ox * stride_ + kx - off;
                                            if (iz < 0 || iy < 0 || ix < 0 || iz >= x.shape.d ||
                                                iy >= x.shape.h || ix >= x.shape.w)
                                                continue;
                                            w.grad.at(co, ci, kz, ky, kx) +=
                                                g * x.at(n, ci, iz, iy, ix);
                                            gx.at(n, ci, iz, iy, ix) +=
                                                g * w.value.at(co, ci, kz, ky, kx);
                                        }
                        }
    }

    int cin_ = 0, cout_ = 0, k_ = 3, stride_ = 1;
    Padding pad_ = Padding::Same;
    Tensor5D x_cache_;
};

// ---------------------------------------------------------------------------
// Transposed convolution, kernel 2^3, stride 2 (doubles every spatial dim).
// Windows do not overlap, so each output voxel has exactly one contribution.
// ---------------------------------------------------------------------------

class ConvTranspose3 {
public:
    ConvTranspose3() = default;
    ConvTranspose3(int cin, int cout)
        : w(Shape5{cout, cin, 2, 2, 2}), b(Shape5{1, cout, 1, 1, 1}), cin_(cin), cout_(cout) {}

    void init(Rng& rng) { he_uniform_init(w, static_cast<std::int64_t>(cin_) * 8, rng); }

    int in_channels() const { return cin_; }
    int out_channels() const { return cout_; }

    Tensor5D forward(const Tensor5D& x, bool cache = true) {
        if (x.shape.c != cin_) throw ShapeMismatch("ConvTranspose3 input channels");
        if (cache) x_cache_ = x;
        const Shape5 os{x.shape.n, cout_, x.shape.d * 2, x.shape.h * 2, x.shape.w * 2};
        Tensor5D y(os);
        const int D = x.shape.d, H = x.shape.h, W = x.shape.w;
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < x.shape.n; ++n) {
            for (int co = 0; co < cout_; ++co) {
                float* out = y.plane(n, co);
                const float bias = b.value.data[co];
                const std::int64_t ovox = os.voxels();
                for (std::int64_t i = 0; i < ovox; ++i) out[i] = bias;
                for (int ci = 0; ci < cin_; ++ci) {
                    const float* in = x.plane(n, ci);
                    const float* wk = w.value.plane(co, ci);
                    for (int z = 0; z < D; ++z)
                        for (int yy = 0; yy < H; ++yy) {
                            const float* row = in + (static_cast<std::size_t>(z) * H + yy) * W;
                            for (int kz = 0; kz < 2; ++kz)
                                for (int ky = 0; ky < 2; ++ky) {
                                    float* o = out + ((static_cast<std::size_t>(2 * z + kz) *
                                                       (2 * H) + (2 * yy + ky)) *
                                                      (2 * W));
                                    const float w0 = wk[(kz * 2 + ky) * 2 + 0];
                                    const float w1 = wk[(kz * 2 + ky) * 2 + 1];
                                    for (int xx = 0; xx < W; ++xx) {
                                        o[2 * xx] += w0 * row[xx];
                                        o[2 * xx + 1] += w1 * row[xx];
                                    }
                                }
                        }
                }
            }
        }
        return y;
    }

    Tensor5D backward(const Tensor5D& gy) {
        const Tensor5D& x = x_cache_;
        const Shape5 os{x.shape.n, cout_, x.shape.d * 2, x.shape.h * 2, x.shape.w * 2};
        if (!(gy.shape == os)) throw ShapeMismatch("ConvTranspose3 backward shape");
        const int D = x.shape.d, H = x.shape.h, W = x.shape.w;
        const std::size_t oplane = static_cast<std::size_t>(2 * H) * (2 * W);

        // Gradient rows are deinterleaved into (kx = 0, kx = 1) halves so the
        // tap products run on contiguous data.
#pragma omp parallel for schedule(static)
        for (int co = 0; co < cout_; ++co) {
            std::vector<float> half(static_cast<std::size_t>(8) * W);
            std::vector<detail::LaneAcc> acc(static_cast<std::size_t>(cin_) * 8);
            detail::LaneAcc bias_acc;
            for (int n = 0; n < x.shape.n; ++n) {
                const float* g = gy.plane(n, co);
                bias_acc.add_sum(g, static_cast<int>(os.voxels()));
                for (int z = 0; z < D; ++z)
                    for (int yy = 0; yy < H; ++yy) {
                        for (int kz = 0; kz < 2; ++kz)
                            for (int ky = 0; ky < 2; ++ky) {
                                const float* grow =
                                    g + static_cast<std::size_t>(2 * z + kz) * (2 * H) * (2 * W) +
                                    static_cast<std::size_t>(2 * yy + ky) * (2 * W);
                                float* even = half.data() + (kz * 2 + ky) * 2 * W;
                                float* odd = even + W;
                                for (int xx = 0; xx < W; ++xx) {
                                    even[xx] = grow[2 * xx];
                                    odd[xx] = grow[2 * xx + 1];
                                }
                            }
                        for (int ci = 0; ci < cin_; ++ci) {
                            const float* irow = x.plane(n, ci) +
                                                (static_cast<std::size_t>(z) * H + yy) * W;
                            detail::LaneAcc* a = acc.data() + static_cast<std::size_t>(ci) * 8;
                            for (int t = 0; t < 4; ++t) {
                                a[2 * t].add_row(irow, half.data() + t * 2 * W, W);
                                a[2 * t + 1].add_row(irow, half.data() + t * 2 * W + W, W);
                            }
                        }
                    }
            }
            b.grad.data[co] += static_cast<float>(bias_acc.total());
            for (int ci = 0; ci < cin_; ++ci) {
                float* wg = w.grad.plane(co, ci);
                for (int t = 0; t < 8; ++t)
                    wg[t] += static_cast<float>(
                        acc[static_cast<std::size_t>(ci) * 8 + t].total());
            }
        }

        Tensor5D gx(x.shape);
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < x.shape.n; ++n) {
            for (int z = 0; z < D; ++z) {
                std::vector<float> half(static_cast<std::size_t>(8) * W);
                for (int yy = 0; yy < H; ++yy) {
                    for (int co = 0; co < cout_; ++co) {
                        const float* g = gy.plane(n, co);
                        for (int kz = 0; kz < 2; ++kz)
                            for (int ky = 0; ky < 2; ++ky) {
                                const float* grow =
                                    g + static_cast<std::size_t>(2 * z + kz) * (2 * H) * (2 * W) +
                                    static_cast<std::size_t>(2 * yy + ky) * (2 * W);
                                float* even = half.data() + (kz * 2 + ky) * 2 * W;
                                float* odd = even + W;
                                for (int xx = 0; xx < W; ++xx) {
                                    even[xx] = grow[2 * xx];
                                    odd[xx] = grow[2 * xx + 1];
                                }
                            }
                        for (int ci = 0; ci < cin_; ++ci) {
                            float* orow = gx.plane(n, ci) +
                                          (static_cast<std::size_t>(z) * H + yy) * W;
                            const float* wk = w.value.plane(co, ci);
                            for (int t = 0; t < 4; ++t) {
                                detail::axpy(orow, half.data() + t * 2 * W, wk[2 * t], W);
                                detail::axpy(orow, half.data() + t * 2 * W + W, wk[2 * t + 1], W);
                            }
                        }
                    }
                }
            }
        }
        (void)oplane;
        return gx;
    }

    Parameter w;
    Parameter b;

private:
    int cin_ = 0, cout_ = 0;
    Tensor5D x_cache_;
};

// ---------------------------------------------------------------------------
// 2x2x2 max pooling, stride 2; gradient routed to the argmax
// (lowest linear index wins ties).
// ---------------------------------------------------------------------------

class MaxPool2 {
public:
    Tensor5D forward(const Tensor5D& x, bool cache = true) {
        if (x.shape.d % 2 || x.shape.h % 2 || x.shape.w % 2)
            throw OddDims("maxpool2 needs even spatial dims, got " + x.shape.str());
        const Shape5 os{x.shape.n, x.shape.c, x.shape.d / 2, x.shape.h / 2, x.shape.w / 2};
        Tensor5D y(os);
        std::vector<std::int64_t> arg(static_cast<std::size_t>(os.numel()));
        const int H = x.shape.h, W = x.shape.w;
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < os.n; ++n)
            for (int c = 0; c < os.c; ++c) {
                const float* in = x.plane(n, c);
                const std::size_t plane_base = x.index(n, c, 0, 0, 0);
                for (int z = 0; z < os.d; ++z)
                    for (int yy = 0; yy < os.h; ++yy)
                        for (int xx = 0; xx < os.w; ++xx) {
                            float best = -std::numeric_limits<float>::infinity();
                            std::int64_t best_idx = 0;
                            for (int kz = 0; kz < 2; ++kz)
                                for (int ky = 0; ky < 2; ++ky)
                                    for (int kx = 0; kx < 2; ++kx) {
                                        const std::int64_t idx =
                                            (static_cast<std::int64_t>(2 * z + kz) * H +
                                             (2 * yy + ky)) * W + (2 * xx + kx);
                                        const float v = in[idx];
                                        if (v > best) {
                                            best = v;
                                            best_idx = static_cast<std::int64_t>(plane_base) + idx;
                                        }
                                    }
                            y.at(n, c, z, yy, xx) = best;
                            arg[y.index(n, c, z, yy, xx)] = best_idx;
                        }
            }
        if (cache) {
            arg_cache_ = std::move(arg);
            in_shape_ = x.shape;
        }
        return y;
    }

    Tensor5D backward(const Tensor5D& gy) {
        if (gy.data.size() != arg_cache_.size()) throw ShapeMismatch("MaxPool2 backward shape");
        Tensor5D gx(in_shape_);
        for (std::size_t i = 0; i < gy.data.size(); ++i)
            gx.data[static_cast<std::size_t>(arg_cache_[i])] += gy.data[i];
        return gx;
    }

private:
    std::vector<std::int64_t> arg_cache_;
    Shape5 in_shape_;
};

// ---------------------------------------------------------------------------
// Batch normalization over (N, D, H, W) per channel
// ---------------------------------------------------------------------------

class BatchNorm {
public:
    BatchNorm() = default;
    explicit BatchNorm(int channels)
        : gamma(Shape5{1, channels, 1, 1, 1}), beta(Shape5{1, channels, 1, 1, 1}), c_(channels),
          running_mean_(channels, 0.0f), running_var_(channels, 1.0f) {
        gamma.value.fill(1.0f);
    }

    int channels() const { return c_; }

    Tensor5D forward(const Tensor5D& x, bool training, bool cache = true) {
        if (x.shape.c != c_) throw ShapeMismatch("BatchNorm channels");
        const std::int64_t vox = x.shape.voxels();
        const std::int64_t m = static_cast<std::int64_t>(x.shape.n) * vox;
        Tensor5D y(x.shape);

        std::vector<float> mean(c_), inv_std(c_);
        if (training) {
#pragma omp parallel for schedule(static)
            for (int c = 0; c < c_; ++c) {
                double s = 0.0, sq = 0.0;
                for (int n = 0; n < x.shape.n; ++n) {
                    const float* p = x.plane(n, c);
#pragma omp simd reduction(+ : s, sq)
                    for (std::int64_t i = 0; i < vox; ++i) {
                        s += p[i];
                        sq += static_cast<double>(p[i]) * p[i];
                    }
                }
                const double mu = s / static_cast<double>(m);
                const double var = std::max(0.0, sq / static_cast<double>(m) - mu * mu);
                mean[c] = static_cast<float>(mu);
                inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + kEps));
                running_mean_[c] =
                    static_cast<float>(kMomentum * running_mean_[c] + (1.0 - kMomentum) * mu);
                running_var_[c] =
                    static_cast<float>(kMomentum * running_var_[c] + (1.0 - kMomentum) * var);
            }
        } else {
            for (int c = 0; c < c_; ++c) {
                mean[c] = running_mean_[c];
                inv_std[c] = static_cast<float>(
                    1.0 / std::sqrt(static_cast<double>(running_var_[c]) + kEps));
            }
        }

        Tensor5D xhat(x.shape);
#pragma omp parallel for collapse(2) schedule(static)
        for (int n = 0; n < x.shape.n; ++n)
            for (int c = 0; c < c_; ++c) {
                const float* in = x.plane(n, c);
                float* xh = xhat.plane(n, c);
                float* out = y.plane(n, c);
                const float mu = mean[c], is = inv_std[c];
                const float g = gamma.value.data[c], bt = beta.value.data[c];
                for (std::int64_t i = 0; i < vox; ++i) {
                    const float v = (in[i] - mu) * is;
                    xh[i] = v;
                    out[i] = g * v + bt;
                }
            }

        if (cache) {
            xhat_cache_ = std::move(xhat);
            inv_std_cache_ = std::move(inv_std);
            training_cache_ = training;
        }
        return y;
    }

    Tensor5D backward(const Tensor5D& gy) {
        const Tensor5D& xhat = xhat_cache_;
        require_same_shape(gy, xhat, "BatchNorm backward");
        const std::int64_t vox = gy.shape.voxels();
        const std::int64_t m = static_cast<std::int64_t>(gy.shape.n) * vox;
        Tensor5D gx(gy.shape);

#pragma omp parallel for schedule(static)
        for (int c = 0; c < c_; ++c) {
            double sum_gy = 0.0, sum_gy_xhat = 0.0;
            for (int n = 0; n < gy.shape.n; ++n) {
                const float* g = gy.plane(n, c);
                const float* xh = xhat.plane(n, c);
#pragma omp simd reduction(+ : sum_gy, sum_gy_xhat)
                for (std::int64_t i = 0; i < vox; ++i) {
                    sum_gy += g[i];
                    sum_gy_xhat += static_cast<double>(g[i]) * xh[i];
                }
            }
            gamma.grad.data[c] += static_cast<float>(sum_gy_xhat);
            beta.grad.data[c] += static_cast<float>(sum_gy);

            const double g_scale = static_cast<double>(gamma.value.data[c]) * inv_std_cache_[c];
            if (training_cache_) {
                const double mg = sum_gy / static_cast<double>(m);
                const double mgx = sum_gy_xhat / static_cast<double>(m);
                for (int n = 0; n < gy.shape.n; ++n) {
                    const float* g = gy.plane(n, c);
                    const float* xh = xhat.plane(n, c);
                    float* out = gx.plane(n, c);
                    for (std::int64_t i = 0; i < vox; ++i)
                        out[i] = static_cast<float>(g_scale * (g[i] - mg - xh[i] * mgx));
                }
            } else {
                for (int n = 0; n < gy.shape.n; ++n) {
                    const float* g = gy.plane(n, c);
                    float* out = gx.plane(n, c);
                    for (std::int64_t i = 0; i < vox; ++i)
                        out[i] = static_cast<float>(g_scale * g[i]);
                }
            }
        }
        return gx;
    }

    Parameter gamma;
    Parameter beta;

    std::vector<float>& running_mean() { return running_mean_; }
    std::vector<float>& running_var() { return running_var_; }

    static constexpr double kEps = 1e-5;
    static constexpr double kMomentum = 0.9;

private:
    int c_ = 0;
    std::vector<float> running_mean_, running_var_;
    Tensor5D xhat_cache_;
    std::vector<float> inv_std_cache_;
    bool training_cache_ = true;
};

// ---------------------------------------------------------------------------
// Elementwise activations
// ---------------------------------------------------------------------------

class ReLU {
public:
    Tensor5D forward(const Tensor5D& x, bool cache = true) {
        Tensor5D y(x.shape);
        for (std::size_t i = 0; i < x.data.size(); ++i) y.data[i] = x.data[i] > 0 ? x.data[i] : 0;
        if (cache) y_cache_ = y;
        return y;
    }
    Tensor5D backward(const Tensor5D& gy) const {
        require_same_shape(gy, y_cache_, "ReLU backward");
        Tensor5D gx(gy.shape);
        for (std::size_t i = 0; i < gy.data.size(); ++i)
            gx.data[i] = y_cache_.data[i] > 0 ? gy.data[i] : 0;
        return gx;
    }

private:
    Tensor5D y_cache_;
};

class Sigmoid {
public:
    Tensor5D forward(const Tensor5D& x, bool cache = true) {
        Tensor5D y(x.shape);
        for (std::size_t i = 0; i < x.data.size(); ++i)
            y.data[i] = 1.0f / (1.0f + std::exp(-x.data[i]));
        if (cache) y_cache_ = y;
        return y;
    }
    Tensor5D backward(const Tensor5D& gy) const {
        require_same_shape(gy, y_cache_, "Sigmoid backward");
        Tensor5D gx(gy.shape);
        for (std::size_t i = 0; i < gy.data.size(); ++i) {
            const float y = y_cache_.data[i];
            gx.data[i] = gy.data[i] * y * (1.0f - y);
        }
        return gx;
    }

private:
    Tensor5D y_cache_;
};

// ---------------------------------------------------------------------------
// Trilinear resize on tensors (voxel-center convention, same mapping as the
// grid resampler). Backward is the exact adjoint.
// ---------------------------------------------------------------------------

class Resize3 {
public:
    Tensor5D forward(const Tensor5D& x, int od, int oh, int ow, bool cache = true) {
        const Shape5 os{x.shape.n, x.shape.c, od, oh, ow};
        if (cache) {
            in_shape_ = x.shape;
            out_shape_ = os;
        }
        Tensor5D y(os);
        const AxisMap zm = axis_map(x.shape.d, od);
        const AxisMap ym = axis_map(x.shape.h, oh);
        const AxisMap xm = axis_map(x.shape.w, ow);
        for (int n = 0; n < os.n; ++n)
            for (int c = 0; c < os.c; ++c) {
                const float* in = x.plane(n, c);
                float* out = y.plane(n, c);
                const int H = x.shape.h, W = x.shape.w;
                for (int z = 0; z < od; ++z)
                    for (int yy = 0; yy < oh; ++yy)
                        for (int xx = 0; xx < ow; ++xx) {
                            double acc = 0.0;
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b)
                                    for (int d = 0; d < 2; ++d) {
                                        const double wgt = zm.weight(z, a) * ym.weight(yy, b) *
                                                           xm.weight(xx, d);
                                        acc += wgt * in[(static_cast<std::size_t>(zm.idx(z, a)) *
                                                             H + ym.idx(yy, b)) *
                                                            W + xm.idx(xx, d)];
                                    }
                            out[(static_cast<std::size_t>(z) * oh + yy) * ow + xx] =
                                static_cast<float>(acc);
                        }
            }
        return y;
    }

    Tensor5D backward(const Tensor5D& gy) const {
        if (!(gy.shape == out_shape_)) throw ShapeMismatch("Resize3 backward shape");
        Tensor5D gx(in_shape_);
        const AxisMap zm = axis_map(in_shape_.d, out_shape_.d);
        const AxisMap ym = axis_map(in_shape_.h, out_shape_.h);
        const AxisMap xm = axis_map(in_shape_.w, out_shape_.w);
        for (int n = 0; n < out_shape_.n; ++n)
            for (int c = 0; c < out_shape_.c; ++c) {
                const float* g = gy.plane(n, c);
                float* out = gx.plane(n, c);
                const int H = in_shape_.h, W = in_shape_.w;
                for (int z = 0; z < out_shape_.d; ++z)
                    for (int yy = 0; yy < out_shape_.h; ++yy)
                        for (int xx = 0; xx < out_shape_.w; ++xx) {
                            const float gv =
                                g[(static_cast<std::size_t>(z) * out_shape_.h + yy) *
                                      out_shape_.w + xx];
                            for (int a = 0; a < 2; ++a)
                                for (int b = 0; b < 2; ++b)
                                    for (int d = 0; d < 2; ++d) {
                                        const double wgt = zm.weight(z, a) * ym.weight(yy, b) *
                                                           xm.weight(xx, d);
                                        if (wgt == 0.0) continue;
                                        out[(static_cast<std::size_t>(zm.idx(z, a)) * H +
                                             ym.idx(yy, b)) * W + xm.idx(xx, d)] +=
                                            static_cast<float>(wgt * gv);
                                    }
                        }
            }
        return gx;
    }

private:
    struct AxisMap {
        std::vector<int> i0, i1;
        std::vector<double> f;
        int idx(int o, int side) const { return side == 0 ? i0[o] : i1[o]; }
        double weight(int o, int side) const { return side == 0 ? 1.0 - f[o] : f[o]; }
    };

    static AxisMap axis_map(int in_n, int out_n) {
        AxisMap m;
        m.i0.resize(out_n);
        m.i1.resize(out_n);
        m.f.resize(out_n);
        for (int o = 0; o < out_n; ++o) {
            double s = (o + 0.5) * (static_cast<double>(in_n) / out_n) - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
            const int lo = static_cast<int>(std::floor(s));
            m.i0[o] = lo;
            m.i1[o] = std::min(lo + 1, in_n - 1);
            m.f[o] = s - lo;
        }
        return m;
    }

    Shape5 in_shape_, out_shape_;
};

// ---------------------------------------------------------------------------
// Soft dice loss, smoothing 1.0: L = 1 - (2*sum(p*g)+eps)/(sum(p)+sum(g)+eps)
// ---------------------------------------------------------------------------

class DiceLoss {
public:
    static constexpr double kSmooth = 1.0;

    double forward(const Tensor5D& p, const Tensor5D& g, bool cache = true) {
        require_same_shape(p, g, "dice_loss");
        double sum_pg = 0.0, sum_p = 0.0, sum_g = 0.0;
        for (std::size_t i = 0; i < p.data.size(); ++i) {
            sum_pg += static_cast<double>(p.data[i]) * g.data[i];
            sum_p += p.data[i];
            sum_g += g.data[i];
        }
        const double num = 2.0 * sum_pg + kSmooth;
        const double den = sum_p + sum_g + kSmooth;
        if (cache) {
            g_cache_ = g;
            num_ = num;
            den_ = den;
        }
        return 1.0 - num / den;
    }

    // dL/dp_i = -(2*g_i*den - num) / den^2
    Tensor5D backward(double upstream = 1.0) const {
        Tensor5D gp(g_cache_.shape);
        const double inv_den = 1.0 / den_;
        const double num_term = num_ * inv_den * inv_den;
        for (std::size_t i = 0; i < gp.data.size(); ++i)
            gp.data[i] = static_cast<float>(
                upstream * (num_term - 2.0 * g_cache_.data[i] * inv_den));
        return gp;
    }

private:
    Tensor5D g_cache_;
    double num_ = 0.0, den_ = 1.0;
};

inline double dice_loss(const Tensor5D& p, const Tensor5D& g) {
    DiceLoss l;
    return l.forward(p, g, false);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t checks = 0;
    bool passed(double tol) const { return checks > 0 && max_rel_err < tol; }
};

inline double grad_rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({std::abs(analytic), std::abs(numeric), 1e-4});
}

// The driver zeroes the gradients, runs fwd_bwd once (forward+backward,
// returning the scalar loss and filling grads), then probes elements at a
// deterministic stride, up to max_per_param per parameter. fwd is a
// forward-only loss evaluation; h = 1e-3 suits 32-bit weights. The divisor is
// the perturbation actually realized in the stored floats.
//
// With refine_at_kinks set, a probe whose h- and h/4-estimates disagree sits
// on a relu/pool kink inside the step; the estimate is then retaken at h/16,
// where the truncation is negligible. A wrong analytic gradient keeps its
// error at every step size, so refinement cannot mask real defects.
template <class RunFwdBwd, class RunFwd>
GradCheckReport grad_check(const std::vector<Parameter*>& params, RunFwdBwd fwd_bwd, RunFwd fwd,
                           double h = 1e-3, std::size_t max_per_param = 24,
                           bool refine_at_kinks = false) {
    for (Parameter* p : params) p->grad.zero();
    fwd_bwd();

    std::vector<std::vector<float>> analytic;
    analytic.reserve(params.size());
    for (Parameter* p : params) analytic.push_back(p->grad.data);

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Parameter* p = params[pi];
        const std::size_t n = p->value.data.size();
        const std::size_t step = std::max<std::size_t>(1, n / max_per_param);
        for (std::size_t i = 0; i < n; i += step) {
            const float orig = p->value.data[i];
            auto central = [&](double hh) {
                const float plus = static_cast<float>(orig + hh);
                const float minus = static_cast<float>(orig - hh);
                p->value.data[i] = plus;
                const double lp = fwd();
                p->value.data[i] = minus;
                const double lm = fwd();
                p->value.data[i] = orig;
                return (lp - lm) / (static_cast<double>(plus) - static_cast<double>(minus));
            };
            double numeric = central(h);
            if (refine_at_kinks) {
                double hh = h;
                for (int level = 0; level < 4; ++level) {
                    const double refined = central(hh / 4);
                    const bool settled = grad_rel_err(numeric, refined) <= 1e-4;
                    numeric = refined;
                    hh /= 4;
                    if (settled) break;
                }
            }
            report.max_rel_err =
                std::max(report.max_rel_err, grad_rel_err(analytic[pi][i], numeric));
            ++report.checks;
        }
    }
    return report;
}

}  // namespace canalseg
