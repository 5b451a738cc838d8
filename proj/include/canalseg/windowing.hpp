#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>

#include "canalseg/volume.hpp"

namespace canalseg {

struct EmptyHistogram : std::runtime_error {
    explicit EmptyHistogram(const std::string& what) : std::runtime_error(what) {}
};

// Dynamic window computed per scan from its intensity histogram.
struct WindowParams {
    double wc = 0.0;  // window center, HU
    double ww = 1.0;  // window width, HU, >= 1
};

namespace detail {

// Smallest bin index whose cumulative count reaches permille/1000 of the total.
// Integer arithmetic keeps the quantile exact and shift-covariant.
inline std::size_t permille_bin(const Histogram& h, std::int64_t permille, std::int64_t total) {
    std::int64_t cum = 0;
    for (std::size_t k = 0; k < h.counts.size(); ++k) {
        cum += h.counts[k];
        if (cum * 1000 >= permille * total) return k;
    }
    return h.counts.size() - 1;
}

}  // namespace detail

// Window center = intensity of the most populated bin (lowest index on ties).
// Width follows the effective intensity range r = p99.5 - p0.5 with a damped
// slope above 2000 HU: ww = r for r <= 2000, else 2000 + 0.25 * (r - 2000).
inline WindowParams compute_window(const Histogram& h) {
    const std::int64_t total = h.total();
    if (h.counts.empty() || total == 0) throw EmptyHistogram("histogram has no counts");

    std::size_t mode_bin = 0;
    for (std::size_t k = 1; k < h.counts.size(); ++k) {
        if (h.counts[k] > h.counts[mode_bin]) mode_bin = k;
    }

    const std::size_t lo_bin = detail::permille_bin(h, 5, total);
    const std::size_t hi_bin = detail::permille_bin(h, 995, total);
    const double r = h.bin_intensity(hi_bin) - h.bin_intensity(lo_bin);

    WindowParams w;
    w.wc = h.bin_intensity(mode_bin);
    w.ww = r <= 2000.0 ? r : 2000.0 + 0.25 * (r - 2000.0);
    w.ww = std::max(w.ww, 1.0);
    return w;
}

// y = clamp((x - (wc - ww/2)) / ww, 0, 1), monotone in x.
inline NormVolume apply_window(const Volume& v, const WindowParams& w) {
    NormVolume out(v.dims, v.spacing);
    out.hu_regime = v.hu_regime;
    const double lo = w.wc - w.ww / 2.0;
    const double inv = 1.0 / w.ww;
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
        const double y = (static_cast<double>(v.voxels[i]) - lo) * inv;
        out.voxels[i] = static_cast<float>(std::clamp(y, 0.0, 1.0));
    }
    return out;
}

// Convenience: histogram (default 10 HU bins) -> window -> normalized volume.
inline NormVolume window_volume(const Volume& v, int bin_width = 10,
                                WindowParams* chosen = nullptr) {
    const WindowParams w = compute_window(compute_histogram(v, bin_width));
    if (chosen) *chosen = w;
    return apply_window(v, w);
}

}  // namespace canalseg
