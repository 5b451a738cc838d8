#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "canalseg/volume.hpp"

namespace canalseg {

enum class MorphOp { Dilate, Erode, Open, Close };

// Structuring element: box = full (2r+1)^3 cube, cross = voxels within
// L1 distance r (the 6-neighbourhood at r = 1).
struct StructElem {
    enum class Shape { Box, Cross };
    Shape shape = Shape::Box;
    int radius = 1;

    std::vector<std::array<int, 3>> offsets() const {
        if (radius < 1) throw std::invalid_argument("structuring element radius must be >= 1");
        std::vector<std::array<int, 3>> out;
        for (int dz = -radius; dz <= radius; ++dz)
            for (int dy = -radius; dy <= radius; ++dy)
                for (int dx = -radius; dx <= radius; ++dx) {
                    if (shape == Shape::Cross &&
                        std::abs(dx) + std::abs(dy) + std::abs(dz) > radius)
                        continue;
                    out.push_back({dx, dy, dz});
                }
        return out;
    }

    static StructElem box(int r = 1) { return {Shape::Box, r}; }
    static StructElem cross(int r = 1) { return {Shape::Cross, r}; }
};

namespace detail {

// Out-of-bounds voxels count as background: dilation contributions stop at the
// border and erosion treats the outside as empty (masks never grow outwards).
inline BinaryMask dilate_or_erode(const BinaryMask& m, const StructElem& se, bool dilate) {
    BinaryMask out(m.dims, m.spacing, 0);
    const auto offs = se.offsets();
    for (int z = 0; z < m.dims.nz; ++z)
        for (int y = 0; y < m.dims.ny; ++y)
            for (int x = 0; x < m.dims.nx; ++x) {
                bool hit = dilate ? false : true;
                for (const auto& o : offs) {
                    const int xx = x + o[0], yy = y + o[1], zz = z + o[2];
                    const bool v = m.in_bounds(xx, yy, zz) && m.at(xx, yy, zz) != 0;
                    if (dilate) {
                        if (v) {
                            hit = true;
                            break;
                        }
                    } else if (!v) {
                        hit = false;
                        break;
                    }
                }
                out.at(x, y, z) = hit ? 1 : 0;
            }
    return out;
}

}  // namespace detail

inline BinaryMask morph(const BinaryMask& m, MorphOp op, const StructElem& se) {
    switch (op) {
        case MorphOp::Dilate: return detail::dilate_or_erode(m, se, true);
        case MorphOp::Erode: return detail::dilate_or_erode(m, se, false);
        case MorphOp::Open:
            return detail::dilate_or_erode(detail::dilate_or_erode(m, se, false), se, true);
        case MorphOp::Close:
            return detail::dilate_or_erode(detail::dilate_or_erode(m, se, true), se, false);
    }
    throw std::invalid_argument("unknown morphological operation");
}

// ---------------------------------------------------------------------------
// 26-connected component labelling; labels assigned in scan order (1-based,
// 0 = background), so the result is deterministic.
// ---------------------------------------------------------------------------

struct ComponentLabels {
    VoxelGrid<std::int32_t> labels;
    std::vector<std::int64_t> sizes;  // sizes[k] = voxel count of label k+1

    int count() const { return static_cast<int>(sizes.size()); }
};

inline ComponentLabels connected_components(const BinaryMask& m) {
    ComponentLabels result;
    result.labels = VoxelGrid<std::int32_t>(m.dims, m.spacing, 0);
    std::vector<std::size_t> stack;

    std::size_t idx = 0;
    for (int z = 0; z < m.dims.nz; ++z)
        for (int y = 0; y < m.dims.ny; ++y)
            for (int x = 0; x < m.dims.nx; ++x, ++idx) {
                if (!m.voxels[idx] || result.labels.voxels[idx]) continue;
                const std::int32_t label = static_cast<std::int32_t>(result.sizes.size()) + 1;
                std::int64_t size = 0;
                stack.clear();
                stack.push_back(idx);
                result.labels.voxels[idx] = label;
                while (!stack.empty()) {
                    const std::size_t cur = stack.back();
                    stack.pop_back();
                    ++size;
                    const int cz = static_cast<int>(cur / (static_cast<std::size_t>(m.dims.nx) *
                                                           m.dims.ny));
                    const int rem = static_cast<int>(cur % (static_cast<std::size_t>(m.dims.nx) *
                                                            m.dims.ny));
                    const int cy = rem / m.dims.nx;
                    const int cx = rem % m.dims.nx;
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                if (!dx && !dy && !dz) continue;
                                const int nx = cx + dx, ny = cy + dy, nz = cz + dz;
                                if (!m.in_bounds(nx, ny, nz)) continue;
                                const std::size_t nidx = m.index(nx, ny, nz);
                                if (!m.voxels[nidx] || result.labels.voxels[nidx]) continue;
                                result.labels.voxels[nidx] = label;
                                stack.push_back(nidx);
                            }
                }
                result.sizes.push_back(size);
            }
    return result;
}

// Geodesic reconstruction: the subset of mask 26-connected to any marker.
inline BinaryMask reconstruct(const BinaryMask& mask, const BinaryMask& markers) {
    BinaryMask out(mask.dims, mask.spacing, 0);
    std::vector<std::size_t> stack;
    for (std::size_t i = 0; i < mask.voxels.size(); ++i)
        if (markers.voxels[i] && mask.voxels[i] && !out.voxels[i]) {
            out.voxels[i] = 1;
            stack.push_back(i);
        }
    const std::size_t plane = static_cast<std::size_t>(mask.dims.nx) * mask.dims.ny;
    while (!stack.empty()) {
        const std::size_t cur = stack.back();
        stack.pop_back();
        const int cz = static_cast<int>(cur / plane);
        const int cy = static_cast<int>((cur % plane) / mask.dims.nx);
        const int cx = static_cast<int>(cur % mask.dims.nx);
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int nx = cx + dx, ny = cy + dy, nz = cz + dz;
                    if (!mask.in_bounds(nx, ny, nz)) continue;
                    const std::size_t ni = mask.index(nx, ny, nz);
                    if (mask.voxels[ni] && !out.voxels[ni]) {
                        out.voxels[ni] = 1;
                        stack.push_back(ni);
                    }
                }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Canal refinement: close small gaps, keep the dominant component(s), then a
// cross-r1 opening by reconstruction. The reconstruction keeps every voxel of
// a structure that has an erosion core, so a clean tube passes unchanged
// while coreless debris vanishes. Any fragment below 0.1% of the kept mass is
// dropped should the mask still re-split.
// ---------------------------------------------------------------------------

inline BinaryMask refine_canal(const BinaryMask& m, int side_count = 1) {
    if (side_count < 1) throw std::invalid_argument("side_count must be >= 1");

    BinaryMask closed = morph(m, MorphOp::Close, StructElem::box(1));
    ComponentLabels cc = connected_components(closed);
    if (cc.count() == 0) return closed;

    std::vector<int> order(cc.sizes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return cc.sizes[a] > cc.sizes[b]; });

    std::vector<char> keep(cc.sizes.size(), 0);
    std::int64_t kept_volume = 0;
    for (int i = 0; i < side_count && i < static_cast<int>(order.size()); ++i) {
        keep[order[i]] = 1;
        kept_volume += cc.sizes[order[i]];
    }
    BinaryMask kept(m.dims, m.spacing, 0);
    for (std::size_t i = 0; i < kept.voxels.size(); ++i) {
        const std::int32_t label = cc.labels.voxels[i];
        kept.voxels[i] = label && keep[label - 1] ? 1 : 0;
    }

    const BinaryMask markers = morph(kept, MorphOp::Erode, StructElem::cross(1));
    bool any_marker = false;
    for (auto v : markers.voxels) any_marker |= v != 0;
    // A mask too thin to survive erosion anywhere is kept as-is.
    BinaryMask opened = any_marker ? reconstruct(kept, markers) : kept;

    ComponentLabels after = connected_components(opened);
    if (after.count() <= side_count) return opened;
    const double min_size = 0.001 * static_cast<double>(kept_volume);
    for (std::size_t i = 0; i < opened.voxels.size(); ++i) {
        const std::int32_t label = after.labels.voxels[i];
        if (label && static_cast<double>(after.sizes[label - 1]) < min_size)
            opened.voxels[i] = 0;
    }
    return opened;
}

}  // namespace canalseg
