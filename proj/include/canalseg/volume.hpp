#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace canalseg {

struct MalformedHeader : std::runtime_error {
    explicit MalformedHeader(const std::string& what) : std::runtime_error(what) {}
};
struct PayloadSizeMismatch : std::runtime_error {
    explicit PayloadSizeMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct UnsupportedDtype : std::runtime_error {
    explicit UnsupportedDtype(const std::string& what) : std::runtime_error(what) {}
};
struct IoFailure : std::runtime_error {
    explicit IoFailure(const std::string& what) : std::runtime_error(what) {}
};
struct ModeLabelMismatch : std::runtime_error {
    explicit ModeLabelMismatch(const std::string& what) : std::runtime_error(what) {}
};
struct DegeneratePolygon : std::runtime_error {
    explicit DegeneratePolygon(const std::string& what) : std::runtime_error(what) {}
};

struct Dims3 {
    int nx = 0, ny = 0, nz = 0;

    std::int64_t count() const {
        return static_cast<std::int64_t>(nx) * ny * nz;
    }
    bool operator==(const Dims3&) const = default;
};

struct Spacing3 {
    double sx = 1.0, sy = 1.0, sz = 1.0;
    bool operator==(const Spacing3&) const = default;
};

enum class HuRegime { TypeA, TypeB, TypeC };

inline const char* to_string(HuRegime r) {
    switch (r) {
        case HuRegime::TypeA: return "TypeA";
        case HuRegime::TypeB: return "TypeB";
        case HuRegime::TypeC: return "TypeC";
    }
    return "TypeA";
}

inline HuRegime regime_from_string(const std::string& s) {
    if (s == "TypeA") return HuRegime::TypeA;
    if (s == "TypeB") return HuRegime::TypeB;
    if (s == "TypeC") return HuRegime::TypeC;
    throw std::invalid_argument("unknown HU regime: " + s);
}

// Dense 3D scalar grid, x-fastest layout. T is one of:
//   int32_t  - HU intensities        (dtype "i32")
//   float    - normalized/probability values (dtype "f32")
//   uint8_t  - binary labels         (dtype "u8")
template <class T>
struct VoxelGrid {
    Dims3 dims;
    Spacing3 spacing;
    std::vector<T> voxels;
    std::optional<HuRegime> hu_regime;  // generator metadata, not persisted

    VoxelGrid() = default;
    VoxelGrid(Dims3 d, Spacing3 s, T fill = T{})
        : dims(d), spacing(s), voxels(static_cast<std::size_t>(d.count()), fill) {}

    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * dims.ny + y) * dims.nx + x;
    }
    T at(int x, int y, int z) const { return voxels[index(x, y, z)]; }
    T& at(int x, int y, int z) { return voxels[index(x, y, z)]; }
    bool in_bounds(int x, int y, int z) const {
        return x >= 0 && y >= 0 && z >= 0 && x < dims.nx && y < dims.ny && z < dims.nz;
    }
};

using Volume = VoxelGrid<std::int32_t>;
using NormVolume = VoxelGrid<float>;
using ProbMap = VoxelGrid<float>;
using BinaryMask = VoxelGrid<std::uint8_t>;

// Half-open voxel-index box: lo inclusive, hi exclusive.
struct Box {
    std::array<int, 3> lo{0, 0, 0};
    std::array<int, 3> hi{0, 0, 0};

    bool valid() const { return lo[0] < hi[0] && lo[1] < hi[1] && lo[2] < hi[2]; }
    Dims3 extent() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }

    Box expanded(int margin) const {
        Box b;
        for (int a = 0; a < 3; ++a) {
            b.lo[a] = lo[a] - margin;
            b.hi[a] = hi[a] + margin;
        }
        return b;
    }
    Box clipped(const Dims3& d) const {
        const int n[3] = {d.nx, d.ny, d.nz};
        Box b;
        for (int a = 0; a < 3; ++a) {
            b.lo[a] = std::max(lo[a], 0);
            b.hi[a] = std::min(hi[a], n[a]);
        }
        return b;
    }
    bool contains(const Box& inner) const {
        for (int a = 0; a < 3; ++a)
            if (inner.lo[a] < lo[a] || inner.hi[a] > hi[a]) return false;
        return true;
    }
    bool operator==(const Box&) const = default;
};

struct Histogram {
    int bin_width = 10;          // HU per bin, >= 1
    std::int32_t origin = 0;     // HU of the left edge of bin 0 (= volume minimum)
    std::vector<std::int64_t> counts;

    // Representative intensity of bin k: its lower edge. Anchoring at the edge
    // keeps the mode of a constant scan equal to the scan value itself.
    double bin_intensity(std::size_t k) const {
        return static_cast<double>(origin) + static_cast<double>(k) * bin_width;
    }
    std::int64_t total() const {
        std::int64_t t = 0;
        for (auto c : counts) t += c;
        return t;
    }
};

// Per-slice polygon outline in voxel coordinates.
struct SlicePolygon {
    int z = 0;
    std::vector<std::array<double, 2>> pts;
};

struct PolygonAnnotation {
    std::vector<SlicePolygon> left;
    std::vector<SlicePolygon> right;
};

namespace detail {

template <class T>
struct DtypeName;
template <>
struct DtypeName<std::int32_t> {
    static constexpr const char* value = "i32";
};
template <>
struct DtypeName<float> {
    static constexpr const char* value = "f32";
};
template <>
struct DtypeName<std::uint8_t> {
    static constexpr const char* value = "u8";
};

static_assert(sizeof(float) == 4, "expects 32-bit IEEE floats");

}  // namespace detail

// ---------------------------------------------------------------------------
// VOLZ on-disk format: one UTF-8 JSON header line ('\n' terminated) with keys
// {"dims","spacing","dtype","order"}, followed by the raw little-endian voxel
// payload of exactly nx*ny*nz elements.
// ---------------------------------------------------------------------------

template <class T>
void save_volume(const VoxelGrid<T>& v, const std::string& path) {
    nlohmann::json header;
    header["dims"] = {v.dims.nx, v.dims.ny, v.dims.nz};
    header["spacing"] = {v.spacing.sx, v.spacing.sy, v.spacing.sz};
    header["dtype"] = detail::DtypeName<T>::value;
    header["order"] = "xfastest";

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open for writing: " + path);
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(v.voxels.data()),
              static_cast<std::streamsize>(v.voxels.size() * sizeof(T)));
    if (!out) throw IoFailure("write failed: " + path);
}

inline nlohmann::json read_volz_header(std::istream& in, Dims3& dims, Spacing3& spacing,
                                       std::string& dtype) {
    std::string line;
    if (!std::getline(in, line)) throw MalformedHeader("missing header line");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw MalformedHeader(std::string("header is not valid JSON: ") + e.what());
    }
    if (!header.is_object()) throw MalformedHeader("header is not a JSON object");
    for (const auto& [key, _] : header.items()) {
        if (key != "dims" && key != "spacing" && key != "dtype" && key != "order")
            throw MalformedHeader("unexpected header key: " + key);
    }
    for (const char* key : {"dims", "spacing", "dtype", "order"}) {
        if (!header.contains(key)) throw MalformedHeader(std::string("missing header key: ") + key);
    }
    auto jd = header["dims"];
    auto js = header["spacing"];
    if (!jd.is_array() || jd.size() != 3 || !js.is_array() || js.size() != 3)
        throw MalformedHeader("dims/spacing must be 3-element arrays");
    dims = {jd[0].get<int>(), jd[1].get<int>(), jd[2].get<int>()};
    spacing = {js[0].get<double>(), js[1].get<double>(), js[2].get<double>()};
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1) throw MalformedHeader("dims must be >= 1");
    if (!(spacing.sx > 0.0) || !(spacing.sy > 0.0) || !(spacing.sz > 0.0))
        throw MalformedHeader("spacing must be > 0");
    if (header["order"].get<std::string>() != "xfastest")
        throw MalformedHeader("unsupported voxel order");
    dtype = header["dtype"].get<std::string>();
    if (dtype != "i32" && dtype != "f32" && dtype != "u8")
        throw UnsupportedDtype("unsupported dtype: " + dtype);
    return header;
}

template <class T>
VoxelGrid<T> load_grid(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open: " + path);

    Dims3 dims;
    Spacing3 spacing;
    std::string dtype;
    read_volz_header(in, dims, spacing, dtype);
    if (dtype != detail::DtypeName<T>::value)
        throw UnsupportedDtype("expected dtype " + std::string(detail::DtypeName<T>::value) +
                               ", file has " + dtype);

    VoxelGrid<T> v(dims, spacing);
    const std::streamsize bytes = static_cast<std::streamsize>(v.voxels.size() * sizeof(T));
    in.read(reinterpret_cast<char*>(v.voxels.data()), bytes);
    if (in.gcount() != bytes)
        throw PayloadSizeMismatch("payload shorter than header dims promise");
    char extra;
    if (in.read(&extra, 1); in.gcount() != 0)
        throw PayloadSizeMismatch("payload longer than header dims promise");
    return v;
}

inline Volume load_volume(const std::string& path) { return load_grid<std::int32_t>(path); }

// Peeks at a VOLZ header without reading the payload.
inline std::string volz_dtype(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open: " + path);
    Dims3 dims;
    Spacing3 spacing;
    std::string dtype;
    read_volz_header(in, dims, spacing, dtype);
    return dtype;
}

// ---------------------------------------------------------------------------
// Histogram
// ---------------------------------------------------------------------------

inline Histogram compute_histogram(const Volume& v, int bin_width = 10) {
    if (bin_width < 1) throw std::invalid_argument("bin_width must be >= 1");
    if (v.voxels.empty()) throw std::invalid_argument("empty volume");

    const auto [mn_it, mx_it] = std::minmax_element(v.voxels.begin(), v.voxels.end());
    const std::int64_t mn = *mn_it, mx = *mx_it;

    Histogram h;
    h.bin_width = bin_width;
    h.origin = static_cast<std::int32_t>(mn);
    const std::int64_t nbins = (mx - mn) / bin_width + 1;
    h.counts.assign(static_cast<std::size_t>(nbins), 0);
    for (std::int32_t hu : v.voxels) {
        const std::int64_t k = (static_cast<std::int64_t>(hu) - mn) / bin_width;
        ++h.counts[static_cast<std::size_t>(k)];
    }
    return h;
}

// ---------------------------------------------------------------------------
// Resampling (voxel-center convention, clamped at the edges)
// ---------------------------------------------------------------------------

enum class ResampleMode { Trilinear, Nearest };

namespace detail {

// Source coordinate of an output voxel center: src = (dst + 0.5) * in/out - 0.5,
// clamped to [0, in-1].
inline double src_coord(int dst, int in_n, int out_n) {
    const double s = (dst + 0.5) * (static_cast<double>(in_n) / out_n) - 0.5;
    return std::clamp(s, 0.0, static_cast<double>(in_n - 1));
}

template <class T>
double fetch(const VoxelGrid<T>& v, int x, int y, int z) {
    return static_cast<double>(v.at(x, y, z));
}

template <class T>
T store_interp(double value);
template <>
inline float store_interp<float>(double value) {
    return static_cast<float>(value);
}
template <>
inline std::int32_t store_interp<std::int32_t>(double value) {
    return static_cast<std::int32_t>(std::llround(value));
}
template <>
inline std::uint8_t store_interp<std::uint8_t>(double value) {
    return static_cast<std::uint8_t>(std::llround(value));
}

}  // namespace detail

template <class T>
VoxelGrid<T> resample(const VoxelGrid<T>& v, Dims3 out_dims, ResampleMode mode) {
    if (out_dims.nx < 1 || out_dims.ny < 1 || out_dims.nz < 1)
        throw std::invalid_argument("output dims must be >= 1");
    if constexpr (std::is_same_v<T, std::uint8_t>) {
        if (mode == ResampleMode::Trilinear)
            throw ModeLabelMismatch("trilinear resampling is not defined on label grids");
    }

    VoxelGrid<T> out(out_dims,
                     {v.spacing.sx * v.dims.nx / out_dims.nx,
                      v.spacing.sy * v.dims.ny / out_dims.ny,
                      v.spacing.sz * v.dims.nz / out_dims.nz});
    out.hu_regime = v.hu_regime;

    std::vector<double> sx(out_dims.nx), sy(out_dims.ny), sz(out_dims.nz);
    for (int x = 0; x < out_dims.nx; ++x) sx[x] = detail::src_coord(x, v.dims.nx, out_dims.nx);
    for (int y = 0; y < out_dims.ny; ++y) sy[y] = detail::src_coord(y, v.dims.ny, out_dims.ny);
    for (int z = 0; z < out_dims.nz; ++z) sz[z] = detail::src_coord(z, v.dims.nz, out_dims.nz);

    if (mode == ResampleMode::Nearest) {
        for (int z = 0; z < out_dims.nz; ++z) {
            const int iz = static_cast<int>(std::floor(sz[z] + 0.5));
            for (int y = 0; y < out_dims.ny; ++y) {
                const int iy = static_cast<int>(std::floor(sy[y] + 0.5));
                for (int x = 0; x < out_dims.nx; ++x) {
                    const int ix = static_cast<int>(std::floor(sx[x] + 0.5));
                    out.at(x, y, z) = v.at(std::min(ix, v.dims.nx - 1),
                                           std::min(iy, v.dims.ny - 1),
                                           std::min(iz, v.dims.nz - 1));
                }
            }
        }
        return out;
    }

    for (int z = 0; z < out_dims.nz; ++z) {
        const int z0 = static_cast<int>(std::floor(sz[z]));
        const int z1 = std::min(z0 + 1, v.dims.nz - 1);
        const double fz = sz[z] - z0;
        for (int y = 0; y < out_dims.ny; ++y) {
            const int y0 = static_cast<int>(std::floor(sy[y]));
            const int y1 = std::min(y0 + 1, v.dims.ny - 1);
            const double fy = sy[y] - y0;
            for (int x = 0; x < out_dims.nx; ++x) {
                const int x0 = static_cast<int>(std::floor(sx[x]));
                const int x1 = std::min(x0 + 1, v.dims.nx - 1);
                const double fx = sx[x] - x0;

                const double c000 = detail::fetch(v, x0, y0, z0);
                const double c100 = detail::fetch(v, x1, y0, z0);
                const double c010 = detail::fetch(v, x0, y1, z0);
                const double c110 = detail::fetch(v, x1, y1, z0);
                const double c001 = detail::fetch(v, x0, y0, z1);
                const double c101 = detail::fetch(v, x1, y0, z1);
                const double c011 = detail::fetch(v, x0, y1, z1);
                const double c111 = detail::fetch(v, x1, y1, z1);

                const double c00 = c000 + fx * (c100 - c000);
                const double c10 = c010 + fx * (c110 - c010);
                const double c01 = c001 + fx * (c101 - c001);
                const double c11 = c011 + fx * (c111 - c011);
                const double c0 = c00 + fy * (c10 - c00);
                const double c1 = c01 + fy * (c11 - c01);
                out.at(x, y, z) = detail::store_interp<T>(c0 + fz * (c1 - c0));
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Crop / pad
// ---------------------------------------------------------------------------

template <class T>
VoxelGrid<T> crop_pad(const VoxelGrid<T>& v, const Box& box, T fill) {
    if (!box.valid()) throw std::invalid_argument("empty crop box");
    VoxelGrid<T> out(box.extent(), v.spacing, fill);
    out.hu_regime = v.hu_regime;

    const int x0 = std::max(box.lo[0], 0), x1 = std::min(box.hi[0], v.dims.nx);
    const int y0 = std::max(box.lo[1], 0), y1 = std::min(box.hi[1], v.dims.ny);
    const int z0 = std::max(box.lo[2], 0), z1 = std::min(box.hi[2], v.dims.nz);
    for (int z = z0; z < z1; ++z)
        for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x)
                out.at(x - box.lo[0], y - box.lo[1], z - box.lo[2]) = v.at(x, y, z);
    return out;
}

// ---------------------------------------------------------------------------
// Polygon rasterization (even-odd rule sampled at voxel centers)
// ---------------------------------------------------------------------------

namespace detail {

inline void fill_polygon_slice(BinaryMask& mask, const SlicePolygon& poly) {
    if (poly.pts.size() < 3)
        throw DegeneratePolygon("polygon needs >= 3 vertices, got " +
                                std::to_string(poly.pts.size()));
    if (poly.z < 0 || poly.z >= mask.dims.nz)
        throw std::invalid_argument("polygon slice index outside volume depth");

    const std::size_t n = poly.pts.size();
    std::vector<double> xs;
    xs.reserve(8);
    for (int j = 0; j < mask.dims.ny; ++j) {
        const double yc = j + 0.5;
        xs.clear();
        for (std::size_t e = 0; e < n; ++e) {
            const auto& a = poly.pts[e];
            const auto& b = poly.pts[(e + 1) % n];
            // Count an edge when exactly one endpoint lies strictly above the
            // scanline (half-open rule, matches the classic even-odd test).
            if ((a[1] > yc) != (b[1] > yc)) {
                xs.push_back(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
            }
        }
        if (xs.empty()) continue;
        std::sort(xs.begin(), xs.end());
        for (int i = 0; i < mask.dims.nx; ++i) {
            const double xc = i + 0.5;
            const auto greater =
                xs.end() - std::upper_bound(xs.begin(), xs.end(), xc);
            if (greater % 2 == 1) mask.at(i, j, poly.z) = 1;
        }
    }
}

}  // namespace detail

inline std::pair<BinaryMask, BinaryMask> rasterize_polygons(const PolygonAnnotation& ann,
                                                            Dims3 dims) {
    BinaryMask left(dims, {1, 1, 1}, 0);
    BinaryMask right(dims, {1, 1, 1}, 0);
    for (const auto& p : ann.left) detail::fill_polygon_slice(left, p);
    for (const auto& p : ann.right) detail::fill_polygon_slice(right, p);
    return {std::move(left), std::move(right)};
}

// ---------------------------------------------------------------------------
// Mask bounding box
// ---------------------------------------------------------------------------

inline std::optional<Box> mask_bounding_box(const BinaryMask& m) {
    Box b{{m.dims.nx, m.dims.ny, m.dims.nz}, {0, 0, 0}};
    bool any = false;
    std::size_t idx = 0;
    for (int z = 0; z < m.dims.nz; ++z)
        for (int y = 0; y < m.dims.ny; ++y)
            for (int x = 0; x < m.dims.nx; ++x, ++idx) {
                if (!m.voxels[idx]) continue;
                any = true;
                b.lo[0] = std::min(b.lo[0], x);
                b.lo[1] = std::min(b.lo[1], y);
                b.lo[2] = std::min(b.lo[2], z);
                b.hi[0] = std::max(b.hi[0], x + 1);
                b.hi[1] = std::max(b.hi[1], y + 1);
                b.hi[2] = std::max(b.hi[2], z + 1);
            }
    if (!any) return std::nullopt;
    return b;
}

// ---------------------------------------------------------------------------
// Annotation JSON I/O: {"left":[{"z":int,"pts":[[x,y],...]},...],"right":[...]}
// ---------------------------------------------------------------------------

inline nlohmann::json annotation_to_json(const PolygonAnnotation& ann) {
    auto side = [](const std::vector<SlicePolygon>& polys) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& p : polys) {
            nlohmann::json jp;
            jp["z"] = p.z;
            nlohmann::json pts = nlohmann::json::array();
            for (const auto& v : p.pts) pts.push_back({v[0], v[1]});
            jp["pts"] = std::move(pts);
            arr.push_back(std::move(jp));
        }
        return arr;
    };
    nlohmann::json j;
    j["left"] = side(ann.left);
    j["right"] = side(ann.right);
    return j;
}

inline PolygonAnnotation annotation_from_json(const nlohmann::json& j) {
    auto side = [](const nlohmann::json& arr) {
        std::vector<SlicePolygon> polys;
        for (const auto& jp : arr) {
            SlicePolygon p;
            p.z = jp.at("z").get<int>();
            for (const auto& v : jp.at("pts")) p.pts.push_back({v[0].get<double>(), v[1].get<double>()});
            polys.push_back(std::move(p));
        }
        return polys;
    };
    PolygonAnnotation ann;
    ann.left = side(j.at("left"));
    ann.right = side(j.at("right"));
    return ann;
}

inline void save_annotation(const PolygonAnnotation& ann, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoFailure("cannot open for writing: " + path);
    out << annotation_to_json(ann).dump(2) << '\n';
}

inline PolygonAnnotation load_annotation(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open: " + path);
    nlohmann::json j;
    in >> j;
    return annotation_from_json(j);
}

}  // namespace canalseg
