#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "canalseg/rng.hpp"
#include "canalseg/volume.hpp"

namespace canalseg {

struct SpecInvalid : std::runtime_error {
    explicit SpecInvalid(const std::string& what) : std::runtime_error(what) {}
};

struct PhantomSpec {
    std::uint64_t seed = 1;
    Dims3 dims{96, 96, 64};
    HuRegime regime = HuRegime::TypeA;
    double canal_radius_min = 1.5;  // voxels
    double canal_radius_max = 3.5;
    double left_right_asymmetry = 0.2;  // +- fraction of radius/length jitter
    double noise_sigma = 40.0;          // HU

    void validate() const {
        if (dims.nx < 32 || dims.ny < 32 || dims.nz < 32)
            throw SpecInvalid("phantom dims must be >= 32 in every axis");
        if (!(canal_radius_min > 0.0) || canal_radius_max < canal_radius_min)
            throw SpecInvalid("canal radius range invalid");
        if (left_right_asymmetry < 0.0 || left_right_asymmetry >= 1.0)
            throw SpecInvalid("asymmetry must be in [0, 1)");
        if (noise_sigma < 0.0) throw SpecInvalid("noise sigma must be >= 0");
    }
};

struct PhantomCase {
    Volume volume;
    BinaryMask gt_left;
    BinaryMask gt_right;
    PolygonAnnotation annotation;
    PhantomSpec spec;
};

namespace detail {

// Anatomy is painted in a canonical HU frame, then mapped per regime. TypeB is
// a pure +500 HU shift of TypeA (a bin-aligned offset under 10 HU bins), TypeC
// stretches onto [0, 5000].
constexpr std::int32_t kSoftTissueHu = 0;
constexpr std::int32_t kBoneHu = 700;
constexpr std::int32_t kCanalHu = 200;  // bone - canal = 500 HU >= required 200

inline std::int32_t map_regime(std::int32_t canonical, HuRegime regime) {
    switch (regime) {
        case HuRegime::TypeA: return canonical;
        case HuRegime::TypeB: return canonical + 500;
        case HuRegime::TypeC:
            return static_cast<std::int32_t>(std::llround(2.5 * canonical)) + 2500;
    }
    return canonical;
}

struct CanalTrack {
    // Sampled centerline points and per-sample radii, dense enough that the
    // union of sample balls is the swept tube.
    std::vector<std::array<double, 3>> centers;
    std::vector<double> radii;
};

inline void stamp_ball(BinaryMask& mask, const std::array<double, 3>& c, double r) {
    const int x0 = std::max(0, static_cast<int>(std::floor(c[0] - r)));
    const int x1 = std::min(mask.dims.nx - 1, static_cast<int>(std::ceil(c[0] + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(c[1] - r)));
    const int y1 = std::min(mask.dims.ny - 1, static_cast<int>(std::ceil(c[1] + r)));
    const int z0 = std::max(0, static_cast<int>(std::floor(c[2] - r)));
    const int z1 = std::min(mask.dims.nz - 1, static_cast<int>(std::ceil(c[2] + r)));
    const double r2 = r * r;
    for (int z = z0; z <= z1; ++z)
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) {
                const double dx = (x + 0.5) - c[0];
                const double dy = (y + 0.5) - c[1];
                const double dz = (z + 0.5) - c[2];
                if (dx * dx + dy * dy + dz * dz <= r2) mask.at(x, y, z) = 1;
            }
}

// Convex hull (monotone chain) over 2D points; returns CCW hull.
inline std::vector<std::array<double, 2>> convex_hull(std::vector<std::array<double, 2>> pts) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    const std::size_t n = pts.size();
    if (n < 3) return pts;
    auto cross = [](const std::array<double, 2>& o, const std::array<double, 2>& a,
                    const std::array<double, 2>& b) {
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    };
    std::vector<std::array<double, 2>> hull(2 * n);
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i) {
        while (k >= 2 && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    for (std::size_t i = n - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
        hull[k++] = pts[i];
    }
    hull.resize(k - 1);
    return hull;
}

inline std::vector<SlicePolygon> hull_polygons(const BinaryMask& mask) {
    std::vector<SlicePolygon> polys;
    for (int z = 0; z < mask.dims.nz; ++z) {
        std::vector<std::array<double, 2>> corners;
        for (int y = 0; y < mask.dims.ny; ++y)
            for (int x = 0; x < mask.dims.nx; ++x) {
                if (!mask.at(x, y, z)) continue;
                corners.push_back({static_cast<double>(x), static_cast<double>(y)});
                corners.push_back({static_cast<double>(x + 1), static_cast<double>(y)});
                corners.push_back({static_cast<double>(x), static_cast<double>(y + 1)});
                corners.push_back({static_cast<double>(x + 1), static_cast<double>(y + 1)});
            }
        if (corners.empty()) continue;
        auto hull = convex_hull(std::move(corners));
        if (hull.size() < 3) continue;
        SlicePolygon p;
        p.z = z;
        p.pts = std::move(hull);
        polys.push_back(std::move(p));
    }
    return polys;
}

}  // namespace detail

// Deterministic synthetic mandible: soft-tissue background, a parabolic bone
// arch, and two mirrored canal tubes swept inside the bone. Ground-truth masks
// are the exact swept tubes; annotations are per-slice convex hulls.
inline PhantomCase generate_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    const int nx = spec.dims.nx, ny = spec.dims.ny, nz = spec.dims.nz;
    const Spacing3 spacing{0.3, 0.3, 0.3};

    PhantomCase out;
    out.spec = spec;
    out.volume = Volume(spec.dims, spacing, detail::kSoftTissueHu);
    out.volume.hu_regime = spec.regime;
    out.gt_left = BinaryMask(spec.dims, spacing, 0);
    out.gt_right = BinaryMask(spec.dims, spacing, 0);

    // Jaw arch geometry in the axial (x, y) plane, mirrored about x = nx/2.
    const double cx = nx / 2.0;
    const double front_y = ny * rng.uniform(0.22, 0.3);
    const double span = nx * rng.uniform(0.3, 0.36);
    const double back_y = ny * rng.uniform(0.68, 0.78);
    const double curv = (back_y - front_y) / (span * span);
    const double bone_radius = spec.canal_radius_max + 3.5;

    const double jaw_z_lo = nz * 0.18, jaw_z_hi = nz * 0.85;

    // Bone band: voxels within bone_radius (in-plane) of the sampled arch.
    std::vector<std::array<double, 2>> arch_pts;
    for (double u = 0.0; u <= span; u += 0.25) {
        const double ay = front_y + curv * u * u;
        arch_pts.push_back({cx - u, ay});
        arch_pts.push_back({cx + u, ay});
    }
    const double bone_r2 = bone_radius * bone_radius;
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            const double px = x + 0.5, py = y + 0.5;
            bool in_band = false;
            for (const auto& p : arch_pts) {
                const double dx = px - p[0], dy = py - p[1];
                if (dx * dx + dy * dy <= bone_r2) {
                    in_band = true;
                    break;
                }
            }
            if (!in_band) continue;
            for (int z = static_cast<int>(jaw_z_lo); z < static_cast<int>(jaw_z_hi); ++z)
                out.volume.at(x, y, z) = detail::kBoneHu;
        }

    // Canal tubes, one per side. t runs from the back (ramus end, high z)
    // towards the front (mental end, lower z), stopping short of the midline.
    const double midline_gap = 6.0 + spec.canal_radius_max;
    for (int side = 0; side < 2; ++side) {
        const double dir = side == 0 ? -1.0 : 1.0;  // left = -x half
        const double jitter = 1.0 + spec.left_right_asymmetry * rng.uniform(-1.0, 1.0);
        const double radius_lo =
            std::clamp(spec.canal_radius_min +
                           (spec.canal_radius_max - spec.canal_radius_min) *
                               rng.uniform(0.15, 0.45) * jitter,
                       spec.canal_radius_min, spec.canal_radius_max);
        const double radius_hi =
            std::clamp(radius_lo + (spec.canal_radius_max - radius_lo) * rng.uniform(0.3, 0.9),
                       spec.canal_radius_min, spec.canal_radius_max);
        const double span_side = span * (1.0 + spec.left_right_asymmetry *
                                                   rng.uniform(-1.0, 1.0) * 0.5);
        const double z_back = nz * rng.uniform(0.6, 0.72);
        const double z_front = nz * rng.uniform(0.34, 0.46);
        const double wobble_amp = rng.uniform(0.5, 1.8);
        const double wobble_phase = rng.uniform(0.0, 6.283);

        const double u_near = midline_gap;
        const double u_far = std::max(u_near + 8.0, std::min(span_side, span));

        BinaryMask& gt = side == 0 ? out.gt_left : out.gt_right;
        const int steps = 256;
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / steps;
            const double u = u_far + (u_near - u_far) * t;  // back -> front
            const double px = cx + dir * u;
            const double py = front_y + curv * std::min(u, span) * std::min(u, span);
            const double pz = z_back + (z_front - z_back) * t +
                              wobble_amp * std::sin(3.0 * t + wobble_phase);
            const double r = radius_lo + (radius_hi - radius_lo) * (1.0 - t);
            detail::stamp_ball(gt, {px, py, pz}, r);
        }
    }

    // Carve the canals into the volume (lower HU than the surrounding bone).
    for (std::size_t i = 0; i < out.volume.voxels.size(); ++i)
        if (out.gt_left.voxels[i] || out.gt_right.voxels[i])
            out.volume.voxels[i] = detail::kCanalHu;

    // Noise, canonical-frame clamp, then the regime mapping.
    for (auto& hu : out.volume.voxels) {
        const double noisy = hu + spec.noise_sigma * rng.normal();
        const auto canonical =
            static_cast<std::int32_t>(std::clamp<std::int64_t>(std::llround(noisy), -1000, 1000));
        hu = detail::map_regime(canonical, spec.regime);
    }

    out.annotation.left = detail::hull_polygons(out.gt_left);
    out.annotation.right = detail::hull_polygons(out.gt_right);
    return out;
}

// ---------------------------------------------------------------------------
// Dataset generation: case directories plus a manifest
// ---------------------------------------------------------------------------

struct CaseEntry {
    std::string dir;
    std::uint64_t seed = 0;
    HuRegime regime = HuRegime::TypeA;
};

struct DatasetManifest {
    std::vector<CaseEntry> cases;
    std::string root;  // directory holding the manifest
};

inline nlohmann::json phantom_spec_to_json(const PhantomSpec& s) {
    nlohmann::json j;
    j["seed"] = s.seed;
    j["dims"] = {s.dims.nx, s.dims.ny, s.dims.nz};
    j["regime"] = to_string(s.regime);
    j["canal_radius_min"] = s.canal_radius_min;
    j["canal_radius_max"] = s.canal_radius_max;
    j["left_right_asymmetry"] = s.left_right_asymmetry;
    j["noise_sigma"] = s.noise_sigma;
    return j;
}

inline void save_case(const PhantomCase& c, const std::string& dir) {
    std::filesystem::create_directories(dir);
    save_volume(c.volume, dir + "/volume.volz");
    save_volume(c.gt_left, dir + "/gt_left.volz");
    save_volume(c.gt_right, dir + "/gt_right.volz");
    save_annotation(c.annotation, dir + "/annotation.json");
    std::ofstream spec_out(dir + "/spec.json");
    if (!spec_out) throw IoFailure("cannot write spec.json in " + dir);
    spec_out << phantom_spec_to_json(c.spec).dump(2) << '\n';
}

inline DatasetManifest generate_dataset(int n, std::uint64_t base_seed,
                                        const std::vector<HuRegime>& regime_mix,
                                        const std::string& out_dir,
                                        const PhantomSpec& base_spec = {}) {
    if (n < 1) throw SpecInvalid("dataset needs n >= 1");
    if (regime_mix.empty()) throw SpecInvalid("dataset needs at least one regime");
    std::filesystem::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.root = out_dir;
    nlohmann::json jcases = nlohmann::json::array();
    for (int i = 0; i < n; ++i) {
        PhantomSpec spec = base_spec;
        spec.seed = base_seed + static_cast<std::uint64_t>(i);
        spec.regime = regime_mix[static_cast<std::size_t>(i) % regime_mix.size()];
        const PhantomCase c = generate_phantom(spec);
        char name[32];
        std::snprintf(name, sizeof(name), "case_%03d", i);
        save_case(c, out_dir + "/" + name);
        manifest.cases.push_back({name, spec.seed, spec.regime});
        jcases.push_back({{"dir", name}, {"seed", spec.seed}, {"regime", to_string(spec.regime)}});
    }
    nlohmann::json j;
    j["cases"] = std::move(jcases);
    std::ofstream out(out_dir + "/manifest.json");
    if (!out) throw IoFailure("cannot write manifest in " + out_dir);
    out << j.dump(2) << '\n';
    return manifest;
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open manifest: " + path);
    nlohmann::json j;
    in >> j;
    DatasetManifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    if (m.root.empty()) m.root = ".";
    for (const auto& jc : j.at("cases"))
        m.cases.push_back({jc.at("dir").get<std::string>(), jc.at("seed").get<std::uint64_t>(),
                           regime_from_string(jc.at("regime").get<std::string>())});
    return m;
}

inline PhantomCase load_case(const std::string& dir) {
    PhantomCase c;
    c.volume = load_volume(dir + "/volume.volz");
    c.gt_left = load_grid<std::uint8_t>(dir + "/gt_left.volz");
    c.gt_right = load_grid<std::uint8_t>(dir + "/gt_right.volz");
    c.annotation = load_annotation(dir + "/annotation.json");
    return c;
}

}  // namespace canalseg
