#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "canalseg/checkpoint.hpp"
#include "canalseg/morphology.hpp"
#include "canalseg/nets.hpp"
#include "canalseg/volume.hpp"
#include "canalseg/windowing.hpp"

namespace canalseg {

struct EmptySideMask : std::runtime_error {
    explicit EmptySideMask(const std::string& what) : std::runtime_error(what) {}
};
struct BoxOutOfRange : std::runtime_error {
    explicit BoxOutOfRange(const std::string& what) : std::runtime_error(what) {}
};
struct UntrainedNet : std::runtime_error {
    explicit UntrainedNet(const std::string& what) : std::runtime_error(what) {}
};

struct PipelineConfig {
    Dims3 coarse_input_dims{64, 64, 64};
    int voi_margin = 8;  // voxels added around the coarse bounding box
    std::array<Dims3, 3> fine_dims{{{48, 48, 48}, {32, 32, 32}, {24, 24, 24}}};
    double threshold = 0.5;

    void validate() const {
        if (voi_margin < 0) throw std::invalid_argument("voi_margin must be >= 0");
        if (!(threshold > 0.0 && threshold < 1.0))
            throw std::invalid_argument("threshold must be in (0,1)");
        for (const Dims3& d : fine_dims)
            if (d.nx < 1 || d.ny < 1 || d.nz < 1)
                throw std::invalid_argument("fine dims must be >= 1");
    }
};

enum class Side { Left, Right };

inline const char* to_string(Side s) { return s == Side::Left ? "left" : "right"; }

struct VoiRecord {
    Side side = Side::Left;
    Box box;          // full-volume voxel coordinates
    Dims3 base_dims;  // resolution the fine net saw
    ProbMap prob;     // fine-stage output at base_dims
};

// ---------------------------------------------------------------------------
// Tensor <-> grid bridging ((1,1,D,H,W); tensor D maps to grid z)
// ---------------------------------------------------------------------------

inline Tensor5D grid_to_tensor(const VoxelGrid<float>& g) {
    Tensor5D t({1, 1, g.dims.nz, g.dims.ny, g.dims.nx});
    std::copy(g.voxels.begin(), g.voxels.end(), t.data.begin());
    return t;
}

inline ProbMap tensor_to_grid(const Tensor5D& t, Spacing3 spacing) {
    ProbMap g({t.shape.w, t.shape.h, t.shape.d}, spacing);
    std::copy(t.data.begin(), t.data.end(), g.voxels.begin());
    return g;
}

inline Tensor5D mask_to_tensor(const BinaryMask& m) {
    Tensor5D t({1, 1, m.dims.nz, m.dims.ny, m.dims.nx});
    for (std::size_t i = 0; i < m.voxels.size(); ++i) t.data[i] = m.voxels[i] ? 1.0f : 0.0f;
    return t;
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

inline ProbMap coarse_segment(const NormVolume& v, CoarseNet& net, const PipelineConfig& cfg) {
    const NormVolume small = resample(v, cfg.coarse_input_dims, ResampleMode::Trilinear);
    const Tensor5D out = net.forward(grid_to_tensor(small), /*training=*/false).main;
    ProbMap prob = tensor_to_grid(out, small.spacing);
    return resample(prob, v.dims, ResampleMode::Trilinear);
}

// Threshold, 26-connected components, then side assignment: components are
// placed by centroid vs. the x midplane, and a component spanning both halves
// is cut at the midplane.
inline std::pair<BinaryMask, BinaryMask> split_left_right(const ProbMap& coarse,
                                                          double threshold) {
    BinaryMask thresholded(coarse.dims, coarse.spacing, 0);
    for (std::size_t i = 0; i < coarse.voxels.size(); ++i)
        thresholded.voxels[i] = coarse.voxels[i] >= threshold ? 1 : 0;

    const ComponentLabels cc = connected_components(thresholded);
    const double mid = coarse.dims.nx / 2.0;

    std::vector<double> centroid_x(cc.sizes.size(), 0.0);
    std::vector<char> spans_left(cc.sizes.size(), 0), spans_right(cc.sizes.size(), 0);
    std::size_t idx = 0;
    for (int z = 0; z < coarse.dims.nz; ++z)
        for (int y = 0; y < coarse.dims.ny; ++y)
            for (int x = 0; x < coarse.dims.nx; ++x, ++idx) {
                const std::int32_t label = cc.labels.voxels[idx];
                if (!label) continue;
                centroid_x[label - 1] += x + 0.5;
                if (x + 0.5 < mid)
                    spans_left[label - 1] = 1;
                else
                    spans_right[label - 1] = 1;
            }

    // 0 = left, 1 = right, 2 = cut at the midplane
    std::vector<char> assign(cc.sizes.size(), 0);
    for (std::size_t k = 0; k < cc.sizes.size(); ++k) {
        if (spans_left[k] && spans_right[k])
            assign[k] = 2;
        else
            assign[k] = centroid_x[k] / static_cast<double>(cc.sizes[k]) < mid ? 0 : 1;
    }

    BinaryMask left(coarse.dims, coarse.spacing, 0);
    BinaryMask right(coarse.dims, coarse.spacing, 0);
    idx = 0;
    for (int z = 0; z < coarse.dims.nz; ++z)
        for (int y = 0; y < coarse.dims.ny; ++y)
            for (int x = 0; x < coarse.dims.nx; ++x, ++idx) {
                const std::int32_t label = cc.labels.voxels[idx];
                if (!label) continue;
                const char a = assign[label - 1];
                const bool is_left = a == 0 || (a == 2 && x + 0.5 < mid);
                (is_left ? left : right).voxels[idx] = 1;
            }
    return {std::move(left), std::move(right)};
}

struct VoiExtraction {
    VoiRecord record;
    NormVolume input;  // cropped and resampled to base dims
};

inline VoiExtraction extract_voi(const NormVolume& v, const BinaryMask& side_mask, Side side,
                                 const PipelineConfig& cfg) {
    const std::optional<Box> bbox = mask_bounding_box(side_mask);
    if (!bbox) throw EmptySideMask(std::string("no voxels on the ") + to_string(side) + " side");

    VoiExtraction out;
    out.record.side = side;
    out.record.box = bbox->expanded(cfg.voi_margin).clipped(v.dims);
    out.record.base_dims = cfg.fine_dims[0];
    const NormVolume cropped = crop_pad(v, out.record.box, 0.0f);
    out.input = resample(cropped, cfg.fine_dims[0], ResampleMode::Trilinear);
    return out;
}

struct MultiscaleInputs {
    NormVolume x1, x2, x3;
};

inline MultiscaleInputs make_multiscale_inputs(const NormVolume& voi, const PipelineConfig& cfg) {
    MultiscaleInputs m;
    m.x1 = voi;
    m.x2 = resample(voi, cfg.fine_dims[1], ResampleMode::Trilinear);
    m.x3 = resample(voi, cfg.fine_dims[2], ResampleMode::Trilinear);
    return m;
}

inline ProbMap fine_segment(const MultiscaleInputs& in, FineNet& net) {
    const Tensor5D out = net.forward(grid_to_tensor(in.x1), grid_to_tensor(in.x2),
                                     grid_to_tensor(in.x3), /*training=*/false);
    return tensor_to_grid(out, in.x1.spacing);
}

// Writes each VOI probability map back into a full-resolution accumulator
// (max on overlap) and thresholds; voxels outside every box stay 0.
inline BinaryMask merge_to_full(const std::vector<VoiRecord>& vois, Dims3 full_dims,
                                const PipelineConfig& cfg) {
    const Box full_box{{0, 0, 0}, {full_dims.nx, full_dims.ny, full_dims.nz}};
    ProbMap acc(full_dims, {1, 1, 1});
    for (const VoiRecord& voi : vois) {
        if (!full_box.contains(voi.box))
            throw BoxOutOfRange("VOI box exceeds the full volume extent");
        const ProbMap back = resample(voi.prob, voi.box.extent(), ResampleMode::Trilinear);
        for (int z = voi.box.lo[2]; z < voi.box.hi[2]; ++z)
            for (int y = voi.box.lo[1]; y < voi.box.hi[1]; ++y)
                for (int x = voi.box.lo[0]; x < voi.box.hi[0]; ++x) {
                    float& a = acc.at(x, y, z);
                    a = std::max(a, back.at(x - voi.box.lo[0], y - voi.box.lo[1],
                                            z - voi.box.lo[2]));
                }
    }
    BinaryMask out(full_dims, {1, 1, 1}, 0);
    for (std::size_t i = 0; i < acc.voxels.size(); ++i)
        out.voxels[i] = acc.voxels[i] >= cfg.threshold ? 1 : 0;
    return out;
}

// ---------------------------------------------------------------------------
// Full dual-stage run
// ---------------------------------------------------------------------------

struct PipelineResult {
    BinaryMask full;
    BinaryMask left;
    BinaryMask right;
    std::vector<VoiRecord> vois;
    std::vector<std::string> warnings;
    WindowParams window;
};

// Runs every stage after windowing on an already-normalized volume.
inline PipelineResult run_pipeline_windowed(const NormVolume& windowed, CoarseNet& coarse_net,
                                            FineNet& fine_net, const PipelineConfig& cfg,
                                            bool refine = true) {
    cfg.validate();
    PipelineResult result;

    const ProbMap coarse_prob = coarse_segment(windowed, coarse_net, cfg);
    auto [coarse_left, coarse_right] = split_left_right(coarse_prob, cfg.threshold);

    result.full = BinaryMask(windowed.dims, windowed.spacing, 0);
    result.left = BinaryMask(windowed.dims, windowed.spacing, 0);
    result.right = BinaryMask(windowed.dims, windowed.spacing, 0);

    for (int s = 0; s < 2; ++s) {
        const Side side = s == 0 ? Side::Left : Side::Right;
        const BinaryMask& side_mask = s == 0 ? coarse_left : coarse_right;
        BinaryMask& out = s == 0 ? result.left : result.right;
        if (mask_bounding_box(side_mask) == std::nullopt) {
            result.warnings.push_back(std::string("coarse stage found nothing on the ") +
                                      to_string(side) + " side");
            continue;
        }
        VoiExtraction voi = extract_voi(windowed, side_mask, side, cfg);
        const MultiscaleInputs inputs = make_multiscale_inputs(voi.input, cfg);
        voi.record.prob = fine_segment(inputs, fine_net);

        BinaryMask merged = merge_to_full({voi.record}, windowed.dims, cfg);
        merged.spacing = windowed.spacing;
        out = refine ? refine_canal(merged, 1) : merged;
        result.vois.push_back(std::move(voi.record));
    }

    for (std::size_t i = 0; i < result.full.voxels.size(); ++i)
        result.full.voxels[i] = (result.left.voxels[i] || result.right.voxels[i]) ? 1 : 0;
    return result;
}

inline PipelineResult run_pipeline(const Volume& v, CoarseNet& coarse_net, FineNet& fine_net,
                                   const PipelineConfig& cfg, bool refine = true) {
    WindowParams window;
    const NormVolume windowed = window_volume(v, 10, &window);
    PipelineResult result = run_pipeline_windowed(windowed, coarse_net, fine_net, cfg, refine);
    result.window = window;
    return result;
}

inline PipelineResult run_pipeline_files(const Volume& v, const std::string& coarse_ckpt,
                                         const std::string& fine_ckpt, const PipelineConfig& cfg,
                                         bool refine = true) {
    std::optional<CoarseNet> coarse;
    std::optional<FineNet> fine;
    try {
        coarse.emplace(load_coarse_checkpoint(coarse_ckpt));
        fine.emplace(load_fine_checkpoint(fine_ckpt));
    } catch (const std::exception& e) {
        throw UntrainedNet(std::string("cannot load checkpoints: ") + e.what());
    }
    return run_pipeline(v, *coarse, *fine, cfg, refine);
}

// ---------------------------------------------------------------------------
// VOI sidecar JSON
// ---------------------------------------------------------------------------

inline nlohmann::json voi_record_to_json(const VoiRecord& r) {
    nlohmann::json j;
    j["side"] = to_string(r.side);
    j["box_lo"] = {r.box.lo[0], r.box.lo[1], r.box.lo[2]};
    j["box_hi"] = {r.box.hi[0], r.box.hi[1], r.box.hi[2]};
    j["base_dims"] = {r.base_dims.nx, r.base_dims.ny, r.base_dims.nz};
    return j;
}

}  // namespace canalseg
