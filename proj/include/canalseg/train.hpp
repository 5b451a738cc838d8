#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "canalseg/config.hpp"
#include "canalseg/metrics.hpp"
#include "canalseg/nets.hpp"
#include "canalseg/phantom.hpp"
#include "canalseg/pipeline.hpp"
#include "canalseg/windowing.hpp"

namespace canalseg {

struct TrainLog {
    std::vector<double> epoch_losses;
};

namespace detail {

inline Tensor5D stack_grids(const std::vector<const NormVolume*>& grids) {
    const Dims3 d = grids[0]->dims;
    Tensor5D t({static_cast<int>(grids.size()), 1, d.nz, d.ny, d.nx});
    const std::size_t vox = static_cast<std::size_t>(d.count());
    for (std::size_t i = 0; i < grids.size(); ++i)
        std::copy(grids[i]->voxels.begin(), grids[i]->voxels.end(),
                  t.data.begin() + static_cast<std::ptrdiff_t>(i * vox));
    return t;
}

inline Tensor5D stack_masks(const std::vector<const BinaryMask*>& masks) {
    const Dims3 d = masks[0]->dims;
    Tensor5D t({static_cast<int>(masks.size()), 1, d.nz, d.ny, d.nx});
    const std::size_t vox = static_cast<std::size_t>(d.count());
    for (std::size_t i = 0; i < masks.size(); ++i)
        for (std::size_t v = 0; v < vox; ++v)
            t.data[i * vox + v] = masks[i]->voxels[v] ? 1.0f : 0.0f;
    return t;
}

inline BinaryMask union_mask(const BinaryMask& a, const BinaryMask& b) {
    BinaryMask out(a.dims, a.spacing, 0);
    for (std::size_t i = 0; i < out.voxels.size(); ++i)
        out.voxels[i] = (a.voxels[i] || b.voxels[i]) ? 1 : 0;
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Coarse stage: whole volumes downsampled to the coarse working resolution
// ---------------------------------------------------------------------------

struct CoarseSample {
    NormVolume input;
    BinaryMask target;
};

inline std::vector<CoarseSample> build_coarse_samples(const std::vector<PhantomCase>& cases,
                                                      const RunConfig& cfg) {
    std::vector<CoarseSample> out;
    out.reserve(cases.size());
    for (const PhantomCase& c : cases) {
        CoarseSample s;
        s.input = resample(window_volume(c.volume), cfg.pipeline.coarse_input_dims,
                           ResampleMode::Trilinear);
        s.target = resample(detail::union_mask(c.gt_left, c.gt_right),
                            cfg.pipeline.coarse_input_dims, ResampleMode::Nearest);
        out.push_back(std::move(s));
    }
    return out;
}

inline CoarseNet train_coarse(const std::vector<PhantomCase>& cases, const RunConfig& cfg,
                              TrainLog* log = nullptr) {
    cfg.validate();
    const std::vector<CoarseSample> samples = build_coarse_samples(cases, cfg);
    CoarseNet net(cfg.coarse_net, cfg.training.seed);
    auto params = net.parameters();

    Rng shuffle_rng(cfg.training.seed ^ 0x5eedc0a5eULL);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.training.epochs_coarse; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.training.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.training.batch_size));
            std::vector<const NormVolume*> xs;
            std::vector<const BinaryMask*> gs;
            for (std::size_t i = start; i < end; ++i) {
                xs.push_back(&samples[order[i]].input);
                gs.push_back(&samples[order[i]].target);
            }
            const Tensor5D x = detail::stack_grids(xs);
            const Tensor5D g = detail::stack_masks(gs);

            CoarseOut out = net.forward(x, /*training=*/true);
            SupervisedDiceLoss loss;
            epoch_loss += loss.forward(out.main, out.aux, g, cfg.coarse_net.supervision_weights);
            ++batches;
            net.backward(loss.main_grad(), loss.aux_grads());
            for (Parameter* p : params) adam_step(*p, cfg.training.lr);
        }
        if (log) log->epoch_losses.push_back(epoch_loss / std::max(batches, 1));
    }
    return net;
}

// ---------------------------------------------------------------------------
// Fine stage: per-side VOIs cut around the ground-truth canal with the
// configured margin (the inference-time VOI comes from the coarse stage)
// ---------------------------------------------------------------------------

struct FineSample {
    NormVolume x1, x2, x3;
    BinaryMask target;  // at base dims
};

inline std::vector<FineSample> build_fine_samples(const std::vector<PhantomCase>& cases,
                                                  const RunConfig& cfg) {
    std::vector<FineSample> out;
    for (const PhantomCase& c : cases) {
        const NormVolume windowed = window_volume(c.volume);
        for (int side = 0; side < 2; ++side) {
            const BinaryMask& gt = side == 0 ? c.gt_left : c.gt_right;
            const auto bbox = mask_bounding_box(gt);
            if (!bbox) continue;
            const Box box = bbox->expanded(cfg.pipeline.voi_margin).clipped(windowed.dims);

            FineSample s;
            s.x1 = resample(crop_pad(windowed, box, 0.0f), cfg.pipeline.fine_dims[0],
                            ResampleMode::Trilinear);
            const MultiscaleInputs ms = make_multiscale_inputs(s.x1, cfg.pipeline);
            s.x2 = ms.x2;
            s.x3 = ms.x3;
            s.target = resample(crop_pad(gt, box, std::uint8_t{0}), cfg.pipeline.fine_dims[0],
                                ResampleMode::Nearest);
            out.push_back(std::move(s));
        }
    }
    return out;
}

inline FineNet train_fine(const std::vector<PhantomCase>& cases, const RunConfig& cfg,
                          TrainLog* log = nullptr) {
    cfg.validate();
    const std::vector<FineSample> samples = build_fine_samples(cases, cfg);
    FineNet net(cfg.fine_net, cfg.fine_options, cfg.training.seed);
    auto params = net.parameters();

    Rng shuffle_rng(cfg.training.seed ^ 0xf1e5eedULL);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.training.epochs_fine; ++epoch) {
        shuffle_rng.shuffle(order);
        double epoch_loss = 0.0;
        int batches = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.training.batch_size)) {
            const std::size_t end =
                std::min(order.size(), start + static_cast<std::size_t>(cfg.training.batch_size));
            std::vector<const NormVolume*> x1s, x2s, x3s;
            std::vector<const BinaryMask*> gs;
            for (std::size_t i = start; i < end; ++i) {
                x1s.push_back(&samples[order[i]].x1);
                x2s.push_back(&samples[order[i]].x2);
                x3s.push_back(&samples[order[i]].x3);
                gs.push_back(&samples[order[i]].target);
            }
            const Tensor5D g = detail::stack_masks(gs);
            Tensor5D out = net.forward(detail::stack_grids(x1s), detail::stack_grids(x2s),
                                       detail::stack_grids(x3s), /*training=*/true);
            DiceLoss loss;
            epoch_loss += loss.forward(out, g);
            ++batches;
            net.backward(loss.backward());
            for (Parameter* p : params) adam_step(*p, cfg.training.lr);
        }
        if (log) log->epoch_losses.push_back(epoch_loss / std::max(batches, 1));
    }
    return net;
}

// ---------------------------------------------------------------------------
// Fine-stage ablation variant: train with the given multiscale/residual
// switches on ground-truth VOIs and evaluate on held-out VOIs.
// ---------------------------------------------------------------------------

inline MetricReport ablate_fine_variant(const std::vector<PhantomCase>& train_cases,
                                        const std::vector<PhantomCase>& test_cases,
                                        RunConfig cfg, bool multiscale, bool residual) {
    cfg.fine_options.multiscale = multiscale;
    cfg.fine_options.residual = residual;
    FineNet net = train_fine(train_cases, cfg);

    const auto samples = build_fine_samples(test_cases, cfg);
    std::vector<MetricReport> reports;
    for (const auto& s : samples) {
        const Tensor5D out = net.forward(grid_to_tensor(s.x1), grid_to_tensor(s.x2),
                                         grid_to_tensor(s.x3), /*training=*/false);
        BinaryMask pred(s.target.dims, s.target.spacing, 0);
        for (std::size_t i = 0; i < pred.voxels.size(); ++i)
            pred.voxels[i] = out.data[i] >= cfg.pipeline.threshold ? 1 : 0;
        reports.push_back(report(confusion(pred, s.target)));
    }
    return evaluate_dataset(reports).mean;
}

// ---------------------------------------------------------------------------
// Case loading for the CLI
// ---------------------------------------------------------------------------

inline std::vector<PhantomCase> load_cases(const DatasetManifest& manifest) {
    std::vector<PhantomCase> out;
    out.reserve(manifest.cases.size());
    for (const CaseEntry& e : manifest.cases) out.push_back(load_case(manifest.root + "/" + e.dir));
    return out;
}

}  // namespace canalseg
