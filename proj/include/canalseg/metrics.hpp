#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "canalseg/volume.hpp"

namespace canalseg {

struct DimMismatch : std::runtime_error {
    explicit DimMismatch(const std::string& what) : std::runtime_error(what) {}
};

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
};

inline ConfusionCounts confusion(const BinaryMask& pred, const BinaryMask& gt) {
    if (!(pred.dims == gt.dims))
        throw DimMismatch("confusion: prediction and ground truth dims differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < pred.voxels.size(); ++i) {
        const bool p = pred.voxels[i] != 0;
        const bool g = gt.voxels[i] != 0;
        if (p && g)
            ++c.tp;
        else if (p && !g)
            ++c.fp;
        else if (!p && g)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

// 0/0 ratios are reported as an explicit undefined sentinel (NaN) instead of
// being silently mapped to 0 or 1, so aggregates can exclude them.
struct MetricReport {
    double precision = undefined();
    double recall = undefined();
    double f1 = undefined();
    double iou = undefined();
    double dice = undefined();
    double specificity = undefined();

    static double undefined() { return std::numeric_limits<double>::quiet_NaN(); }
    static bool is_defined(double v) { return !std::isnan(v); }
};

inline MetricReport report(const ConfusionCounts& c) {
    auto ratio = [](std::uint64_t num, std::uint64_t den) {
        return den == 0 ? MetricReport::undefined()
                        : static_cast<double>(num) / static_cast<double>(den);
    };
    MetricReport r;
    r.precision = ratio(c.tp, c.tp + c.fp);
    r.recall = ratio(c.tp, c.tp + c.fn);
    r.f1 = (c.tp + c.fp + c.fn) == 0
               ? MetricReport::undefined()
               : static_cast<double>(c.tp) /
                     (static_cast<double>(c.tp) + 0.5 * (static_cast<double>(c.fp) + c.fn));
    r.iou = ratio(c.tp, c.tp + c.fp + c.fn);
    r.dice = (c.tp + c.fp + c.fn) == 0
                 ? MetricReport::undefined()
                 : 2.0 * static_cast<double>(c.tp) /
                       (2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp) + c.fn);
    r.specificity = ratio(c.tn, c.tn + c.fp);
    return r;
}

struct CaseReport {
    MetricReport left;
    MetricReport right;
    MetricReport overall;  // micro pooling of both sides' confusion counts
    ConfusionCounts left_counts;
    ConfusionCounts right_counts;
};

inline CaseReport evaluate_case(const BinaryMask& pred_l, const BinaryMask& pred_r,
                                const BinaryMask& gt_l, const BinaryMask& gt_r) {
    CaseReport cr;
    cr.left_counts = confusion(pred_l, gt_l);
    cr.right_counts = confusion(pred_r, gt_r);
    cr.left = report(cr.left_counts);
    cr.right = report(cr.right_counts);
    ConfusionCounts pooled = cr.left_counts;
    pooled += cr.right_counts;
    cr.overall = report(pooled);
    return cr;
}

struct EmptyDataset : std::runtime_error {
    explicit EmptyDataset(const std::string& what) : std::runtime_error(what) {}
};

// Macro aggregate: arithmetic mean of each defined metric across cases,
// with undefined entries excluded and counted.
struct DatasetAggregate {
    MetricReport mean;
    int cases = 0;
    int excluded_precision = 0;
    int excluded_recall = 0;
    int excluded_f1 = 0;
    int excluded_iou = 0;
    int excluded_dice = 0;
    int excluded_specificity = 0;
};

inline DatasetAggregate evaluate_dataset(const std::vector<MetricReport>& reports) {
    if (reports.empty()) throw EmptyDataset("no case reports to aggregate");
    DatasetAggregate agg;
    agg.cases = static_cast<int>(reports.size());

    auto mean_of = [&](double MetricReport::* field, int& excluded) {
        double sum = 0.0;
        int n = 0;
        for (const auto& r : reports) {
            const double v = r.*field;
            if (MetricReport::is_defined(v)) {
                sum += v;
                ++n;
            } else {
                ++excluded;
            }
        }
        return n == 0 ? MetricReport::undefined() : sum / n;
    };
    agg.mean.precision = mean_of(&MetricReport::precision, agg.excluded_precision);
    agg.mean.recall = mean_of(&MetricReport::recall, agg.excluded_recall);
    agg.mean.f1 = mean_of(&MetricReport::f1, agg.excluded_f1);
    agg.mean.iou = mean_of(&MetricReport::iou, agg.excluded_iou);
    agg.mean.dice = mean_of(&MetricReport::dice, agg.excluded_dice);
    agg.mean.specificity = mean_of(&MetricReport::specificity, agg.excluded_specificity);
    return agg;
}

inline nlohmann::json metric_report_to_json(const MetricReport& r) {
    auto field = [](double v) {
        return MetricReport::is_defined(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
    };
    nlohmann::json j;
    j["precision"] = field(r.precision);
    j["recall"] = field(r.recall);
    j["f1"] = field(r.f1);
    j["iou"] = field(r.iou);
    j["dice"] = field(r.dice);
    j["specificity"] = field(r.specificity);
    return j;
}

}  // namespace canalseg
