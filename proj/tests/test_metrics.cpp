#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "canalseg/metrics.hpp"
#include "canalseg/rng.hpp"

using namespace canalseg;

namespace {

BinaryMask mask_of(Dims3 dims, const std::vector<std::uint8_t>& values) {
    BinaryMask m(dims, {1, 1, 1}, 0);
    m.voxels = values;
    return m;
}

}  // namespace

TEST_CASE("confusion counting") {
    SECTION("identical masks have only TP and TN") {
        BinaryMask m({4, 2, 1}, {1, 1, 1}, 0);
        m.at(0, 0, 0) = m.at(1, 0, 0) = m.at(2, 1, 0) = 1;
        const ConfusionCounts c = confusion(m, m);
        REQUIRE(c.tp == 3);
        REQUIRE(c.tn == 5);
        REQUIRE(c.fp == 0);
        REQUIRE(c.fn == 0);
    }
    SECTION("all-positive prediction against empty truth is pure FP") {
        BinaryMask pred({2, 2, 2}, {1, 1, 1}, 1);
        BinaryMask gt({2, 2, 2}, {1, 1, 1}, 0);
        const ConfusionCounts c = confusion(pred, gt);
        REQUIRE(c.fp == 8);
        REQUIRE(c.tp + c.fn + c.tn == 0);
    }
    SECTION("constructed 4x4x4 case with exact counts") {
        BinaryMask pred({4, 4, 4}, {1, 1, 1}, 0);
        BinaryMask gt({4, 4, 4}, {1, 1, 1}, 0);
        // tp = 6, fp = 2, fn = 2, tn = 54
        for (int i = 0; i < 8; ++i) gt.voxels[i] = 1;
        for (int i = 2; i < 10; ++i) pred.voxels[i] = 1;
        const ConfusionCounts c = confusion(pred, gt);
        REQUIRE(c.tp == 6);
        REQUIRE(c.fp == 2);
        REQUIRE(c.fn == 2);
        REQUIRE(c.tn == 54);
        REQUIRE(c.total() == 64);
    }
    SECTION("dimension mismatch is rejected") {
        BinaryMask a({2, 2, 2}, {1, 1, 1}, 0), b({2, 2, 3}, {1, 1, 1}, 0);
        REQUIRE_THROWS_AS(confusion(a, b), DimMismatch);
    }
}

TEST_CASE("metric report") {
    SECTION("hand-evaluated counts") {
        const MetricReport r = report({6, 2, 2, 54});
        REQUIRE_THAT(r.precision, Catch::Matchers::WithinAbs(0.75, 1e-12));
        REQUIRE_THAT(r.recall, Catch::Matchers::WithinAbs(0.75, 1e-12));
        REQUIRE_THAT(r.f1, Catch::Matchers::WithinAbs(0.75, 1e-12));
        REQUIRE_THAT(r.iou, Catch::Matchers::WithinAbs(0.6, 1e-12));
        REQUIRE_THAT(r.dice, Catch::Matchers::WithinAbs(0.75, 1e-12));
        REQUIRE_THAT(r.specificity, Catch::Matchers::WithinAbs(54.0 / 56.0, 1e-12));
    }
    SECTION("empty prediction against empty truth is undefined except specificity") {
        const MetricReport r = report({0, 0, 0, 10});
        REQUIRE(!MetricReport::is_defined(r.precision));
        REQUIRE(!MetricReport::is_defined(r.recall));
        REQUIRE(!MetricReport::is_defined(r.f1));
        REQUIRE(!MetricReport::is_defined(r.iou));
        REQUIRE(!MetricReport::is_defined(r.dice));
        REQUIRE(r.specificity == 1.0);
    }
    SECTION("perfect prediction scores 1 on every defined metric") {
        const MetricReport r = report({10, 0, 0, 54});
        REQUIRE(r.precision == 1.0);
        REQUIRE(r.recall == 1.0);
        REQUIRE(r.f1 == 1.0);
        REQUIRE(r.iou == 1.0);
        REQUIRE(r.dice == 1.0);
        REQUIRE(r.specificity == 1.0);
    }
}

TEST_CASE("metric identities over random confusion counts") {
    Rng rng(91);
    int defined = 0;
    for (int trial = 0; trial < 100000; ++trial) {
        ConfusionCounts c;
        c.tp = rng.next_below(1000);
        c.fp = rng.next_below(1000);
        c.fn = rng.next_below(1000);
        c.tn = rng.next_below(100000);
        const MetricReport r = report(c);
        if (!MetricReport::is_defined(r.dice)) continue;
        ++defined;
        // Eq. for F1 and dice are algebraically identical: exact equality.
        REQUIRE(r.f1 == r.dice);
        // dice = 2*iou / (1 + iou)
        REQUIRE(std::abs(r.dice - 2.0 * r.iou / (1.0 + r.iou)) < 1e-12);
    }
    REQUIRE(defined > 99000);
}

TEST_CASE("metrics are monotone in TP conversions") {
    Rng rng(92);
    for (int trial = 0; trial < 200; ++trial) {
        ConfusionCounts c;
        c.tp = rng.next_below(100);
        c.fp = rng.next_below(100);
        c.fn = 1 + rng.next_below(100);
        c.tn = rng.next_below(1000);
        ConfusionCounts better = c;
        better.tp += 1;
        better.fn -= 1;
        const MetricReport r0 = report(c);
        const MetricReport r1 = report(better);
        if (MetricReport::is_defined(r0.recall)) REQUIRE(r1.recall >= r0.recall);
        if (MetricReport::is_defined(r0.dice)) REQUIRE(r1.dice >= r0.dice);
        if (MetricReport::is_defined(r0.iou)) REQUIRE(r1.iou >= r0.iou);
    }
}

TEST_CASE("evaluate_case pools confusion counts for the overall column") {
    SECTION("symmetric sides collapse to the same report") {
        BinaryMask pred = mask_of({2, 2, 2}, {1, 1, 0, 0, 0, 0, 0, 0});
        BinaryMask gt = mask_of({2, 2, 2}, {1, 0, 1, 0, 0, 0, 0, 0});
        const CaseReport r = evaluate_case(pred, pred, gt, gt);
        REQUIRE(r.left.dice == r.right.dice);
        REQUIRE(r.overall.dice == r.left.dice);
        REQUIRE(r.overall.precision == r.left.precision);
    }
    SECTION("perfect left with an empty right prediction") {
        BinaryMask left_gt = mask_of({2, 2, 2}, {1, 1, 1, 0, 0, 0, 0, 0});
        BinaryMask right_gt = mask_of({2, 2, 2}, {1, 1, 0, 0, 0, 0, 0, 0});  // k = 2
        BinaryMask empty({2, 2, 2}, {1, 1, 1}, 0);
        const CaseReport r = evaluate_case(left_gt, empty, left_gt, right_gt);
        REQUIRE(r.left.dice == 1.0);
        // overall dice = 2*tp_l / (2*tp_l + k)
        REQUIRE_THAT(r.overall.dice, Catch::Matchers::WithinAbs(6.0 / 8.0, 1e-12));
    }
}

TEST_CASE("evaluate_dataset") {
    SECTION("a single case aggregates to itself") {
        const MetricReport r = report({6, 2, 2, 54});
        const DatasetAggregate agg = evaluate_dataset({r});
        REQUIRE(agg.mean.dice == r.dice);
        REQUIRE(agg.cases == 1);
    }
    SECTION("mean of two dice values") {
        MetricReport a, b;
        a.dice = 0.6;
        b.dice = 0.8;
        const DatasetAggregate agg = evaluate_dataset({a, b});
        REQUIRE_THAT(agg.mean.dice, Catch::Matchers::WithinAbs(0.7, 1e-12));
    }
    SECTION("undefined entries are excluded and counted") {
        MetricReport a = report({6, 2, 2, 54});
        MetricReport b = report({0, 0, 5, 59});  // precision undefined (tp+fp = 0)
        const DatasetAggregate agg = evaluate_dataset({a, b});
        REQUIRE(agg.excluded_precision == 1);
        REQUIRE(agg.mean.precision == a.precision);
        REQUIRE(agg.excluded_recall == 0);
    }
    SECTION("empty dataset is an error") {
        REQUIRE_THROWS_AS(evaluate_dataset({}), EmptyDataset);
    }
}
