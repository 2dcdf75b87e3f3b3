#include "millilabel/annotate.hpp"
#include "millilabel/synthetic.hpp"
#include "test_util.hpp"

using namespace millilabel;

namespace {

Frame labeled_frame(std::vector<ClassId> gt, std::size_t d = 2) {
    Frame f;
    f.frame_id = "f";
    f.dim = d;
    f.points.assign(gt.size() * 3, 0.0f);
    f.features.assign(gt.size() * d, 0.0f);
    for (std::size_t i = 0; i < gt.size(); ++i) f.features[i * d] = static_cast<float>(gt[i]) * 100.0f + (i % 3);
    f.gt_labels = std::move(gt);
    return f;
}

Clustering identity_clustering(std::size_t m) {
    Clustering cl;
    cl.k = m;
    for (std::size_t i = 0; i < m; ++i) {
        cl.assignments.push_back(static_cast<std::uint32_t>(i));
        cl.center_points.push_back(static_cast<std::uint32_t>(i));
    }
    return cl;
}

}  // namespace

TEST(Oracle, Examples) {
    const Frame f = labeled_frame({1, 7, 3});
    const std::vector<std::uint32_t> one = {1};
    EXPECT_EQ(oracle_annotate(f, one), (Responses{{1, 7}}));
    EXPECT_TRUE(oracle_annotate(f, {}).empty());
    const std::vector<std::uint32_t> all = {0, 1, 2};
    EXPECT_EQ(oracle_annotate(f, all), (Responses{{0, 1}, {1, 7}, {2, 3}}));
}

TEST(Oracle, Errors) {
    Frame f = labeled_frame({0, 1});
    const std::vector<std::uint32_t> bad = {5};
    EXPECT_ML_ERROR(oracle_annotate(f, bad), ErrorCode::LengthMismatch);
    f.gt_labels.reset();
    const std::vector<std::uint32_t> q = {0};
    EXPECT_ML_ERROR(oracle_annotate(f, q), ErrorCode::NoGroundTruth);
}

TEST(Oracle, NoiseFlipsToOtherClassesAtRate) {
    std::vector<ClassId> gt(20000);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] = static_cast<ClassId>(i % 5);
    const Frame f = labeled_frame(gt);
    std::vector<std::uint32_t> queue(gt.size());
    std::iota(queue.begin(), queue.end(), 0u);
    const auto r = oracle_annotate(f, queue, OracleNoise{0.3, 11, 5});
    std::size_t flips = 0;
    for (auto [p, c] : r) {
        EXPECT_LT(c, 5u);
        flips += c != gt[p];
    }
    const double rate = static_cast<double>(flips) / static_cast<double>(gt.size());
    EXPECT_NEAR(rate, 0.3, 4.0 * std::sqrt(0.3 * 0.7 / 20000.0));
    EXPECT_EQ(oracle_annotate(f, queue, OracleNoise{0.3, 11, 5}), r);  // seeded
    EXPECT_EQ(oracle_annotate(f, queue, OracleNoise{0.0, 11, 5}), oracle_annotate(f, queue));
}

TEST(Session, StatusAndFinish) {
    Clustering cl;
    cl.k = 2;
    cl.assignments = {0, 0, 1, 1};
    cl.center_points = {1, 2};
    auto s = make_session("f", cl);
    EXPECT_EQ(s.click_queue, (std::vector<std::uint32_t>{1, 2}));
    EXPECT_EQ(s.status(), SessionStatus::Pending);
    s.responses[1] = 4;
    EXPECT_ML_ERROR(finish_session(s, cl), ErrorCode::SessionIncomplete);
    s.responses[2] = 6;
    EXPECT_EQ(s.status(), SessionStatus::Complete);
    const auto pl = finish_session(s, cl, 7);
    EXPECT_EQ(pl.labels, (std::vector<ClassId>{4, 4, 6, 6}));
    EXPECT_EQ(pl.count(LabelSource::Clicked), 2u);
}

TEST(AnnotateFrame, KEqualsMReproducesGroundTruth) {
    const Frame f = labeled_frame({2, 0, 1, 1, 0, 2, 2});
    const auto pl = annotate_frame_oracle(f, identity_clustering(7), 3);
    EXPECT_EQ(pl.labels, *f.gt_labels);
    const auto rep = classwise_accuracy(pl, *f.gt_labels, 3);
    for (const auto& a : rep.per_class) EXPECT_EQ(a, std::optional<double>(1.0));
    EXPECT_DOUBLE_EQ(miou(pl.labels, *f.gt_labels, 3), 1.0);
}

TEST(AnnotateFrame, PureClustersGivePerfectAccuracy) {
    const Frame f = labeled_frame({0, 0, 0, 1, 1, 2});
    Clustering cl;
    cl.k = 3;
    cl.assignments = {0, 0, 0, 1, 1, 2};
    cl.center_points = {2, 3, 5};
    const auto pl = annotate_frame_oracle(f, cl, 3);
    EXPECT_DOUBLE_EQ(classwise_accuracy(pl, *f.gt_labels, 3).average, 1.0);
}

TEST(AnnotateFrame, ClusteringMustBelongToFrame) {
    const Frame f = labeled_frame({0, 1});
    EXPECT_ML_ERROR(annotate_frame_oracle(f, identity_clustering(3)), ErrorCode::LengthMismatch);
}

TEST(AnnotateFrame, SeparatedMixtureIsNearlyPure) {
    SyntheticSpec spec;
    spec.points_per_frame = 4000;
    spec.sequences = 1;
    spec.frames_per_sequence = 2;
    spec.validation_frames = 0;
    spec.separation = 4.0;
    const auto data = synthesize(spec);
    ClasswiseCounts counts(8);
    for (const auto& f : data.sequences[0]) {
        const auto cl = cluster_frame(feature_view(f), {0.01, std::nullopt, 10}, 8, 1);
        counts.add(annotate_frame_oracle(f, cl, 8).labels, *f.gt_labels);
    }
    EXPECT_GE(classwise_report(counts).average, 0.99);
}

TEST(Classwise, ExamplesAndAbsentClasses) {
    const std::vector<ClassId> gt = {0, 0, 1, 1, 1, 3};
    PseudoLabels pl{"f", {0, 1, 1, 1, 0, 3}, std::vector<LabelSource>(6, LabelSource::Propagated)};
    const auto r = classwise_accuracy(pl, gt, 4);
    EXPECT_EQ(r.per_class[0], std::optional<double>(0.5));
    EXPECT_EQ(r.per_class[1], std::optional<double>(2.0 / 3.0));
    EXPECT_FALSE(r.per_class[2].has_value());  // absent, excluded from the mean
    EXPECT_EQ(r.per_class[3], std::optional<double>(1.0));
    EXPECT_EQ(r.present, 3u);
    EXPECT_DOUBLE_EQ(r.average, (0.5 + 2.0 / 3.0 + 1.0) / 3.0);

    PseudoLabels zeros{"f", {0, 0}, {LabelSource::Clicked, LabelSource::Propagated}};
    const auto z = classwise_accuracy(zeros, std::vector<ClassId>{0, 0}, 3);
    EXPECT_EQ(z.per_class[0], std::optional<double>(1.0));
    EXPECT_EQ(z.present, 1u);
    EXPECT_DOUBLE_EQ(z.average, 1.0);
    EXPECT_ML_ERROR(classwise_accuracy(zeros, std::vector<ClassId>{0}, 3), ErrorCode::LengthMismatch);
}

TEST(Classwise, MicroPoolingAcrossFrames) {
    ClasswiseCounts counts(2);
    counts.add(std::vector<ClassId>{0, 0, 0, 0}, std::vector<ClassId>{0, 0, 0, 1});  // class 0: 3/3
    counts.add(std::vector<ClassId>{1, 0}, std::vector<ClassId>{0, 1});              // class 0: 0/1
    const auto r = classwise_report(counts);
    EXPECT_DOUBLE_EQ(*r.per_class[0], 0.75);  // pooled, not mean of 1.0 and 0.0
    EXPECT_DOUBLE_EQ(*r.per_class[1], 0.0);
}

TEST(Classwise, PropagationBeatsRandomLabeling) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        SyntheticSpec spec;
        spec.points_per_frame = 1500;
        spec.sequences = 1;
        spec.frames_per_sequence = 1;
        spec.validation_frames = 0;
        spec.feature_dim = 16;
        spec.separation = 3.0;
        spec.seed = seed;
        const Frame f = synthesize(spec).sequences[0][0];
        const auto cl = cluster_frame(feature_view(f), {0.01, std::nullopt, 10}, 8, seed);
        const double prop = classwise_accuracy(annotate_frame_oracle(f, cl, 8), *f.gt_labels, 8).average;
        std::mt19937_64 rng(seed);
        std::uniform_int_distribution<ClassId> u(0, 7);
        PseudoLabels random{"r", std::vector<ClassId>(f.num_points()), {}};
        for (auto& v : random.labels) v = u(rng);
        EXPECT_GT(prop, classwise_accuracy(random, *f.gt_labels, 8).average) << seed;
    }
}

TEST(Miou, Examples) {
    const std::vector<ClassId> gt = {0, 1, 1, 0};
    EXPECT_DOUBLE_EQ(miou(gt, gt, 2), 1.0);
    const std::vector<ClassId> complement = {1, 0, 0, 1};
    EXPECT_DOUBLE_EQ(miou(complement, gt, 2), 0.0);
    EXPECT_ML_ERROR(miou(std::vector<ClassId>{0}, gt, 2), ErrorCode::LengthMismatch);
}

TEST(Miou, HandBuiltThirtyPointOracle) {
    // 3 classes, 30 points. Confusion (rows = gt, cols = pred):
    //   gt0: 8 -> 0, 2 -> 1, 0 -> 2
    //   gt1: 1 -> 0, 6 -> 1, 3 -> 2
    //   gt2: 0 -> 0, 2 -> 1, 8 -> 2
    std::vector<ClassId> gt, pred;
    auto put = [&](ClassId g, ClassId p, int n) {
        for (int i = 0; i < n; ++i) {
            gt.push_back(g);
            pred.push_back(p);
        }
    };
    put(0, 0, 8), put(0, 1, 2), put(1, 0, 1), put(1, 1, 6), put(1, 2, 3), put(2, 1, 2), put(2, 2, 8);
    ASSERT_EQ(gt.size(), 30u);
    // IoU0 = 8 / (8 + 1 + 2) ; IoU1 = 6 / (6 + 4 + 4) ; IoU2 = 8 / (8 + 3 + 2)
    const double expect = (8.0 / 11.0 + 6.0 / 14.0 + 8.0 / 13.0) / 3.0;
    EXPECT_NEAR(miou(pred, gt, 3), expect, 1e-15);
    // Ignoring class 2 drops its points and its IoU.
    // Remaining: gt0 row (8 -> 0, 2 -> 1), gt1 row (1 -> 0, 6 -> 1, 3 -> 2 counts as miss).
    const double ignore2 = (8.0 / 11.0 + 6.0 / (6 + 2 + 1 + 3)) / 2.0;
    EXPECT_NEAR(miou(pred, gt, 3, {2}), ignore2, 1e-15);
}

TEST(Miou, AbsentClassNotCounted) {
    const std::vector<ClassId> gt = {0, 0, 1};
    EXPECT_DOUBLE_EQ(miou(gt, gt, 5), 1.0);
}

TEST(Accounting, PercentLabelsExact) {
    ClickAccount a;
    a.add(PseudoLabels{"a", {0, 0, 0}, {LabelSource::Clicked, LabelSource::Propagated, LabelSource::Propagated}});
    a.add(PseudoLabels{"b", {1, 1}, {LabelSource::Clicked, LabelSource::Clicked}});
    EXPECT_EQ(a.clicks, 3u);
    EXPECT_EQ(a.points, 5u);
    EXPECT_DOUBLE_EQ(a.percent_labels(), 60.0);
    const auto j = annotation_report_json(classwise_report(ClasswiseCounts(2)), a, std::vector<std::string>{"x", "y"});
    EXPECT_TRUE(j["classwise_accuracy"]["x"].is_null());
    EXPECT_EQ(j["clicks"], 3);
    EXPECT_DOUBLE_EQ(j["percent_labels"].get<double>(), 60.0);
}
