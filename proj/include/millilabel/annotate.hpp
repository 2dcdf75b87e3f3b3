#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "millilabel/clustering.hpp"
#include "millilabel/datamodel.hpp"
#include "millilabel/error.hpp"

namespace millilabel {

using Responses = std::map<std::uint32_t, ClassId>;

enum class SessionStatus { Pending, Complete };

// One frame's click queue (the cluster centers, in cluster-id order) and the
// answers collected so far.
struct AnnotationSession {
    std::string frame_id;
    std::vector<std::uint32_t> click_queue;
    Responses responses;

    SessionStatus status() const {
        for (auto p : click_queue)
            if (!responses.contains(p)) return SessionStatus::Pending;
        return SessionStatus::Complete;
    }
};

inline AnnotationSession make_session(const std::string& frame_id, const Clustering& cl) {
    return {frame_id, cl.center_points, {}};
}

// Flips each answer to a uniformly drawn wrong class with probability p.
struct OracleNoise {
    double p = 0.0;
    std::uint64_t seed = 0;
    std::uint32_t num_classes = 0;
};

inline Responses oracle_annotate(const Frame& frame, std::span<const std::uint32_t> queue,
                                 const std::optional<OracleNoise>& noise = std::nullopt) {
    if (!frame.gt_labels) fail(ErrorCode::NoGroundTruth, frame.frame_id + ": oracle annotation needs ground truth");
    const auto& gt = *frame.gt_labels;
    Responses out;
    std::mt19937_64 rng(noise ? noise->seed : 0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (auto p : queue) {
        if (p >= gt.size()) fail(ErrorCode::LengthMismatch, frame.frame_id + ": queued point out of range");
        ClassId c = gt[p];
        if (noise && noise->p > 0.0 && noise->num_classes > 1 && c < noise->num_classes && unit(rng) < noise->p) {
            std::uniform_int_distribution<std::uint32_t> other(0, noise->num_classes - 2);
            const auto r = other(rng);
            c = r >= c ? r + 1 : r;
        }
        out.emplace(p, c);
    }
    return out;
}

// Propagates a complete session's answers over the frame's clustering.
inline PseudoLabels finish_session(const AnnotationSession& session, const Clustering& cl,
                                   std::optional<std::uint32_t> num_classes = std::nullopt) {
    if (session.status() != SessionStatus::Complete)
        fail(ErrorCode::SessionIncomplete, session.frame_id + ": " + std::to_string(session.responses.size()) + "/" +
                                               std::to_string(session.click_queue.size()) + " clicks answered");
    if (session.click_queue.size() != cl.k) fail(ErrorCode::LengthMismatch, "session queue differs from clustering");
    std::vector<ClassId> center_labels(cl.k);
    for (std::size_t c = 0; c < cl.k; ++c) center_labels[c] = session.responses.at(cl.center_points[c]);
    return propagate_labels(cl, center_labels, session.frame_id, num_classes);
}

inline PseudoLabels annotate_frame_oracle(const Frame& frame, const Clustering& cl,
                                          std::optional<std::uint32_t> num_classes = std::nullopt,
                                          const std::optional<OracleNoise>& noise = std::nullopt) {
    if (cl.num_points() != frame.num_points())
        fail(ErrorCode::LengthMismatch, frame.frame_id + ": clustering does not belong to frame");
    auto session = make_session(frame.frame_id, cl);
    session.responses = oracle_annotate(frame, session.click_queue, noise);
    return finish_session(session, cl, num_classes);
}

// --- metrics -------------------------------------------------------------

// Per-class counts pooled over frames (micro aggregation).
struct ClasswiseCounts {
    explicit ClasswiseCounts(std::uint32_t num_classes = 0) : correct(num_classes, 0), total(num_classes, 0) {}

    std::vector<std::uint64_t> correct;
    std::vector<std::uint64_t> total;

    // Ground-truth values outside [0, num_classes) (the ignore label) are skipped.
    void add(std::span<const ClassId> pseudo, std::span<const ClassId> gt) {
        if (pseudo.size() != gt.size())
            fail(ErrorCode::LengthMismatch, "classwise_accuracy: " + std::to_string(pseudo.size()) + " vs " +
                                                std::to_string(gt.size()));
        for (std::size_t i = 0; i < gt.size(); ++i) {
            if (gt[i] >= total.size()) continue;
            ++total[gt[i]];
            correct[gt[i]] += pseudo[i] == gt[i];
        }
    }
};

struct ClasswiseReport {
    std::vector<std::optional<double>> per_class;  // nullopt = ABSENT
    double average = 0.0;
    std::size_t present = 0;
};

inline ClasswiseReport classwise_report(const ClasswiseCounts& counts) {
    ClasswiseReport r;
    r.per_class.resize(counts.total.size());
    double sum = 0.0;
    for (std::size_t c = 0; c < counts.total.size(); ++c) {
        if (counts.total[c] == 0) continue;
        r.per_class[c] = static_cast<double>(counts.correct[c]) / static_cast<double>(counts.total[c]);
        sum += *r.per_class[c];
        ++r.present;
    }
    r.average = r.present ? sum / static_cast<double>(r.present) : 0.0;
    return r;
}

inline ClasswiseReport classwise_accuracy(const PseudoLabels& pseudo, std::span<const ClassId> gt,
                                          std::uint32_t num_classes) {
    ClasswiseCounts counts(num_classes);
    counts.add(pseudo.labels, gt);
    return classwise_report(counts);
}

struct ConfusionMatrix {
    explicit ConfusionMatrix(std::uint32_t num_classes = 0)
        : num_classes(num_classes), cells(static_cast<std::size_t>(num_classes) * num_classes, 0),
          missed(num_classes, 0) {}

    std::uint32_t num_classes;
    std::vector<std::uint64_t> cells;   // [gt * K + pred]
    std::vector<std::uint64_t> missed;  // gt points whose prediction is out of range

    void add(std::span<const ClassId> pred, std::span<const ClassId> gt) {
        if (pred.size() != gt.size())
            fail(ErrorCode::LengthMismatch, "miou: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
        for (std::size_t i = 0; i < gt.size(); ++i) {
            if (gt[i] >= num_classes) continue;
            if (pred[i] >= num_classes)
                ++missed[gt[i]];
            else
                ++cells[static_cast<std::size_t>(gt[i]) * num_classes + pred[i]];
        }
    }

    // Per-class IoU; nullopt where the union is empty or the class is ignored.
    std::vector<std::optional<double>> iou(const std::set<ClassId>& ignore = {}) const {
        std::vector<std::optional<double>> out(num_classes);
        for (std::uint32_t c = 0; c < num_classes; ++c) {
            if (ignore.contains(c)) continue;
            std::uint64_t tp = cells[static_cast<std::size_t>(c) * num_classes + c];
            std::uint64_t fn = missed[c], fp = 0;
            for (std::uint32_t o = 0; o < num_classes; ++o) {
                if (o == c) continue;
                fn += cells[static_cast<std::size_t>(c) * num_classes + o];
                if (!ignore.contains(o)) fp += cells[static_cast<std::size_t>(o) * num_classes + c];
            }
            const std::uint64_t uni = tp + fp + fn;
            if (uni > 0) out[c] = static_cast<double>(tp) / static_cast<double>(uni);
        }
        return out;
    }

    double miou(const std::set<ClassId>& ignore = {}) const {
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& v : iou(ignore))
            if (v) {
                sum += *v;
                ++n;
            }
        return n ? sum / static_cast<double>(n) : 0.0;
    }
};

// Points whose ground truth is in `ignore` are skipped; ignored classes are
// excluded from the mean.
inline double miou(std::span<const ClassId> pred, std::span<const ClassId> gt, std::uint32_t num_classes,
                   const std::set<ClassId>& ignore = {}) {
    if (pred.size() != gt.size())
        fail(ErrorCode::LengthMismatch, "miou: " + std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
    std::vector<ClassId> kept_pred, kept_gt;
    kept_pred.reserve(pred.size());
    kept_gt.reserve(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) {
        if (ignore.contains(gt[i])) continue;
        kept_pred.push_back(pred[i]);
        kept_gt.push_back(gt[i]);
    }
    ConfusionMatrix cm(num_classes);
    cm.add(kept_pred, kept_gt);
    return cm.miou(ignore);
}

// Click accounting over a whole training pool.
struct ClickAccount {
    std::uint64_t clicks = 0;
    std::uint64_t points = 0;

    void add(const PseudoLabels& pl) {
        clicks += pl.count(LabelSource::Clicked);
        points += pl.size();
    }
    double percent_labels() const {
        return points ? 100.0 * static_cast<double>(clicks) / static_cast<double>(points) : 0.0;
    }
};

// Table-style report: class name -> accuracy (null if absent), average, clicks.
inline nlohmann::json annotation_report_json(const ClasswiseReport& report, const ClickAccount& account,
                                             std::span<const std::string> class_names) {
    nlohmann::json classes = nlohmann::json::object();
    for (std::size_t c = 0; c < report.per_class.size(); ++c) {
        const std::string name = c < class_names.size() ? class_names[c] : "class_" + std::to_string(c);
        classes[name] = report.per_class[c] ? nlohmann::json(*report.per_class[c]) : nlohmann::json(nullptr);
    }
    return {
        {"classwise_accuracy", classes},
        {"average", report.average},
        {"present_classes", report.present},
        {"clicks", account.clicks},
        {"points", account.points},
        {"percent_labels", account.percent_labels()},
    };
}

}  // namespace millilabel
