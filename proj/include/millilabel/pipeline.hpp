#pragma once

// File-based pipeline: prune -> select -> cluster -> annotate -> train -> eval.
// Each stage reads only the artifacts of earlier stages and leaves a marker in
// <out>/stages/ carrying a fingerprint of everything it depended on; a rerun
// with the same configuration skips stages whose marker and artifacts exist.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <numeric>
#include <unordered_map>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "millilabel/annotate.hpp"
#include "millilabel/binary_io.hpp"
#include "millilabel/clustering.hpp"
#include "millilabel/datamodel.hpp"
#include "millilabel/error.hpp"
#include "millilabel/pruning.hpp"
#include "millilabel/selection.hpp"
#include "millilabel/semisup.hpp"

namespace millilabel {

namespace fs = std::filesystem;

struct PipelineConfig {
    fs::path manifest;
    fs::path out_dir;
    std::optional<fs::path> validation_manifest;
    double tau = 0.95;
    std::optional<std::uint32_t> signature_centers;  // C; manifest num_classes when unset
    std::optional<std::size_t> budget_frames;        // S; every kept frame when unset
    std::optional<double> alpha;
    std::optional<std::uint64_t> clicks;             // N; alpha = N / M over selected frames
    std::uint32_t min_factor = 10;
    std::uint64_t seed = 0;
    SemiSupConfig semisup;
    std::string annotation_mode = "oracle";
    bool cluster_on_coordinates = false;
    double oracle_noise = 0.0;
    // Training subsamples this many points per frame (0 keeps all).
    std::size_t train_points_per_frame = 2000;
};

inline void validate(const PipelineConfig& c) {
    auto bad = [](const std::string& what) { fail(ErrorCode::ConfigError, "pipeline: " + what); };
    if (c.manifest.empty()) bad("manifest path required");
    if (c.out_dir.empty()) bad("output directory required");
    if (c.alpha.has_value() == c.clicks.has_value()) bad("give exactly one of alpha or clicks");
    if (c.alpha && (!(*c.alpha > 0.0) || *c.alpha > 1.0)) bad("alpha must be in (0, 1]");
    if (c.clicks && *c.clicks == 0) bad("clicks must be positive");
    if (c.budget_frames && *c.budget_frames == 0) bad("budget_frames must be positive");
    if (c.annotation_mode != "oracle") bad("the batch pipeline supports oracle annotation only");
    if (c.oracle_noise < 0.0 || c.oracle_noise > 1.0) bad("oracle noise must be in [0, 1]");
    if (c.min_factor == 0) bad("min_factor must be positive");
    validate(PruneConfig{c.tau});
    validate(c.semisup);
}

inline nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
    nlohmann::json j = {
        {"manifest", c.manifest.generic_string()},
        {"tau", c.tau},
        {"min_factor", c.min_factor},
        {"seed", c.seed},
        {"semisup", config_to_json(c.semisup)},
        {"annotation_mode", c.annotation_mode},
        {"cluster_on_coordinates", c.cluster_on_coordinates},
        {"oracle_noise", c.oracle_noise},
        {"train_points_per_frame", c.train_points_per_frame},
    };
    j["validation_manifest"] = c.validation_manifest ? nlohmann::json(c.validation_manifest->generic_string()) : nlohmann::json(nullptr);
    j["signature_centers"] = c.signature_centers ? nlohmann::json(*c.signature_centers) : nlohmann::json(nullptr);
    j["budget_frames"] = c.budget_frames ? nlohmann::json(*c.budget_frames) : nlohmann::json(nullptr);
    j["alpha"] = c.alpha ? nlohmann::json(*c.alpha) : nlohmann::json(nullptr);
    j["clicks"] = c.clicks ? nlohmann::json(*c.clicks) : nlohmann::json(nullptr);
    return j;
}

// FNV-1a; stable across runs and platforms.
inline std::string fingerprint(const std::string& text) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// --- reusable stage bodies (also used by the CLI subcommands) -----------

inline std::vector<DiversityScore> rank_kept_frames(const DatasetManifest& manifest, std::span<const KeptFrame> kept,
                                                    std::uint32_t centers, std::size_t budget, std::uint64_t seed) {
    if (kept.empty()) fail(ErrorCode::TooFewFrames, "selection: no kept frames");
    const auto index = manifest.frame_index();
    if (kept.size() == 1) return rank_frames(std::vector<DiversityScore>{{kept[0].frame_id, 0.0}}, budget);
    std::vector<SceneSignature> sigs;
    sigs.reserve(kept.size());
    for (const auto& k : kept) {
        auto it = index.find(k.frame_id);
        if (it == index.end()) fail(ErrorCode::UnknownFrame, k.frame_id);
        sigs.push_back(scene_signature(load_frame(it->second.second, manifest.checks()), centers, seed));
    }
    return rank_frames(diversity_scores(sigs), budget);
}

inline Frame load_manifest_frame(const DatasetManifest& manifest,
                                 const std::unordered_map<std::string, std::pair<std::string, fs::path>>& index,
                                 const std::string& frame_id) {
    auto it = index.find(frame_id);
    if (it == index.end()) fail(ErrorCode::UnknownFrame, frame_id);
    Frame f = load_frame(it->second.second, manifest.checks());
    f.sequence_id = it->second.first;
    return f;
}

struct ClusterSummary {
    double alpha = 0.0;
    std::uint64_t total_points = 0;
    std::uint64_t total_clusters = 0;
};

inline ClusterSummary cluster_frames(const DatasetManifest& manifest, std::span<const std::string> frame_ids,
                                     ClusterBudget budget, std::uint64_t seed, bool on_coordinates,
                                     const fs::path& clusters_dir) {
    const auto index = manifest.frame_index();
    ClusterSummary summary;
    if (budget.clicks) {
        for (const auto& id : frame_ids) summary.total_points += load_manifest_frame(manifest, index, id).num_points();
        budget.alpha = alpha_from_clicks(*budget.clicks, summary.total_points);
        summary.total_points = 0;
    }
    summary.alpha = budget.alpha;
    for (const auto& id : frame_ids) {
        const Frame f = load_manifest_frame(manifest, index, id);
        const auto view = on_coordinates ? coordinate_view(f) : feature_view(f);
        const auto cl = cluster_frame(view, budget, manifest.num_classes, seed);
        save_clustering(cl, clusters_dir / (id + ".mlnc"));
        summary.total_points += f.num_points();
        summary.total_clusters += cl.k;
    }
    return summary;
}

struct AnnotationOutcome {
    ClasswiseCounts counts;
    ClickAccount clicks;
    bool has_ground_truth = true;
};

inline AnnotationOutcome annotate_frames_oracle(const DatasetManifest& manifest, std::span<const std::string> frame_ids,
                                                const fs::path& clusters_dir, const fs::path& pseudo_dir,
                                                double noise, std::uint64_t seed) {
    const auto index = manifest.frame_index();
    AnnotationOutcome out{ClasswiseCounts(manifest.num_classes), {}, true};
    std::uint64_t frame_no = 0;
    for (const auto& id : frame_ids) {
        const Frame f = load_manifest_frame(manifest, index, id);
        const auto cpath = clusters_dir / (id + ".mlnc");
        if (!fs::exists(cpath)) fail(ErrorCode::MissingClustering, id);
        auto cl = load_clustering(cpath);
        std::optional<OracleNoise> n;
        if (noise > 0.0) n = OracleNoise{noise, seed + frame_no, manifest.num_classes};
        ++frame_no;
        const auto pl = annotate_frame_oracle(f, cl, manifest.num_classes, n);
        save_pseudo_labels(pl, pseudo_dir / (id + ".mlnl"));
        out.counts.add(pl.labels, *f.gt_labels);
        out.clicks.add(pl);
    }
    return out;
}

// Deterministic per-frame subsample of at most cap point indices, sorted.
inline std::vector<std::size_t> subsample_points(std::size_t m, std::size_t cap, const std::string& frame_id,
                                                 std::uint64_t seed) {
    std::vector<std::size_t> idx(m);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (cap == 0 || cap >= m) return idx;
    std::mt19937_64 rng(seed ^ std::stoull(fingerprint(frame_id), nullptr, 16));
    for (std::size_t i = 0; i < cap; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, m - 1);
        std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(cap);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Appends the chosen rows of a frame; labels come from `labels` (or
// kUnlabeled when empty).
inline void append_frame_points(PointSet& set, const Frame& f, std::span<const ClassId> labels,
                                std::span<const std::size_t> rows) {
    set.dim = f.dim;
    for (auto i : rows) {
        const auto row = f.feature_row(i);
        set.features.insert(set.features.end(), row.begin(), row.end());
        set.labels.push_back(labels.empty() ? kUnlabeled : labels[i]);
    }
}

// Every frame of a manifest with its ground truth (evaluation / full supervision).
inline PointSet ground_truth_points(const DatasetManifest& manifest, std::size_t cap, std::uint64_t seed) {
    PointSet set;
    set.dim = manifest.feature_dim;
    for (const auto& seq : manifest.sequences) {
        for (const auto& p : seq.frames) {
            const Frame f = manifest.load(seq.sequence_id, p);
            if (!f.gt_labels) fail(ErrorCode::NoGroundTruth, f.frame_id);
            append_frame_points(set, f, *f.gt_labels, subsample_points(f.num_points(), cap, f.frame_id, seed));
        }
    }
    return set;
}

// --- the pipeline --------------------------------------------------------

inline const std::vector<std::string>& pipeline_stages() {
    static const std::vector<std::string> stages = {"prune", "select", "cluster", "annotate", "train", "eval"};
    return stages;
}

// Raised when a stage fails; earlier artifacts stay on disk.
class StageFailure : public Error {
public:
    StageFailure(std::string stage, const Error& cause)
        : Error(cause.code(), "stage " + stage + ": " + cause.what()), stage_(std::move(stage)) {}
    const std::string& stage() const { return stage_; }

private:
    std::string stage_;
};

class Pipeline {
public:
    explicit Pipeline(PipelineConfig cfg) : cfg_(std::move(cfg)) {
        validate(cfg_);
        manifest_ = load_manifest(cfg_.manifest);
        fs::create_directories(cfg_.out_dir / "stages");
    }

    fs::path out(const std::string& name) const { return cfg_.out_dir / name; }

    nlohmann::json run() {
        std::string upstream = pipeline_config_to_json(cfg_).dump();
        nlohmann::json stages = nlohmann::json::object();
        for (const auto& s : pipeline_stages()) stages[s] = {{"status", "PENDING"}};
        for (const auto& stage : pipeline_stages()) {
            const std::string fp = fingerprint(upstream + "|" + stage);
            try {
                stages[stage] = run_stage(stage, fp);
            } catch (const Error& e) {
                stages[stage] = {{"status", "FAILED"}, {"error", std::string(to_string(e.code()))},
                                 {"message", e.what()}};
                write_report(stages);
                throw StageFailure(stage, e);
            }
            upstream += "|" + fp;
        }
        return write_report(stages);
    }

private:
    using Marker = nlohmann::json;

    fs::path marker_path(const std::string& stage) const { return cfg_.out_dir / "stages" / (stage + ".json"); }

    std::optional<Marker> completed(const std::string& stage, const std::string& fp) const {
        const auto path = marker_path(stage);
        if (!fs::exists(path)) return std::nullopt;
        try {
            auto m = nlohmann::json::parse(io::read_text(path));
            if (m.value("fingerprint", "") != fp) return std::nullopt;
            for (const auto& a : m.value("artifacts", std::vector<std::string>{}))
                if (!fs::exists(cfg_.out_dir / a)) return std::nullopt;
            return m;
        } catch (const nlohmann::json::exception&) {
            return std::nullopt;
        }
    }

    nlohmann::json run_stage(const std::string& stage, const std::string& fp) {
        if (auto m = completed(stage, fp)) {
            nlohmann::json entry = {{"status", "COMPLETE"}, {"seconds", m->at("seconds")}};
            return entry;
        }
        fs::remove(marker_path(stage));
        const auto start = std::chrono::steady_clock::now();
        Marker marker;
        if (stage == "prune") marker = do_prune();
        else if (stage == "select") marker = do_select();
        else if (stage == "cluster") marker = do_cluster();
        else if (stage == "annotate") marker = do_annotate();
        else if (stage == "train") marker = do_train();
        else marker = do_eval();
        marker["fingerprint"] = fp;
        marker["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        io::write_text_atomic(marker_path(stage), marker.dump(2) + "\n");
        return {{"status", "COMPLETE"}, {"seconds", marker["seconds"]}};
    }

    std::vector<std::string> selected_ids() const {
        std::vector<std::string> ids;
        for (const auto& s : parse_selection(io::read_text(out("selection.txt")))) ids.push_back(s.frame_id);
        return ids;
    }

    Marker do_prune() {
        const auto kept = prune_dataset(manifest_, PruneConfig{cfg_.tau});
        io::write_text_atomic(out("kept.txt"), format_kept_list(kept));
        return {{"artifacts", {"kept.txt"}}, {"kept_frames", kept.size()}, {"pool_frames", manifest_.num_frames()}};
    }

    Marker do_select() {
        const auto kept = parse_kept_list(io::read_text(out("kept.txt")));
        const std::size_t budget = cfg_.budget_frames.value_or(kept.size());
        const auto ranked = rank_kept_frames(manifest_, kept, cfg_.signature_centers.value_or(manifest_.num_classes),
                                             budget, cfg_.seed);
        io::write_text_atomic(out("selection.txt"), format_selection(ranked));
        return {{"artifacts", {"selection.txt"}}, {"selected_frames", ranked.size()}};
    }

    Marker do_cluster() {
        const auto ids = selected_ids();
        ClusterBudget budget;
        budget.alpha = cfg_.alpha.value_or(0.0);
        budget.clicks = cfg_.clicks;
        budget.min_factor = cfg_.min_factor;
        const auto summary = cluster_frames(manifest_, ids, budget, cfg_.seed, cfg_.cluster_on_coordinates,
                                            out("clusters"));
        std::vector<std::string> artifacts;
        for (const auto& id : ids) artifacts.push_back("clusters/" + id + ".mlnc");
        return {{"artifacts", artifacts}, {"alpha", summary.alpha}, {"total_points", summary.total_points},
                {"total_clusters", summary.total_clusters}};
    }

    Marker do_annotate() {
        const auto ids = selected_ids();
        const auto outcome = annotate_frames_oracle(manifest_, ids, out("clusters"), out("pseudo"), cfg_.oracle_noise,
                                                    cfg_.seed);
        const auto report = classwise_report(outcome.counts);
        io::write_text_atomic(out("annotation_report.json"),
                              annotation_report_json(report, outcome.clicks, manifest_.class_names).dump(2) + "\n");
        std::vector<std::string> artifacts{"annotation_report.json"};
        for (const auto& id : ids) artifacts.push_back("pseudo/" + id + ".mlnl");
        return {{"artifacts", artifacts}};
    }

    Marker do_train() {
        const auto ids = selected_ids();
        const std::set<std::string> selected(ids.begin(), ids.end());
        const auto index = manifest_.frame_index();
        PointSet labeled, unlabeled;
        labeled.dim = unlabeled.dim = manifest_.feature_dim;
        for (const auto& id : ids) {
            const Frame f = load_manifest_frame(manifest_, index, id);
            const auto pl = load_pseudo_labels(out("pseudo") / (id + ".mlnl"), manifest_.num_classes);
            append_frame_points(labeled, f, pl.labels,
                                subsample_points(f.num_points(), cfg_.train_points_per_frame, id, cfg_.seed));
        }
        for (const auto& seq : manifest_.sequences) {
            for (const auto& p : seq.frames) {
                if (selected.contains(p.stem().string())) continue;
                const Frame f = manifest_.load(seq.sequence_id, p);
                append_frame_points(unlabeled, f, {},
                                    subsample_points(f.num_points(), cfg_.train_points_per_frame, f.frame_id,
                                                     cfg_.seed));
            }
        }
        const auto res = train_two_stage(labeled, unlabeled, manifest_.num_classes, cfg_.semisup, cfg_.seed);
        save_model(res.stage1_model, out("stage1_model.mlnm"));
        save_model(res.student, out("model.mlnm"));
        io::write_text_atomic(out("trace.csv"), format_trace_csv(res.trace));
        return {{"artifacts", {"stage1_model.mlnm", "model.mlnm", "trace.csv"}},
                {"labeled_points", labeled.size()},
                {"unlabeled_points", unlabeled.size()}};
    }

    Marker do_eval() {
        const DatasetManifest eval_manifest =
            cfg_.validation_manifest ? load_manifest(*cfg_.validation_manifest) : manifest_;
        const PointSet val = ground_truth_points(eval_manifest, 0, cfg_.seed);
        const auto stage1 = load_model(out("stage1_model.mlnm"));
        const auto student = load_model(out("model.mlnm"));
        const nlohmann::json eval = {
            {"miou_stage1", evaluate_miou(stage1, val, manifest_.num_classes)},
            {"miou_stage2", evaluate_miou(student, val, manifest_.num_classes)},
            {"points", val.size()},
        };
        io::write_text_atomic(out("eval.json"), eval.dump(2) + "\n");
        return {{"artifacts", {"eval.json"}}};
    }

    // Report values are read back from artifacts and markers only.
    nlohmann::json write_report(const nlohmann::json& stages) const {
        nlohmann::json r;
        r["stages"] = stages;
        auto read_json = [&](const std::string& name) -> std::optional<nlohmann::json> {
            if (!fs::exists(out(name))) return std::nullopt;
            return nlohmann::json::parse(io::read_text(out(name)));
        };
        auto complete = [&](const std::string& s) { return stages.at(s).at("status") == "COMPLETE"; };
        r["kept_frames"] = complete("prune") ? nlohmann::json(parse_kept_list(io::read_text(out("kept.txt"))).size())
                                             : nlohmann::json(nullptr);
        r["selected_frames"] = complete("select") ? nlohmann::json(selected_ids().size()) : nlohmann::json(nullptr);
        r["alpha"] = nullptr;
        if (complete("cluster")) r["alpha"] = nlohmann::json::parse(io::read_text(marker_path("cluster"))).at("alpha");
        r["clicks"] = r["points"] = r["percent_labels"] = r["propagation_accuracy"] = nullptr;
        if (complete("annotate")) {
            const auto a = read_json("annotation_report.json");
            r["clicks"] = a->at("clicks");
            r["points"] = a->at("points");
            r["percent_labels"] = a->at("percent_labels");
            r["propagation_accuracy"] = a->at("average");
        }
        r["miou_stage1"] = r["miou_stage2"] = nullptr;
        if (complete("eval")) {
            const auto e = read_json("eval.json");
            r["miou_stage1"] = e->at("miou_stage1");
            r["miou_stage2"] = e->at("miou_stage2");
        }
        io::write_text_atomic(out("run_report.json"), r.dump(2) + "\n");
        return r;
    }

    PipelineConfig cfg_;
    DatasetManifest manifest_;
};

inline nlohmann::json run_pipeline(const PipelineConfig& cfg) { return Pipeline(cfg).run(); }

}  // namespace millilabel
