// millilabel: command-line front end for the annotation toolkit.
//
// Exit codes: 0 success, 2 configuration error, 3 data error, 4 stage failure.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>

#include "millilabel/annoserve.hpp"
#include "millilabel/pipeline.hpp"
#include "millilabel/synthetic.hpp"

namespace fs = std::filesystem;
using namespace millilabel;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitStage = 4;

struct Globals {
    std::uint64_t seed = 0;
    unsigned threads = 0;
    fs::path out_dir = "millilabel_out";
};

SemiSupConfig load_semisup(const std::string& path) {
    if (path.empty()) return {};
    try {
        return config_from_json(nlohmann::json::parse(io::read_text(path)));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ConfigError, path + ": " + e.what());
    }
}

std::vector<std::string> read_id_list(const fs::path& path) {
    std::vector<std::string> ids;
    std::istringstream in(io::read_text(path));
    for (std::string line; std::getline(in, line);) {
        std::istringstream fields(line);
        std::string id;
        if (fields >> id) ids.push_back(id);
    }
    return ids;
}

std::vector<std::string> selection_ids(const fs::path& path) {
    std::vector<std::string> ids;
    for (const auto& s : parse_selection(io::read_text(path))) ids.push_back(s.frame_id);
    return ids;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

// --- annotate --mode serve ----------------------------------------------

// Runs the annotation server until every listed frame has a pseudo-label file.
void serve_until_complete(SessionStore& store, const std::vector<std::string>& ids, const std::string& host, int port) {
    httplib::Server server;
    register_routes(server, store);
    std::thread worker([&] { server.listen(host, port); });
    server.wait_until_ready();
    std::cerr << "annotation server on http://" << host << ":" << port << " (" << ids.size() << " frames)\n";
    for (;;) {
        bool done = true;
        for (const auto& id : ids) done = done && fs::exists(store.pseudo_path(id));
        if (done) break;
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
    server.stop();
    worker.join();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"millilabel - lidar point-cloud annotation with a milli-fraction of clicks"};
    app.require_subcommand(1);
    app.fallthrough();  // global flags may follow the subcommand
    Globals g;
    app.add_option("--seed", g.seed, "Random seed for every stochastic step");
    app.add_option("--threads", g.threads, "Worker threads (0 = hardware concurrency)");
    app.add_option("--out-dir", g.out_dir, "Output directory");

    // prune
    auto* prune = app.add_subcommand("prune", "Drop near-duplicate consecutive frames");
    std::string manifest_path, out_path;
    double tau = 0.95;
    prune->add_option("--manifest", manifest_path, "Dataset manifest")->required();
    prune->add_option("--tau", tau, "Cosine similarity threshold");
    prune->add_option("--out", out_path, "Kept-frame list (default <out-dir>/kept.txt)");

    // select
    auto* select = app.add_subcommand("select", "Rank kept frames by Scalable SeedAL diversity");
    std::string kept_path;
    std::optional<std::uint32_t> centers;
    std::optional<std::size_t> budget_frames;
    select->add_option("--manifest", manifest_path)->required();
    select->add_option("--kept", kept_path, "Kept-frame list (default <out>/kept.txt)");
    select->add_option("--num-classes,--centers", centers, "Scene-signature centers C (default manifest num_classes)");
    select->add_option("--budget-frames", budget_frames, "Number of frames S to select (default all)");
    select->add_option("--out", out_path, "Selection file (default <out-dir>/selection.txt)");

    // cluster
    auto* cluster = app.add_subcommand("cluster", "Cluster one frame, or every selected frame, in feature space");
    std::string selection_path, frame_path;
    std::optional<double> alpha;
    std::optional<std::uint64_t> clicks;
    std::uint32_t min_factor = 10;
    std::string features = "features";
    auto* c_frame = cluster->add_option("--frame", frame_path, "Single frame file (writes --out)");
    cluster->add_option("--manifest", manifest_path, "Dataset manifest (batch mode)")->excludes(c_frame);
    cluster->add_option("--selection", selection_path, "Selection file (default <out-dir>/selection.txt)");
    cluster->add_option("--num-classes", centers, "Class count for the cluster floor (single-frame mode)");
    cluster->add_option("--out", out_path, "Clustering file (single-frame mode)");
    auto* alpha_opt = cluster->add_option("--alpha", alpha, "Fraction of points to click");
    cluster->add_option("--clicks", clicks, "Total clicks N over the selected frames")->excludes(alpha_opt);
    cluster->add_option("--min-factor", min_factor, "Clusters per frame are at least this times num_classes");
    cluster->add_option("--features", features, "Clustering space")->check(CLI::IsMember({"features", "coords"}));

    // annotate
    auto* annotate = app.add_subcommand("annotate", "Label cluster centers and propagate");
    std::string clusters_dir, mode = "oracle", host = "127.0.0.1";
    double noise = 0.0;
    int port = 8080;
    annotate->add_option("--manifest", manifest_path)->required();
    annotate->add_option("--selection", selection_path, "Selection file (default <out>/selection.txt)");
    annotate->add_option("--clusters", clusters_dir, "Clustering directory (default <out>/clusters)");
    annotate->add_option("--mode", mode, "oracle or serve")->check(CLI::IsMember({"oracle", "serve"}));
    annotate->add_option("--noise", noise, "Oracle flip probability")->check(CLI::Range(0.0, 1.0));
    annotate->add_option("--alpha", alpha, "Cluster frames that have no clustering yet at this budget");
    annotate->add_option("--min-factor", min_factor);
    annotate->add_option("--report", out_path, "Report path (default <out-dir>/annotation_report.json)");
    annotate->add_option("--host", host, "Bind address in serve mode");
    annotate->add_option("--port", port, "Port in serve mode");

    // train
    auto* train = app.add_subcommand("train", "Two-stage training on pseudo-labels");
    std::string labeled_dir, unlabeled_list, semisup_path, validation_path, trace_path;
    std::size_t points_per_frame = 2000;
    train->add_option("--manifest", manifest_path)->required();
    train->add_option("--labeled", labeled_dir, "Directory of pseudo-label files")->required();
    train->add_option("--unlabeled", unlabeled_list,
                      "Directory of unlabeled frame files, or a file listing frame ids "
                      "(default: every manifest frame without pseudo-labels)");
    train->add_option("--out", out_path, "Model file (default <out-dir>/model.mlnm)");
    train->add_option("--trace", trace_path, "Training trace CSV (default <out-dir>/trace.csv)");
    train->add_option("--config", semisup_path, "Training configuration JSON");
    train->add_option("--validation-manifest", validation_path, "Frames with ground truth for the trace");
    train->add_option("--points-per-frame", points_per_frame, "Training subsample per frame (0 = all)");

    // eval
    auto* eval = app.add_subcommand("eval", "mIoU of a model on frames with ground truth");
    std::string model_path;
    eval->add_option("--manifest", manifest_path, "Evaluation manifest")->required();
    eval->add_option("--model", model_path, "Model file (default <out-dir>/model.mlnm)");
    eval->add_option("--out", out_path, "Report (default <out-dir>/eval.json)");

    // pipeline
    auto* pipeline = app.add_subcommand("pipeline", "prune -> select -> cluster -> annotate -> train -> eval");
    pipeline->add_option("--manifest", manifest_path)->required();
    pipeline->add_option("--validation-manifest", validation_path);
    pipeline->add_option("--tau", tau);
    pipeline->add_option("--num-classes,--centers", centers, "Scene-signature centers C");
    pipeline->add_option("--budget-frames", budget_frames);
    auto* p_alpha = pipeline->add_option("--alpha", alpha);
    pipeline->add_option("--clicks", clicks)->excludes(p_alpha);
    pipeline->add_option("--min-factor", min_factor);
    pipeline->add_option("--features", features)->check(CLI::IsMember({"features", "coords"}));
    pipeline->add_option("--noise", noise)->check(CLI::Range(0.0, 1.0));
    pipeline->add_option("--config", semisup_path);
    pipeline->add_option("--points-per-frame", points_per_frame);

    // gen-synthetic
    auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic dataset with ground truth");
    SyntheticSpec spec;
    std::string kind = "gaussian";
    gen->add_option("--kind", kind)->check(CLI::IsMember({"gaussian", "moons"}));
    gen->add_option("--classes", spec.num_classes);
    gen->add_option("--points", spec.points_per_frame, "Points per frame");
    gen->add_option("--sequences", spec.sequences);
    gen->add_option("--frames", spec.frames_per_sequence, "Frames per sequence");
    gen->add_option("--dim", spec.feature_dim, "Feature dimension");
    gen->add_option("--separation", spec.separation, "Distance between class means in sigma");
    gen->add_option("--sigma", spec.sigma);
    gen->add_option("--drift", spec.drift);
    gen->add_flag("--duplicate", spec.duplicate_frames, "Every frame of a sequence repeats the first");
    gen->add_option("--validation-frames", spec.validation_frames);

    // serve
    auto* serve = app.add_subcommand("serve", "HTTP annotation service");
    std::string pseudo_dir, state_dir;
    double radius = 5.0;
    serve->add_option("--manifest", manifest_path)->required();
    serve->add_option("--clusters", clusters_dir, "Clustering directory (default <out>/clusters)");
    serve->add_option("--pseudo-dir", pseudo_dir, "Pseudo-label output (default <out>/pseudo)");
    serve->add_option("--state-dir", state_dir, "Session state (default <out>/sessions)");
    serve->add_option("--host", host);
    serve->add_option("--port", port);
    serve->add_option("--radius", radius, "Context radius around the clicked point");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitConfig;
    }

    auto out = [&](const std::string& name) { return g.out_dir / name; };
    auto or_default = [](const std::string& v, const fs::path& d) { return v.empty() ? d : fs::path(v); };

    try {
        set_num_threads(g.threads);
        fs::create_directories(g.out_dir);

        if (*prune) {
            const auto kept = prune_dataset(load_manifest(manifest_path), PruneConfig{tau});
            const fs::path dest = or_default(out_path, out("kept.txt"));
            io::write_text_atomic(dest, format_kept_list(kept));
            std::cout << "kept " << kept.size() << " frames -> " << dest.string() << "\n";
        } else if (*select) {
            const auto m = load_manifest(manifest_path);
            const auto kept = parse_kept_list(io::read_text(or_default(kept_path, out("kept.txt"))));
            const auto ranked = rank_kept_frames(m, kept, centers.value_or(m.num_classes),
                                                 budget_frames.value_or(kept.size()), g.seed);
            const fs::path dest = or_default(out_path, out("selection.txt"));
            io::write_text_atomic(dest, format_selection(ranked));
            std::cout << "selected " << ranked.size() << " frames -> " << dest.string() << "\n";
        } else if (*cluster && !frame_path.empty()) {
            if (!alpha) fail(ErrorCode::ConfigError, "single-frame clustering needs --alpha");
            if (!centers) fail(ErrorCode::ConfigError, "single-frame clustering needs --num-classes");
            if (out_path.empty()) fail(ErrorCode::ConfigError, "single-frame clustering needs --out");
            const Frame f = load_frame(frame_path);
            ClusterBudget budget;
            budget.alpha = *alpha;
            budget.min_factor = min_factor;
            const auto cl = cluster_frame(features == "coords" ? coordinate_view(f) : feature_view(f), budget,
                                          *centers, g.seed);
            save_clustering(cl, out_path);
            print_json({{"frame_id", f.frame_id}, {"points", f.num_points()}, {"clusters", cl.k}});
        } else if (*cluster) {
            if (manifest_path.empty()) fail(ErrorCode::ConfigError, "give --frame or --manifest");
            if (alpha.has_value() == clicks.has_value()) fail(ErrorCode::ConfigError, "give exactly one of --alpha or --clicks");
            const auto m = load_manifest(manifest_path);
            const auto ids = selection_ids(or_default(selection_path, out("selection.txt")));
            ClusterBudget budget;
            budget.alpha = alpha.value_or(0.0);
            budget.clicks = clicks;
            budget.min_factor = min_factor;
            const auto s = cluster_frames(m, ids, budget, g.seed, features == "coords", out("clusters"));
            print_json({{"frames", ids.size()}, {"alpha", s.alpha}, {"points", s.total_points},
                        {"clusters", s.total_clusters}});
        } else if (*annotate) {
            const auto m = load_manifest(manifest_path);
            const auto ids = selection_ids(or_default(selection_path, out("selection.txt")));
            const fs::path cdir = or_default(clusters_dir, out("clusters"));
            std::vector<std::string> missing;
            for (const auto& id : ids)
                if (!fs::exists(cdir / (id + ".mlnc"))) missing.push_back(id);
            if (!missing.empty() && alpha) {
                ClusterBudget budget;
                budget.alpha = *alpha;
                budget.min_factor = min_factor;
                cluster_frames(m, missing, budget, g.seed, false, cdir);
            }
            if (mode == "serve") {
                ServeConfig sc{manifest_path, cdir, out("pseudo"), out("sessions")};
                SessionStore store(m, sc);
                serve_until_complete(store, ids, host, port);
            } else {
                annotate_frames_oracle(m, ids, cdir, out("pseudo"), noise, g.seed);
            }
            // The report is rebuilt from the pseudo-label files so both modes agree.
            const auto index = m.frame_index();
            ClasswiseCounts counts(m.num_classes);
            ClickAccount account;
            bool have_gt = true;
            for (const auto& id : ids) {
                const auto pl = load_pseudo_labels(out("pseudo") / (id + ".mlnl"), m.num_classes);
                account.add(pl);
                const Frame f = load_manifest_frame(m, index, id);
                if (f.gt_labels) counts.add(pl.labels, *f.gt_labels);
                else have_gt = false;
            }
            auto report = annotation_report_json(classwise_report(counts), account, m.class_names);
            if (!have_gt) report["average"] = nullptr;
            io::write_text_atomic(or_default(out_path, out("annotation_report.json")), report.dump(2) + "\n");
            print_json(report);
        } else if (*train) {
            const auto m = load_manifest(manifest_path);
            const auto cfg = load_semisup(semisup_path);
            const auto index = m.frame_index();
            PointSet labeled, unlabeled;
            labeled.dim = unlabeled.dim = m.feature_dim;
            std::set<std::string> labeled_ids;
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(labeled_dir))
                if (e.path().extension() == ".mlnl") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const auto& p : files) {
                const std::string id = p.stem().string();
                const Frame f = load_manifest_frame(m, index, id);
                const auto pl = load_pseudo_labels(p, m.num_classes);
                append_frame_points(labeled, f, pl.labels, subsample_points(f.num_points(), points_per_frame, id, g.seed));
                labeled_ids.insert(id);
            }
            auto add_unlabeled = [&](const Frame& f) {
                if (f.dim != m.feature_dim) fail(ErrorCode::DimMismatch, f.frame_id + ": feature dim differs from manifest");
                append_frame_points(unlabeled, f, {},
                                    subsample_points(f.num_points(), points_per_frame, f.frame_id, g.seed));
            };
            if (!unlabeled_list.empty() && fs::is_directory(unlabeled_list)) {
                std::vector<fs::path> frames;
                for (const auto& e : fs::directory_iterator(unlabeled_list))
                    if (e.path().extension() == ".mlnf") frames.push_back(e.path());
                std::sort(frames.begin(), frames.end());
                for (const auto& p : frames) add_unlabeled(load_frame(p, m.checks()));
            } else {
                std::vector<std::string> unl;
                if (!unlabeled_list.empty()) {
                    unl = read_id_list(unlabeled_list);
                } else {
                    for (const auto& [id, where] : index)
                        if (!labeled_ids.contains(id)) unl.push_back(id);
                    std::sort(unl.begin(), unl.end());
                }
                for (const auto& id : unl) add_unlabeled(load_manifest_frame(m, index, id));
            }
            std::optional<PointSet> val;
            if (!validation_path.empty()) val = ground_truth_points(load_manifest(validation_path), 0, g.seed);
            const auto res = train_two_stage(labeled, unlabeled, m.num_classes, cfg, g.seed, val ? &*val : nullptr);
            const fs::path model_dest = or_default(out_path, out("model.mlnm"));
            save_model(res.stage1_model, model_dest.parent_path() / ("stage1_" + model_dest.filename().string()));
            save_model(res.student, model_dest);
            io::write_text_atomic(or_default(trace_path, out("trace.csv")), format_trace_csv(res.trace));
            print_json({{"labeled_points", labeled.size()}, {"unlabeled_points", unlabeled.size()},
                        {"miou_stage1", val ? nlohmann::json(res.stage1_miou) : nlohmann::json(nullptr)},
                        {"miou_stage2", val ? nlohmann::json(res.stage2_miou) : nlohmann::json(nullptr)}});
        } else if (*eval) {
            const auto m = load_manifest(manifest_path);
            const auto model = load_model(or_default(model_path, out("model.mlnm")));
            const auto data = ground_truth_points(m, 0, g.seed);
            const auto pred = model.predict(data.all_rows());
            ConfusionMatrix cm(m.num_classes);
            cm.add(pred, data.labels);
            std::set<ClassId> ignore;
            nlohmann::json per_class = nlohmann::json::object();
            const auto iou = cm.iou(ignore);
            for (std::size_t c = 0; c < iou.size(); ++c)
                per_class[m.class_names[c]] = iou[c] ? nlohmann::json(*iou[c]) : nlohmann::json(nullptr);
            const nlohmann::json report = {{"miou", cm.miou(ignore)}, {"iou", per_class}, {"points", data.size()}};
            io::write_text_atomic(or_default(out_path, out("eval.json")), report.dump(2) + "\n");
            print_json(report);
        } else if (*pipeline) {
            PipelineConfig pc;
            pc.manifest = manifest_path;
            pc.out_dir = g.out_dir;
            if (!validation_path.empty()) pc.validation_manifest = validation_path;
            pc.tau = tau;
            pc.signature_centers = centers;
            pc.budget_frames = budget_frames;
            pc.alpha = alpha;
            pc.clicks = clicks;
            pc.min_factor = min_factor;
            pc.seed = g.seed;
            pc.semisup = load_semisup(semisup_path);
            pc.cluster_on_coordinates = features == "coords";
            pc.oracle_noise = noise;
            pc.train_points_per_frame = points_per_frame;
            print_json(run_pipeline(pc));
        } else if (*gen) {
            spec.kind = kind == "moons" ? SyntheticKind::Moons : SyntheticKind::Gaussian;
            spec.seed = g.seed;
            const auto ds = gen_synthetic(spec, g.out_dir);
            std::cout << "manifest " << ds.manifest.string() << "\n";
            if (!ds.validation_manifest.empty()) std::cout << "validation " << ds.validation_manifest.string() << "\n";
        } else if (*serve) {
            ServeConfig sc{manifest_path, or_default(clusters_dir, out("clusters")),
                           or_default(pseudo_dir, out("pseudo")), or_default(state_dir, out("sessions")), radius};
            SessionStore store(load_manifest(manifest_path), sc);
            httplib::Server server;
            register_routes(server, store);
            std::cerr << "listening on http://" << host << ":" << port << "\n";
            if (!server.listen(host, port)) fail(ErrorCode::IoFailure, "cannot bind " + host + ":" + std::to_string(port));
        }
    } catch (const StageFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == ErrorCode::ConfigError ? kExitConfig : kExitData;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return 0;
}
