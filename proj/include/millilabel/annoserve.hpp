#pragma once

// Human annotation sessions and their HTTP front.
//
// A session walks the cluster centers of one frame in cluster-id order. Every
// mutation is written to disk before it is acknowledged; when the last center
// is answered the labels are propagated and written in the same pseudo-label
// format the oracle path produces.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "millilabel/annotate.hpp"
#include "millilabel/binary_io.hpp"
#include "millilabel/clustering.hpp"
#include "millilabel/datamodel.hpp"
#include "millilabel/error.hpp"

namespace millilabel {

struct ServeConfig {
    std::filesystem::path manifest;
    std::filesystem::path clusters_dir;  // <frame_id>.mlnc
    std::filesystem::path pseudo_dir;    // <frame_id>.mlnl written on completion
    std::filesystem::path state_dir;     // <session_id>.json
    double context_radius = 5.0;         // metres, for next_click payloads
    std::size_t max_context_points = 50000;
};

struct ContextPoint {
    std::uint32_t index = 0;
    std::array<float, 3> xyz{};
    std::uint32_t cluster = 0;
};

struct ClickItem {
    std::uint32_t point = 0;
    std::array<float, 3> xyz{};
    std::uint32_t cluster = 0;
    std::vector<ContextPoint> context;
};

struct Progress {
    std::size_t cursor = 0;
    std::size_t k = 0;
    bool done() const { return cursor == k; }
};

// Immutable per-frame data shared by every session on that frame.
struct FrameEntry {
    Frame frame;
    Clustering clustering;
};

// The clicked point, its cluster members, and every point within radius,
// thinned by a fixed stride to at most max_points (the clicked point is always
// first).
inline std::vector<ContextPoint> context_points(const FrameEntry& entry, std::uint32_t center, double radius,
                                                std::size_t max_points) {
    const auto& f = entry.frame;
    const auto& cl = entry.clustering;
    if (center >= f.num_points()) fail(ErrorCode::LengthMismatch, f.frame_id + ": point index out of range");
    const auto c = f.point(center);
    const double r2 = radius * radius;
    std::vector<std::uint32_t> picked;
    for (std::uint32_t i = 0; i < f.num_points(); ++i) {
        if (i == center) continue;
        bool take = cl.assignments[i] == cl.assignments[center];
        if (!take && radius > 0.0) {
            const auto p = f.point(i);
            const double dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
            take = dx * dx + dy * dy + dz * dz <= r2;
        }
        if (take) picked.push_back(i);
    }
    std::vector<ContextPoint> out;
    auto push = [&](std::uint32_t i) {
        const auto p = f.point(i);
        out.push_back({i, {p[0], p[1], p[2]}, cl.assignments[i]});
    };
    push(center);
    const std::size_t budget = max_points > 0 ? max_points - 1 : 0;
    if (picked.size() <= budget) {
        for (auto i : picked) push(i);
    } else if (budget > 0) {
        for (std::size_t t = 0; t < budget; ++t) push(picked[t * picked.size() / budget]);
    }
    return out;
}

class SessionStore {
public:
    explicit SessionStore(DatasetManifest manifest, ServeConfig cfg)
        : manifest_(std::move(manifest)), cfg_(std::move(cfg)), frame_paths_(manifest_.frame_index()) {
        std::filesystem::create_directories(cfg_.state_dir);
        std::filesystem::create_directories(cfg_.pseudo_dir);
    }

    const DatasetManifest& manifest() const { return manifest_; }
    const ServeConfig& config() const { return cfg_; }

    static std::string session_id_for(const std::string& frame_id) { return "s-" + frame_id; }

    // Creates the session, or resumes it from its persisted state.
    std::string create_session(const std::string& frame_id) {
        auto entry = frame(frame_id);
        const auto id = session_id_for(frame_id);
        std::unique_lock lock(sessions_mutex_);
        if (sessions_.contains(id)) return id;
        auto s = std::make_shared<Session>();
        s->entry = entry;
        s->state.frame_id = frame_id;
        s->state.click_queue = entry->clustering.center_points;
        const auto path = state_path(id);
        if (std::filesystem::exists(path)) {
            restore(*s, path);
            // A crash can land between the last persisted answer and the
            // pseudo-label write.
            if (s->order.size() == s->state.click_queue.size() && !std::filesystem::exists(pseudo_path(frame_id)))
                write_pseudo_labels(*s);
        } else {
            persist(id, *s);
        }
        sessions_.emplace(id, std::move(s));
        return id;
    }

    std::optional<ClickItem> next_click(const std::string& session_id) {
        auto s = session(session_id);
        std::lock_guard lock(s->mutex);
        const std::size_t cursor = s->order.size();
        if (cursor == s->state.click_queue.size()) return std::nullopt;
        const auto point = s->state.click_queue[cursor];
        const auto& entry = *s->entry;
        const auto xyz = entry.frame.point(point);
        return ClickItem{point,
                         {xyz[0], xyz[1], xyz[2]},
                         entry.clustering.assignments[point],
                         context_points(entry, point, cfg_.context_radius, cfg_.max_context_points)};
    }

    Progress submit_label(const std::string& session_id, std::uint32_t point, ClassId cls) {
        auto s = session(session_id);
        std::lock_guard lock(s->mutex);
        const std::size_t cursor = s->order.size();
        const auto& queue = s->state.click_queue;
        if (cursor == queue.size() || queue[cursor] != point)
            fail(ErrorCode::OutOfOrder, "point " + std::to_string(point) + " is not the current queue item");
        if (cls >= manifest_.num_classes) fail(ErrorCode::InvalidClass, "class " + std::to_string(cls));
        s->order.push_back(point);
        s->state.responses[point] = cls;
        try {
            persist(session_id, *s);
        } catch (...) {
            s->order.pop_back();
            s->state.responses.erase(point);
            throw;
        }
        if (s->order.size() == queue.size()) write_pseudo_labels(*s);
        return {s->order.size(), queue.size()};
    }

    Progress undo(const std::string& session_id) {
        auto s = session(session_id);
        std::lock_guard lock(s->mutex);
        if (s->order.empty()) fail(ErrorCode::NothingToUndo, session_id + ": cursor is at the start");
        const bool was_complete = s->order.size() == s->state.click_queue.size();
        const auto point = s->order.back();
        const auto cls = s->state.responses.at(point);
        s->order.pop_back();
        s->state.responses.erase(point);
        try {
            persist(session_id, *s);
        } catch (...) {
            s->order.push_back(point);
            s->state.responses[point] = cls;
            throw;
        }
        if (was_complete) std::filesystem::remove(pseudo_path(s->state.frame_id));
        return {s->order.size(), s->state.click_queue.size()};
    }

    Progress progress(const std::string& session_id) {
        auto s = session(session_id);
        std::lock_guard lock(s->mutex);
        return {s->order.size(), s->state.click_queue.size()};
    }

    AnnotationSession snapshot(const std::string& session_id) {
        auto s = session(session_id);
        std::lock_guard lock(s->mutex);
        return s->state;
    }

    std::shared_ptr<const FrameEntry> frame(const std::string& frame_id) {
        {
            std::shared_lock lock(frames_mutex_);
            if (auto it = frames_.find(frame_id); it != frames_.end()) return it->second;
        }
        auto it = frame_paths_.find(frame_id);
        if (it == frame_paths_.end()) fail(ErrorCode::UnknownFrame, frame_id);
        const auto cpath = cfg_.clusters_dir / (frame_id + ".mlnc");
        if (!std::filesystem::exists(cpath)) fail(ErrorCode::MissingClustering, frame_id);
        auto entry = std::make_shared<FrameEntry>();
        entry->frame = load_frame(it->second.second, manifest_.checks());
        entry->frame.sequence_id = it->second.first;
        entry->clustering = load_clustering(cpath);
        if (entry->clustering.num_points() != entry->frame.num_points())
            fail(ErrorCode::MalformedFile, frame_id + ": clustering does not match frame");
        std::unique_lock lock(frames_mutex_);
        return frames_.try_emplace(frame_id, std::move(entry)).first->second;
    }

    std::filesystem::path pseudo_path(const std::string& frame_id) const {
        return cfg_.pseudo_dir / (frame_id + ".mlnl");
    }

private:
    struct Session {
        std::mutex mutex;
        std::shared_ptr<const FrameEntry> entry;
        AnnotationSession state;
        std::vector<std::uint32_t> order;  // answered points, oldest first
    };

    std::filesystem::path state_path(const std::string& id) const { return cfg_.state_dir / (id + ".json"); }

    std::shared_ptr<Session> session(const std::string& id) {
        std::shared_lock lock(sessions_mutex_);
        auto it = sessions_.find(id);
        if (it == sessions_.end()) fail(ErrorCode::UnknownSession, id);
        return it->second;
    }

    void persist(const std::string& id, const Session& s) const {
        nlohmann::json responses = nlohmann::json::array();
        for (auto p : s.order) responses.push_back({p, s.state.responses.at(p)});
        const nlohmann::json j = {
            {"session_id", id},
            {"frame_id", s.state.frame_id},
            {"queue", s.state.click_queue},
            {"responses", responses},
        };
        io::write_text_atomic(state_path(id), j.dump() + "\n");
    }

    void restore(Session& s, const std::filesystem::path& path) const {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_text(path));
            if (j.at("queue").get<std::vector<std::uint32_t>>() != s.state.click_queue)
                fail(ErrorCode::MalformedFile, path.string() + ": queue no longer matches the clustering");
            for (const auto& r : j.at("responses")) {
                const auto p = r.at(0).get<std::uint32_t>();
                const auto c = r.at(1).get<ClassId>();
                if (s.order.size() >= s.state.click_queue.size() || s.state.click_queue[s.order.size()] != p ||
                    c >= manifest_.num_classes)
                    fail(ErrorCode::MalformedFile, path.string() + ": inconsistent responses");
                s.order.push_back(p);
                s.state.responses[p] = c;
            }
        } catch (const nlohmann::json::exception& e) {
            fail(ErrorCode::MalformedFile, path.string() + ": " + e.what());
        }
    }

    void write_pseudo_labels(const Session& s) const {
        const auto pl = finish_session(s.state, s.entry->clustering, manifest_.num_classes);
        save_pseudo_labels(pl, pseudo_path(s.state.frame_id));
    }

    DatasetManifest manifest_;
    ServeConfig cfg_;
    std::unordered_map<std::string, std::pair<std::string, std::filesystem::path>> frame_paths_;
    std::shared_mutex frames_mutex_;
    std::map<std::string, std::shared_ptr<const FrameEntry>> frames_;
    std::shared_mutex sessions_mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
};

// --- HTTP ----------------------------------------------------------------

inline int http_status(ErrorCode code) {
    switch (code) {
        case ErrorCode::UnknownFrame:
        case ErrorCode::UnknownSession:
        case ErrorCode::MissingClustering: return 404;
        case ErrorCode::OutOfOrder:
        case ErrorCode::NothingToUndo: return 409;
        case ErrorCode::InvalidClass:
        case ErrorCode::ConfigError:
        case ErrorCode::LengthMismatch: return 400;
        default: return 500;
    }
}

inline nlohmann::json to_json(const Progress& p) {
    return {{"cursor", p.cursor}, {"k", p.k}, {"done", p.done()}};
}

inline nlohmann::json to_json(const ContextPoint& p) {
    return {{"index", p.index}, {"xyz", p.xyz}, {"cluster", p.cluster}};
}

inline nlohmann::json to_json(const std::vector<ContextPoint>& pts) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& p : pts) arr.push_back(to_json(p));
    return arr;
}

// Registers the annotation endpoints on `server`; `store` must outlive it.
inline void register_routes(httplib::Server& server, SessionStore& store) {
    auto reply = [](httplib::Response& res, const nlohmann::json& body, int status = 200) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    };
    auto guarded = [reply](auto&& handler) {
        return [handler, reply](const httplib::Request& req, httplib::Response& res) {
            try {
                handler(req, res);
            } catch (const Error& e) {
                reply(res, {{"error", std::string(to_string(e.code()))}, {"message", e.what()}}, http_status(e.code()));
            } catch (const nlohmann::json::exception& e) {
                reply(res, {{"error", "BAD_REQUEST"}, {"message", e.what()}}, 400);
            } catch (const std::logic_error& e) {
                reply(res, {{"error", "BAD_REQUEST"}, {"message", e.what()}}, 400);
            } catch (const std::exception& e) {
                reply(res, {{"error", "INTERNAL"}, {"message", e.what()}}, 500);
            }
        };
    };

    server.Post("/sessions", guarded([&store, reply](const httplib::Request& req, httplib::Response& res) {
        const auto body = nlohmann::json::parse(req.body);
        const auto id = store.create_session(body.at("frame_id").get<std::string>());
        auto p = to_json(store.progress(id));
        p["session_id"] = id;
        reply(res, p, 201);
    }));
    server.Get(R"(/sessions/([^/]+)/next)", guarded([&store, reply](const httplib::Request& req, httplib::Response& res) {
        const auto item = store.next_click(req.matches[1]);
        if (!item) {
            reply(res, {{"done", true}});
            return;
        }
        reply(res, {{"done", false},
                    {"point", item->point},
                    {"xyz", item->xyz},
                    {"cluster", item->cluster},
                    {"context", to_json(item->context)}});
    }));
    server.Post(R"(/sessions/([^/]+)/label)", guarded([&store, reply](const httplib::Request& req, httplib::Response& res) {
        const auto body = nlohmann::json::parse(req.body);
        reply(res, to_json(store.submit_label(req.matches[1], body.at("point").get<std::uint32_t>(),
                                              body.at("class").get<ClassId>())));
    }));
    server.Post(R"(/sessions/([^/]+)/undo)", guarded([&store, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, to_json(store.undo(req.matches[1])));
    }));
    server.Get(R"(/sessions/([^/]+)/progress)", guarded([&store, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, to_json(store.progress(req.matches[1])));
    }));
    server.Get(R"(/frames/([^/]+)/classes)", guarded([&store, reply](const httplib::Request& req, httplib::Response& res) {
        const auto& m = store.manifest();
        if (!m.frame_index().contains(req.matches[1])) fail(ErrorCode::UnknownFrame, req.matches[1]);
        reply(res, {{"num_classes", m.num_classes}, {"class_names", m.class_names}});
    }));
    server.Get(R"(/frames/([^/]+)/points)", guarded([&store, reply](const httplib::Request& req, httplib::Response& res) {
        auto entry = store.frame(req.matches[1]);
        if (!req.has_param("center")) fail(ErrorCode::ConfigError, "missing center parameter");
        const auto center = static_cast<std::uint32_t>(std::stoul(req.get_param_value("center")));
        const double radius = req.has_param("radius") ? std::stod(req.get_param_value("radius"))
                                                      : store.config().context_radius;
        reply(res, {{"points", to_json(context_points(*entry, center, radius, store.config().max_context_points))}});
    }));
}

}  // namespace millilabel
