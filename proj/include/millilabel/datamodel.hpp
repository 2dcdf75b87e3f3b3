#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "millilabel/binary_io.hpp"
#include "millilabel/error.hpp"

namespace millilabel {

using ClassId = std::uint32_t;

// All-ones bit pattern of the label width.
inline constexpr ClassId kUnlabeled = std::numeric_limits<ClassId>::max();

enum class LabelSource : std::uint8_t { Unlabeled = 0, Clicked = 1, Propagated = 2 };

inline constexpr std::uint32_t kFormatVersion = 1;

// One lidar scan: M points with xyz coordinates and D-dimensional features.
struct Frame {
    std::string frame_id;
    std::string sequence_id;
    std::size_t dim = 0;
    std::vector<float> points;    // M*3, row-major
    std::vector<float> features;  // M*D, row-major
    std::optional<std::vector<ClassId>> gt_labels;

    std::size_t num_points() const { return dim == 0 ? 0 : features.size() / dim; }

    std::span<const float> feature_row(std::size_t i) const {
        return std::span<const float>(features).subspan(i * dim, dim);
    }
    std::span<const float> point(std::size_t i) const {
        return std::span<const float>(points).subspan(i * 3, 3);
    }
    bool has_labels() const { return gt_labels.has_value(); }
};

struct FrameDescriptor {
    std::string frame_id;
    std::vector<double> vector;
};

struct PseudoLabels {
    std::string frame_id;
    std::vector<ClassId> labels;
    std::vector<LabelSource> source;

    std::size_t size() const { return labels.size(); }
    std::size_t count(LabelSource s) const {
        std::size_t n = 0;
        for (auto v : source) n += (v == s);
        return n;
    }
};

struct FrameChecks {
    std::optional<std::size_t> feature_dim;
    std::optional<std::uint32_t> num_classes;
    std::optional<ClassId> ignore_label;
};

namespace detail {
inline void validate_frame(const Frame& f, const FrameChecks& checks, const std::string& source) {
    const std::size_t m = f.num_points();
    if (m == 0 || f.dim == 0) fail(ErrorCode::MalformedFile, source + ": M and D must be >= 1");
    if (f.features.size() != m * f.dim || f.points.size() != m * 3)
        fail(ErrorCode::MalformedFile, source + ": points/features row count mismatch");
    if (f.gt_labels && f.gt_labels->size() != m)
        fail(ErrorCode::MalformedFile, source + ": labels length differs from M");
    if (checks.feature_dim && *checks.feature_dim != f.dim)
        fail(ErrorCode::DimMismatch, source + ": D=" + std::to_string(f.dim) + " but manifest says " +
                                         std::to_string(*checks.feature_dim));
    if (f.gt_labels && checks.num_classes) {
        for (ClassId c : *f.gt_labels) {
            if (c >= *checks.num_classes && !(checks.ignore_label && c == *checks.ignore_label))
                fail(ErrorCode::MalformedFile, source + ": label " + std::to_string(c) + " out of range");
        }
    }
}
}  // namespace detail

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
    const std::size_t m = f.num_points();
    std::vector<std::uint8_t> out;
    out.reserve(24 + f.points.size() * 4 + f.features.size() * 4 + (f.gt_labels ? m * 4 : 0));
    io::put_magic(out, "MLNF");
    io::put<std::uint32_t>(out, kFormatVersion);
    io::put<std::uint64_t>(out, m);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(f.dim));
    io::put<std::uint32_t>(out, f.gt_labels ? 1u : 0u);
    io::put_array<float>(out, f.points);
    io::put_array<float>(out, f.features);
    if (f.gt_labels) io::put_array<std::uint32_t>(out, *f.gt_labels);
    return out;
}

inline Frame decode_frame(std::span<const std::uint8_t> bytes, std::string frame_id, const FrameChecks& checks = {},
                          const std::string& source = "<memory>") {
    io::Reader r(bytes, source);
    r.expect_magic("MLNF");
    if (auto v = r.get<std::uint32_t>(); v != kFormatVersion)
        fail(ErrorCode::MalformedFile, source + ": unsupported version " + std::to_string(v));
    const auto m = r.get<std::uint64_t>();
    const auto d = r.get<std::uint32_t>();
    const auto flags = r.get<std::uint32_t>();
    if (m == 0 || d == 0) fail(ErrorCode::MalformedFile, source + ": M and D must be >= 1");
    if ((flags & ~1u) != 0) fail(ErrorCode::MalformedFile, source + ": unknown flag bits");
    if (m > std::numeric_limits<std::uint64_t>::max() / (4ull * (3ull + d)))
        fail(ErrorCode::MalformedFile, source + ": size overflow");
    Frame f;
    f.frame_id = std::move(frame_id);
    f.dim = d;
    f.points = r.get_array<float>(m * 3);
    f.features = r.get_array<float>(m * d);
    if (flags & 1u) f.gt_labels = r.get_array<std::uint32_t>(m);
    r.expect_end();
    detail::validate_frame(f, checks, source);
    return f;
}

inline void save_frame(const Frame& f, const std::filesystem::path& path) {
    detail::validate_frame(f, {}, path.string());
    io::write_file_atomic(path, encode_frame(f));
}

// frame_id is the file stem; sequence_id is filled in by the manifest.
inline Frame load_frame(const std::filesystem::path& path, const FrameChecks& checks = {}) {
    auto bytes = io::read_file(path);
    return decode_frame(bytes, path.stem().string(), checks, path.string());
}

// Arithmetic mean of the raw feature rows, accumulated in double.
inline FrameDescriptor frame_descriptor(const Frame& f) {
    const std::size_t m = f.num_points();
    const std::size_t d = f.dim;
    std::vector<double> sum(d, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const float* row = f.features.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) sum[j] += row[j];
    }
    for (auto& v : sum) v /= static_cast<double>(m);
    return {f.frame_id, std::move(sum)};
}

// --- pseudo labels -------------------------------------------------------

inline void validate_pseudo_labels(const PseudoLabels& pl, std::optional<std::uint32_t> num_classes,
                                   const std::string& source) {
    if (pl.labels.size() != pl.source.size()) fail(ErrorCode::MalformedFile, source + ": labels/source length differ");
    for (std::size_t i = 0; i < pl.labels.size(); ++i) {
        const auto s = pl.source[i];
        const auto c = pl.labels[i];
        if (s == LabelSource::Unlabeled) {
            if (c != kUnlabeled) fail(ErrorCode::MalformedFile, source + ": UNLABELED entry without sentinel");
        } else if (s == LabelSource::Clicked || s == LabelSource::Propagated) {
            if (c == kUnlabeled || (num_classes && c >= *num_classes))
                fail(ErrorCode::MalformedFile, source + ": invalid class id " + std::to_string(c));
        } else {
            fail(ErrorCode::MalformedFile, source + ": invalid source flag");
        }
    }
}

inline std::vector<std::uint8_t> encode_pseudo_labels(const PseudoLabels& pl) {
    std::vector<std::uint8_t> out;
    out.reserve(16 + pl.size() * 5);
    io::put_magic(out, "MLNL");
    io::put<std::uint32_t>(out, kFormatVersion);
    io::put<std::uint64_t>(out, pl.size());
    io::put_array<std::uint32_t>(out, pl.labels);
    for (auto s : pl.source) out.push_back(static_cast<std::uint8_t>(s));
    return out;
}

inline PseudoLabels decode_pseudo_labels(std::span<const std::uint8_t> bytes, std::string frame_id,
                                         std::optional<std::uint32_t> num_classes = std::nullopt,
                                         const std::string& source = "<memory>") {
    io::Reader r(bytes, source);
    r.expect_magic("MLNL");
    if (auto v = r.get<std::uint32_t>(); v != kFormatVersion)
        fail(ErrorCode::MalformedFile, source + ": unsupported version " + std::to_string(v));
    const auto m = r.get<std::uint64_t>();
    PseudoLabels pl;
    pl.frame_id = std::move(frame_id);
    pl.labels = r.get_array<std::uint32_t>(m);
    auto raw = r.get_array<std::uint8_t>(m);
    r.expect_end();
    pl.source.reserve(raw.size());
    for (auto b : raw) {
        if (b > 2) fail(ErrorCode::MalformedFile, source + ": invalid source flag " + std::to_string(b));
        pl.source.push_back(static_cast<LabelSource>(b));
    }
    validate_pseudo_labels(pl, num_classes, source);
    return pl;
}

inline void save_pseudo_labels(const PseudoLabels& pl, const std::filesystem::path& path) {
    validate_pseudo_labels(pl, std::nullopt, path.string());
    io::write_file_atomic(path, encode_pseudo_labels(pl));
}

inline PseudoLabels load_pseudo_labels(const std::filesystem::path& path,
                                       std::optional<std::uint32_t> num_classes = std::nullopt) {
    auto bytes = io::read_file(path);
    return decode_pseudo_labels(bytes, path.stem().string(), num_classes, path.string());
}

// --- manifest ------------------------------------------------------------

struct Sequence {
    std::string sequence_id;
    std::vector<std::filesystem::path> frames;  // acquisition order
};

struct DatasetManifest {
    std::uint32_t num_classes = 0;
    std::vector<std::string> class_names;
    std::size_t feature_dim = 0;
    std::optional<ClassId> ignore_label;
    std::vector<Sequence> sequences;
    std::filesystem::path base_dir;  // relative frame paths resolve against this

    FrameChecks checks() const { return {feature_dim, num_classes, ignore_label}; }

    std::filesystem::path resolve(const std::filesystem::path& p) const {
        return p.is_absolute() ? p : base_dir / p;
    }

    std::size_t num_frames() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.frames.size();
        return n;
    }

    // frame_id -> (sequence_id, resolved path)
    std::unordered_map<std::string, std::pair<std::string, std::filesystem::path>> frame_index() const {
        std::unordered_map<std::string, std::pair<std::string, std::filesystem::path>> index;
        for (const auto& s : sequences) {
            for (const auto& p : s.frames) {
                auto [it, inserted] = index.emplace(p.stem().string(), std::pair{s.sequence_id, resolve(p)});
                if (!inserted) fail(ErrorCode::ConfigError, "duplicate frame id " + p.stem().string());
            }
        }
        return index;
    }

    Frame load(const std::string& sequence_id, const std::filesystem::path& p) const {
        Frame f = load_frame(resolve(p), checks());
        f.sequence_id = sequence_id;
        return f;
    }
};

inline void validate_manifest(const DatasetManifest& m) {
    if (m.num_classes == 0) fail(ErrorCode::ConfigError, "manifest: num_classes must be positive");
    if (m.class_names.size() != m.num_classes)
        fail(ErrorCode::ConfigError, "manifest: class_names length differs from num_classes");
    if (m.feature_dim == 0) fail(ErrorCode::ConfigError, "manifest: feature_dim must be positive");
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    nlohmann::json j;
    j["num_classes"] = m.num_classes;
    j["class_names"] = m.class_names;
    j["feature_dim"] = m.feature_dim;
    if (m.ignore_label) j["ignore_label"] = *m.ignore_label;
    j["sequences"] = nlohmann::json::array();
    for (const auto& s : m.sequences) {
        nlohmann::json frames = nlohmann::json::array();
        for (const auto& p : s.frames) frames.push_back(p.generic_string());
        j["sequences"].push_back({{"sequence_id", s.sequence_id}, {"frames", frames}});
    }
    return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j, std::filesystem::path base_dir) {
    DatasetManifest m;
    try {
        m.num_classes = j.at("num_classes").get<std::uint32_t>();
        m.class_names = j.at("class_names").get<std::vector<std::string>>();
        m.feature_dim = j.at("feature_dim").get<std::size_t>();
        if (j.contains("ignore_label")) m.ignore_label = j.at("ignore_label").get<ClassId>();
        for (const auto& s : j.at("sequences")) {
            Sequence seq;
            seq.sequence_id = s.at("sequence_id").get<std::string>();
            for (const auto& p : s.at("frames")) seq.frames.emplace_back(p.get<std::string>());
            m.sequences.push_back(std::move(seq));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ConfigError, std::string("manifest: ") + e.what());
    }
    m.base_dir = std::move(base_dir);
    validate_manifest(m);
    return m;
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(io::read_text(path));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::ConfigError, path.string() + ": " + e.what());
    }
    return manifest_from_json(j, path.parent_path());
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
    validate_manifest(m);
    io::write_text_atomic(path, manifest_to_json(m).dump(2) + "\n");
}

}  // namespace millilabel
