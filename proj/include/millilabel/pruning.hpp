#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "millilabel/datamodel.hpp"
#include "millilabel/error.hpp"

namespace millilabel {

struct PruneConfig {
    double tau = 0.95;
};

inline void validate(const PruneConfig& cfg) {
    if (!std::isfinite(cfg.tau) || cfg.tau > 1.0)
        fail(ErrorCode::ConfigError, "tau must be finite and <= 1, got " + std::to_string(cfg.tau));
}

template <class T, class U>
double cosine_similarity(std::span<const T> a, std::span<const U> b) {
    if (a.size() != b.size())
        fail(ErrorCode::DimMismatch, "cosine_similarity: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i], y = b[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) fail(ErrorCode::ZeroVector, "cosine_similarity of an all-zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    return cosine_similarity(std::span<const double>(a), std::span<const double>(b));
}

// Base-frame sweep: frame i survives iff its similarity to the last kept frame
// is strictly below tau, and then becomes the new base.
inline std::vector<std::size_t> prune_sequence(std::span<const FrameDescriptor> descriptors, const PruneConfig& cfg) {
    validate(cfg);
    if (descriptors.empty()) fail(ErrorCode::EmptySequence, "prune_sequence: no frames");
    std::vector<std::size_t> kept{0};
    std::size_t base = 0;
    for (std::size_t i = 1; i < descriptors.size(); ++i) {
        if (cosine_similarity(descriptors[base].vector, descriptors[i].vector) < cfg.tau) {
            kept.push_back(i);
            base = i;
        }
    }
    return kept;
}

struct KeptFrame {
    std::string sequence_id;
    std::string frame_id;
};

// Prunes every sequence of the manifest independently; output keeps manifest order.
inline std::vector<KeptFrame> prune_dataset(const DatasetManifest& manifest, const PruneConfig& cfg) {
    std::vector<KeptFrame> out;
    for (const auto& seq : manifest.sequences) {
        if (seq.frames.empty()) continue;
        std::vector<FrameDescriptor> descs;
        descs.reserve(seq.frames.size());
        for (const auto& p : seq.frames) descs.push_back(frame_descriptor(manifest.load(seq.sequence_id, p)));
        for (auto idx : prune_sequence(descs, cfg)) out.push_back({seq.sequence_id, descs[idx].frame_id});
    }
    return out;
}

inline std::string format_kept_list(std::span<const KeptFrame> kept) {
    std::string text;
    for (const auto& k : kept) text += k.sequence_id + " " + k.frame_id + "\n";
    return text;
}

inline std::vector<KeptFrame> parse_kept_list(const std::string& text) {
    std::vector<KeptFrame> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        const auto sp = line.find(' ');
        if (sp == std::string::npos || sp == 0 || sp + 1 >= line.size())
            fail(ErrorCode::MalformedFile, "kept list: bad line '" + line + "'");
        out.push_back({line.substr(0, sp), line.substr(sp + 1)});
    }
    return out;
}

}  // namespace millilabel
