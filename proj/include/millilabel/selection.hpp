#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "millilabel/clustering.hpp"
#include "millilabel/datamodel.hpp"
#include "millilabel/error.hpp"
#include "millilabel/parallel.hpp"
#include "millilabel/pruning.hpp"

namespace millilabel {

// Feature-space cluster centers of one scene, C x D.
struct SceneSignature {
    std::string frame_id;
    std::size_t num_centers = 0;
    std::size_t dim = 0;
    std::vector<double> centers;

    std::span<const double> center(std::size_t c) const {
        return std::span<const double>(centers).subspan(c * dim, dim);
    }
};

struct DiversityScore {
    std::string frame_id;
    double score = 0.0;
};

inline SceneSignature scene_signature(const Frame& frame, std::size_t num_centers, std::uint64_t seed) {
    if (num_centers < 1) fail(ErrorCode::BadK, "scene_signature: C must be positive");
    if (frame.num_points() < num_centers)
        fail(ErrorCode::TooFewPoints, frame.frame_id + ": " + std::to_string(frame.num_points()) + " points < C=" +
                                          std::to_string(num_centers));
    auto res = kmeans(feature_view(frame), num_centers, seed);
    return {frame.frame_id, num_centers, frame.dim, std::move(res.clustering.centroids)};
}

namespace detail {

inline std::vector<double> unit_centers(const SceneSignature& sig) {
    std::vector<double> unit(sig.centers.size());
    for (std::size_t c = 0; c < sig.num_centers; ++c) {
        double norm = 0.0;
        for (std::size_t j = 0; j < sig.dim; ++j) norm += sig.centers[c * sig.dim + j] * sig.centers[c * sig.dim + j];
        if (norm == 0.0) fail(ErrorCode::ZeroVector, sig.frame_id + ": zero cluster center");
        norm = std::sqrt(norm);
        for (std::size_t j = 0; j < sig.dim; ++j) unit[c * sig.dim + j] = sig.centers[c * sig.dim + j] / norm;
    }
    return unit;
}

inline void check_signature(const SceneSignature& sig) {
    if (sig.centers.size() != sig.num_centers * sig.dim || sig.dim == 0)
        fail(ErrorCode::DimMismatch, sig.frame_id + ": signature shape mismatch");
}

}  // namespace detail

// Mean of 1 - cos over the C(C-1)/2 unordered center pairs.
inline double intra_scene_diversity(const SceneSignature& sig) {
    detail::check_signature(sig);
    if (sig.num_centers < 2) fail(ErrorCode::Degenerate, sig.frame_id + ": intra-scene diversity needs C >= 2");
    const auto unit = detail::unit_centers(sig);
    const std::size_t c_count = sig.num_centers, d = sig.dim;
    double total = 0.0;
    for (std::size_t a = 0; a < c_count; ++a) {
        for (std::size_t b = a + 1; b < c_count; ++b) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += unit[a * d + j] * unit[b * d + j];
            total += 1.0 - std::clamp(dot, -1.0, 1.0);
        }
    }
    return total / (0.5 * static_cast<double>(c_count) * static_cast<double>(c_count - 1));
}

// Mean of 1 - cos over all C_a * C_b cross pairs. Cosine is bilinear in the
// unit vectors, so the mean equals 1 - (sum_a u_a) . (sum_b v_b) / (C_a C_b).
inline double inter_scene_diversity(const SceneSignature& a, const SceneSignature& b) {
    detail::check_signature(a);
    detail::check_signature(b);
    if (a.dim != b.dim) fail(ErrorCode::DimMismatch, a.frame_id + " vs " + b.frame_id + ": feature dims differ");
    auto sum_units = [](const SceneSignature& s) {
        const auto unit = detail::unit_centers(s);
        std::vector<double> sum(s.dim, 0.0);
        for (std::size_t c = 0; c < s.num_centers; ++c)
            for (std::size_t j = 0; j < s.dim; ++j) sum[j] += unit[c * s.dim + j];
        return sum;
    };
    const auto sa = sum_units(a), sb = sum_units(b);
    double dot = 0.0;
    for (std::size_t j = 0; j < a.dim; ++j) dot += sa[j] * sb[j];
    return 1.0 - dot / (static_cast<double>(a.num_centers) * static_cast<double>(b.num_centers));
}

// score_i = (1 / (|F|-1)) * sum_{j != i} d_i * d_j * d_ij.
// d_i is computed once per frame; d_ij is formed on the fly from per-frame
// unit-vector sums, so memory stays O(|F| * D). Each score is reduced over j
// in index order, independent of the thread count.
inline std::vector<DiversityScore> diversity_scores(std::span<const SceneSignature> sigs) {
    const std::size_t n = sigs.size();
    if (n < 2) fail(ErrorCode::TooFewFrames, "diversity_scores needs at least 2 frames");
    const std::size_t d = sigs[0].dim;
    for (const auto& s : sigs) {
        detail::check_signature(s);
        if (s.dim != d) fail(ErrorCode::DimMismatch, s.frame_id + ": feature dim differs from " + sigs[0].frame_id);
    }

    std::vector<double> intra(n);
    std::vector<double> sums(n * d, 0.0);  // unit-center sum scaled by 1/C
    parallel_for(n, [&](std::size_t i) {
        intra[i] = intra_scene_diversity(sigs[i]);
        const auto unit = detail::unit_centers(sigs[i]);
        double* out = sums.data() + i * d;
        for (std::size_t c = 0; c < sigs[i].num_centers; ++c)
            for (std::size_t j = 0; j < d; ++j) out[j] += unit[c * d + j];
        const double inv = 1.0 / static_cast<double>(sigs[i].num_centers);
        for (std::size_t j = 0; j < d; ++j) out[j] *= inv;
    });

    std::vector<DiversityScore> scores(n);
    parallel_for(n, [&](std::size_t i) {
        const double* si = sums.data() + i * d;
        const double di = intra[i];
        double score = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const double* sj = sums.data() + j * d;
            double dot = 0.0;
#pragma omp simd reduction(+ : dot)
            for (std::size_t t = 0; t < d; ++t) dot += si[t] * sj[t];
            const double dij = 1.0 - dot;
            score += di * intra[j] * dij;
        }
        scores[i] = {sigs[i].frame_id, score / static_cast<double>(n - 1)};
    });
    return scores;
}

// Top-S by descending score; ties by ascending frame_id.
inline std::vector<DiversityScore> rank_frames(std::span<const DiversityScore> scores, std::size_t budget) {
    if (budget < 1) fail(ErrorCode::ConfigError, "frame budget must be positive");
    if (budget > scores.size())
        fail(ErrorCode::BudgetExceedsPool, "budget " + std::to_string(budget) + " exceeds pool of " +
                                               std::to_string(scores.size()));
    std::vector<DiversityScore> sorted(scores.begin(), scores.end());
    std::sort(sorted.begin(), sorted.end(), [](const DiversityScore& a, const DiversityScore& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.frame_id < b.frame_id;
    });
    sorted.resize(budget);
    return sorted;
}

inline std::vector<std::string> select_frames(std::span<const DiversityScore> scores, std::size_t budget) {
    std::vector<std::string> ids;
    for (auto& s : rank_frames(scores, budget)) ids.push_back(std::move(s.frame_id));
    return ids;
}

inline std::string format_selection(std::span<const DiversityScore> ranked) {
    std::string text;
    char buf[64];
    for (const auto& s : ranked) {
        std::snprintf(buf, sizeof buf, " %.17g\n", s.score);
        text += s.frame_id + buf;
    }
    return text;
}

inline std::vector<DiversityScore> parse_selection(const std::string& text) {
    std::vector<DiversityScore> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        const std::string line = text.substr(pos, eol - pos);
        pos = eol + 1;
        if (line.empty()) continue;
        const auto sp = line.rfind(' ');
        if (sp == std::string::npos || sp == 0) fail(ErrorCode::MalformedFile, "selection: bad line '" + line + "'");
        try {
            out.push_back({line.substr(0, sp), std::stod(line.substr(sp + 1))});
        } catch (const std::exception&) {
            fail(ErrorCode::MalformedFile, "selection: bad score in '" + line + "'");
        }
    }
    return out;
}

}  // namespace millilabel
