#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "millilabel/datamodel.hpp"
#include "millilabel/error.hpp"

namespace millilabel {

enum class SyntheticKind { Gaussian, Moons };

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::Gaussian;
    std::uint32_t num_classes = 8;
    std::size_t points_per_frame = 10000;
    std::size_t sequences = 2;
    std::size_t frames_per_sequence = 10;
    std::size_t feature_dim = 64;
    // Pairwise distance between class means, in units of sigma.
    double separation = 10.0;
    // Within-class standard deviation, measured as the RMS distance of a point
    // to its class mean; each feature coordinate gets noise sigma / sqrt(D).
    double sigma = 1.0;
    // Per-frame phase advance (radians) of the sinusoidally varying class
    // proportions; gives the pruning sweep something to find.
    double drift = 0.3;
    // Every frame of a sequence is an exact copy of the first one.
    bool duplicate_frames = false;
    std::size_t validation_frames = 4;
    std::uint64_t seed = 0;
};

struct SyntheticDataset {
    std::filesystem::path manifest;
    std::filesystem::path validation_manifest;  // empty when no validation frames
};

namespace detail {

inline std::string frame_name(std::size_t seq, std::size_t idx, const char* prefix) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%02zu_%06zu", prefix, seq, idx);
    return buf;
}

class SyntheticSampler {
public:
    SyntheticSampler(const SyntheticSpec& spec, std::mt19937_64& rng) : spec_(spec) {
        if (spec.kind == SyntheticKind::Gaussian) {
            if (spec.feature_dim < spec.num_classes)
                fail(ErrorCode::ConfigError, "gaussian synthetic data needs feature_dim >= num_classes");
            // Scaled orthonormal directions put every pair of class means at
            // distance separation * sigma.
            std::normal_distribution<double> n(0.0, 1.0);
            const std::size_t d = spec.feature_dim;
            std::vector<double> basis(spec.num_classes * d);
            for (std::size_t c = 0; c < spec.num_classes; ++c) {
                double* v = basis.data() + c * d;
                for (std::size_t j = 0; j < d; ++j) v[j] = n(rng);
                for (std::size_t o = 0; o < c; ++o) {
                    const double* u = basis.data() + o * d;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) dot += v[j] * u[j];
                    for (std::size_t j = 0; j < d; ++j) v[j] -= dot * u[j];
                }
                double norm = 0.0;
                for (std::size_t j = 0; j < d; ++j) norm += v[j] * v[j];
                norm = std::sqrt(norm);
                for (std::size_t j = 0; j < d; ++j) v[j] /= norm;
            }
            const double scale = spec.separation * spec.sigma / std::numbers::sqrt2;
            means_.resize(basis.size());
            for (std::size_t t = 0; t < basis.size(); ++t) means_[t] = scale * basis[t];
        } else {
            if (spec.num_classes != 2) fail(ErrorCode::ConfigError, "moons data has exactly 2 classes");
            if (spec.feature_dim < 2) fail(ErrorCode::ConfigError, "moons data needs feature_dim >= 2");
        }
    }

    // Sequence-level random phases of the class proportions.
    struct SequenceState {
        std::vector<double> phase;
    };

    SequenceState start_sequence(std::mt19937_64& rng) const {
        SequenceState s;
        std::uniform_real_distribution<double> u(0.0, 2.0 * std::numbers::pi);
        s.phase.resize(spec_.num_classes);
        for (auto& p : s.phase) p = u(rng);
        return s;
    }

    Frame sample(const SequenceState& seq, std::size_t t, std::mt19937_64& rng) const {
        const std::size_t m = spec_.points_per_frame, d = spec_.feature_dim;
        Frame f;
        f.dim = d;
        f.points.resize(m * 3);
        f.features.resize(m * d);
        f.gt_labels = std::vector<ClassId>(m);
        std::normal_distribution<double> n(0.0, 1.0);
        std::uniform_real_distribution<double> u(0.0, 1.0);

        std::vector<double> weight(spec_.num_classes);
        for (std::size_t c = 0; c < weight.size(); ++c)
            weight[c] = 1.0 + 0.8 * std::sin(seq.phase[c] + spec_.drift * static_cast<double>(t));
        std::discrete_distribution<std::uint32_t> pick(weight.begin(), weight.end());
        const double noise = spec_.sigma / std::sqrt(static_cast<double>(d));

        for (std::size_t i = 0; i < m; ++i) {
            const ClassId c = pick(rng);
            (*f.gt_labels)[i] = c;
            // Coordinates carry no class information.
            f.points[i * 3 + 0] = static_cast<float>(100.0 * u(rng) - 50.0);
            f.points[i * 3 + 1] = static_cast<float>(100.0 * u(rng) - 50.0);
            f.points[i * 3 + 2] = static_cast<float>(4.0 * u(rng) - 2.0);
            float* x = f.features.data() + i * d;
            if (spec_.kind == SyntheticKind::Gaussian) {
                for (std::size_t j = 0; j < d; ++j)
                    x[j] = static_cast<float>(means_[c * d + j] + noise * n(rng));
            } else {
                const double theta = std::numbers::pi * u(rng);
                const double px = c == 0 ? std::cos(theta) : 1.0 - std::cos(theta);
                const double py = c == 0 ? std::sin(theta) : 0.5 - std::sin(theta);
                x[0] = static_cast<float>(px + noise * n(rng));
                x[1] = static_cast<float>(py + noise * n(rng));
                for (std::size_t j = 2; j < d; ++j) x[j] = static_cast<float>(noise * n(rng));
            }
        }
        return f;
    }

private:
    const SyntheticSpec& spec_;
    std::vector<double> means_;
};

}  // namespace detail

struct SyntheticFrames {
    std::vector<std::vector<Frame>> sequences;
    std::vector<Frame> validation;
};

// Draws the whole dataset in memory; every frame shares the class means.
inline SyntheticFrames synthesize(const SyntheticSpec& spec) {
    if (spec.num_classes == 0 || spec.points_per_frame == 0 || spec.feature_dim == 0 || spec.sequences == 0 ||
        spec.frames_per_sequence == 0)
        fail(ErrorCode::ConfigError, "synthetic spec: sizes must be positive");
    if (spec.separation < 0.0 || !(spec.sigma > 0.0)) fail(ErrorCode::ConfigError, "synthetic spec: bad scale");
    std::mt19937_64 rng(spec.seed);
    detail::SyntheticSampler sampler(spec, rng);
    SyntheticFrames out;
    for (std::size_t s = 0; s < spec.sequences; ++s) {
        std::vector<Frame> frames;
        const auto state = sampler.start_sequence(rng);
        for (std::size_t t = 0; t < spec.frames_per_sequence; ++t) {
            Frame f = spec.duplicate_frames && t > 0 ? frames.front() : sampler.sample(state, t, rng);
            f.frame_id = detail::frame_name(s, t, "f");
            f.sequence_id = "seq" + std::to_string(s);
            frames.push_back(std::move(f));
        }
        out.sequences.push_back(std::move(frames));
    }
    for (std::size_t t = 0; t < spec.validation_frames; ++t) {
        const auto state = sampler.start_sequence(rng);
        Frame f = sampler.sample(state, 0, rng);
        f.frame_id = detail::frame_name(0, t, "v");
        f.sequence_id = "val";
        out.validation.push_back(std::move(f));
    }
    return out;
}

// Writes frames plus manifest.json (training pool) and, when requested,
// validation_manifest.json into dir.
inline SyntheticDataset gen_synthetic(const SyntheticSpec& spec, const std::filesystem::path& dir) {
    const auto data = synthesize(spec);
    std::filesystem::create_directories(dir / "frames");

    DatasetManifest manifest;
    manifest.num_classes = spec.num_classes;
    for (std::uint32_t c = 0; c < spec.num_classes; ++c) manifest.class_names.push_back("class_" + std::to_string(c));
    manifest.feature_dim = spec.feature_dim;
    manifest.base_dir = dir;

    auto write = [&](const Frame& f) {
        const auto rel = std::filesystem::path("frames") / (f.frame_id + ".mlnf");
        save_frame(f, dir / rel);
        return rel;
    };
    for (const auto& frames : data.sequences) {
        Sequence seq;
        seq.sequence_id = frames.front().sequence_id;
        for (const auto& f : frames) seq.frames.push_back(write(f));
        manifest.sequences.push_back(std::move(seq));
    }
    SyntheticDataset out;
    out.manifest = dir / "manifest.json";
    save_manifest(manifest, out.manifest);

    if (!data.validation.empty()) {
        DatasetManifest val = manifest;
        val.sequences = {Sequence{"val", {}}};
        for (const auto& f : data.validation) val.sequences[0].frames.push_back(write(f));
        out.validation_manifest = dir / "validation_manifest.json";
        save_manifest(val, out.validation_manifest);
    }
    return out;
}

}  // namespace millilabel
