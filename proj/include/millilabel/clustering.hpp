#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "millilabel/binary_io.hpp"
#include "millilabel/datamodel.hpp"
#include "millilabel/error.hpp"
#include "millilabel/parallel.hpp"

namespace millilabel {

// Row-major M x D view over float features (or xyz coordinates, D = 3).
struct FeatureView {
    std::span<const float> data;
    std::size_t dim = 0;

    std::size_t rows() const { return dim == 0 ? 0 : data.size() / dim; }
    const float* row(std::size_t i) const { return data.data() + i * dim; }
};

inline FeatureView feature_view(const Frame& f) { return {f.features, f.dim}; }
inline FeatureView coordinate_view(const Frame& f) { return {f.points, 3}; }

struct Clustering {
    std::size_t k = 0;
    std::size_t dim = 0;
    std::vector<std::uint32_t> assignments;  // M cluster ids in [0, k)
    std::vector<double> centroids;           // k x dim
    std::vector<std::uint32_t> center_points;  // k point indices

    std::size_t num_points() const { return assignments.size(); }
    std::span<const double> centroid(std::size_t c) const {
        return std::span<const double>(centroids).subspan(c * dim, dim);
    }
};

struct KMeansOptions {
    int max_iters = 100;
    // Stop once the summed squared centroid movement drops below this.
    double tol = 1e-6;
};

struct KMeansResult {
    Clustering clustering;
    // Within-cluster sum of squares after each assignment step.
    std::vector<double> objective_trace;
    int iterations = 0;
};

namespace detail {

inline double squared_distance(const float* x, const double* c, std::size_t d) {
    double s = 0.0;
#pragma omp simd reduction(+ : s)
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(x[j]) - c[j];
        s += diff * diff;
    }
    return s;
}

inline void seed_plus_plus(const FeatureView& x, std::size_t k, std::mt19937_64& rng, std::vector<double>& centroids) {
    const std::size_t m = x.rows(), d = x.dim;
    centroids.assign(k * d, 0.0);
    std::vector<double> min_d2(m, std::numeric_limits<double>::infinity());
    std::vector<char> chosen(m, 0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    auto take = [&](std::size_t c, std::size_t idx) {
        chosen[idx] = 1;
        const float* row = x.row(idx);
        double* cen = centroids.data() + c * d;
        for (std::size_t j = 0; j < d; ++j) cen[j] = row[j];
        parallel_for(m, [&](std::size_t i) {
            min_d2[i] = std::min(min_d2[i], squared_distance(x.row(i), cen, d));
        });
    };

    take(0, static_cast<std::size_t>(rng() % m));
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < m; ++i) total += min_d2[i];
        std::size_t pick = m;
        if (total > 0.0) {
            const double target = unit(rng) * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                if (min_d2[i] <= 0.0) continue;
                acc += min_d2[i];
                pick = i;
                if (acc > target) break;
            }
        }
        if (pick == m) {
            // Every remaining point duplicates a chosen center.
            for (std::size_t i = 0; i < m; ++i)
                if (!chosen[i]) { pick = i; break; }
        }
        take(c, pick);
    }
}

inline double squared_distance_dd(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
#pragma omp simd reduction(+ : s)
    for (std::size_t j = 0; j < d; ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

// Largest float not above v, so a stored lower bound never overstates.
inline float lower_float(double v) {
    float f = static_cast<float>(v);
    if (static_cast<double>(f) > v) f = std::nextafter(f, -std::numeric_limits<float>::infinity());
    return f;
}

// Exact Lloyd assignment accelerated with triangle-inequality bounds.
// Every point keeps an upper bound on the distance to its own centroid. When
// M*k is small enough the lower bounds are per (point, centroid) (Elkan);
// otherwise a single lower bound on the second-nearest centroid is kept
// (Hamerly). Either way the result is the nearest centroid; a full rescan
// breaks ties toward the lowest cluster id.
class BoundedAssigner {
public:
    static constexpr std::size_t kMaxElkanEntries = std::size_t{1} << 24;

    BoundedAssigner(const FeatureView& x, std::size_t k)
        : x_(x), k_(k), elkan_(x.rows() * k <= kMaxElkanEntries), upper_(x.rows(), 0.0),
          lower_(elkan_ ? x.rows() * k : x.rows(), 0.0f), center_gap_(elkan_ ? k * k : 0, 0.0), half_nearest_(k, 0.0) {}

    // Returns the WCSS of the new assignment; dist receives squared distances.
    double assign(const std::vector<double>& centroids, std::vector<std::uint32_t>& assign,
                  std::vector<double>& dist) {
        const std::size_t m = x_.rows(), d = x_.dim, k = k_;
        const bool full = first_;
        if (!full && elkan_) {
            for (std::size_t c = 0; c < k; ++c) {
                center_gap_[c * k + c] = 0.0;
                for (std::size_t o = c + 1; o < k; ++o) {
                    const double g = std::sqrt(squared_distance_dd(centroids.data() + c * d, centroids.data() + o * d, d));
                    center_gap_[c * k + o] = center_gap_[o * k + c] = g;
                }
            }
            for (std::size_t c = 0; c < k; ++c) {
                double best = std::numeric_limits<double>::infinity();
                for (std::size_t o = 0; o < k; ++o)
                    if (o != c) best = std::min(best, center_gap_[c * k + o]);
                half_nearest_[c] = 0.5 * best;
            }
        } else if (!full) {
            parallel_for(k, [&](std::size_t c) {
                double best = std::numeric_limits<double>::infinity();
                for (std::size_t o = 0; o < k; ++o)
                    if (o != c)
                        best = std::min(best, squared_distance_dd(centroids.data() + c * d, centroids.data() + o * d, d));
                half_nearest_[c] = 0.5 * std::sqrt(best);
            });
        }
        parallel_for(m, [&](std::size_t i) {
            if (full)
                scan_all(i, centroids, assign, dist);
            else if (elkan_)
                elkan_step(i, centroids, assign, dist);
            else
                hamerly_step(i, centroids, assign, dist);
        });
        first_ = false;
        const std::size_t chunks = num_chunks(m);
        std::vector<double> partial(chunks, 0.0);
        parallel_for(chunks, [&](std::size_t ch) {
            const std::size_t end = std::min(m, (ch + 1) * kReduceChunk);
            double s = 0.0;
            for (std::size_t i = ch * kReduceChunk; i < end; ++i) s += dist[i];
            partial[ch] = s;
        });
        return std::accumulate(partial.begin(), partial.end(), 0.0);
    }

    // A point moved by empty-cluster repair is rescanned next round.
    void invalidate(std::size_t i) {
        upper_[i] = std::numeric_limits<double>::infinity();
        if (elkan_)
            std::fill_n(lower_.begin() + static_cast<std::ptrdiff_t>(i * k_), k_, 0.0f);
        else
            lower_[i] = 0.0f;
    }

    // Loosens the bounds after the centroids moved.
    void centroids_moved(const std::vector<double>& before, const std::vector<double>& after,
                         const std::vector<std::uint32_t>& assign) {
        const std::size_t d = x_.dim, k = k_;
        std::vector<double> shift(k, 0.0);
        double max_shift = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            shift[c] = std::sqrt(squared_distance_dd(before.data() + c * d, after.data() + c * d, d));
            max_shift = std::max(max_shift, shift[c]);
        }
        parallel_for(upper_.size(), [&](std::size_t i) {
            upper_[i] += shift[assign[i]];
            if (elkan_) {
                float* lo = lower_.data() + i * k;
                for (std::size_t c = 0; c < k; ++c) lo[c] = std::max(0.0f, lower_float(lo[c] - shift[c]));
            } else {
                lower_[i] = std::max(0.0f, lower_float(lower_[i] - max_shift));
            }
        });
    }

private:
    void scan_all(std::size_t i, const std::vector<double>& centroids, std::vector<std::uint32_t>& assign,
                  std::vector<double>& dist) {
        const float* row = x_.row(i);
        const std::size_t d = x_.dim;
        double best = std::numeric_limits<double>::infinity();
        double second = std::numeric_limits<double>::infinity();
        std::uint32_t arg = 0;
        for (std::size_t c = 0; c < k_; ++c) {
            const double s = squared_distance(row, centroids.data() + c * d, d);
            if (elkan_) lower_[i * k_ + c] = lower_float(std::sqrt(s));
            if (s < best) {
                second = best;
                best = s;
                arg = static_cast<std::uint32_t>(c);
            } else if (s < second) {
                second = s;
            }
        }
        assign[i] = arg;
        dist[i] = best;
        upper_[i] = std::sqrt(best);
        if (!elkan_) lower_[i] = lower_float(std::sqrt(second));
    }

    void hamerly_step(std::size_t i, const std::vector<double>& centroids, std::vector<std::uint32_t>& assign,
                      std::vector<double>& dist) {
        const float* row = x_.row(i);
        const double bound = std::max(half_nearest_[assign[i]], static_cast<double>(lower_[i]));
        if (upper_[i] > bound) {
            upper_[i] = std::sqrt(squared_distance(row, centroids.data() + assign[i] * x_.dim, x_.dim));
            if (upper_[i] > bound) {
                scan_all(i, centroids, assign, dist);
                return;
            }
        }
        dist[i] = squared_distance(row, centroids.data() + assign[i] * x_.dim, x_.dim);
        upper_[i] = std::sqrt(dist[i]);
    }

    void elkan_step(std::size_t i, const std::vector<double>& centroids, std::vector<std::uint32_t>& assign,
                    std::vector<double>& dist) {
        const float* row = x_.row(i);
        const std::size_t d = x_.dim, k = k_;
        float* lo = lower_.data() + i * k;
        std::uint32_t a = assign[i];
        double u = upper_[i];
        if (u > half_nearest_[a]) {
            bool stale = true;
            for (std::size_t c = 0; c < k; ++c) {
                if (c == a) continue;
                const double gap = 0.5 * center_gap_[a * k + c];
                if (u <= lo[c] || u <= gap) continue;
                if (stale) {
                    u = std::sqrt(squared_distance(row, centroids.data() + a * d, d));
                    lo[a] = lower_float(u);
                    stale = false;
                    if (u <= lo[c] || u <= 0.5 * center_gap_[a * k + c]) continue;
                }
                const double dc = std::sqrt(squared_distance(row, centroids.data() + c * d, d));
                lo[c] = lower_float(dc);
                if (dc < u || (dc == u && c < a)) {
                    a = static_cast<std::uint32_t>(c);
                    u = dc;
                }
            }
        }
        assign[i] = a;
        dist[i] = squared_distance(row, centroids.data() + a * d, d);
        upper_[i] = std::sqrt(dist[i]);
    }

    const FeatureView& x_;
    std::size_t k_;
    bool elkan_;
    std::vector<double> upper_;
    std::vector<float> lower_;
    std::vector<double> center_gap_;
    std::vector<double> half_nearest_;
    bool first_ = true;
};

// Moves the point farthest from its centroid into each empty cluster, taking
// only from clusters that keep at least one member.
inline std::vector<std::size_t> repair_empty(std::vector<std::uint32_t>& assign, std::vector<double>& dist,
                                             std::size_t k) {
    std::vector<std::size_t> counts(k, 0);
    for (auto a : assign) ++counts[a];
    std::vector<std::size_t> empty;
    for (std::size_t c = 0; c < k; ++c)
        if (counts[c] == 0) empty.push_back(c);
    std::vector<std::size_t> moved;
    if (empty.empty()) return moved;
    std::vector<std::size_t> order(assign.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
    std::size_t cursor = 0;
    for (auto c : empty) {
        while (counts[assign[order[cursor]]] <= 1) ++cursor;
        const std::size_t i = order[cursor++];
        --counts[assign[i]];
        assign[i] = static_cast<std::uint32_t>(c);
        ++counts[c];
        dist[i] = 0.0;
        moved.push_back(i);
    }
    return moved;
}

// Centroid = mean of members. Sums are formed per fixed-size point chunk and
// combined in chunk order so the result does not depend on the thread count.
inline void update_centroids(const FeatureView& x, const std::vector<std::uint32_t>& assign, std::size_t k,
                             std::vector<double>& centroids) {
    const std::size_t m = x.rows(), d = x.dim;
    const std::size_t chunks = num_chunks(m);
    std::vector<std::vector<double>> sums(chunks);
    std::vector<std::vector<std::size_t>> counts(chunks);
    parallel_for(chunks, [&](std::size_t ch) {
        auto& s = sums[ch];
        auto& n = counts[ch];
        s.assign(k * d, 0.0);
        n.assign(k, 0);
        const std::size_t end = std::min(m, (ch + 1) * kReduceChunk);
        for (std::size_t i = ch * kReduceChunk; i < end; ++i) {
            const float* row = x.row(i);
            double* acc = s.data() + assign[i] * d;
            for (std::size_t j = 0; j < d; ++j) acc[j] += row[j];
            ++n[assign[i]];
        }
    });
    std::vector<double> total(k * d, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t ch = 0; ch < chunks; ++ch) {
        for (std::size_t t = 0; t < k * d; ++t) total[t] += sums[ch][t];
        for (std::size_t c = 0; c < k; ++c) count[c] += counts[ch][c];
    }
    for (std::size_t c = 0; c < k; ++c) {
        if (count[c] == 0) continue;
        for (std::size_t j = 0; j < d; ++j) centroids[c * d + j] = total[c * d + j] / static_cast<double>(count[c]);
    }
}

}  // namespace detail

// k-means++ seeding followed by Lloyd iterations with empty-cluster repair.
// Euclidean distance in the given space.
inline KMeansResult kmeans(const FeatureView& x, std::size_t k, std::uint64_t seed, const KMeansOptions& opt = {}) {
    const std::size_t m = x.rows(), d = x.dim;
    if (k < 1 || k > m)
        fail(ErrorCode::BadK, "k=" + std::to_string(k) + " outside [1, " + std::to_string(m) + "]");
    for (float v : x.data)
        if (!std::isfinite(v)) fail(ErrorCode::MalformedFile, "kmeans: non-finite feature value");

    std::mt19937_64 rng(seed);
    KMeansResult res;
    auto& cl = res.clustering;
    cl.k = k;
    cl.dim = d;
    detail::seed_plus_plus(x, k, rng, cl.centroids);

    cl.assignments.assign(m, 0);
    std::vector<double> dist(m, 0.0);
    std::vector<double> previous;
    detail::BoundedAssigner assigner(x, k);
    for (int it = 0; it < opt.max_iters; ++it) {
        res.objective_trace.push_back(assigner.assign(cl.centroids, cl.assignments, dist));
        for (auto i : detail::repair_empty(cl.assignments, dist, k)) assigner.invalidate(i);
        previous = cl.centroids;
        detail::update_centroids(x, cl.assignments, k, cl.centroids);
        assigner.centroids_moved(previous, cl.centroids, cl.assignments);
        res.iterations = it + 1;
        double movement = 0.0;
        for (std::size_t t = 0; t < previous.size(); ++t) {
            const double diff = cl.centroids[t] - previous[t];
            movement += diff * diff;
        }
        if (movement < opt.tol) break;
    }
    return res;
}

inline std::vector<std::size_t> cluster_sizes(const Clustering& cl) {
    std::vector<std::size_t> n(cl.k, 0);
    for (auto a : cl.assignments) ++n[a];
    return n;
}

// Member closest to each centroid (Euclidean); ties -> lowest point index.
inline std::vector<std::uint32_t> cluster_centers(const Clustering& cl, const FeatureView& x) {
    if (x.rows() != cl.num_points() || x.dim != cl.dim)
        fail(ErrorCode::LengthMismatch, "cluster_centers: features do not match clustering");
    std::vector<double> best(cl.k, std::numeric_limits<double>::infinity());
    std::vector<std::uint32_t> arg(cl.k, std::numeric_limits<std::uint32_t>::max());
    for (std::size_t i = 0; i < cl.num_points(); ++i) {
        const auto c = cl.assignments[i];
        const double s = detail::squared_distance(x.row(i), cl.centroids.data() + c * cl.dim, cl.dim);
        if (s < best[c]) {
            best[c] = s;
            arg[c] = static_cast<std::uint32_t>(i);
        }
    }
    for (std::size_t c = 0; c < cl.k; ++c)
        if (arg[c] == std::numeric_limits<std::uint32_t>::max())
            fail(ErrorCode::EmptyCluster, "cluster " + std::to_string(c) + " has no members");
    return arg;
}

// Fills centroids from the assignments (used after loading a clustering file).
inline void recompute_centroids(Clustering& cl, const FeatureView& x) {
    if (x.rows() != cl.num_points()) fail(ErrorCode::LengthMismatch, "recompute_centroids: M mismatch");
    cl.dim = x.dim;
    cl.centroids.assign(cl.k * cl.dim, 0.0);
    detail::update_centroids(x, cl.assignments, cl.k, cl.centroids);
}

// --- budget --------------------------------------------------------------

struct ClusterBudget {
    double alpha = 0.01;
    std::optional<std::uint64_t> clicks;  // N
    std::uint32_t min_factor = 10;
};

// alpha = N / M over all selected frames.
inline double alpha_from_clicks(std::uint64_t clicks, std::uint64_t total_points) {
    if (total_points == 0) fail(ErrorCode::ConfigError, "alpha_from_clicks: no points");
    return static_cast<double>(clicks) / static_cast<double>(total_points);
}

// max(ceil(alpha * M), min_factor * num_classes), clamped to M. Products that
// land within 1e-9 of an integer are treated as that integer so decimal
// fractions like 0.07 * 100 do not round up.
inline std::size_t budget_to_k(const ClusterBudget& budget, std::size_t m_frame, std::uint32_t num_classes) {
    if (m_frame < 1) fail(ErrorCode::TooFewPoints, "budget_to_k: empty frame");
    if (!(budget.alpha > 0.0) || budget.alpha > 1.0)
        fail(ErrorCode::ConfigError, "alpha must be in (0, 1]");
    const double x = budget.alpha * static_cast<double>(m_frame);
    const double nearest = std::round(x);
    const double by_alpha = std::abs(x - nearest) <= 1e-9 * std::max(1.0, x) ? nearest : std::ceil(x);
    const std::size_t floor_k = static_cast<std::size_t>(budget.min_factor) * num_classes;
    const std::size_t k = std::max(static_cast<std::size_t>(by_alpha), floor_k);
    return std::min(k, m_frame);
}

// --- propagation ---------------------------------------------------------

inline PseudoLabels propagate_labels(const Clustering& cl, std::span<const ClassId> center_labels,
                                     std::string frame_id = {}, std::optional<std::uint32_t> num_classes = {}) {
    if (center_labels.size() != cl.k)
        fail(ErrorCode::LengthMismatch, "propagate_labels: " + std::to_string(center_labels.size()) +
                                            " labels for " + std::to_string(cl.k) + " clusters");
    for (auto c : center_labels)
        if (c == kUnlabeled || (num_classes && c >= *num_classes))
            fail(ErrorCode::InvalidClass, "propagate_labels: invalid class id " + std::to_string(c));
    PseudoLabels pl;
    pl.frame_id = std::move(frame_id);
    const std::size_t m = cl.num_points();
    pl.labels.resize(m);
    pl.source.assign(m, LabelSource::Propagated);
    for (std::size_t i = 0; i < m; ++i) pl.labels[i] = center_labels[cl.assignments[i]];
    for (auto p : cl.center_points) pl.source[p] = LabelSource::Clicked;
    return pl;
}

// --- clustering file -----------------------------------------------------

inline std::vector<std::uint8_t> encode_clustering(const Clustering& cl) {
    std::vector<std::uint8_t> out;
    io::put_magic(out, "MLNC");
    io::put<std::uint32_t>(out, kFormatVersion);
    io::put<std::uint64_t>(out, cl.num_points());
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(cl.k));
    io::put_array<std::uint32_t>(out, cl.assignments);
    io::put_array<std::uint32_t>(out, cl.center_points);
    return out;
}

inline Clustering decode_clustering(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>") {
    io::Reader r(bytes, source);
    r.expect_magic("MLNC");
    if (auto v = r.get<std::uint32_t>(); v != kFormatVersion)
        fail(ErrorCode::MalformedFile, source + ": unsupported version " + std::to_string(v));
    const auto m = r.get<std::uint64_t>();
    const auto k = r.get<std::uint32_t>();
    if (k == 0 || k > m) fail(ErrorCode::MalformedFile, source + ": k outside [1, M]");
    Clustering cl;
    cl.k = k;
    cl.assignments = r.get_array<std::uint32_t>(m);
    cl.center_points = r.get_array<std::uint32_t>(k);
    r.expect_end();
    for (auto a : cl.assignments)
        if (a >= k) fail(ErrorCode::MalformedFile, source + ": assignment out of range");
    for (std::size_t c = 0; c < k; ++c) {
        const auto p = cl.center_points[c];
        if (p >= m || cl.assignments[p] != c)
            fail(ErrorCode::MalformedFile, source + ": center of cluster " + std::to_string(c) + " is not a member");
    }
    return cl;
}

inline void save_clustering(const Clustering& cl, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_clustering(cl));
}

inline Clustering load_clustering(const std::filesystem::path& path) {
    auto bytes = io::read_file(path);
    return decode_clustering(bytes, path.string());
}

// Full per-frame clustering step: k from the budget, k-means, then centers.
inline Clustering cluster_frame(const FeatureView& x, const ClusterBudget& budget, std::uint32_t num_classes,
                                std::uint64_t seed, const KMeansOptions& opt = {}) {
    const std::size_t k = budget_to_k(budget, x.rows(), num_classes);
    auto res = kmeans(x, k, seed, opt);
    res.clustering.center_points = cluster_centers(res.clustering, x);
    return std::move(res.clustering);
}

}  // namespace millilabel
