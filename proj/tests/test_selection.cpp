#include <algorithm>
#include <cmath>

#include "millilabel/parallel.hpp"
#include "millilabel/selection.hpp"
#include "test_util.hpp"

using namespace millilabel;

namespace {

SceneSignature random_signature(std::mt19937_64& rng, std::size_t c, std::size_t d, const std::string& id) {
    std::normal_distribution<double> n;
    SceneSignature s{id, c, d, std::vector<double>(c * d)};
    for (auto& v : s.centers) v = n(rng);
    return s;
}

SceneSignature sig(const std::string& id, std::size_t d, std::vector<double> centers) {
    return {id, centers.size() / d, d, std::move(centers)};
}

// Independent oracle: dissimilarity from raw (unnormalized) vectors, explicit pair loops.
double oracle_dissim(std::span<const double> a, std::span<const double> b) {
    long double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < a.size(); ++j) {
        dot += static_cast<long double>(a[j]) * b[j];
        na += static_cast<long double>(a[j]) * a[j];
        nb += static_cast<long double>(b[j]) * b[j];
    }
    return static_cast<double>(1.0L - dot / (std::sqrt(na) * std::sqrt(nb)));
}

double oracle_intra(const SceneSignature& s) {
    double total = 0;
    int pairs = 0;
    for (std::size_t a = 0; a < s.num_centers; ++a)
        for (std::size_t b = 0; b < s.num_centers; ++b)
            if (a < b) {
                total += oracle_dissim(s.center(a), s.center(b));
                ++pairs;
            }
    return total / pairs;
}

double oracle_inter(const SceneSignature& s, const SceneSignature& t) {
    double total = 0;
    for (std::size_t a = 0; a < s.num_centers; ++a)
        for (std::size_t b = 0; b < t.num_centers; ++b) total += oracle_dissim(s.center(a), t.center(b));
    return total / static_cast<double>(s.num_centers * t.num_centers);
}

// Triple loop over frames i, j and their center pairs, recomputing everything.
std::vector<double> oracle_scores(const std::vector<SceneSignature>& sigs) {
    std::vector<double> out;
    for (std::size_t i = 0; i < sigs.size(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < sigs.size(); ++j)
            if (j != i) s += oracle_intra(sigs[i]) * oracle_intra(sigs[j]) * oracle_inter(sigs[i], sigs[j]);
        out.push_back(s / static_cast<double>(sigs.size() - 1));
    }
    return out;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

}  // namespace

TEST(Signature, KEqualsMPointsAreCenters) {
    std::mt19937_64 rng(1);
    const Frame f = millilabel::testing::random_frame(rng, 6, 3, false);
    const auto s = scene_signature(f, 6, 2);
    std::vector<std::vector<double>> got, expect;
    for (std::size_t c = 0; c < 6; ++c) got.emplace_back(s.center(c).begin(), s.center(c).end());
    for (std::size_t i = 0; i < 6; ++i) expect.push_back({f.features[i * 3], f.features[i * 3 + 1], f.features[i * 3 + 2]});
    std::sort(got.begin(), got.end());
    std::sort(expect.begin(), expect.end());
    EXPECT_EQ(got, expect);
}

TEST(Signature, TwoBlobsRecoverMeans) {
    Frame f;
    f.frame_id = "blobs";
    f.dim = 2;
    // Symmetric blobs: sample means are exactly (10, 0) and (-10, 5).
    const std::vector<std::pair<double, double>> offsets = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}};
    for (int rep = 0; rep < 25; ++rep)
        for (auto [dx, dy] : offsets) {
            f.features.insert(f.features.end(), {static_cast<float>(10 + dx), static_cast<float>(dy)});
            f.features.insert(f.features.end(), {static_cast<float>(-10 + dx), static_cast<float>(5 + dy)});
        }
    f.points.assign(f.num_points() * 3, 0.0f);
    const auto s = scene_signature(f, 2, 3);
    std::vector<std::pair<double, double>> got = {{s.center(0)[0], s.center(0)[1]}, {s.center(1)[0], s.center(1)[1]}};
    std::sort(got.begin(), got.end());
    EXPECT_NEAR(got[0].first, -10, 1e-6);
    EXPECT_NEAR(got[0].second, 5, 1e-6);
    EXPECT_NEAR(got[1].first, 10, 1e-6);
    EXPECT_NEAR(got[1].second, 0, 1e-6);
}

TEST(Signature, TooFewPoints) {
    std::mt19937_64 rng(1);
    const Frame f = millilabel::testing::random_frame(rng, 3, 2, false);
    EXPECT_ML_ERROR(scene_signature(f, 4, 0), ErrorCode::TooFewPoints);
}

TEST(Intra, Examples) {
    EXPECT_NEAR(intra_scene_diversity(sig("a", 2, {1, 2, 1, 2, 1, 2})), 0.0, 1e-15);
    EXPECT_DOUBLE_EQ(intra_scene_diversity(sig("a", 2, {1, 0, 0, 1})), 1.0);
    std::mt19937_64 rng(3);
    for (int t = 0; t < 20; ++t) {
        const auto s = random_signature(rng, 5, 7, "r");
        EXPECT_NEAR(intra_scene_diversity(s), oracle_intra(s), 1e-12);
    }
    EXPECT_ML_ERROR(intra_scene_diversity(sig("a", 2, {1, 0})), ErrorCode::Degenerate);
}

TEST(Inter, Examples) {
    const auto a = sig("a", 2, {3, 4, 3, 4});
    EXPECT_NEAR(inter_scene_diversity(a, a), 0.0, 1e-15);
    const auto x = sig("x", 3, {1, 0, 0, 2, 0, 0});
    const auto y = sig("y", 3, {0, 1, 0, 0, 0, 5, 0, 3, 4});
    EXPECT_NEAR(inter_scene_diversity(x, y), 1.0, 1e-15);
    std::mt19937_64 rng(4);
    for (int t = 0; t < 20; ++t) {
        const auto s = random_signature(rng, 5, 9, "s");
        const auto u = random_signature(rng, 4, 9, "u");
        EXPECT_NEAR(inter_scene_diversity(s, u), oracle_inter(s, u), 1e-12);
        EXPECT_NEAR(inter_scene_diversity(s, u), inter_scene_diversity(u, s), 1e-12);
    }
    EXPECT_ML_ERROR(inter_scene_diversity(sig("a", 2, {1, 0}), sig("b", 3, {1, 0, 0})), ErrorCode::DimMismatch);
}

TEST(Scores, TwoFramesSymmetric) {
    std::mt19937_64 rng(5);
    const std::vector<SceneSignature> s = {random_signature(rng, 4, 6, "a"), random_signature(rng, 4, 6, "b")};
    const auto sc = diversity_scores(s);
    const double expect = intra_scene_diversity(s[0]) * intra_scene_diversity(s[1]) * inter_scene_diversity(s[0], s[1]);
    EXPECT_NEAR(sc[0].score, expect, 1e-14);
    EXPECT_DOUBLE_EQ(sc[0].score, sc[1].score);
}

TEST(Scores, ZeroIntraGivesZeroScore) {
    std::mt19937_64 rng(6);
    std::vector<SceneSignature> s = {random_signature(rng, 3, 4, "a"), sig("flat", 4, {1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3}),
                                     random_signature(rng, 3, 4, "c")};
    const auto sc = diversity_scores(s);
    EXPECT_DOUBLE_EQ(sc[1].score, 0.0);
}

TEST(Scores, MatchBruteForceOracle) {
    std::mt19937_64 rng(7);
    std::vector<SceneSignature> s;
    for (int i = 0; i < 20; ++i) s.push_back(random_signature(rng, 19, 64, "f" + std::to_string(i)));
    const auto got = diversity_scores(s);
    const auto expect = oracle_scores(s);
    for (std::size_t i = 0; i < s.size(); ++i) {
        EXPECT_EQ(got[i].frame_id, s[i].frame_id);
        EXPECT_LE(rel_err(got[i].score, expect[i]), 1e-9) << i;
        EXPECT_GE(got[i].score, 0.0);
    }
}

TEST(Scores, PermutationEquivariantAndScaleInvariant) {
    std::mt19937_64 rng(8);
    std::vector<SceneSignature> s;
    for (int i = 0; i < 12; ++i) s.push_back(random_signature(rng, 6, 10, "f" + std::to_string(i)));
    const auto base = diversity_scores(s);
    std::vector<std::size_t> perm(s.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<SceneSignature> p;
    for (auto i : perm) p.push_back(s[i]);
    const auto permuted = diversity_scores(p);
    for (std::size_t t = 0; t < perm.size(); ++t) EXPECT_NEAR(permuted[t].score, base[perm[t]].score, 1e-12);

    auto scaled = s;
    for (auto& x : scaled)
        for (auto& v : x.centers) v *= 37.5;
    const auto sc = diversity_scores(scaled);
    for (std::size_t t = 0; t < s.size(); ++t) EXPECT_NEAR(sc[t].score, base[t].score, 1e-12);
    EXPECT_EQ(select_frames(sc, 5), select_frames(base, 5));
}

TEST(Scores, ThreadCountIndependentBits) {
    std::mt19937_64 rng(9);
    std::vector<SceneSignature> s;
    for (int i = 0; i < 64; ++i) s.push_back(random_signature(rng, 8, 16, "f" + std::to_string(i)));
    set_num_threads(1);
    const auto a = diversity_scores(s);
    set_num_threads(3);
    const auto b = diversity_scores(s);
    set_num_threads(0);
    for (std::size_t i = 0; i < s.size(); ++i) EXPECT_EQ(a[i].score, b[i].score);
}

TEST(Scores, Errors) {
    std::mt19937_64 rng(10);
    std::vector<SceneSignature> one = {random_signature(rng, 3, 4, "a")};
    EXPECT_ML_ERROR(diversity_scores(one), ErrorCode::TooFewFrames);
    std::vector<SceneSignature> mixed = {random_signature(rng, 3, 4, "a"), random_signature(rng, 3, 5, "b")};
    EXPECT_ML_ERROR(diversity_scores(mixed), ErrorCode::DimMismatch);
}

TEST(Select, Examples) {
    const std::vector<DiversityScore> s = {{"a", 3}, {"b", 1}, {"c", 2}};
    EXPECT_EQ(select_frames(s, 2), (std::vector<std::string>{"a", "c"}));
    EXPECT_EQ(select_frames(s, 3), (std::vector<std::string>{"a", "c", "b"}));
    const std::vector<DiversityScore> ties = {{"z", 1}, {"m", 1}, {"a", 1}};
    EXPECT_EQ(select_frames(ties, 3), (std::vector<std::string>{"a", "m", "z"}));
    EXPECT_ML_ERROR(select_frames(s, 4), ErrorCode::BudgetExceedsPool);
}

TEST(Select, FileRoundTripKeepsScoresExactly) {
    const std::vector<DiversityScore> s = {{"f00_000001", 0.1234567890123456789}, {"f01_000002", 1e-300}};
    const auto back = parse_selection(format_selection(s));
    ASSERT_EQ(back.size(), 2u);
    EXPECT_EQ(back[0].frame_id, s[0].frame_id);
    EXPECT_EQ(back[0].score, s[0].score);
    EXPECT_EQ(back[1].score, s[1].score);
    EXPECT_ML_ERROR(parse_selection("onlyid\n"), ErrorCode::MalformedFile);
    EXPECT_ML_ERROR(parse_selection("id notanumber\n"), ErrorCode::MalformedFile);
}
