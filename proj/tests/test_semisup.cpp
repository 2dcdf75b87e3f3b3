#include <algorithm>
#include <cmath>
#include <set>

#include "millilabel/semisup.hpp"
#include "millilabel/synthetic.hpp"
#include "test_util.hpp"

using namespace millilabel;
using millilabel::testing::TempDir;

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (auto& v : m.data) v = n(rng);
    return m;
}

double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
}

// Central differences of f over every entry of x.
template <class F>
std::vector<double> numeric_grad(Matrix x, F f, double h = 1e-6) {
    std::vector<double> g(x.data.size());
    for (std::size_t t = 0; t < x.data.size(); ++t) {
        const double keep = x.data[t];
        x.data[t] = keep + h;
        const double up = f(x);
        x.data[t] = keep - h;
        const double down = f(x);
        x.data[t] = keep;
        g[t] = (up - down) / (2.0 * h);
    }
    return g;
}

// Jaccard loss of a class as a set function of the mispredicted points:
// |M| / |G u M|.
double jaccard_loss_of_set(const std::vector<bool>& in_set, const std::vector<ClassId>& y, ClassId c) {
    double m = 0.0, uni = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        m += in_set[i];
        uni += (y[i] == c) || in_set[i];
    }
    return uni == 0.0 ? 0.0 : m / uni;
}

// Lovasz extension as a Choquet integral: sum over distinct error levels of
// (level gap) * loss({i : m_i >= level}).
double lovasz_oracle(const Matrix& probs, const std::vector<ClassId>& y) {
    double total = 0.0;
    int present = 0;
    for (ClassId c = 0; c < probs.cols; ++c) {
        if (std::find(y.begin(), y.end(), c) == y.end()) continue;
        ++present;
        std::vector<double> m(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) m[i] = std::abs((y[i] == c ? 1.0 : 0.0) - probs(i, c));
        std::set<double, std::greater<>> levels(m.begin(), m.end());
        levels.insert(0.0);
        std::vector<double> lv(levels.begin(), levels.end());
        double integral = 0.0;
        for (std::size_t k = 0; k + 1 < lv.size(); ++k) {
            std::vector<bool> s(y.size());
            for (std::size_t i = 0; i < y.size(); ++i) s[i] = m[i] >= lv[k];
            integral += (lv[k] - lv[k + 1]) * jaccard_loss_of_set(s, y, c);
        }
        total += integral;
    }
    return total / present;
}

}  // namespace

TEST(Softmax, RowsSumToOneAndTemperature) {
    std::mt19937_64 rng(1);
    for (int t = 0; t < 200; ++t) {
        const Matrix logits = random_matrix(rng, 3, 7, 30.0);
        for (double T : {1.0, 2.0, 4.0, 10.0}) {
            const Matrix p = softmax_rows(logits, T);
            for (std::size_t r = 0; r < p.rows; ++r) {
                double s = 0.0;
                for (auto v : p.row(r)) {
                    EXPECT_GE(v, 0.0);
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-9);
            }
        }
    }
    const std::vector<double> big = {1000.0, 1000.0};
    EXPECT_EQ(softmax_t(big), (std::vector<double>{0.5, 0.5}));
    const std::vector<double> l = {1.0, 2.0};
    const auto p4 = softmax_t(l, 4.0);
    EXPECT_NEAR(p4[1] / p4[0], std::exp(0.25), 1e-12);
}

TEST(Lovasz, EqualsOneMinusJaccardOnHardPredictions) {
    // All 2^6 ground-truth labelings x all 2^6 hard predictions of 6 points.
    for (int gmask = 0; gmask < 64; ++gmask) {
        for (int pmask = 0; pmask < 64; ++pmask) {
            std::vector<ClassId> y(6);
            Matrix probs(6, 2);
            for (int i = 0; i < 6; ++i) {
                y[i] = (gmask >> i) & 1;
                const int p = (pmask >> i) & 1;
                probs(i, p) = 1.0;
            }
            double expect = 0.0;
            int present = 0;
            for (ClassId c = 0; c < 2; ++c) {
                int inter = 0, uni = 0, gt_count = 0;
                for (int i = 0; i < 6; ++i) {
                    const bool g = y[i] == c, p = probs(i, c) == 1.0;
                    gt_count += g;
                    inter += g && p;
                    uni += g || p;
                }
                if (gt_count == 0) continue;
                ++present;
                expect += 1.0 - static_cast<double>(inter) / uni;
            }
            expect /= present;
            EXPECT_NEAR(lovasz_softmax(probs, y).loss, expect, 1e-12) << gmask << " " << pmask;
        }
    }
}

TEST(Lovasz, MatchesChoquetIntegralOracle) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<ClassId> cls(0, 3);
    for (int t = 0; t < 200; ++t) {
        const Matrix probs = softmax_rows(random_matrix(rng, 9, 4, 2.0));
        std::vector<ClassId> y(9);
        for (auto& v : y) v = cls(rng);
        EXPECT_NEAR(lovasz_softmax(probs, y).loss, lovasz_oracle(probs, y), 1e-12);
    }
}

TEST(Lovasz, IgnoresUnlabeledRowsAndErrors) {
    Matrix probs(3, 2);
    probs(0, 0) = 1.0;
    probs(1, 1) = 1.0;
    probs(2, 0) = 0.3;
    probs(2, 1) = 0.7;
    const std::vector<ClassId> y = {0, 1, kUnlabeled};
    const auto r = lovasz_softmax(probs, y);
    EXPECT_NEAR(r.loss, 0.0, 1e-15);
    EXPECT_EQ(r.grad(2, 0), 0.0);
    EXPECT_EQ(r.grad(2, 1), 0.0);
    const std::vector<ClassId> none = {kUnlabeled, kUnlabeled, kUnlabeled};
    EXPECT_ML_ERROR(lovasz_softmax(probs, none), ErrorCode::Degenerate);
    EXPECT_ML_ERROR(lovasz_softmax(probs, std::vector<ClassId>{0}), ErrorCode::LengthMismatch);
}

TEST(Gradients, CrossEntropyMatchesFiniteDifferences) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<ClassId> cls(0, 4);
    const LossWeights w{1.0, 0.0, 0.0, 4.0};
    for (int t = 0; t < 100; ++t) {
        const Matrix logits = random_matrix(rng, 6, 5);
        std::vector<ClassId> y(6);
        for (auto& v : y) v = cls(rng);
        y[t % 6] = kUnlabeled;
        const auto analytic = loss_with_grad(logits, nullptr, y, w).grad.data;
        const auto numeric = numeric_grad(logits, [&](const Matrix& x) { return loss_with_grad(x, nullptr, y, w).terms.total; });
        EXPECT_LT(rel_error(analytic, numeric), 1e-4) << t;
    }
}

TEST(Gradients, LovaszMatchesFiniteDifferences) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<ClassId> cls(0, 3);
    for (int t = 0; t < 100; ++t) {
        const Matrix probs = softmax_rows(random_matrix(rng, 8, 4, 2.0));
        std::vector<ClassId> y(8);
        for (auto& v : y) v = cls(rng);
        const auto analytic = lovasz_softmax(probs, y).grad.data;
        // Small steps keep the error ordering fixed (random errors have no ties).
        const auto numeric = numeric_grad(probs, [&](const Matrix& p) { return lovasz_softmax(p, y).loss; }, 1e-7);
        EXPECT_LT(rel_error(analytic, numeric), 1e-4) << t;
    }
}

TEST(Gradients, LovaszThroughSoftmaxMatchesFiniteDifferences) {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<ClassId> cls(0, 2);
    const LossWeights w{0.0, 1.0, 0.0, 4.0};
    for (int t = 0; t < 100; ++t) {
        const Matrix logits = random_matrix(rng, 7, 3, 1.5);
        std::vector<ClassId> y(7);
        for (auto& v : y) v = cls(rng);
        const auto analytic = loss_with_grad(logits, nullptr, y, w).grad.data;
        const auto numeric =
            numeric_grad(logits, [&](const Matrix& x) { return loss_with_grad(x, nullptr, y, w).terms.total; }, 1e-7);
        EXPECT_LT(rel_error(analytic, numeric), 1e-4) << t;
    }
}

TEST(Gradients, KlMatchesFiniteDifferences) {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 100; ++t) {
        const Matrix s = random_matrix(rng, 5, 6, 3.0), te = random_matrix(rng, 5, 6, 3.0);
        const double T = 1.0 + (t % 5);
        const auto analytic = kl_distill(s, te, T).grad.data;
        const auto numeric = numeric_grad(s, [&](const Matrix& x) { return kl_distill(x, te, T).loss; });
        EXPECT_LT(rel_error(analytic, numeric), 1e-4) << t;
    }
}

TEST(Gradients, CombinedStage2LossMatchesFiniteDifferences) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<ClassId> cls(0, 3);
    SemiSupConfig cfg;
    const auto w = stage2_weights(cfg);
    for (int t = 0; t < 50; ++t) {
        const Matrix s = random_matrix(rng, 6, 4), te = random_matrix(rng, 6, 4);
        std::vector<ClassId> y(6);
        for (auto& v : y) v = cls(rng);
        y[0] = y[3] = kUnlabeled;
        const auto analytic = loss_with_grad(s, &te, y, w).grad.data;
        const auto numeric =
            numeric_grad(s, [&](const Matrix& x) { return combined_loss(x, te, y, cfg); }, 1e-7);
        EXPECT_LT(rel_error(analytic, numeric), 1e-4) << t;
    }
}

TEST(Kl, NonNegativeAndZeroOnEqualLogits) {
    std::mt19937_64 rng(8);
    for (int t = 0; t < 500; ++t) {
        const Matrix s = random_matrix(rng, 4, 5, 10.0), te = random_matrix(rng, 4, 5, 10.0);
        EXPECT_GE(kl_distill(s, te, 4.0).loss, 0.0);
    }
    const Matrix s = random_matrix(rng, 4, 5);
    EXPECT_NEAR(kl_distill(s, s, 4.0).loss, 0.0, 1e-15);
    EXPECT_ML_ERROR(kl_distill(s, Matrix(3, 5), 4.0), ErrorCode::LengthMismatch);
}

TEST(Losses, CrossEntropyAndSupervisedLoss) {
    const std::vector<double> p = {0.25, 0.75};
    EXPECT_NEAR(cross_entropy(p, 1), -std::log(0.75), 1e-15);
    const std::vector<double> zero = {0.0, 1.0};
    EXPECT_TRUE(std::isfinite(cross_entropy(zero, 0)));
    Matrix probs(2, 2);
    probs(0, 0) = 1.0;
    probs(1, 1) = 1.0;
    EXPECT_NEAR(supervised_loss(probs, std::vector<ClassId>{0, 1}, 1.0, 1.0), 0.0, 1e-12);
    EXPECT_ML_ERROR(supervised_loss(probs, std::vector<ClassId>{kUnlabeled, kUnlabeled}, 1.0, 1.0),
                    ErrorCode::AllUnlabeled);
}

TEST(Ema, Contract) {
    std::vector<double> teacher = {1.0, 2.0, 3.0};
    const std::vector<double> student = {-1.0, 0.5, 9.0};
    auto t0 = teacher;
    ema_update(t0, student, 0.0);
    EXPECT_EQ(t0, student);
    auto t1 = teacher;
    ema_update(t1, student, 1.0);
    EXPECT_EQ(t1, teacher);
    for (double beta : {0.5, 0.9, 0.99}) {
        auto t = teacher;
        double gap0 = 0.0;
        for (std::size_t i = 0; i < 3; ++i) gap0 = std::max(gap0, std::abs(t[i] - student[i]));
        for (int step = 1; step <= 50; ++step) {
            ema_update(t, student, beta);
            for (std::size_t i = 0; i < 3; ++i)
                EXPECT_NEAR(t[i] - student[i], std::pow(beta, step) * (teacher[i] - student[i]), 1e-12);
        }
    }
    std::vector<double> short_teacher = {1.0};
    EXPECT_ML_ERROR(ema_update(short_teacher, student, 0.5), ErrorCode::LengthMismatch);
}

TEST(Classifier, BackwardMatchesFiniteDifferences) {
    std::mt19937_64 rng(9);
    PointwiseClassifier model({5, 4, 3, 3});
    model.init(11);
    const Matrix x = random_matrix(rng, 6, 5);
    const std::vector<ClassId> y = {0, 1, 2, 0, kUnlabeled, 2};
    const LossWeights w{1.0, 1.0, 0.0, 4.0};
    PointwiseClassifier::Cache cache;
    const Matrix logits = model.forward(x, &cache);
    const auto analytic = model.backward(cache, loss_with_grad(logits, nullptr, y, w).grad);
    std::vector<double> numeric(analytic.size());
    for (std::size_t t = 0; t < numeric.size(); ++t) {
        auto theta = model.parameters();
        const double keep = theta[t];
        theta[t] = keep + 1e-7;
        const double up = loss_with_grad(model.forward(x), nullptr, y, w).terms.total;
        theta[t] = keep - 1e-7;
        const double down = loss_with_grad(model.forward(x), nullptr, y, w).terms.total;
        theta[t] = keep;
        numeric[t] = (up - down) / 2e-7;
    }
    EXPECT_LT(rel_error(analytic, numeric), 1e-4);
}

TEST(Classifier, ModelFileRoundTrip) {
    TempDir dir;
    PointwiseClassifier model({4, 8, 8, 3});
    model.init(3);
    save_model(model, dir / "m.mlnm");
    const auto back = load_model(dir / "m.mlnm");
    EXPECT_EQ(back.sizes(), model.sizes());
    for (std::size_t t = 0; t < model.parameters().size(); ++t)
        EXPECT_EQ(back.parameters()[t], static_cast<double>(static_cast<float>(model.parameters()[t])));
    EXPECT_EQ(encode_model(back), io::read_file(dir / "m.mlnm"));
    auto bytes = encode_model(model);
    bytes.pop_back();
    EXPECT_ML_ERROR(decode_model(bytes), ErrorCode::MalformedFile);
    EXPECT_ML_ERROR(PointwiseClassifier({4}), ErrorCode::ConfigError);
}

TEST(Config, JsonRoundTripAndValidation) {
    SemiSupConfig c;
    c.temperature = 3.0;
    c.lambda_kl = 2.5;
    c.hidden = {16, 8};
    const auto back = config_from_json(config_to_json(c));
    EXPECT_EQ(back.temperature, 3.0);
    EXPECT_EQ(back.lambda_kl, std::optional<double>(2.5));
    EXPECT_EQ(back.hidden, c.hidden);
    EXPECT_DOUBLE_EQ(SemiSupConfig{}.kl_weight(), 8.0);  // 0.5 * T^2 at T = 4
    EXPECT_ML_ERROR(config_from_json({{"temperature", 1.0}}), ErrorCode::ConfigError);
    EXPECT_ML_ERROR(config_from_json({{"beta", 1.5}}), ErrorCode::ConfigError);
    EXPECT_ML_ERROR(config_from_json({{"lr", "fast"}}), ErrorCode::ConfigError);
    EXPECT_ML_ERROR(config_from_json({{"lambda_ce", -1.0}}), ErrorCode::ConfigError);
}

TEST(Training, TwoStageLearnsSeparableData) {
    SyntheticSpec spec;
    spec.num_classes = 3;
    spec.feature_dim = 6;
    spec.points_per_frame = 600;
    spec.sequences = 1;
    spec.frames_per_sequence = 2;
    spec.validation_frames = 1;
    spec.separation = 4.0;
    const auto data = synthesize(spec);
    PointSet labeled, unlabeled, val;
    labeled.dim = unlabeled.dim = val.dim = 6;
    const auto& f0 = data.sequences[0][0];
    const auto& f1 = data.sequences[0][1];
    labeled.append(f0.features, *f0.gt_labels);
    unlabeled.append(f1.features, std::vector<ClassId>(f1.num_points(), kUnlabeled));
    val.append(data.validation[0].features, *data.validation[0].gt_labels);
    SemiSupConfig cfg;
    cfg.stage1_epochs = 10;
    cfg.stage2_epochs = 5;
    const auto res = train_two_stage(labeled, unlabeled, 3, cfg, 1, &val);
    EXPECT_GT(res.stage1_miou, 0.9);
    EXPECT_GT(res.stage2_miou, 0.9);
    EXPECT_EQ(res.trace.size(), 15u);
    EXPECT_EQ(res.trace.front().stage, 1);
    EXPECT_EQ(res.trace.back().stage, 2);
    const auto again = train_two_stage(labeled, unlabeled, 3, cfg, 1, &val);
    EXPECT_TRUE(std::equal(res.student.parameters().begin(), res.student.parameters().end(),
                           again.student.parameters().begin()));
    const std::string csv = format_trace_csv(res.trace);
    EXPECT_EQ(csv.rfind("stage,epoch,loss,miou\n", 0), 0u);
}

TEST(Training, Errors) {
    PointSet labeled;
    labeled.dim = 2;
    labeled.append(std::vector<float>{0, 0, 1, 1}, std::vector<ClassId>{kUnlabeled, kUnlabeled});
    EXPECT_ML_ERROR(train_two_stage(labeled, PointSet{}, 2, SemiSupConfig{}, 0), ErrorCode::NoLabeledData);

    PointSet ok;
    ok.dim = 2;
    std::vector<float> feats;
    std::vector<ClassId> labels;
    for (int i = 0; i < 64; ++i) {
        feats.push_back(static_cast<float>(i % 2) * 1e3f);
        feats.push_back(static_cast<float>(i));
        labels.push_back(i % 2);
    }
    ok.append(feats, labels);
    auto poisoned = ok;
    poisoned.features[5] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_ML_ERROR(train_two_stage(poisoned, PointSet{}, 2, SemiSupConfig{}, 0), ErrorCode::NonFiniteLoss);

    PointSet other;
    other.dim = 3;
    other.append(std::vector<float>{1, 2, 3}, std::vector<ClassId>{kUnlabeled});
    EXPECT_ML_ERROR(train_two_stage(ok, other, 2, SemiSupConfig{}, 0), ErrorCode::DimMismatch);
}
