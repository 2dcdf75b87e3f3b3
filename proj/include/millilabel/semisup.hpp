#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "millilabel/annotate.hpp"
#include "millilabel/binary_io.hpp"
#include "millilabel/datamodel.hpp"
#include "millilabel/error.hpp"

namespace millilabel {

// Row-major dense matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
    std::span<double> row(std::size_t r) { return std::span<double>(data).subspan(r * cols, cols); }
    std::span<const double> row(std::size_t r) const { return std::span<const double>(data).subspan(r * cols, cols); }
};

struct SemiSupConfig {
    // Stage 2 (teacher-student) weights.
    double lambda_ce = 0.5;
    double lambda_lovasz = 1.0;
    std::optional<double> lambda_kl;  // defaults to 0.5 * T^2
    double temperature = 4.0;
    double beta = 0.99;
    // Stage 1 (pseudo-labels only) weights.
    double stage1_lambda_ce = 1.0;
    double stage1_lambda_lovasz = 1.0;

    int stage1_epochs = 20;
    int stage2_epochs = 20;
    double lr = 0.05;
    std::size_t batch = 256;
    std::vector<std::size_t> hidden = {32, 32};
    // Std-dev of the Gaussian input noise that makes teacher and student
    // inputs differ in stage 2.
    double jitter = 0.05;

    double kl_weight() const { return lambda_kl.value_or(0.5 * temperature * temperature); }
};

inline void validate(const SemiSupConfig& c) {
    auto bad = [](const std::string& what) { fail(ErrorCode::ConfigError, "semisup config: " + what); };
    if (c.lambda_ce < 0 || c.lambda_lovasz < 0 || c.kl_weight() < 0 || c.stage1_lambda_ce < 0 ||
        c.stage1_lambda_lovasz < 0)
        bad("loss weights must be non-negative");
    if (!(c.temperature > 1.0)) bad("temperature must be > 1");
    if (c.beta < 0.0 || c.beta > 1.0) bad("beta must be in [0, 1]");
    if (c.stage1_epochs < 0 || c.stage2_epochs < 0) bad("epochs must be non-negative");
    if (!(c.lr > 0.0)) bad("lr must be positive");
    if (c.batch == 0) bad("batch must be positive");
    if (c.hidden.size() != 2 || c.hidden[0] == 0 || c.hidden[1] == 0) bad("hidden must hold two positive sizes");
    if (c.jitter < 0.0) bad("jitter must be non-negative");
}

inline nlohmann::json config_to_json(const SemiSupConfig& c) {
    nlohmann::json j = {
        {"lambda_ce", c.lambda_ce},
        {"lambda_lovasz", c.lambda_lovasz},
        {"temperature", c.temperature},
        {"beta", c.beta},
        {"stage1_lambda_ce", c.stage1_lambda_ce},
        {"stage1_lambda_lovasz", c.stage1_lambda_lovasz},
        {"stage1_epochs", c.stage1_epochs},
        {"stage2_epochs", c.stage2_epochs},
        {"lr", c.lr},
        {"batch", c.batch},
        {"hidden", c.hidden},
        {"jitter", c.jitter},
    };
    if (c.lambda_kl) j["lambda_kl"] = *c.lambda_kl;
    return j;
}

inline SemiSupConfig config_from_json(const nlohmann::json& j) {
    SemiSupConfig c;
    try {
        auto take = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        take("lambda_ce", c.lambda_ce);
        take("lambda_lovasz", c.lambda_lovasz);
        take("temperature", c.temperature);
        take("beta", c.beta);
        take("stage1_lambda_ce", c.stage1_lambda_ce);
        take("stage1_lambda_lovasz", c.stage1_lambda_lovasz);
        take("stage1_epochs", c.stage1_epochs);
        take("stage2_epochs", c.stage2_epochs);
        take("lr", c.lr);
        take("batch", c.batch);
        take("hidden", c.hidden);
        take("jitter", c.jitter);
        if (j.contains("lambda_kl") && !j.at("lambda_kl").is_null()) c.lambda_kl = j.at("lambda_kl").get<double>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ConfigError, std::string("semisup config: ") + e.what());
    }
    validate(c);
    return c;
}

// --- elementary losses ---------------------------------------------------

// p_c proportional to exp(logit_c / T), max-shifted.
inline std::vector<double> softmax_t(std::span<const double> logits, double temperature = 1.0) {
    std::vector<double> p(logits.size());
    if (logits.empty()) return p;
    const double peak = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t c = 0; c < logits.size(); ++c) {
        p[c] = std::exp((logits[c] - peak) / temperature);
        sum += p[c];
    }
    for (auto& v : p) v /= sum;
    return p;
}

inline Matrix softmax_rows(const Matrix& logits, double temperature = 1.0) {
    Matrix p(logits.rows, logits.cols);
    for (std::size_t r = 0; r < logits.rows; ++r) {
        const auto row = softmax_t(logits.row(r), temperature);
        std::copy(row.begin(), row.end(), p.row(r).begin());
    }
    return p;
}

inline constexpr double kProbFloor = 1e-12;

inline double cross_entropy(std::span<const double> probs, ClassId y) {
    return -std::log(std::max(probs[y], kProbFloor));
}

struct LovaszResult {
    double loss = 0.0;
    Matrix grad;  // d loss / d probs
    std::size_t present_classes = 0;
};

// Lovasz-softmax over the rows whose label is valid (< K); other rows get zero
// gradient. Per present class c, errors m_i = |[y_i = c] - p_ic| are sorted
// descending and dotted with the discrete gradient of the Jaccard loss along
// that order; the result is averaged over present classes. The permutation is
// held fixed when differentiating.
inline LovaszResult lovasz_softmax(const Matrix& probs, std::span<const ClassId> labels) {
    if (labels.size() != probs.rows) fail(ErrorCode::LengthMismatch, "lovasz_softmax: label count differs from rows");
    const std::size_t k = probs.cols;
    LovaszResult out;
    out.grad = Matrix(probs.rows, k);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] < k) rows.push_back(i);
    std::vector<double> errors(rows.size());
    std::vector<std::size_t> order(rows.size());
    std::vector<double> class_loss;
    for (std::size_t c = 0; c < k; ++c) {
        std::size_t fg_total = 0;
        for (auto i : rows) fg_total += labels[i] == c;
        if (fg_total == 0) continue;
        for (std::size_t t = 0; t < rows.size(); ++t) {
            const double fg = labels[rows[t]] == c ? 1.0 : 0.0;
            errors[t] = std::abs(fg - probs(rows[t], c));
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return errors[a] > errors[b]; });
        double loss = 0.0;
        double cum_fg = 0.0, previous_jaccard = 0.0;
        const double gts = static_cast<double>(fg_total);
        for (std::size_t pos = 0; pos < order.size(); ++pos) {
            const std::size_t t = order[pos];
            const bool fg = labels[rows[t]] == c;
            cum_fg += fg ? 1.0 : 0.0;
            const double cum_bg = static_cast<double>(pos + 1) - cum_fg;
            const double jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            const double g = jaccard - previous_jaccard;
            previous_jaccard = jaccard;
            loss += errors[t] * g;
            out.grad(rows[t], c) += fg ? -g : g;
        }
        class_loss.push_back(loss);
    }
    out.present_classes = class_loss.size();
    if (class_loss.empty()) fail(ErrorCode::Degenerate, "lovasz_softmax: no present classes");
    const double inv = 1.0 / static_cast<double>(class_loss.size());
    out.loss = std::accumulate(class_loss.begin(), class_loss.end(), 0.0) * inv;
    for (auto& v : out.grad.data) v *= inv;
    return out;
}

struct KlResult {
    double loss = 0.0;
    Matrix grad;  // d loss / d student logits
};

// Mean over rows of KL(teacher || student), both softened by T.
inline KlResult kl_distill(const Matrix& student_logits, const Matrix& teacher_logits, double temperature) {
    if (student_logits.rows != teacher_logits.rows || student_logits.cols != teacher_logits.cols)
        fail(ErrorCode::LengthMismatch, "kl_distill: logits shapes differ");
    KlResult out;
    out.grad = Matrix(student_logits.rows, student_logits.cols);
    if (student_logits.rows == 0) return out;
    const double inv_rows = 1.0 / static_cast<double>(student_logits.rows);
    double total = 0.0;
    for (std::size_t r = 0; r < student_logits.rows; ++r) {
        const auto ps = softmax_t(student_logits.row(r), temperature);
        const auto pt = softmax_t(teacher_logits.row(r), temperature);
        double kl = 0.0;
        for (std::size_t c = 0; c < ps.size(); ++c) {
            if (pt[c] > 0.0) kl += pt[c] * (std::log(pt[c]) - std::log(std::max(ps[c], 1e-300)));
            out.grad(r, c) = (ps[c] - pt[c]) / temperature * inv_rows;
        }
        total += std::max(kl, 0.0);
    }
    out.loss = total * inv_rows;
    return out;
}

// --- composed losses -----------------------------------------------------

struct LossWeights {
    double ce = 1.0;
    double lovasz = 1.0;
    double kl = 0.0;
    double temperature = 4.0;
};

inline LossWeights stage1_weights(const SemiSupConfig& c) {
    return {c.stage1_lambda_ce, c.stage1_lambda_lovasz, 0.0, c.temperature};
}
inline LossWeights stage2_weights(const SemiSupConfig& c) {
    return {c.lambda_ce, c.lambda_lovasz, c.kl_weight(), c.temperature};
}

struct LossTerms {
    double ce = 0.0;      // mean over labeled points
    double lovasz = 0.0;  // over labeled points
    double kl = 0.0;      // mean over all points
    double total = 0.0;
    std::size_t labeled = 0;
};

struct LossWithGrad {
    LossTerms terms;
    Matrix grad;  // d total / d student logits
};

// lambda_ce * mean CE + lambda_lovasz * Lovasz over labeled rows, plus
// lambda_kl * mean KL over every row when teacher logits are given. Rows with
// an UNLABELED (or out-of-range) target only see the KL term.
inline LossWithGrad loss_with_grad(const Matrix& student_logits, const Matrix* teacher_logits,
                                   std::span<const ClassId> labels, const LossWeights& w) {
    if (labels.size() != student_logits.rows) fail(ErrorCode::LengthMismatch, "loss: label count differs from rows");
    const std::size_t k = student_logits.cols;
    LossWithGrad out;
    out.grad = Matrix(student_logits.rows, k);
    for (auto y : labels) out.terms.labeled += y < k;

    if (out.terms.labeled > 0) {
        const Matrix probs = softmax_rows(student_logits, 1.0);
        const double inv = 1.0 / static_cast<double>(out.terms.labeled);
        Matrix dprobs(probs.rows, k);
        if (w.ce != 0.0) {
            for (std::size_t r = 0; r < probs.rows; ++r) {
                if (labels[r] >= k) continue;
                out.terms.ce += cross_entropy(probs.row(r), labels[r]) * inv;
                // CE gradient is applied directly on the logits below.
            }
        }
        if (w.lovasz != 0.0) {
            auto lov = lovasz_softmax(probs, labels);
            out.terms.lovasz = lov.loss;
            for (std::size_t t = 0; t < dprobs.data.size(); ++t) dprobs.data[t] = w.lovasz * lov.grad.data[t];
        }
        for (std::size_t r = 0; r < probs.rows; ++r) {
            if (labels[r] >= k) continue;
            double dot = 0.0;
            for (std::size_t c = 0; c < k; ++c) dot += dprobs(r, c) * probs(r, c);
            for (std::size_t c = 0; c < k; ++c) {
                double g = probs(r, c) * (dprobs(r, c) - dot);
                if (w.ce != 0.0) g += w.ce * inv * (probs(r, c) - (labels[r] == c ? 1.0 : 0.0));
                out.grad(r, c) += g;
            }
        }
    }
    if (teacher_logits && w.kl != 0.0) {
        auto kl = kl_distill(student_logits, *teacher_logits, w.temperature);
        out.terms.kl = kl.loss;
        for (std::size_t t = 0; t < out.grad.data.size(); ++t) out.grad.data[t] += w.kl * kl.grad.data[t];
    }
    out.terms.total = w.ce * out.terms.ce + w.lovasz * out.terms.lovasz + w.kl * out.terms.kl;
    return out;
}

// Value of lambda_ce * CE + lambda_lovasz * Lovasz on probabilities.
inline double supervised_loss(const Matrix& probs, std::span<const ClassId> labels, double lambda_ce,
                              double lambda_lovasz) {
    if (labels.size() != probs.rows) fail(ErrorCode::LengthMismatch, "supervised_loss: label count differs from rows");
    std::size_t labeled = 0;
    double ce = 0.0;
    for (std::size_t r = 0; r < probs.rows; ++r) {
        if (labels[r] >= probs.cols) continue;
        ++labeled;
        ce += cross_entropy(probs.row(r), labels[r]);
    }
    if (labeled == 0) fail(ErrorCode::AllUnlabeled, "supervised_loss: every point is unlabeled");
    double total = lambda_ce * ce / static_cast<double>(labeled);
    if (lambda_lovasz != 0.0) total += lambda_lovasz * lovasz_softmax(probs, labels).loss;
    return total;
}

inline double supervised_loss(const Matrix& probs, std::span<const ClassId> labels, const SemiSupConfig& cfg) {
    return supervised_loss(probs, labels, cfg.lambda_ce, cfg.lambda_lovasz);
}

inline double combined_loss(const Matrix& student_logits, const Matrix& teacher_logits,
                            std::span<const ClassId> labels, const SemiSupConfig& cfg) {
    return loss_with_grad(student_logits, &teacher_logits, labels, stage2_weights(cfg)).terms.total;
}

// teacher <- beta * teacher + (1 - beta) * student
inline void ema_update(std::span<double> teacher, std::span<const double> student, double beta) {
    if (teacher.size() != student.size())
        fail(ErrorCode::LengthMismatch, "ema_update: " + std::to_string(teacher.size()) + " vs " +
                                            std::to_string(student.size()));
    for (std::size_t i = 0; i < teacher.size(); ++i) teacher[i] = beta * teacher[i] + (1.0 - beta) * student[i];
}

// --- pointwise classifier -----------------------------------------------

// Fully connected network: tanh on hidden layers, linear logits.
// Parameters per layer are W (out x in, row-major) then b (out).
class PointwiseClassifier {
public:
    PointwiseClassifier() = default;
    explicit PointwiseClassifier(std::vector<std::size_t> sizes) : sizes_(std::move(sizes)) {
        if (sizes_.size() < 2) fail(ErrorCode::ConfigError, "classifier needs at least input and output sizes");
        for (auto s : sizes_)
            if (s == 0) fail(ErrorCode::ConfigError, "classifier layer sizes must be positive");
        theta_.assign(count_parameters(sizes_), 0.0);
    }

    static std::size_t count_parameters(std::span<const std::size_t> sizes) {
        std::size_t n = 0;
        for (std::size_t l = 0; l + 1 < sizes.size(); ++l) n += sizes[l + 1] * sizes[l] + sizes[l + 1];
        return n;
    }

    void init(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::size_t off = 0;
        for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
            const std::size_t in = sizes_[l], out = sizes_[l + 1];
            const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (std::size_t t = 0; t < in * out; ++t) theta_[off + t] = u(rng);
            off += in * out;
            for (std::size_t t = 0; t < out; ++t) theta_[off + t] = 0.0;
            off += out;
        }
    }

    const std::vector<std::size_t>& sizes() const { return sizes_; }
    std::size_t input_dim() const { return sizes_.front(); }
    std::size_t num_classes() const { return sizes_.back(); }
    std::span<double> parameters() { return theta_; }
    std::span<const double> parameters() const { return theta_; }

    struct Cache {
        std::vector<Matrix> activations;  // input, hidden..., logits
    };

    Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
        if (x.cols != input_dim()) fail(ErrorCode::DimMismatch, "classifier: input dim mismatch");
        Matrix a = x;
        if (cache) cache->activations = {a};
        std::size_t off = 0;
        const std::size_t layers = sizes_.size() - 1;
        for (std::size_t l = 0; l < layers; ++l) {
            const std::size_t in = sizes_[l], out = sizes_[l + 1];
            const double* w = theta_.data() + off;
            const double* b = w + in * out;
            Matrix z(a.rows, out);
            for (std::size_t r = 0; r < a.rows; ++r) {
                const double* xr = a.data.data() + r * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double* wo = w + o * in;
                    double s = b[o];
#pragma omp simd reduction(+ : s)
                    for (std::size_t t = 0; t < in; ++t) s += wo[t] * xr[t];
                    z(r, o) = l + 1 < layers ? std::tanh(s) : s;
                }
            }
            off += in * out + out;
            a = std::move(z);
            if (cache) cache->activations.push_back(a);
        }
        return a;
    }

    // Gradient of the loss w.r.t. the flat parameter vector, given dL/dlogits.
    std::vector<double> backward(const Cache& cache, const Matrix& dlogits) const {
        std::vector<double> grad(theta_.size(), 0.0);
        const std::size_t layers = sizes_.size() - 1;
        std::vector<std::size_t> offsets(layers);
        for (std::size_t l = 0, off = 0; l < layers; ++l) {
            offsets[l] = off;
            off += sizes_[l] * sizes_[l + 1] + sizes_[l + 1];
        }
        Matrix delta = dlogits;
        for (std::size_t l = layers; l-- > 0;) {
            const std::size_t in = sizes_[l], out = sizes_[l + 1];
            const Matrix& a = cache.activations[l];
            const double* w = theta_.data() + offsets[l];
            double* gw = grad.data() + offsets[l];
            double* gb = gw + in * out;
            for (std::size_t r = 0; r < a.rows; ++r) {
                const double* xr = a.data.data() + r * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double d = delta(r, o);
                    if (d == 0.0) continue;
                    double* go = gw + o * in;
#pragma omp simd
                    for (std::size_t t = 0; t < in; ++t) go[t] += d * xr[t];
                    gb[o] += d;
                }
            }
            if (l == 0) break;
            Matrix prev(a.rows, in);
            for (std::size_t r = 0; r < a.rows; ++r) {
                double* pr = prev.data.data() + r * in;
                for (std::size_t o = 0; o < out; ++o) {
                    const double d = delta(r, o);
                    if (d == 0.0) continue;
                    const double* wo = w + o * in;
#pragma omp simd
                    for (std::size_t t = 0; t < in; ++t) pr[t] += d * wo[t];
                }
                // a holds tanh outputs for hidden layers: d tanh = 1 - a^2.
                for (std::size_t t = 0; t < in; ++t) pr[t] *= 1.0 - xr_sq(a, r, t);
            }
            delta = std::move(prev);
        }
        return grad;
    }

    std::vector<ClassId> predict(const Matrix& x) const {
        const Matrix logits = forward(x);
        std::vector<ClassId> out(logits.rows);
        for (std::size_t r = 0; r < logits.rows; ++r) {
            const auto row = logits.row(r);
            out[r] = static_cast<ClassId>(std::max_element(row.begin(), row.end()) - row.begin());
        }
        return out;
    }

private:
    static double xr_sq(const Matrix& a, std::size_t r, std::size_t t) {
        const double v = a(r, t);
        return v * v;
    }

    std::vector<std::size_t> sizes_;
    std::vector<double> theta_;
};

// Model file: "MLNM" | version u32 | n u32 | sizes u32[n] | f32 parameters.
inline std::vector<std::uint8_t> encode_model(const PointwiseClassifier& model) {
    std::vector<std::uint8_t> out;
    io::put_magic(out, "MLNM");
    io::put<std::uint32_t>(out, kFormatVersion);
    io::put<std::uint32_t>(out, static_cast<std::uint32_t>(model.sizes().size()));
    for (auto s : model.sizes()) io::put<std::uint32_t>(out, static_cast<std::uint32_t>(s));
    for (double v : model.parameters()) io::put<float>(out, static_cast<float>(v));
    return out;
}

inline PointwiseClassifier decode_model(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>") {
    io::Reader r(bytes, source);
    r.expect_magic("MLNM");
    if (auto v = r.get<std::uint32_t>(); v != kFormatVersion)
        fail(ErrorCode::MalformedFile, source + ": unsupported version " + std::to_string(v));
    const auto n = r.get<std::uint32_t>();
    if (n < 2 || n > 64) fail(ErrorCode::MalformedFile, source + ": bad layer count");
    std::vector<std::size_t> sizes;
    for (std::uint32_t l = 0; l < n; ++l) {
        const auto s = r.get<std::uint32_t>();
        if (s == 0) fail(ErrorCode::MalformedFile, source + ": zero layer size");
        sizes.push_back(s);
    }
    PointwiseClassifier model(sizes);
    const auto params = r.get_array<float>(model.parameters().size());
    r.expect_end();
    std::copy(params.begin(), params.end(), model.parameters().begin());
    return model;
}

inline void save_model(const PointwiseClassifier& model, const std::filesystem::path& path) {
    io::write_file_atomic(path, encode_model(model));
}

inline PointwiseClassifier load_model(const std::filesystem::path& path) {
    auto bytes = io::read_file(path);
    return decode_model(bytes, path.string());
}

// --- two-stage training --------------------------------------------------

// Points pooled from frames; labels may hold kUnlabeled.
struct PointSet {
    std::size_t dim = 0;
    std::vector<float> features;
    std::vector<ClassId> labels;

    std::size_t size() const { return labels.size(); }

    void append(std::span<const float> feats, std::span<const ClassId> labs) {
        features.insert(features.end(), feats.begin(), feats.end());
        labels.insert(labels.end(), labs.begin(), labs.end());
    }

    Matrix rows(std::span<const std::size_t> idx) const {
        Matrix m(idx.size(), dim);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t c = 0; c < dim; ++c) m(r, c) = features[idx[r] * dim + c];
        return m;
    }

    Matrix all_rows() const {
        Matrix m(size(), dim);
        for (std::size_t t = 0; t < m.data.size(); ++t) m.data[t] = features[t];
        return m;
    }
};

struct TraceRow {
    int stage = 1;
    int epoch = 0;
    double loss = 0.0;
    double miou = 0.0;  // on the validation set (NaN when none)
};

struct TrainResult {
    PointwiseClassifier stage1_model;
    PointwiseClassifier student;
    PointwiseClassifier teacher;
    std::vector<TraceRow> trace;
    double stage1_miou = 0.0;
    double stage2_miou = 0.0;
};

inline double evaluate_miou(const PointwiseClassifier& model, const PointSet& data, std::uint32_t num_classes) {
    if (data.size() == 0) return std::numeric_limits<double>::quiet_NaN();
    const auto pred = model.predict(data.all_rows());
    return miou(pred, data.labels, num_classes);
}

namespace detail {
inline void sgd_step(std::span<double> theta, std::span<const double> grad, double lr) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr * grad[i];
}

inline void add_jitter(Matrix& x, double sigma, std::mt19937_64& rng) {
    if (sigma <= 0.0) return;
    std::normal_distribution<double> n(0.0, sigma);
    for (auto& v : x.data) v += n(rng);
}

inline void check_finite(double loss, int stage, int epoch) {
    if (!std::isfinite(loss))
        fail(ErrorCode::NonFiniteLoss, "stage " + std::to_string(stage) + " epoch " + std::to_string(epoch) +
                                           ": loss diverged");
}
}  // namespace detail

// Stage 1 fits the pseudo-labeled points. Stage 2 starts teacher and student
// from the stage-1 weights, trains the student on labeled + unlabeled points
// with the KL term against the teacher, and moves the teacher by EMA after
// every step.
inline TrainResult train_two_stage(const PointSet& labeled, const PointSet& unlabeled, std::uint32_t num_classes,
                                   const SemiSupConfig& cfg, std::uint64_t seed,
                                   const PointSet* validation = nullptr) {
    validate(cfg);
    std::vector<std::size_t> labeled_idx;
    for (std::size_t i = 0; i < labeled.size(); ++i)
        if (labeled.labels[i] < num_classes) labeled_idx.push_back(i);
    if (labeled_idx.empty()) fail(ErrorCode::NoLabeledData, "train_two_stage: no labeled points");
    if (unlabeled.size() > 0 && unlabeled.dim != labeled.dim)
        fail(ErrorCode::DimMismatch, "train_two_stage: labeled/unlabeled feature dims differ");

    std::mt19937_64 rng(seed);
    PointwiseClassifier student({labeled.dim, cfg.hidden[0], cfg.hidden[1], num_classes});
    student.init(rng());
    TrainResult res;
    auto val_miou = [&](const PointwiseClassifier& m) {
        return validation ? evaluate_miou(m, *validation, num_classes) : std::numeric_limits<double>::quiet_NaN();
    };

    const LossWeights w1 = stage1_weights(cfg);
    for (int epoch = 0; epoch < cfg.stage1_epochs; ++epoch) {
        std::shuffle(labeled_idx.begin(), labeled_idx.end(), rng);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < labeled_idx.size(); start += cfg.batch) {
            const auto idx = std::span(labeled_idx).subspan(start, std::min(cfg.batch, labeled_idx.size() - start));
            const Matrix x = labeled.rows(idx);
            std::vector<ClassId> y(idx.size());
            for (std::size_t r = 0; r < idx.size(); ++r) y[r] = labeled.labels[idx[r]];
            PointwiseClassifier::Cache cache;
            const Matrix logits = student.forward(x, &cache);
            auto loss = loss_with_grad(logits, nullptr, y, w1);
            detail::check_finite(loss.terms.total, 1, epoch);
            detail::sgd_step(student.parameters(), student.backward(cache, loss.grad), cfg.lr);
            epoch_loss += loss.terms.total;
            ++steps;
        }
        res.trace.push_back({1, epoch, epoch_loss / static_cast<double>(std::max<std::size_t>(steps, 1)),
                             val_miou(student)});
    }
    res.stage1_model = student;
    res.stage1_miou = val_miou(student);

    // Stage 2 pool: labeled points (with targets) then unlabeled points.
    PointSet pool;
    pool.dim = labeled.dim;
    for (auto i : labeled_idx)
        pool.append(std::span(labeled.features).subspan(i * labeled.dim, labeled.dim),
                    std::span(labeled.labels).subspan(i, 1));
    pool.features.insert(pool.features.end(), unlabeled.features.begin(), unlabeled.features.end());
    pool.labels.insert(pool.labels.end(), unlabeled.size(), kUnlabeled);
    std::vector<std::size_t> order(pool.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    PointwiseClassifier teacher = student;
    const LossWeights w2 = stage2_weights(cfg);
    for (int epoch = 0; epoch < cfg.stage2_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const auto idx = std::span(order).subspan(start, std::min(cfg.batch, order.size() - start));
            const Matrix x = pool.rows(idx);
            std::vector<ClassId> y(idx.size());
            for (std::size_t r = 0; r < idx.size(); ++r) y[r] = pool.labels[idx[r]];
            Matrix xs = x, xt = x;
            detail::add_jitter(xs, cfg.jitter, rng);
            detail::add_jitter(xt, cfg.jitter, rng);
            PointwiseClassifier::Cache cache;
            const Matrix logits = student.forward(xs, &cache);
            const Matrix teacher_logits = teacher.forward(xt);
            auto loss = loss_with_grad(logits, &teacher_logits, y, w2);
            detail::check_finite(loss.terms.total, 2, epoch);
            detail::sgd_step(student.parameters(), student.backward(cache, loss.grad), cfg.lr);
            ema_update(teacher.parameters(), student.parameters(), cfg.beta);
            epoch_loss += loss.terms.total;
            ++steps;
        }
        res.trace.push_back({2, epoch, epoch_loss / static_cast<double>(std::max<std::size_t>(steps, 1)),
                             val_miou(student)});
    }
    res.student = std::move(student);
    res.teacher = std::move(teacher);
    res.stage2_miou = val_miou(res.student);
    return res;
}

inline std::string format_trace_csv(std::span<const TraceRow> trace) {
    std::string out = "stage,epoch,loss,miou\n";
    char buf[128];
    for (const auto& t : trace) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.10g,%.10g\n", t.stage, t.epoch, t.loss, t.miou);
        out += buf;
    }
    return out;
}

}  // namespace millilabel
