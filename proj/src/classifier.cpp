#include "fewtune/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fewtune/errors.hpp"

namespace fewtune {

namespace {
constexpr double kProbFloor = 1e-30;

void require_nonzero_norm(double n, const char* what, std::size_t index) {
    if (n == 0.0)
        throw contract_error(std::string("degenerate input: zero-norm ") + what + " at row " +
                             std::to_string(index));
}
} // namespace

Prototypes compute_prototypes(const Matrix& features, const std::vector<int>& labels,
                              int num_ways) {
    if (features.rows() != labels.size())
        throw shape_error("compute_prototypes: features/labels length mismatch");
    std::size_t c_count = static_cast<std::size_t>(num_ways);
    Prototypes p;
    p.rows = Matrix(c_count, features.cols(), 0.0);
    std::vector<std::size_t> counts(c_count, 0);
    for (std::size_t i = 0; i < features.rows(); ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= c_count)
            throw shape_error("compute_prototypes: label " + std::to_string(y) + " out of range");
        for (std::size_t k = 0; k < features.cols(); ++k)
            p.rows(static_cast<std::size_t>(y), k) += features(i, k);
        ++counts[static_cast<std::size_t>(y)];
    }
    for (std::size_t c = 0; c < c_count; ++c) {
        if (counts[c] == 0)
            throw data_error("compute_prototypes: class " + std::to_string(c) +
                             " has no support features");
        for (std::size_t k = 0; k < features.cols(); ++k)
            p.rows(c, k) /= static_cast<double>(counts[c]);
    }
    return p;
}

Matrix logits(const Matrix& features, const Prototypes& protos, const ClassifierHead& head) {
    if (features.cols() != protos.dim())
        throw shape_error("logits: feature/prototype dimension mismatch");
    std::size_t n = features.rows(), c_count = protos.num_ways();
    Matrix out(n, c_count);
    if (head.mode == HeadMode::kDot) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < c_count; ++c)
                out(i, c) = dot(features.row(i), protos.rows.row(c));
        return out;
    }
    Vec proto_norm(c_count);
    for (std::size_t c = 0; c < c_count; ++c) {
        proto_norm[c] = norm(protos.rows.row(c));
        require_nonzero_norm(proto_norm[c], "prototype", c);
    }
    for (std::size_t i = 0; i < n; ++i) {
        double fn = norm(features.row(i));
        require_nonzero_norm(fn, "feature", i);
        for (std::size_t c = 0; c < c_count; ++c)
            out(i, c) = head.temperature * dot(features.row(i), protos.rows.row(c)) /
                        (fn * proto_norm[c]);
    }
    return out;
}

Vec probabilities(std::span<const double> logit_row) {
    if (!all_finite(logit_row)) throw numeric_error("probabilities: non-finite logits");
    double mx = logit_row[0];
    for (double v : logit_row) mx = std::max(mx, v);
    Vec p(logit_row.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(logit_row[i] - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

Matrix probabilities(const Matrix& lg) {
    Matrix p(lg.rows(), lg.cols());
    for (std::size_t i = 0; i < lg.rows(); ++i) {
        Vec row = probabilities(lg.row(i));
        for (std::size_t c = 0; c < lg.cols(); ++c) p(i, c) = row[c];
    }
    return p;
}

std::vector<int> predict(const Matrix& features, const Prototypes& protos,
                         const ClassifierHead& head) {
    Matrix lg = logits(features, protos, head);
    std::vector<int> out(lg.rows());
    for (std::size_t i = 0; i < lg.rows(); ++i)
        out[i] = static_cast<int>(argmax_tie_low(lg.row(i)));
    return out;
}

CrossEntropy cross_entropy(const Matrix& probs, const std::vector<int>& labels) {
    if (probs.rows() != labels.size())
        throw shape_error("cross_entropy: probs/labels length mismatch");
    std::size_t n = probs.rows();
    CrossEntropy ce;
    ce.logit_grad = Matrix(n, probs.cols());
    double scale = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= probs.cols())
            throw shape_error("cross_entropy: label out of range");
        double py = probs(i, static_cast<std::size_t>(y));
        if (py < kProbFloor) {
            py = kProbFloor;
            ++ce.clamp_count;
        }
        ce.loss += -std::log(py);
        for (std::size_t c = 0; c < probs.cols(); ++c)
            ce.logit_grad(i, c) =
                (probs(i, c) - (c == static_cast<std::size_t>(y) ? 1.0 : 0.0)) * scale;
    }
    ce.loss *= scale;
    return ce;
}

double accuracy(const Matrix& lg, const std::vector<int>& labels) {
    if (lg.rows() == 0) return 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < lg.rows(); ++i)
        if (argmax_tie_low(lg.row(i)) == static_cast<std::size_t>(labels[i])) ++correct;
    return static_cast<double>(correct) / static_cast<double>(lg.rows());
}

namespace {

// Per-example (p - onehot) for one feature under the given head.
Vec example_logit_grad(std::span<const double> feature, int label, const Prototypes& protos,
                       const ClassifierHead& head, Vec* cosines) {
    std::size_t c_count = protos.num_ways();
    Vec lg(c_count);
    if (head.mode == HeadMode::kDot) {
        for (std::size_t c = 0; c < c_count; ++c) lg[c] = dot(feature, protos.rows.row(c));
    } else {
        double fn = norm(feature);
        require_nonzero_norm(fn, "feature", 0);
        if (cosines) cosines->resize(c_count);
        for (std::size_t c = 0; c < c_count; ++c) {
            double wn = norm(protos.rows.row(c));
            require_nonzero_norm(wn, "prototype", c);
            double cosv = dot(feature, protos.rows.row(c)) / (fn * wn);
            if (cosines) (*cosines)[c] = cosv;
            lg[c] = head.temperature * cosv;
        }
    }
    Vec g = probabilities(lg);
    g[static_cast<std::size_t>(label)] -= 1.0;
    return g;
}

} // namespace

Vec feature_gradient(std::span<const double> feature, int label, const Prototypes& protos,
                     const ClassifierHead& head) {
    std::size_t d = protos.dim();
    if (feature.size() != d) throw shape_error("feature_gradient: dimension mismatch");
    std::size_t c_count = protos.num_ways();
    Vec out(d, 0.0);
    if (head.mode == HeadMode::kDot) {
        Vec g = example_logit_grad(feature, label, protos, head, nullptr);
        for (std::size_t c = 0; c < c_count; ++c)
            for (std::size_t k = 0; k < d; ++k) out[k] += g[c] * protos.rows(c, k);
        return out;
    }
    Vec cosines;
    Vec g = example_logit_grad(feature, label, protos, head, &cosines);
    double fn = norm(feature);
    // d cos_c / df = (w_c/|w_c| - cos_c * f/|f|) / |f|
    double along_f = 0.0; // sum_c g_c * cos_c
    for (std::size_t c = 0; c < c_count; ++c) {
        double wn = norm(protos.rows.row(c));
        for (std::size_t k = 0; k < d; ++k) out[k] += g[c] * protos.rows(c, k) / wn;
        along_f += g[c] * cosines[c];
    }
    for (std::size_t k = 0; k < d; ++k)
        out[k] = head.temperature * (out[k] - along_f * feature[k] / fn) / fn;
    return out;
}

double temperature_gradient(std::span<const double> feature, int label, const Prototypes& protos,
                            const ClassifierHead& head) {
    if (head.mode != HeadMode::kCosine)
        throw contract_error("temperature_gradient: only defined for the cosine head");
    Vec cosines;
    Vec g = example_logit_grad(feature, label, protos, head, &cosines);
    double acc = 0.0;
    for (std::size_t c = 0; c < g.size(); ++c) acc += g[c] * cosines[c];
    return acc;
}

BiasDecomposition bias_decomposition(std::span<const double> feature, int label,
                                     const Prototypes& protos, const Matrix& true_means) {
    if (true_means.rows() != protos.num_ways() || true_means.cols() != protos.dim())
        throw data_error("bias_decomposition: diagnostics unavailable, true means missing or "
                         "mismatched");
    ClassifierHead diag{1.0, HeadMode::kDot};
    Vec g = example_logit_grad(feature, label, protos, diag, nullptr);
    std::size_t d = protos.dim();
    std::size_t y = static_cast<std::size_t>(label);
    BiasDecomposition out;
    out.bias_component.assign(d, 0.0);
    out.mean_component.assign(d, 0.0);
    double gy = g[y]; // p(y) - 1
    for (std::size_t k = 0; k < d; ++k) {
        double delta_y = protos.rows(y, k) - true_means(y, k);
        out.bias_component[k] = gy * delta_y;
        out.mean_component[k] = gy * true_means(y, k);
    }
    for (std::size_t c = 0; c < protos.num_ways(); ++c) {
        if (c == y) continue;
        for (std::size_t k = 0; k < d; ++k) out.mean_component[k] += g[c] * protos.rows(c, k);
    }
    return out;
}

BiasDiagnostics bias_diagnostics(const Prototypes& protos, const Matrix& true_means) {
    if (true_means.rows() != protos.num_ways() || true_means.cols() != protos.dim())
        throw data_error("bias_diagnostics: diagnostics unavailable, true means missing or "
                         "mismatched");
    BiasDiagnostics out;
    out.delta = Matrix(protos.num_ways(), protos.dim());
    out.delta_norm.resize(protos.num_ways());
    for (std::size_t c = 0; c < protos.num_ways(); ++c) {
        for (std::size_t k = 0; k < protos.dim(); ++k)
            out.delta(c, k) = protos.rows(c, k) - true_means(c, k);
        out.delta_norm[c] = norm(out.delta.row(c));
    }
    return out;
}

} // namespace fewtune
