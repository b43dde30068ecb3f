#pragma once

#include <span>
#include <vector>

#include "fewtune/matrix.hpp"

namespace fewtune {

// kCosine is the production head: temperature-scaled cosine logits.
// kDot keeps the raw dot-product form as a diagnostics mode, since the
// bias analysis is derived there; temperature is ignored in kDot.
enum class HeadMode { kCosine, kDot };

struct ClassifierHead {
    double temperature = 10.0;
    HeadMode mode = HeadMode::kCosine;
};

struct Prototypes {
    Matrix rows; // C x d, one class prototype per row, stored unnormalized
    bool augmented = false;

    std::size_t num_ways() const { return rows.rows(); }
    std::size_t dim() const { return rows.cols(); }
};

// Row c is the arithmetic mean of the features labeled c.
Prototypes compute_prototypes(const Matrix& features, const std::vector<int>& labels,
                              int num_ways);

// score(i,c) = tau * <f_i/|f_i|, w_c/|w_c|> in cosine mode, <f_i, w_c> in dot
// mode. Zero-norm rows are rejected.
Matrix logits(const Matrix& features, const Prototypes& protos, const ClassifierHead& head);

// Numerically stable softmax (max subtraction); rows sum to 1.
Vec probabilities(std::span<const double> logit_row);
Matrix probabilities(const Matrix& logits);

std::vector<int> predict(const Matrix& features, const Prototypes& protos,
                         const ClassifierHead& head);

struct CrossEntropy {
    double loss = 0.0;      // mean of -log p(y_i | x_i)
    Matrix logit_grad;      // (p - onehot(y)) / N
    int clamp_count = 0;    // rows where p(y|x) underflowed and was clamped
};
CrossEntropy cross_entropy(const Matrix& probs, const std::vector<int>& labels);

double accuracy(const Matrix& logits, const std::vector<int>& labels);

// Exact gradient of the per-example loss -log p(y|f) with respect to f,
// prototypes treated as constants. In dot mode this is
// (p(y)-1) w_y + sum_{j!=y} p(j) w_j; cosine mode applies the full chain
// rule through the feature normalization.
Vec feature_gradient(std::span<const double> feature, int label, const Prototypes& protos,
                     const ClassifierHead& head);

// Per-example contribution to dLoss/dtau in cosine mode.
double temperature_gradient(std::span<const double> feature, int label, const Prototypes& protos,
                            const ClassifierHead& head);

// Splits the dot-mode feature gradient into the part driven by the
// estimation bias delta_y = w_y - m_y and the part driven by the true mean;
// the two components re-sum to the dot-mode feature gradient exactly.
struct BiasDecomposition {
    Vec bias_component;
    Vec mean_component;
};
BiasDecomposition bias_decomposition(std::span<const double> feature, int label,
                                     const Prototypes& protos, const Matrix& true_means);

// delta_c = w_c - m_c per class, with norms.
struct BiasDiagnostics {
    Matrix delta;
    Vec delta_norm;
};
BiasDiagnostics bias_diagnostics(const Prototypes& protos, const Matrix& true_means);

} // namespace fewtune
