#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewtune/episodes.hpp"
#include "fewtune/matrix.hpp"

namespace fewtune {

struct MlpLayer {
    Matrix weight; // fan_out x fan_in
    Vec bias;      // fan_out

    bool operator==(const MlpLayer&) const = default;
};

// Fully-connected feature extractor: ReLU on hidden layers, linear output of
// width embed_dim. A single layer is a plain linear map (no activation).
struct MlpParams {
    std::vector<MlpLayer> layers;

    std::size_t input_dim() const;
    std::size_t embed_dim() const;
    std::size_t parameter_count() const;
    void validate() const; // throws shape_error on inconsistent chaining

    bool operator==(const MlpParams&) const = default;
};

// He-style uniform fan-in initialization, biases zero.
MlpParams make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                   std::size_t embed_dim, std::uint64_t seed);
// Single linear layer with W = I, b = 0: features equal raw inputs.
MlpParams make_identity(std::size_t dim);

struct ForwardCache {
    Matrix input;
    std::vector<Matrix> pre_act;  // one per layer
    std::uint64_t params_digest = 0;
};

// Returns the feature batch (N x embed_dim). The cache, when requested, holds
// what backward needs for an exact gradient; ReLU'(0) is taken as 0.
Matrix forward(const MlpParams& params, const Matrix& inputs, ForwardCache* cache = nullptr);

struct Gradients {
    std::vector<MlpLayer> layers; // shape-congruent with MlpParams

    bool all_finite_values() const;
};

Gradients zero_like(const MlpParams& params);

// upstream is dLoss/dFeatures (N x embed_dim). Optionally also produces the
// gradient with respect to the raw inputs.
Gradients backward(const MlpParams& params, const ForwardCache& cache, const Matrix& upstream,
                   Matrix* input_grad = nullptr);

struct PretrainConfig {
    double lr = 0.05;
    double momentum = 0.9;
    int epochs = 50;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
};

// Supervised pretraining on the base classes with a throwaway linear head and
// softmax cross-entropy, minibatch SGD with momentum. Returns the updated
// extractor; the head is discarded.
MlpParams pretrain(const MlpParams& init, const Dataset& base, const PretrainConfig& cfg);

double classification_accuracy(const MlpParams& params, const Dataset& d,
                               const MlpLayer& head);
// Convenience for tests: pretrain and report final base-set accuracy through
// a freshly fitted head is not meaningful, so accuracy checks use the head
// returned here.
struct PretrainResult {
    MlpParams params;
    MlpLayer head;
    std::vector<double> epoch_loss;
};
PretrainResult pretrain_with_head(const MlpParams& init, const Dataset& base,
                                  const PretrainConfig& cfg);

// Versioned binary checkpoint (shape header, then row-major values).
// Round-trips bit-exactly.
void save_checkpoint(const MlpParams& params, const std::string& path);
MlpParams load_checkpoint(const std::string& path);

} // namespace fewtune
