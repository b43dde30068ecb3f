#pragma once

#include <cstdint>
#include <vector>

#include "fewtune/backbone.hpp"
#include "fewtune/classifier.hpp"
#include "fewtune/dcm.hpp"
#include "fewtune/episodes.hpp"
#include "fewtune/sampling.hpp"

namespace fewtune {

// Table-style ablation switches: finetune the backbone (B), learn the scale
// vector (S), apply feature normalization (FN), run selected sampling (SS).
struct AblationFlags {
    bool finetune_backbone = false;
    bool scale_vector = false;
    bool feature_norm = false;
    bool selected_sampling = false;

    std::string label() const; // "none", "B", "B+FN", ...
};

struct FinetuneConfig {
    double lr = 5e-5;
    int epochs = 25;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    AblationFlags flags;
    bool freeze_temperature = false;
    bool refit_stats_each_epoch = true;
    double tau_init = 10.0;
    double sigma_walk = 0.1;
    int max_chain_len = 20;
    std::uint64_t seed = 0;
    bool trace_query = true; // per-epoch read-only query metrics

    void validate() const;
};

struct EpochTrace {
    int epoch = 0; // 1-based; support metrics are the objective at epoch start
    double support_loss = 0.0;
    double support_acc = 0.0;
    double query_loss = 0.0;   // NaN when query tracing is off
    double query_acc = 0.0;    // NaN when query tracing is off
    double mean_chain_length = 0.0;
    double bias_norm = 0.0;    // NaN unless true means are available
};

struct FinetuneResult {
    MlpParams params;
    Vec scale;
    double temperature = 0.0;
    std::vector<EpochTrace> trace;
    double query_accuracy = 0.0;
    double query_loss = 0.0;
    std::vector<int> query_predictions;
};

FinetuneResult finetune_episode(const Episode& episode, const MlpParams& pretrained,
                                const FinetuneConfig& cfg);

// --- building blocks, exposed for gradient checking and inference ---

// What stays constant inside one epoch's backward pass: the calibration
// statistics and the (possibly SS-augmented) prototypes.
struct FrozenStep {
    DcmState stats;      // fitted iff feature_norm
    Prototypes protos;
    bool feature_norm = false;
};

// Full-batch cross-entropy of the support pipeline at the given parameter
// values, under a frozen step context. Used by both the production update
// and the finite-difference oracles, so both sides differentiate the same
// function.
double pipeline_loss(const MlpParams& params, const Vec& scale, double tau,
                     const Matrix& inputs, const std::vector<int>& labels,
                     const FrozenStep& frozen, double* accuracy = nullptr);

struct PipelineGrads {
    double loss = 0.0;
    double acc = 0.0;
    Gradients backbone;
    Vec scale;
    double tau = 0.0;
};

PipelineGrads pipeline_grads(const MlpParams& params, const Vec& scale, double tau,
                             const Matrix& inputs, const std::vector<int>& labels,
                             const FrozenStep& frozen, bool need_backbone);

// Bias-corrected adaptive-moment update over the enabled parameter groups
// (backbone iff B, scale iff S, temperature unless frozen).
class AdamOptimizer {
public:
    AdamOptimizer(const MlpParams& params, const FinetuneConfig& cfg);

    void step(MlpParams& params, Vec& scale, double& temperature, const PipelineGrads& grads);
    int steps_taken() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    AblationFlags flags_;
    bool freeze_temperature_;
    int t_ = 0;
    std::vector<MlpLayer> m_, v_;
    Vec scale_m_, scale_v_;
    double tau_m_ = 0.0, tau_v_ = 0.0;
};

} // namespace fewtune
