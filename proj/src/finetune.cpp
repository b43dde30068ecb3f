#include "fewtune/finetune.hpp"

#include <cmath>
#include <limits>

#include "fewtune/errors.hpp"
#include "fewtune/rng.hpp"

namespace fewtune {

namespace {
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
}

std::string AblationFlags::label() const {
    std::string s;
    if (finetune_backbone) s += "B";
    if (feature_norm) s += s.empty() ? "FN" : "+FN";
    if (scale_vector) s += s.empty() ? "S" : "+S";
    if (selected_sampling) s += s.empty() ? "SS" : "+SS";
    return s.empty() ? "none" : s;
}

void FinetuneConfig::validate() const {
    // lr = 0 is allowed: it is the documented no-op update used to isolate
    // the inference-path effects of FN and SS.
    if (lr < 0.0) throw config_error("finetune: lr must be >= 0");
    if (epochs < 1) throw config_error("finetune: epochs must be >= 1");
    if (tau_init <= 0.0) throw config_error("finetune: temperature must be positive");
    if (sigma_walk <= 0.0) throw config_error("finetune: sigma_walk must be positive");
    if (max_chain_len < 1) throw config_error("finetune: max_chain_len must be >= 1");
}

namespace {

Matrix calibrated_features(const Matrix& raw, const Vec& scale, const FrozenStep& frozen) {
    if (!frozen.feature_norm) return raw;
    DcmState st = frozen.stats;
    st.scale = scale;
    return calibrate(raw, st);
}

struct HeadBackward {
    Matrix feature_grad; // dLoss/d(calibrated features)
    double tau_grad = 0.0;
};

// Backward through the cosine head with prototypes as constants:
// logit(i,c) = tau * <f_i, w_c> / (|f_i| |w_c|).
HeadBackward head_backward(const Matrix& feats, const Prototypes& protos, double tau,
                           const Matrix& logit_grad) {
    std::size_t n = feats.rows(), c_count = protos.num_ways(), d = feats.cols();
    Matrix unit_protos(c_count, d);
    for (std::size_t c = 0; c < c_count; ++c) {
        double wn = norm(protos.rows.row(c));
        for (std::size_t k = 0; k < d; ++k) unit_protos(c, k) = protos.rows(c, k) / wn;
    }
    HeadBackward out;
    out.feature_grad = Matrix(n, d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double fn = norm(feats.row(i));
        double along = 0.0; // sum_c g(i,c) * cos(i,c)
        for (std::size_t c = 0; c < c_count; ++c) {
            double g = logit_grad(i, c);
            if (g == 0.0) continue;
            double cosv = dot(feats.row(i), unit_protos.row(c)) / fn;
            along += g * cosv;
            for (std::size_t k = 0; k < d; ++k) out.feature_grad(i, k) += g * unit_protos(c, k);
        }
        for (std::size_t k = 0; k < d; ++k)
            out.feature_grad(i, k) = tau * (out.feature_grad(i, k) - along * feats(i, k) / fn) / fn;
        out.tau_grad += along;
    }
    return out;
}

} // namespace

double pipeline_loss(const MlpParams& params, const Vec& scale, double tau, const Matrix& inputs,
                     const std::vector<int>& labels, const FrozenStep& frozen, double* acc_out) {
    Matrix feats = forward(params, inputs);
    Matrix fbar = calibrated_features(feats, scale, frozen);
    ClassifierHead head{tau, HeadMode::kCosine};
    Matrix lg = logits(fbar, frozen.protos, head);
    CrossEntropy ce = cross_entropy(probabilities(lg), labels);
    if (acc_out) *acc_out = accuracy(lg, labels);
    return ce.loss;
}

PipelineGrads pipeline_grads(const MlpParams& params, const Vec& scale, double tau,
                             const Matrix& inputs, const std::vector<int>& labels,
                             const FrozenStep& frozen, bool need_backbone) {
    ForwardCache cache;
    Matrix feats = forward(params, inputs, &cache);
    Matrix fbar = calibrated_features(feats, scale, frozen);
    ClassifierHead head{tau, HeadMode::kCosine};
    Matrix lg = logits(fbar, frozen.protos, head);
    Matrix probs = probabilities(lg);
    CrossEntropy ce = cross_entropy(probs, labels);

    PipelineGrads out;
    out.loss = ce.loss;
    out.acc = accuracy(lg, labels);

    HeadBackward hb = head_backward(fbar, frozen.protos, tau, ce.logit_grad);
    out.tau = hb.tau_grad;

    Matrix feature_upstream; // gradient w.r.t. raw features
    if (frozen.feature_norm) {
        DcmState st = frozen.stats;
        st.scale = scale;
        out.scale = scale_gradient(hb.feature_grad, normalized(feats, st));
        feature_upstream = stats_gradient_passthrough(hb.feature_grad, st);
    } else {
        out.scale.assign(scale.size(), 0.0);
        feature_upstream = hb.feature_grad;
    }
    if (need_backbone) out.backbone = backward(params, cache, feature_upstream);
    return out;
}

AdamOptimizer::AdamOptimizer(const MlpParams& params, const FinetuneConfig& cfg)
    : lr_(cfg.lr), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), flags_(cfg.flags),
      freeze_temperature_(cfg.freeze_temperature) {
    for (const auto& l : params.layers) {
        m_.push_back({Matrix(l.weight.rows(), l.weight.cols()), Vec(l.bias.size(), 0.0)});
        v_.push_back({Matrix(l.weight.rows(), l.weight.cols()), Vec(l.bias.size(), 0.0)});
    }
    scale_m_.assign(params.embed_dim(), 0.0);
    scale_v_.assign(params.embed_dim(), 0.0);
}

void AdamOptimizer::step(MlpParams& params, Vec& scale, double& temperature,
                         const PipelineGrads& grads) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, t_);
    double bc2 = 1.0 - std::pow(beta2_, t_);
    auto update_one = [&](double& x, double g, double& m, double& v) {
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g * g;
        x -= lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_);
    };

    if (flags_.finetune_backbone) {
        if (!grads.backbone.all_finite_values())
            throw numeric_error("optimizer: non-finite gradient in group 'backbone'");
        for (std::size_t li = 0; li < params.layers.size(); ++li) {
            auto& l = params.layers[li];
            const auto& g = grads.backbone.layers[li];
            for (std::size_t i = 0; i < l.weight.size(); ++i)
                update_one(l.weight.data()[i], g.weight.data()[i], m_[li].weight.data()[i],
                           v_[li].weight.data()[i]);
            for (std::size_t i = 0; i < l.bias.size(); ++i)
                update_one(l.bias[i], g.bias[i], m_[li].bias[i], v_[li].bias[i]);
        }
    }
    if (flags_.scale_vector) {
        if (!all_finite(std::span<const double>(grads.scale)))
            throw numeric_error("optimizer: non-finite gradient in group 'scale'");
        for (std::size_t k = 0; k < scale.size(); ++k)
            update_one(scale[k], grads.scale[k], scale_m_[k], scale_v_[k]);
    }
    if (!freeze_temperature_) {
        if (!std::isfinite(grads.tau))
            throw numeric_error("optimizer: non-finite gradient in group 'temperature'");
        update_one(temperature, grads.tau, tau_m_, tau_v_);
        if (temperature <= 0.0)
            throw numeric_error("optimizer: temperature became non-positive");
    }
}

namespace {

struct InferenceEval {
    double loss = 0.0;
    double acc = 0.0;
    std::vector<int> predictions;
};

// Read-only evaluation of the query set through the identical pipeline:
// support features -> stats -> prototypes (SS re-run when enabled) -> query.
// The frozen_stats argument carries the training statistics for the
// refit-once mode so evaluation matches what training used.
InferenceEval evaluate_query(const MlpParams& params, const Vec& scale, double tau,
                             const Matrix& support_inputs, const std::vector<int>& support_labels,
                             const Matrix& query_inputs, const std::vector<int>& query_labels,
                             int num_ways, const FinetuneConfig& cfg,
                             const DcmState* training_stats, std::uint64_t ss_seed) {
    Matrix fs = forward(params, support_inputs);
    FrozenStep frozen;
    frozen.feature_norm = cfg.flags.feature_norm;
    if (frozen.feature_norm) {
        frozen.stats = cfg.refit_stats_each_epoch || !training_stats ? fit_stats(fs)
                                                                     : *training_stats;
        frozen.stats.scale = scale;
    }
    Matrix fbar_s = calibrated_features(fs, scale, frozen);
    ClassifierHead head{tau, HeadMode::kCosine};
    frozen.protos = compute_prototypes(fbar_s, support_labels, num_ways);
    if (cfg.flags.selected_sampling) {
        ProposalConfig pc{cfg.sigma_walk, cfg.max_chain_len, ss_seed};
        Augmentation aug = augment_support(fbar_s, support_labels, frozen.protos, head, pc);
        frozen.protos = compute_prototypes(aug.features, aug.labels, num_ways);
        frozen.protos.augmented = true;
    }
    Matrix fq = forward(params, query_inputs);
    Matrix fbar_q = calibrated_features(fq, scale, frozen);
    Matrix lg = logits(fbar_q, frozen.protos, head);
    CrossEntropy ce = cross_entropy(probabilities(lg), query_labels);
    InferenceEval ev;
    ev.loss = ce.loss;
    ev.acc = accuracy(lg, query_labels);
    ev.predictions.resize(lg.rows());
    for (std::size_t i = 0; i < lg.rows(); ++i)
        ev.predictions[i] = static_cast<int>(argmax_tie_low(lg.row(i)));
    return ev;
}

// Mean over classes of |w_c - m_c| in the space the classifier sees. Only
// meaningful when the episode knows its true means and the backbone is a
// single linear layer, where the feature-space class mean is exactly the
// affine image of the raw one.
double bias_norm_or_nan(const Episode& ep, const MlpParams& params, const Vec& scale,
                        const FrozenStep& frozen) {
    if (ep.true_means.empty() || params.layers.size() != 1) return kNaN;
    Matrix raw = Matrix::from_rows(ep.true_means);
    Matrix means = forward(params, raw);
    Matrix mbar = calibrated_features(means, scale, frozen);
    double total = 0.0;
    for (std::size_t c = 0; c < mbar.rows(); ++c) {
        double acc = 0.0;
        for (std::size_t k = 0; k < mbar.cols(); ++k) {
            double dv = frozen.protos.rows(c, k) - mbar(c, k);
            acc += dv * dv;
        }
        total += std::sqrt(acc);
    }
    return total / static_cast<double>(mbar.rows());
}

} // namespace

FinetuneResult finetune_episode(const Episode& episode, const MlpParams& pretrained,
                                const FinetuneConfig& cfg) {
    cfg.validate();
    pretrained.validate();
    if (episode.support.empty() || episode.query.empty())
        throw data_error("finetune_episode: episode has empty support or query set");
    if (episode.support.front().input.size() != pretrained.input_dim())
        throw shape_error("finetune_episode: episode input dimension does not match backbone");

    const Matrix xs = episode.support_inputs();
    const Matrix xq = episode.query_inputs();
    const std::vector<int> ys = episode.support_labels();
    const std::vector<int> yq = episode.query_labels();

    FinetuneResult res;
    res.params = pretrained;
    res.scale.assign(pretrained.embed_dim(), 1.0);
    res.temperature = cfg.tau_init;

    AdamOptimizer opt(res.params, cfg);
    const bool backbone_static = !cfg.flags.finetune_backbone;
    Matrix fs_static;
    if (backbone_static) fs_static = forward(res.params, xs);

    DcmState training_stats;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
      try {
        Matrix fs = backbone_static ? fs_static : forward(res.params, xs);

        FrozenStep frozen;
        frozen.feature_norm = cfg.flags.feature_norm;
        if (frozen.feature_norm) {
            if (epoch == 1 || cfg.refit_stats_each_epoch) training_stats = fit_stats(fs);
            frozen.stats = training_stats;
            frozen.stats.scale = res.scale;
        }
        Matrix fbar = calibrated_features(fs, res.scale, frozen);
        ClassifierHead head{res.temperature, HeadMode::kCosine};
        frozen.protos = compute_prototypes(fbar, ys, episode.num_ways);

        double mean_chain = 0.0;
        if (cfg.flags.selected_sampling) {
            ProposalConfig pc{cfg.sigma_walk, cfg.max_chain_len,
                              derive_seed(cfg.seed, "ss", static_cast<std::uint64_t>(epoch))};
            Augmentation aug = augment_support(fbar, ys, frozen.protos, head, pc);
            frozen.protos = compute_prototypes(aug.features, aug.labels, episode.num_ways);
            frozen.protos.augmented = true;
            mean_chain = aug.mean_chain_length();
        }

        PipelineGrads grads = pipeline_grads(res.params, res.scale, res.temperature, xs, ys,
                                             frozen, cfg.flags.finetune_backbone);
        if (!std::isfinite(grads.loss)) throw numeric_error("non-finite support loss");

        EpochTrace tr;
        tr.epoch = epoch;
        tr.support_loss = grads.loss;
        tr.support_acc = grads.acc;
        tr.mean_chain_length = mean_chain;
        tr.bias_norm = bias_norm_or_nan(episode, res.params, res.scale, frozen);
        tr.query_loss = kNaN;
        tr.query_acc = kNaN;

        opt.step(res.params, res.scale, res.temperature, grads);

        const bool last = (epoch == cfg.epochs);
        if (cfg.trace_query || last) {
            InferenceEval ev = evaluate_query(
                res.params, res.scale, res.temperature, xs, ys, xq, yq, episode.num_ways, cfg,
                frozen.feature_norm ? &training_stats : nullptr,
                derive_seed(cfg.seed, "eval_ss", static_cast<std::uint64_t>(epoch)));
            if (cfg.trace_query) {
                tr.query_loss = ev.loss;
                tr.query_acc = ev.acc;
            }
            if (last) {
                res.query_accuracy = ev.acc;
                res.query_loss = ev.loss;
                res.query_predictions = ev.predictions;
            }
        }
        res.trace.push_back(tr);
      } catch (const numeric_error& e) {
        throw numeric_error("finetune_episode: aborted at epoch " + std::to_string(epoch) +
                            ": " + e.what());
      }
    }
    return res;
}

} // namespace fewtune
