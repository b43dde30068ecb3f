#include "fewtune/sampling.hpp"

#include "fewtune/errors.hpp"

namespace fewtune {

void ProposalConfig::validate() const {
    if (sigma_walk <= 0.0) throw config_error("proposal: sigma_walk must be positive");
    if (max_chain_len < 1) throw config_error("proposal: max_chain_len must be >= 1");
}

Vec propose(std::span<const double> current, const ProposalConfig& cfg, Rng& rng) {
    Vec next(current.begin(), current.end());
    for (double& v : next) v += cfg.sigma_walk * rng.normal();
    return next;
}

double true_class_probability(std::span<const double> feature, int label,
                              const Prototypes& protos, const ClassifierHead& head) {
    Matrix f(1, feature.size());
    for (std::size_t k = 0; k < feature.size(); ++k) f(0, k) = feature[k];
    Vec p = probabilities(logits(f, protos, head).row(0));
    return p[static_cast<std::size_t>(label)];
}

bool accept(std::span<const double> candidate, std::span<const double> current, int label,
            const Prototypes& protos, const ClassifierHead& head) {
    if (norm(candidate) == 0.0) return false; // cannot be scored by the cosine head
    return true_class_probability(candidate, label, protos, head) >
           true_class_probability(current, label, protos, head);
}

ChainResult run_chain(std::span<const double> origin, std::size_t origin_index, int label,
                      const Prototypes& protos, const ClassifierHead& head,
                      const ProposalConfig& cfg) {
    cfg.validate();
    if (!all_finite(origin)) throw contract_error("run_chain: non-finite origin feature");

    ChainResult out;
    out.origin_index = origin_index;
    Rng rng(cfg.seed);
    Vec current(origin.begin(), origin.end());
    double current_prob = true_class_probability(current, label, protos, head);
    out.terminal_prob = current_prob;
    while (static_cast<int>(out.accepted.size()) < cfg.max_chain_len) {
        Vec candidate = propose(current, cfg, rng);
        if (norm(candidate) == 0.0) {
            out.rejected_count = 1;
            break;
        }
        double candidate_prob = true_class_probability(candidate, label, protos, head);
        if (!(candidate_prob > current_prob)) {
            out.rejected_count = 1;
            break;
        }
        current = std::move(candidate);
        current_prob = candidate_prob;
        out.accepted.push_back(current);
        out.terminal_prob = current_prob;
    }
    return out;
}

double Augmentation::mean_chain_length() const {
    if (chain_lengths.empty()) return 0.0;
    double total = 0.0;
    for (std::size_t l : chain_lengths) total += static_cast<double>(l);
    return total / static_cast<double>(chain_lengths.size());
}

Augmentation augment_support(const Matrix& support_features, const std::vector<int>& labels,
                             const Prototypes& protos, const ClassifierHead& head,
                             const ProposalConfig& cfg) {
    cfg.validate();
    if (support_features.rows() != labels.size())
        throw shape_error("augment_support: features/labels length mismatch");

    std::size_t n = support_features.rows(), d = support_features.cols();
    std::vector<ChainResult> chains(n);
    for (std::size_t i = 0; i < n; ++i) {
        ProposalConfig chain_cfg = cfg;
        chain_cfg.seed = derive_seed(cfg.seed, "chain", i);
        chains[i] = run_chain(support_features.row(i), i, labels[i], protos, head, chain_cfg);
    }

    std::size_t extra = 0;
    for (const auto& ch : chains) extra += ch.accepted.size();

    Augmentation out;
    out.features = Matrix(n + extra, d);
    out.labels.reserve(n + extra);
    out.per_class_counts.assign(protos.num_ways(), 0);
    out.chain_lengths.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) out.features(i, k) = support_features(i, k);
        out.labels.push_back(labels[i]);
    }
    std::size_t row = n;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& ch = chains[i];
        out.chain_lengths.push_back(ch.accepted.size());
        for (const Vec& f : ch.accepted) {
            for (std::size_t k = 0; k < d; ++k) out.features(row, k) = f[k];
            out.labels.push_back(labels[i]);
            ++row;
        }
        out.per_class_counts[static_cast<std::size_t>(labels[i])] +=
            static_cast<int>(ch.accepted.size());
    }
    return out;
}

} // namespace fewtune
