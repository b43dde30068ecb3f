#pragma once

#include <cstdint>
#include <vector>

#include "fewtune/classifier.hpp"
#include "fewtune/matrix.hpp"
#include "fewtune/rng.hpp"

namespace fewtune {

// Isotropic Gaussian proposal around the current chain point. The paper's
// procedure has no step cap; max_chain_len bounds the accepted count per
// chain so runtime stays bounded.
struct ProposalConfig {
    double sigma_walk = 0.1;
    int max_chain_len = 20;
    std::uint64_t seed = 0;

    void validate() const;
};

Vec propose(std::span<const double> current, const ProposalConfig& cfg, Rng& rng);

// True iff the candidate's predicted probability of the true class strictly
// exceeds the current point's under the given prototypes and head.
bool accept(std::span<const double> candidate, std::span<const double> current, int label,
            const Prototypes& protos, const ClassifierHead& head);

double true_class_probability(std::span<const double> feature, int label,
                              const Prototypes& protos, const ClassifierHead& head);

// One greedy random walk: propose from the latest point, keep while the
// true-class probability strictly improves, stop at the first rejection or
// at the cap. Probabilities along `accepted` strictly increase.
struct ChainResult {
    std::size_t origin_index = 0;
    std::vector<Vec> accepted;
    double terminal_prob = 0.0; // p(y | last accepted point), or origin if none
    int rejected_count = 0;     // 1 when the chain stopped on a rejection, else 0
};

ChainResult run_chain(std::span<const double> origin, std::size_t origin_index, int label,
                      const Prototypes& protos, const ClassifierHead& head,
                      const ProposalConfig& cfg);

// One chain per support feature; accepted samples are appended with the
// origin's label. Originals are always retained (they come first, in order).
// The output feeds prototype re-estimation only, not the loss.
struct Augmentation {
    Matrix features;
    std::vector<int> labels;
    std::vector<int> per_class_counts;        // accepted samples per class
    std::vector<std::size_t> chain_lengths;   // accepted count per chain

    double mean_chain_length() const;
};

Augmentation augment_support(const Matrix& support_features, const std::vector<int>& labels,
                             const Prototypes& protos, const ClassifierHead& head,
                             const ProposalConfig& cfg);

} // namespace fewtune
