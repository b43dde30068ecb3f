#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fewtune/matrix.hpp"

namespace fewtune {

struct LabeledExample {
    Vec input;  // raw input vector: flattened pixels in [0,1] or synthetic coordinates
    int label = 0;
};

struct Dataset {
    std::vector<LabeledExample> examples;
    std::size_t num_classes = 0;
    std::size_t dim = 0;
    // Population class means in raw space, known for synthetic data only
    // (post domain shift for novel classes). Empty otherwise.
    std::vector<Vec> true_means;

    std::vector<std::vector<std::size_t>> indices_by_class() const;
};

// y = matrix * x + offset. An empty matrix means identity with zero offset.
struct AffineMap {
    Matrix matrix;
    Vec offset;

    bool is_identity() const { return matrix.empty(); }
    Vec apply(std::span<const double> x) const;
};

// Synthetic benchmark: isotropic Gaussian clusters per class. Novel classes
// are pushed through an affine domain shift, and each novel example is,
// with probability contamination_rate, drawn at 3x the cluster spread to
// produce strayed points.
struct SyntheticDomainSpec {
    std::size_t dim = 2;
    std::size_t num_base_classes = 2;
    std::size_t num_novel_classes = 2;
    double cluster_spread = 0.1;
    AffineMap domain_shift;          // novel classes only
    double contamination_rate = 0.0; // in [0, 0.5)

    void validate() const; // throws config_error
};

Dataset generate_base_dataset(const SyntheticDomainSpec& spec, std::size_t samples_per_class,
                              std::uint64_t seed);
Dataset generate_novel_dataset(const SyntheticDomainSpec& spec, std::size_t samples_per_class,
                               std::uint64_t seed);

// Per-class support size. lo == hi is the fixed-shot setting; otherwise each
// class's shot count is drawn uniformly from [lo, hi].
struct ShotSpec {
    int lo = 1;
    int hi = 1;

    static ShotSpec fixed(int k) { return {k, k}; }
    void validate() const;
};

struct Episode {
    std::vector<LabeledExample> support;  // labels relabeled to [0, num_ways)
    std::vector<LabeledExample> query;
    int num_ways = 0;
    std::vector<int> shots_per_class;
    std::vector<int> source_classes;          // original dataset class ids
    std::vector<std::size_t> support_src;     // dataset indices, support order
    std::vector<std::size_t> query_src;       // dataset indices, query order
    std::vector<Vec> true_means;              // relabeled, when the dataset has them

    std::size_t support_size() const { return support.size(); }
    std::size_t query_size() const { return query.size(); }
    Matrix support_inputs() const;
    Matrix query_inputs() const;
    std::vector<int> support_labels() const;
    std::vector<int> query_labels() const;
};

Episode sample_episode(const Dataset& novel, int num_ways, ShotSpec shots, int query_per_class,
                       std::uint64_t seed);

// Order- and content-sensitive digest of the episode's provenance, used to
// assert that paired runs consumed identical episode streams.
std::uint64_t episode_fingerprint(const Episode& ep);

// IDX binary ingestion (big-endian, magic 0x00000803 for images and
// 0x00000801 for labels). Pixel bytes are scaled to [0,1].
Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path);

// Keep only the listed classes, relabeled to [0, keep.size()) in list order.
Dataset filter_classes(const Dataset& d, const std::vector<int>& keep);

// One example per line: label, then raw input values, comma separated.
void save_delimited(const Dataset& d, const std::string& path);
Dataset load_delimited(const std::string& path);

} // namespace fewtune
