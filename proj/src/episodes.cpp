#include "fewtune/episodes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fewtune/errors.hpp"
#include "fewtune/rng.hpp"

namespace fewtune {

std::vector<std::vector<std::size_t>> Dataset::indices_by_class() const {
    std::vector<std::vector<std::size_t>> by_class(num_classes);
    for (std::size_t i = 0; i < examples.size(); ++i)
        by_class[static_cast<std::size_t>(examples[i].label)].push_back(i);
    return by_class;
}

Vec AffineMap::apply(std::span<const double> x) const {
    if (is_identity()) return Vec(x.begin(), x.end());
    Vec y(matrix.rows(), 0.0);
    for (std::size_t r = 0; r < matrix.rows(); ++r) {
        double acc = 0.0;
        for (std::size_t c = 0; c < matrix.cols(); ++c) acc += matrix(r, c) * x[c];
        y[r] = acc + (offset.empty() ? 0.0 : offset[r]);
    }
    return y;
}

namespace {

// |det| via Gaussian elimination with partial pivoting; used only to reject
// singular domain-shift maps.
double abs_determinant(const Matrix& m) {
    std::size_t n = m.rows();
    Matrix a = m;
    double det = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a(r, col)) > std::fabs(a(pivot, col))) pivot = r;
        if (std::fabs(a(pivot, col)) < 1e-12) return 0.0;
        if (pivot != col)
            for (std::size_t c = 0; c < n; ++c) std::swap(a(pivot, c), a(col, c));
        det *= a(col, col);
        for (std::size_t r = col + 1; r < n; ++r) {
            double f = a(r, col) / a(col, col);
            for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
        }
    }
    return std::fabs(det);
}

Vec sample_class_mean(std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    Vec mean(dim);
    for (double& v : mean) v = rng.normal();
    return mean;
}

} // namespace

void SyntheticDomainSpec::validate() const {
    if (dim == 0) throw config_error("synthetic spec: dim must be positive");
    if (cluster_spread <= 0.0)
        throw config_error("synthetic spec: cluster_spread must be positive");
    if (contamination_rate < 0.0 || contamination_rate >= 0.5)
        throw config_error("synthetic spec: contamination_rate must be in [0, 0.5)");
    if (!domain_shift.is_identity()) {
        if (domain_shift.matrix.rows() != dim || domain_shift.matrix.cols() != dim)
            throw config_error("synthetic spec: domain_shift matrix must be dim x dim");
        if (abs_determinant(domain_shift.matrix) == 0.0)
            throw config_error("synthetic spec: domain_shift matrix is singular");
        if (!domain_shift.offset.empty() && domain_shift.offset.size() != dim)
            throw config_error("synthetic spec: domain_shift offset has wrong dimension");
    }
}

Dataset generate_base_dataset(const SyntheticDomainSpec& spec, std::size_t samples_per_class,
                              std::uint64_t seed) {
    spec.validate();
    if (samples_per_class < 1)
        throw config_error("generate_base_dataset: samples_per_class must be >= 1");

    Dataset d;
    d.num_classes = spec.num_base_classes;
    d.dim = spec.dim;
    d.examples.reserve(spec.num_base_classes * samples_per_class);
    for (std::size_t c = 0; c < spec.num_base_classes; ++c) {
        Vec mean = sample_class_mean(spec.dim, derive_seed(seed, "base_mean", c));
        Rng rng(derive_seed(seed, "base_sample", c));
        for (std::size_t i = 0; i < samples_per_class; ++i) {
            Vec x(spec.dim);
            for (std::size_t k = 0; k < spec.dim; ++k)
                x[k] = mean[k] + spec.cluster_spread * rng.normal();
            d.examples.push_back({std::move(x), static_cast<int>(c)});
        }
        d.true_means.push_back(std::move(mean));
    }
    return d;
}

Dataset generate_novel_dataset(const SyntheticDomainSpec& spec, std::size_t samples_per_class,
                               std::uint64_t seed) {
    spec.validate();
    if (samples_per_class < 1)
        throw config_error("generate_novel_dataset: samples_per_class must be >= 1");

    Dataset d;
    d.num_classes = spec.num_novel_classes;
    d.dim = spec.dim;
    d.examples.reserve(spec.num_novel_classes * samples_per_class);
    for (std::size_t c = 0; c < spec.num_novel_classes; ++c) {
        Vec mean = sample_class_mean(spec.dim, derive_seed(seed, "novel_mean", c));
        Rng rng(derive_seed(seed, "novel_sample", c));
        for (std::size_t i = 0; i < samples_per_class; ++i) {
            // Strayed points come from the same center at 3x spread, so the
            // population mean is unchanged while single draws can land far out.
            bool stray = rng.uniform() < spec.contamination_rate;
            double sd = (stray ? 3.0 : 1.0) * spec.cluster_spread;
            Vec x(spec.dim);
            for (std::size_t k = 0; k < spec.dim; ++k) x[k] = mean[k] + sd * rng.normal();
            d.examples.push_back({spec.domain_shift.apply(x), static_cast<int>(c)});
        }
        d.true_means.push_back(spec.domain_shift.apply(mean));
    }
    return d;
}

void ShotSpec::validate() const {
    if (lo < 1 || hi < lo)
        throw config_error("shot spec: need 1 <= lo <= hi");
}

Matrix Episode::support_inputs() const {
    Matrix m(support.size(), support.empty() ? 0 : support.front().input.size());
    for (std::size_t i = 0; i < support.size(); ++i)
        for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) = support[i].input[k];
    return m;
}

Matrix Episode::query_inputs() const {
    Matrix m(query.size(), query.empty() ? 0 : query.front().input.size());
    for (std::size_t i = 0; i < query.size(); ++i)
        for (std::size_t k = 0; k < m.cols(); ++k) m(i, k) = query[i].input[k];
    return m;
}

std::vector<int> Episode::support_labels() const {
    std::vector<int> y(support.size());
    for (std::size_t i = 0; i < support.size(); ++i) y[i] = support[i].label;
    return y;
}

std::vector<int> Episode::query_labels() const {
    std::vector<int> y(query.size());
    for (std::size_t i = 0; i < query.size(); ++i) y[i] = query[i].label;
    return y;
}

Episode sample_episode(const Dataset& novel, int num_ways, ShotSpec shots, int query_per_class,
                       std::uint64_t seed) {
    shots.validate();
    if (num_ways < 2) throw config_error("sample_episode: num_ways must be >= 2");
    if (query_per_class < 1)
        throw config_error("sample_episode: query_per_class must be >= 1 (empty query set)");
    if (static_cast<std::size_t>(num_ways) > novel.num_classes)
        throw data_error("sample_episode: dataset has " + std::to_string(novel.num_classes) +
                         " classes, episode needs " + std::to_string(num_ways));

    Rng rng(seed);
    auto by_class = novel.indices_by_class();

    // Choose num_ways distinct classes; draw order defines the relabeling.
    std::vector<int> ids(novel.num_classes);
    for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    for (int i = 0; i < num_ways; ++i) {
        std::size_t j = i + rng.uniform_index(ids.size() - i);
        std::swap(ids[i], ids[j]);
    }

    Episode ep;
    ep.num_ways = num_ways;
    for (int c = 0; c < num_ways; ++c) {
        int orig = ids[c];
        int k = (shots.lo == shots.hi) ? shots.lo : rng.uniform_int(shots.lo, shots.hi);
        auto pool = by_class[static_cast<std::size_t>(orig)];
        std::size_t need = static_cast<std::size_t>(k) + static_cast<std::size_t>(query_per_class);
        if (pool.size() < need)
            throw data_error("sample_episode: class " + std::to_string(orig) + " has " +
                             std::to_string(pool.size()) + " examples, episode needs " +
                             std::to_string(need));
        for (std::size_t i = 0; i + 1 < pool.size(); ++i) {
            std::size_t j = i + rng.uniform_index(pool.size() - i);
            std::swap(pool[i], pool[j]);
        }
        ep.source_classes.push_back(orig);
        ep.shots_per_class.push_back(k);
        for (int i = 0; i < k; ++i) {
            ep.support.push_back({novel.examples[pool[i]].input, c});
            ep.support_src.push_back(pool[i]);
        }
        for (int i = 0; i < query_per_class; ++i) {
            std::size_t idx = pool[static_cast<std::size_t>(k) + static_cast<std::size_t>(i)];
            ep.query.push_back({novel.examples[idx].input, c});
            ep.query_src.push_back(idx);
        }
        if (!novel.true_means.empty())
            ep.true_means.push_back(novel.true_means[static_cast<std::size_t>(orig)]);
    }
    return ep;
}

std::uint64_t episode_fingerprint(const Episode& ep) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        for (int b = 0; b < 8; ++b) {
            h ^= (v >> (8 * b)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    mix(static_cast<std::uint64_t>(ep.num_ways));
    for (int c : ep.source_classes) mix(static_cast<std::uint64_t>(c));
    for (int k : ep.shots_per_class) mix(static_cast<std::uint64_t>(k));
    for (std::size_t i : ep.support_src) mix(i);
    for (std::size_t i : ep.query_src) mix(i);
    return h;
}

namespace {

constexpr std::uint32_t kImageMagic = 0x00000803;
constexpr std::uint32_t kLabelMagic = 0x00000801;

std::uint32_t read_u32_be(std::ifstream& f, const std::string& path, std::size_t offset) {
    unsigned char buf[4];
    f.read(reinterpret_cast<char*>(buf), 4);
    if (f.gcount() != 4)
        throw format_error(path + ": truncated header at byte offset " + std::to_string(offset));
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

std::string hex32(std::uint32_t v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", v);
    return buf;
}

} // namespace

Dataset load_idx_dataset(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw format_error(images_path + ": cannot open");
    std::uint32_t magic = read_u32_be(img, images_path, 0);
    if (magic != kImageMagic)
        throw format_error(images_path + ": expected image magic " + hex32(kImageMagic) +
                           ", got " + hex32(magic) + " at byte offset 0");
    std::uint32_t count = read_u32_be(img, images_path, 4);
    std::uint32_t rows = read_u32_be(img, images_path, 8);
    std::uint32_t cols = read_u32_be(img, images_path, 12);
    std::size_t pixels = std::size_t(count) * rows * cols;
    std::vector<unsigned char> raw(pixels);
    img.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels));
    if (static_cast<std::size_t>(img.gcount()) != pixels)
        throw format_error(images_path + ": truncated image payload at byte offset " +
                           std::to_string(16 + img.gcount()) + " (expected " +
                           std::to_string(16 + pixels) + " bytes)");

    std::ifstream lbl(labels_path, std::ios::binary);
    if (!lbl) throw format_error(labels_path + ": cannot open");
    std::uint32_t lmagic = read_u32_be(lbl, labels_path, 0);
    if (lmagic != kLabelMagic)
        throw format_error(labels_path + ": expected label magic " + hex32(kLabelMagic) +
                           ", got " + hex32(lmagic) + " at byte offset 0");
    std::uint32_t lcount = read_u32_be(lbl, labels_path, 4);
    if (lcount != count)
        throw format_error(labels_path + ": image/label count mismatch (" +
                           std::to_string(count) + " images, " + std::to_string(lcount) +
                           " labels)");
    std::vector<unsigned char> labels(lcount);
    lbl.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(lcount));
    if (static_cast<std::size_t>(lbl.gcount()) != lcount)
        throw format_error(labels_path + ": truncated label payload at byte offset " +
                           std::to_string(8 + lbl.gcount()) + " (expected " +
                           std::to_string(8 + std::size_t(lcount)) + " bytes)");

    Dataset d;
    d.dim = std::size_t(rows) * cols;
    d.examples.reserve(count);
    int max_label = -1;
    for (std::uint32_t i = 0; i < count; ++i) {
        Vec x(d.dim);
        const unsigned char* px = raw.data() + std::size_t(i) * d.dim;
        for (std::size_t k = 0; k < d.dim; ++k) x[k] = px[k] / 255.0;
        int y = labels[i];
        max_label = std::max(max_label, y);
        d.examples.push_back({std::move(x), y});
    }
    d.num_classes = static_cast<std::size_t>(max_label + 1);
    return d;
}

Dataset filter_classes(const Dataset& d, const std::vector<int>& keep) {
    std::vector<int> relabel(d.num_classes, -1);
    for (std::size_t i = 0; i < keep.size(); ++i) {
        if (keep[i] < 0 || static_cast<std::size_t>(keep[i]) >= d.num_classes)
            throw config_error("filter_classes: class " + std::to_string(keep[i]) +
                               " not in dataset");
        relabel[static_cast<std::size_t>(keep[i])] = static_cast<int>(i);
    }
    Dataset out;
    out.num_classes = keep.size();
    out.dim = d.dim;
    for (const auto& ex : d.examples) {
        int nl = relabel[static_cast<std::size_t>(ex.label)];
        if (nl >= 0) out.examples.push_back({ex.input, nl});
    }
    if (!d.true_means.empty())
        for (int c : keep) out.true_means.push_back(d.true_means[static_cast<std::size_t>(c)]);
    return out;
}

void save_delimited(const Dataset& d, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw format_error(path + ": cannot open for writing");
    char buf[32];
    for (const auto& ex : d.examples) {
        f << ex.label;
        for (double v : ex.input) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            f << ',' << buf;
        }
        f << '\n';
    }
}

Dataset load_delimited(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw format_error(path + ": cannot open");
    Dataset d;
    std::string line;
    std::size_t lineno = 0;
    int max_label = -1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string field;
        if (!std::getline(ss, field, ','))
            throw format_error(path + ":" + std::to_string(lineno) + ": missing label");
        LabeledExample ex;
        try {
            ex.label = std::stoi(field);
        } catch (const std::exception&) {
            throw format_error(path + ":" + std::to_string(lineno) + ": bad label '" + field + "'");
        }
        while (std::getline(ss, field, ',')) {
            try {
                ex.input.push_back(std::stod(field));
            } catch (const std::exception&) {
                throw format_error(path + ":" + std::to_string(lineno) + ": bad value '" + field +
                                   "'");
            }
        }
        if (d.dim == 0) d.dim = ex.input.size();
        if (ex.input.size() != d.dim)
            throw format_error(path + ":" + std::to_string(lineno) +
                               ": inconsistent input dimension");
        max_label = std::max(max_label, ex.label);
        d.examples.push_back(std::move(ex));
    }
    d.num_classes = static_cast<std::size_t>(max_label + 1);
    return d;
}

} // namespace fewtune
