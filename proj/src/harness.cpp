#include "fewtune/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "fewtune/errors.hpp"
#include "fewtune/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace fewtune {

const char kArtifactVersion[] = "fewtune 0.1.0";

namespace {

// Shortest round-trip decimal form; used for all text artifacts so replay
// can regenerate them byte for byte.
std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, ptr);
}

std::string format_hex(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "0x%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::uint64_t parse_hex(const std::string& s) {
    return std::stoull(s, nullptr, 16);
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw config_error("expected true/false, got '" + v + "'");
}

double parse_double(const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw config_error("expected a number, got '" + v + "'");
    }
}

long long parse_int(const std::string& v) {
    try {
        std::size_t pos = 0;
        long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw config_error("expected an integer, got '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& v) {
    try {
        std::size_t pos = 0;
        std::uint64_t i = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw config_error("expected an unsigned integer, got '" + v + "'");
    }
}

template <typename T>
std::vector<T> parse_list(const std::string& v, T (*one)(const std::string&)) {
    std::vector<T> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(one(item));
    }
    return out;
}

int parse_int32(const std::string& v) {
    return static_cast<int>(parse_int(v));
}
std::size_t parse_size(const std::string& v) {
    long long i = parse_int(v);
    if (i < 0) throw config_error("expected a non-negative integer, got '" + v + "'");
    return static_cast<std::size_t>(i);
}

ShotSpec parse_shots(const std::string& v) {
    std::size_t colon = v.find(':');
    ShotSpec s;
    if (colon == std::string::npos) {
        s.lo = s.hi = parse_int32(v);
    } else {
        s.lo = parse_int32(trim(v.substr(0, colon)));
        s.hi = parse_int32(trim(v.substr(colon + 1)));
    }
    return s;
}

std::string shots_to_string(ShotSpec s) {
    if (s.lo == s.hi) return std::to_string(s.lo);
    return std::to_string(s.lo) + ":" + std::to_string(s.hi);
}

template <typename T>
std::string list_to_string(const std::vector<T>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

using Setter = std::function<void(HarnessConfig&, const std::string&)>;
using Getter = std::function<std::string(const HarnessConfig&)>;

struct KeyEntry {
    Setter set;
    Getter get;
};

const std::map<std::string, KeyEntry>& key_registry() {
    static const std::map<std::string, KeyEntry> reg = {
        {"dataset",
         {[](HarnessConfig& c, const std::string& v) { c.dataset = v; },
          [](const HarnessConfig& c) { return c.dataset; }}},
        {"workers",
         {[](HarnessConfig& c, const std::string& v) { c.workers = parse_int32(v); },
          [](const HarnessConfig& c) { return std::to_string(c.workers); }}},
        {"seed",
         {[](HarnessConfig& c, const std::string& v) { c.seed = parse_u64(v); },
          [](const HarnessConfig& c) { return std::to_string(c.seed); }}},
        {"synthetic.dim",
         {[](HarnessConfig& c, const std::string& v) { c.syn_dim = parse_size(v); },
          [](const HarnessConfig& c) { return std::to_string(c.syn_dim); }}},
        {"synthetic.base_classes",
         {[](HarnessConfig& c, const std::string& v) { c.syn_base_classes = parse_size(v); },
          [](const HarnessConfig& c) { return std::to_string(c.syn_base_classes); }}},
        {"synthetic.novel_classes",
         {[](HarnessConfig& c, const std::string& v) { c.syn_novel_classes = parse_size(v); },
          [](const HarnessConfig& c) { return std::to_string(c.syn_novel_classes); }}},
        {"synthetic.spread",
         {[](HarnessConfig& c, const std::string& v) { c.syn_spread = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.syn_spread); }}},
        {"synthetic.contamination",
         {[](HarnessConfig& c, const std::string& v) { c.syn_contamination = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.syn_contamination); }}},
        {"synthetic.shift_strength",
         {[](HarnessConfig& c, const std::string& v) { c.syn_shift_strength = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.syn_shift_strength); }}},
        {"synthetic.shift_offset",
         {[](HarnessConfig& c, const std::string& v) { c.syn_shift_offset = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.syn_shift_offset); }}},
        {"synthetic.base_samples",
         {[](HarnessConfig& c, const std::string& v) { c.syn_base_samples = parse_size(v); },
          [](const HarnessConfig& c) { return std::to_string(c.syn_base_samples); }}},
        {"synthetic.novel_samples",
         {[](HarnessConfig& c, const std::string& v) { c.syn_novel_samples = parse_size(v); },
          [](const HarnessConfig& c) { return std::to_string(c.syn_novel_samples); }}},
        {"idx.images",
         {[](HarnessConfig& c, const std::string& v) { c.idx_images = v; },
          [](const HarnessConfig& c) { return c.idx_images; }}},
        {"idx.labels",
         {[](HarnessConfig& c, const std::string& v) { c.idx_labels = v; },
          [](const HarnessConfig& c) { return c.idx_labels; }}},
        {"idx.novel_classes",
         {[](HarnessConfig& c, const std::string& v) {
              c.idx_novel_classes = parse_list<int>(v, parse_int32);
          },
          [](const HarnessConfig& c) { return list_to_string(c.idx_novel_classes); }}},
        {"backbone.checkpoint",
         {[](HarnessConfig& c, const std::string& v) { c.backbone_checkpoint = v; },
          [](const HarnessConfig& c) { return c.backbone_checkpoint; }}},
        {"backbone.hidden",
         {[](HarnessConfig& c, const std::string& v) {
              c.backbone_hidden = parse_list<std::size_t>(v, parse_size);
          },
          [](const HarnessConfig& c) { return list_to_string(c.backbone_hidden); }}},
        {"backbone.embed_dim",
         {[](HarnessConfig& c, const std::string& v) { c.backbone_embed_dim = parse_size(v); },
          [](const HarnessConfig& c) { return std::to_string(c.backbone_embed_dim); }}},
        {"backbone.identity",
         {[](HarnessConfig& c, const std::string& v) { c.backbone_identity = parse_bool(v); },
          [](const HarnessConfig& c) { return c.backbone_identity ? "true" : "false"; }}},
        {"pretrain.lr",
         {[](HarnessConfig& c, const std::string& v) { c.pretrain.lr = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.pretrain.lr); }}},
        {"pretrain.momentum",
         {[](HarnessConfig& c, const std::string& v) { c.pretrain.momentum = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.pretrain.momentum); }}},
        {"pretrain.epochs",
         {[](HarnessConfig& c, const std::string& v) { c.pretrain.epochs = parse_int32(v); },
          [](const HarnessConfig& c) { return std::to_string(c.pretrain.epochs); }}},
        {"pretrain.batch",
         {[](HarnessConfig& c, const std::string& v) { c.pretrain.batch_size = parse_size(v); },
          [](const HarnessConfig& c) { return std::to_string(c.pretrain.batch_size); }}},
        {"episode.ways",
         {[](HarnessConfig& c, const std::string& v) { c.episode_ways = parse_int32(v); },
          [](const HarnessConfig& c) { return std::to_string(c.episode_ways); }}},
        {"episode.shots",
         {[](HarnessConfig& c, const std::string& v) { c.episode_shots = parse_shots(v); },
          [](const HarnessConfig& c) { return shots_to_string(c.episode_shots); }}},
        {"episode.queries",
         {[](HarnessConfig& c, const std::string& v) { c.episode_queries = parse_int32(v); },
          [](const HarnessConfig& c) { return std::to_string(c.episode_queries); }}},
        {"episode.count",
         {[](HarnessConfig& c, const std::string& v) { c.episode_count = parse_int32(v); },
          [](const HarnessConfig& c) { return std::to_string(c.episode_count); }}},
        {"finetune.lr",
         {[](HarnessConfig& c, const std::string& v) { c.finetune.lr = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.finetune.lr); }}},
        {"finetune.epochs",
         {[](HarnessConfig& c, const std::string& v) { c.finetune.epochs = parse_int32(v); },
          [](const HarnessConfig& c) { return std::to_string(c.finetune.epochs); }}},
        {"finetune.backbone",
         {[](HarnessConfig& c, const std::string& v) {
              c.finetune.flags.finetune_backbone = parse_bool(v);
          },
          [](const HarnessConfig& c) {
              return c.finetune.flags.finetune_backbone ? "true" : "false";
          }}},
        {"finetune.scale_vector",
         {[](HarnessConfig& c, const std::string& v) {
              c.finetune.flags.scale_vector = parse_bool(v);
          },
          [](const HarnessConfig& c) { return c.finetune.flags.scale_vector ? "true" : "false"; }}},
        {"finetune.feature_norm",
         {[](HarnessConfig& c, const std::string& v) {
              c.finetune.flags.feature_norm = parse_bool(v);
          },
          [](const HarnessConfig& c) { return c.finetune.flags.feature_norm ? "true" : "false"; }}},
        {"finetune.selected_sampling",
         {[](HarnessConfig& c, const std::string& v) {
              c.finetune.flags.selected_sampling = parse_bool(v);
          },
          [](const HarnessConfig& c) {
              return c.finetune.flags.selected_sampling ? "true" : "false";
          }}},
        {"finetune.freeze_temperature",
         {[](HarnessConfig& c, const std::string& v) {
              c.finetune.freeze_temperature = parse_bool(v);
          },
          [](const HarnessConfig& c) { return c.finetune.freeze_temperature ? "true" : "false"; }}},
        {"finetune.refit_stats",
         {[](HarnessConfig& c, const std::string& v) {
              c.finetune.refit_stats_each_epoch = parse_bool(v);
          },
          [](const HarnessConfig& c) {
              return c.finetune.refit_stats_each_epoch ? "true" : "false";
          }}},
        {"finetune.temperature",
         {[](HarnessConfig& c, const std::string& v) { c.finetune.tau_init = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.finetune.tau_init); }}},
        {"finetune.trace_query",
         {[](HarnessConfig& c, const std::string& v) { c.finetune.trace_query = parse_bool(v); },
          [](const HarnessConfig& c) { return c.finetune.trace_query ? "true" : "false"; }}},
        {"ss.sigma_walk",
         {[](HarnessConfig& c, const std::string& v) { c.finetune.sigma_walk = parse_double(v); },
          [](const HarnessConfig& c) { return format_double(c.finetune.sigma_walk); }}},
        {"ss.max_chain_len",
         {[](HarnessConfig& c, const std::string& v) {
              c.finetune.max_chain_len = parse_int32(v);
          },
          [](const HarnessConfig& c) { return std::to_string(c.finetune.max_chain_len); }}},
        {"shots.list",
         {[](HarnessConfig& c, const std::string& v) {
              c.shot_list = parse_list<int>(v, parse_int32);
          },
          [](const HarnessConfig& c) { return list_to_string(c.shot_list); }}},
    };
    return reg;
}

} // namespace

void apply_override(HarnessConfig& cfg, const std::string& key, const std::string& value) {
    auto it = key_registry().find(key);
    if (it == key_registry().end()) throw config_error("unknown config key '" + key + "'");
    it->second.set(cfg, value);
}

HarnessConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error(path + ": cannot open config file");
    HarnessConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error(path + ":" + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        try {
            apply_override(cfg, key, value);
        } catch (const config_error& e) {
            throw config_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

std::map<std::string, std::string> config_echo(const HarnessConfig& cfg) {
    std::map<std::string, std::string> out;
    for (const auto& [key, entry] : key_registry()) out[key] = entry.get(cfg);
    return out;
}

void HarnessConfig::validate() const {
    if (dataset != "synthetic" && dataset != "idx")
        throw config_error("dataset must be 'synthetic' or 'idx', got '" + dataset + "'");
    if (dataset == "idx") {
        if (idx_images.empty() || idx_labels.empty())
            throw config_error("idx dataset requires idx.images and idx.labels");
        if (!fs::exists(idx_images)) throw config_error(idx_images + ": path does not exist");
        if (!fs::exists(idx_labels)) throw config_error(idx_labels + ": path does not exist");
        if (idx_novel_classes.size() < 2)
            throw config_error("idx.novel_classes needs at least two classes");
    } else {
        if (syn_spread <= 0.0) throw config_error("synthetic.spread must be positive");
        if (syn_contamination < 0.0 || syn_contamination >= 0.5)
            throw config_error("synthetic.contamination must be in [0, 0.5)");
        if (syn_novel_classes < static_cast<std::size_t>(episode_ways))
            throw config_error("synthetic.novel_classes must be >= episode.ways");
    }
    if (!backbone_checkpoint.empty() && !fs::exists(backbone_checkpoint))
        throw config_error(backbone_checkpoint + ": path does not exist");
    if (episode_ways < 2) throw config_error("episode.ways must be >= 2");
    if (episode_queries < 1) throw config_error("episode.queries must be >= 1 (empty query set)");
    if (episode_count < 1) throw config_error("episode.count must be >= 1");
    episode_shots.validate();
    finetune.validate();
    if (workers < 1) throw config_error("workers must be >= 1");
    if (pretrain.lr < 0.0) throw config_error("pretrain.lr must be >= 0");
    if (pretrain.epochs < 1) throw config_error("pretrain.epochs must be >= 1");
    for (int s : shot_list)
        if (s < 1) throw config_error("shots.list entries must be >= 1");
}

Aggregate aggregate(const std::vector<double>& values) {
    if (values.size() < 2)
        throw data_error("aggregate: need at least 2 values, got " +
                         std::to_string(values.size()));
    double n = static_cast<double>(values.size());
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    double sd = std::sqrt(ss / (n - 1.0));
    return {mean, 1.96 * sd / std::sqrt(n)};
}

namespace {

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    int w = std::max(1, std::min<int>(workers, static_cast<int>(n)));
    if (w == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(w));
    for (int t = 0; t < w; ++t)
        threads.emplace_back([&] {
            for (std::size_t i; (i = next.fetch_add(1)) < n;) fn(i);
        });
    for (auto& th : threads) th.join();
}

// Random orthogonal basis via Gram-Schmidt on a Gaussian matrix, then
// A = Q diag(exp(strength * u)) Q^T with u ~ U(-1,1): a symmetric positive
// definite anisotropic scaling, hence always nonsingular.
AffineMap build_domain_shift(std::size_t dim, double strength, double offset_mag,
                             std::uint64_t seed) {
    if (strength == 0.0 && offset_mag == 0.0) return {};
    Rng rng(seed);
    Matrix q(dim, dim);
    for (std::size_t col = 0; col < dim; ++col) {
        Vec v(dim);
        while (true) {
            for (double& x : v) x = rng.normal();
            for (std::size_t prev = 0; prev < col; ++prev) {
                double proj = 0.0;
                for (std::size_t r = 0; r < dim; ++r) proj += v[r] * q(r, prev);
                for (std::size_t r = 0; r < dim; ++r) v[r] -= proj * q(r, prev);
            }
            double nv = norm(v);
            if (nv > 1e-8) {
                for (std::size_t r = 0; r < dim; ++r) q(r, col) = v[r] / nv;
                break;
            }
        }
    }
    Vec lambda(dim);
    for (double& l : lambda) l = std::exp(strength * rng.uniform(-1.0, 1.0));
    AffineMap map;
    map.matrix = Matrix(dim, dim, 0.0);
    for (std::size_t r = 0; r < dim; ++r)
        for (std::size_t c = 0; c < dim; ++c) {
            double acc = 0.0;
            for (std::size_t k = 0; k < dim; ++k) acc += q(r, k) * lambda[k] * q(c, k);
            map.matrix(r, c) = acc;
        }
    map.offset.assign(dim, 0.0);
    for (double& b : map.offset) b = offset_mag * rng.normal();
    return map;
}

SyntheticDomainSpec synthetic_spec(const HarnessConfig& cfg) {
    SyntheticDomainSpec spec;
    spec.dim = cfg.syn_dim;
    spec.num_base_classes = cfg.syn_base_classes;
    spec.num_novel_classes = cfg.syn_novel_classes;
    spec.cluster_spread = cfg.syn_spread;
    spec.contamination_rate = cfg.syn_contamination;
    spec.domain_shift = build_domain_shift(cfg.syn_dim, cfg.syn_shift_strength,
                                           cfg.syn_shift_offset, derive_seed(cfg.seed, "shift"));
    return spec;
}

Dataset prepare_base_dataset(const HarnessConfig& cfg) {
    if (cfg.dataset == "synthetic")
        return generate_base_dataset(synthetic_spec(cfg), cfg.syn_base_samples,
                                     derive_seed(cfg.seed, "base"));
    Dataset all = load_idx_dataset(cfg.idx_images, cfg.idx_labels);
    std::set<int> novel(cfg.idx_novel_classes.begin(), cfg.idx_novel_classes.end());
    std::vector<int> base_classes;
    for (std::size_t c = 0; c < all.num_classes; ++c)
        if (!novel.count(static_cast<int>(c))) base_classes.push_back(static_cast<int>(c));
    return filter_classes(all, base_classes);
}

} // namespace

PreparedRun prepare_run(const HarnessConfig& cfg) {
    cfg.validate();
    PreparedRun run;
    run.cfg = cfg;
    if (cfg.dataset == "synthetic") {
        run.novel = generate_novel_dataset(synthetic_spec(cfg), cfg.syn_novel_samples,
                                           derive_seed(cfg.seed, "novel"));
    } else {
        Dataset all = load_idx_dataset(cfg.idx_images, cfg.idx_labels);
        run.novel = filter_classes(all, cfg.idx_novel_classes);
    }
    if (static_cast<std::size_t>(cfg.episode_ways) > run.novel.num_classes)
        throw config_error("episode.ways exceeds the number of novel classes");

    if (!cfg.backbone_checkpoint.empty()) {
        run.backbone = load_checkpoint(cfg.backbone_checkpoint);
    } else if (cfg.backbone_identity) {
        run.backbone = make_identity(run.novel.dim);
    } else {
        Dataset base = prepare_base_dataset(cfg);
        MlpParams init = make_mlp(base.dim, cfg.backbone_hidden, cfg.backbone_embed_dim,
                                  derive_seed(cfg.seed, "init"));
        PretrainConfig pc = cfg.pretrain;
        pc.seed = derive_seed(cfg.seed, "pretrain");
        run.backbone = pretrain(init, base, pc);
    }
    if (run.backbone.input_dim() != run.novel.dim)
        throw config_error("backbone input dimension does not match the dataset");
    return run;
}

std::vector<double> RunRecord::included_accuracies() const {
    std::vector<double> out;
    for (const auto& er : episodes)
        if (!er.failed) out.push_back(er.query_acc);
    return out;
}

namespace {

std::vector<CurvePoint> compute_curves(const std::vector<EpisodeRecord>& episodes) {
    std::size_t epochs = 0;
    for (const auto& er : episodes)
        if (!er.failed) epochs = std::max(epochs, er.support_loss_curve.size());
    std::vector<CurvePoint> curves(epochs);
    std::size_t included = 0;
    for (const auto& er : episodes) {
        if (er.failed) continue;
        ++included;
        for (std::size_t e = 0; e < epochs; ++e) {
            curves[e].support_loss += er.support_loss_curve[e];
            curves[e].support_acc += er.support_acc_curve[e];
            curves[e].query_loss += er.query_loss_curve[e];
            curves[e].query_acc += er.query_acc_curve[e];
        }
    }
    if (included > 0)
        for (auto& c : curves) {
            double n = static_cast<double>(included);
            c.support_loss /= n;
            c.support_acc /= n;
            c.query_loss /= n;
            c.query_acc /= n;
        }
    return curves;
}

} // namespace

RunRecord run_row(const PreparedRun& run, const AblationFlags& flags, const std::string& label,
                  bool freeze_temperature_row) {
    const HarnessConfig& cfg = run.cfg;
    RunRecord rec;
    rec.row = label;
    rec.episodes.resize(static_cast<std::size_t>(cfg.episode_count));
    parallel_for(rec.episodes.size(), cfg.workers, [&](std::size_t i) {
        EpisodeRecord& er = rec.episodes[i];
        er.index = static_cast<int>(i);
        er.seed = derive_seed(cfg.seed, "episode", i);
        try {
            Episode ep = sample_episode(run.novel, cfg.episode_ways, cfg.episode_shots,
                                        cfg.episode_queries, er.seed);
            er.fingerprint = episode_fingerprint(ep);
            er.shots = ep.shots_per_class;
            er.source_classes = ep.source_classes;
            FinetuneConfig fc = cfg.finetune;
            fc.flags = flags;
            fc.freeze_temperature = cfg.finetune.freeze_temperature || freeze_temperature_row;
            fc.seed = derive_seed(cfg.seed, "finetune", i);
            FinetuneResult fr = finetune_episode(ep, run.backbone, fc);
            er.query_acc = fr.query_accuracy;
            er.query_loss = fr.query_loss;
            for (const auto& t : fr.trace) {
                er.support_loss_curve.push_back(t.support_loss);
                er.support_acc_curve.push_back(t.support_acc);
                er.query_loss_curve.push_back(t.query_loss);
                er.query_acc_curve.push_back(t.query_acc);
                er.mean_chain_curve.push_back(t.mean_chain_length);
            }
        } catch (const std::exception& e) {
            er.failed = true;
            er.error = e.what();
        }
    });
    for (const auto& er : rec.episodes)
        if (er.failed) ++rec.excluded;
    rec.query_acc = aggregate(rec.included_accuracies());
    rec.curves = compute_curves(rec.episodes);
    return rec;
}

std::vector<RunRecord> run_ablation_suite(const PreparedRun& run) {
    std::vector<RunRecord> rows;
    // Row "none" freezes the temperature so it matches the untouched
    // prototype baseline exactly: nothing may update.
    rows.push_back(run_row(run, AblationFlags{}, "none", true));
    rows.push_back(run_row(run, AblationFlags{true, false, false, false}, "B", false));
    rows.push_back(run_row(run, AblationFlags{true, false, true, false}, "B+FN", false));
    rows.push_back(run_row(run, AblationFlags{true, true, true, false}, "B+FN+S", false));
    rows.push_back(run_row(run, AblationFlags{true, true, true, true}, "B+FN+S+SS", false));
    return rows;
}

namespace {

Aggregate paired_gain(const RunRecord& a, const RunRecord& b) {
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.episodes.size(); ++i)
        if (!a.episodes[i].failed && !b.episodes[i].failed)
            diffs.push_back(a.episodes[i].query_acc - b.episodes[i].query_acc);
    return aggregate(diffs);
}

} // namespace

std::vector<ShotSweepCell> run_shot_sweep(const PreparedRun& run, const std::vector<int>& shots) {
    if (shots.empty()) throw config_error("shot sweep: shot list is empty");
    std::vector<ShotSweepCell> cells;
    for (int k : shots) {
        PreparedRun cell = run;
        cell.cfg.episode_shots = ShotSpec::fixed(k);
        std::string prefix = "shot" + std::to_string(k) + "_";
        ShotSweepCell sc;
        sc.shot = k;
        sc.baseline = run_row(cell, AblationFlags{}, prefix + "none", true);
        sc.plain = run_row(cell, AblationFlags{true, false, false, false}, prefix + "B", false);
        sc.full = run_row(cell, AblationFlags{true, true, true, true}, prefix + "B+FN+S+SS", false);
        sc.gain_full_vs_baseline = paired_gain(sc.full, sc.baseline);
        sc.gain_full_vs_plain = paired_gain(sc.full, sc.plain);
        cells.push_back(std::move(sc));
    }
    return cells;
}

namespace {

json episode_to_json(const EpisodeRecord& er) {
    json j;
    j["index"] = er.index;
    j["seed"] = format_hex(er.seed);
    j["failed"] = er.failed;
    if (er.failed) {
        j["error"] = er.error;
        return j;
    }
    j["fingerprint"] = format_hex(er.fingerprint);
    j["shots"] = er.shots;
    j["source_classes"] = er.source_classes;
    j["query_acc"] = er.query_acc;
    j["query_loss"] = er.query_loss;
    j["support_loss_curve"] = er.support_loss_curve;
    j["support_acc_curve"] = er.support_acc_curve;
    j["query_loss_curve"] = er.query_loss_curve;
    j["query_acc_curve"] = er.query_acc_curve;
    j["mean_chain_curve"] = er.mean_chain_curve;
    return j;
}

EpisodeRecord episode_from_json(const json& j) {
    EpisodeRecord er;
    er.index = j.at("index").get<int>();
    er.seed = parse_hex(j.at("seed").get<std::string>());
    er.failed = j.at("failed").get<bool>();
    if (er.failed) {
        er.error = j.at("error").get<std::string>();
        return er;
    }
    er.fingerprint = parse_hex(j.at("fingerprint").get<std::string>());
    er.shots = j.at("shots").get<std::vector<int>>();
    er.source_classes = j.at("source_classes").get<std::vector<int>>();
    er.query_acc = j.at("query_acc").get<double>();
    er.query_loss = j.at("query_loss").get<double>();
    auto curve = [&](const char* key) {
        std::vector<double> out;
        for (const auto& v : j.at(key))
            out.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                      : v.get<double>());
        return out;
    };
    er.support_loss_curve = curve("support_loss_curve");
    er.support_acc_curve = curve("support_acc_curve");
    er.query_loss_curve = curve("query_loss_curve");
    er.query_acc_curve = curve("query_acc_curve");
    er.mean_chain_curve = curve("mean_chain_curve");
    return er;
}

std::string curves_csv(const std::vector<CurvePoint>& curves) {
    std::string out = "epoch,support_loss,support_acc,query_loss,query_acc\n";
    for (std::size_t e = 0; e < curves.size(); ++e) {
        out += std::to_string(e + 1);
        out += ',';
        out += format_double(curves[e].support_loss);
        out += ',';
        out += format_double(curves[e].support_acc);
        out += ',';
        out += format_double(curves[e].query_loss);
        out += ',';
        out += format_double(curves[e].query_acc);
        out += '\n';
    }
    return out;
}

std::string episodes_filename(const std::string& row) {
    return "episodes_" + row + ".jsonl";
}
std::string curves_filename(const std::string& row) {
    return "curves_" + row + ".csv";
}

void write_text_file(const fs::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw format_error(path.string() + ": cannot open for writing");
    f << content;
}

} // namespace

std::string create_run_directory(const std::string& out_dir) {
    fs::create_directories(out_dir);
    for (int i = 0;; ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "run-%03d", i);
        fs::path dir = fs::path(out_dir) / name;
        if (!fs::exists(dir)) {
            fs::create_directory(dir);
            return dir.string();
        }
    }
}

void write_run_records(const std::string& run_dir, const std::string& command,
                       const HarnessConfig& cfg, const std::vector<RunRecord>& records,
                       const std::vector<ShotSweepCell>* sweep) {
    json summary;
    summary["version"] = kArtifactVersion;
    summary["command"] = command;
    summary["config"] = config_echo(cfg);
    json rows = json::array();
    for (const auto& rec : records) {
        std::string jsonl;
        for (const auto& er : rec.episodes) {
            jsonl += episode_to_json(er).dump();
            jsonl += '\n';
        }
        write_text_file(fs::path(run_dir) / episodes_filename(rec.row), jsonl);
        write_text_file(fs::path(run_dir) / curves_filename(rec.row), curves_csv(rec.curves));
        json r;
        r["row"] = rec.row;
        r["episodes"] = rec.episodes.size();
        r["excluded"] = rec.excluded;
        r["mean_query_acc"] = rec.query_acc.mean;
        r["ci95"] = rec.query_acc.ci95;
        r["episodes_file"] = episodes_filename(rec.row);
        r["curves_file"] = curves_filename(rec.row);
        rows.push_back(r);
    }
    summary["rows"] = rows;
    if (sweep) {
        json cells = json::array();
        for (const auto& sc : *sweep) {
            json c;
            c["shot"] = sc.shot;
            c["gain_full_vs_baseline"] = {{"mean", sc.gain_full_vs_baseline.mean},
                                          {"ci95", sc.gain_full_vs_baseline.ci95}};
            c["gain_full_vs_plain"] = {{"mean", sc.gain_full_vs_plain.mean},
                                       {"ci95", sc.gain_full_vs_plain.ci95}};
            cells.push_back(c);
        }
        summary["sweep"] = cells;
    }
    write_text_file(fs::path(run_dir) / "summary.json", summary.dump(2) + "\n");
}

namespace {

std::string read_text_file(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw format_error(path.string() + ": cannot open");
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

} // namespace

void replay_verify(const std::string& run_dir) {
    fs::path dir(run_dir);
    json summary;
    try {
        summary = json::parse(read_text_file(dir / "summary.json"));
    } catch (const json::exception& e) {
        throw format_error(run_dir + "/summary.json: parse error: " + e.what());
    }
    if (!summary.contains("rows")) return; // nothing episodic to verify
    for (const auto& row : summary["rows"]) {
        std::string label = row.at("row").get<std::string>();
        auto fail = [&](const std::string& field, const std::string& detail) {
            throw format_error("replay: " + run_dir + " row '" + label + "' field '" + field +
                               "' mismatch: " + detail);
        };
        std::vector<EpisodeRecord> episodes;
        std::istringstream lines(
            read_text_file(dir / row.at("episodes_file").get<std::string>()));
        std::string line;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            try {
                episodes.push_back(episode_from_json(json::parse(line)));
            } catch (const json::exception& e) {
                throw format_error(run_dir + ": bad episode record in row '" + label +
                                   "': " + e.what());
            }
        }
        if (episodes.size() != row.at("episodes").get<std::size_t>())
            fail("episodes", "stored " + std::to_string(row.at("episodes").get<std::size_t>()) +
                                 ", found " + std::to_string(episodes.size()));
        int excluded = 0;
        std::vector<double> accs;
        for (const auto& er : episodes)
            er.failed ? void(++excluded) : accs.push_back(er.query_acc);
        if (excluded != row.at("excluded").get<int>())
            fail("excluded", "stored " + std::to_string(row.at("excluded").get<int>()) +
                                 ", recomputed " + std::to_string(excluded));
        Aggregate agg = aggregate(accs);
        if (agg.mean != row.at("mean_query_acc").get<double>())
            fail("mean_query_acc", "stored " + format_double(row.at("mean_query_acc").get<double>()) +
                                       ", recomputed " + format_double(agg.mean));
        if (agg.ci95 != row.at("ci95").get<double>())
            fail("ci95", "stored " + format_double(row.at("ci95").get<double>()) +
                             ", recomputed " + format_double(agg.ci95));
        std::string stored_csv = read_text_file(dir / row.at("curves_file").get<std::string>());
        std::string recomputed_csv = curves_csv(compute_curves(episodes));
        if (stored_csv != recomputed_csv) fail("curves", "curve file does not match records");
    }
}

namespace {

HarnessConfig load_cli_config(const std::string& config_path,
                              const std::vector<std::string>& overrides, std::uint64_t seed) {
    HarnessConfig cfg = parse_config_file(config_path);
    for (const auto& kv : overrides) {
        std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw config_error("--set expects key=value, got '" + kv + "'");
        apply_override(cfg, trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)));
    }
    cfg.seed = seed;
    cfg.validate();
    return cfg;
}

int run_pretrain_command(const HarnessConfig& cfg, const std::string& out_dir) {
    Dataset base = prepare_base_dataset(cfg);
    MlpParams init = make_mlp(base.dim, cfg.backbone_hidden, cfg.backbone_embed_dim,
                              derive_seed(cfg.seed, "init"));
    PretrainConfig pc = cfg.pretrain;
    pc.seed = derive_seed(cfg.seed, "pretrain");
    PretrainResult pr = pretrain_with_head(init, base, pc);
    double base_acc = classification_accuracy(pr.params, base, pr.head);

    std::string run_dir = create_run_directory(out_dir);
    save_checkpoint(pr.params, (fs::path(run_dir) / "backbone.ckpt").string());
    json summary;
    summary["version"] = kArtifactVersion;
    summary["command"] = "pretrain";
    summary["config"] = config_echo(cfg);
    summary["checkpoint"] = "backbone.ckpt";
    summary["base_accuracy"] = base_acc;
    summary["final_loss"] = pr.epoch_loss.back();
    write_text_file(fs::path(run_dir) / "summary.json", summary.dump(2) + "\n");
    std::printf("pretrained backbone: base accuracy %.4f, checkpoint %s/backbone.ckpt\n",
                base_acc, run_dir.c_str());
    return 0;
}

void print_row(const RunRecord& rec) {
    std::printf("%-16s episodes %zu (excluded %d)  query acc %.4f +/- %.4f\n", rec.row.c_str(),
                rec.episodes.size(), rec.excluded, rec.query_acc.mean, rec.query_acc.ci95);
}

} // namespace

int cli_main(int argc, char** argv) {
    CLI::App app{"fewtune: episodic few-shot finetuning with distribution calibration and "
                 "selected sampling"};
    app.require_subcommand(1);

    std::string config_path, out_dir, run_name;
    std::uint64_t seed = 0;
    std::vector<std::string> overrides;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "config file (flat key = value lines)")
            ->required();
        cmd->add_option("--seed", seed, "global seed; overrides the config's seed key")
            ->required();
        cmd->add_option("--out", out_dir, "output directory; each invocation appends run-NNN")
            ->required();
        cmd->add_option("--set", overrides, "override a config key, e.g. --set episode.count=50");
    };

    CLI::App* cmd_pretrain =
        app.add_subcommand("pretrain", "pretrain a backbone on the base classes");
    add_common(cmd_pretrain);
    CLI::App* cmd_run = app.add_subcommand("run", "run one finetuning configuration");
    add_common(cmd_run);
    CLI::App* cmd_ablate =
        app.add_subcommand("ablate", "run the ablation table rows on paired episodes");
    add_common(cmd_ablate);
    CLI::App* cmd_shots = app.add_subcommand("shots", "sweep over fixed shot counts");
    add_common(cmd_shots);
    CLI::App* cmd_replay =
        app.add_subcommand("replay", "recompute aggregates from records and verify bit-equality");
    cmd_replay->add_option("--out", out_dir, "output directory holding run-NNN records")
        ->required();
    cmd_replay->add_option("--run", run_name, "verify one run directory (default: all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (cmd_replay->parsed()) {
            std::vector<fs::path> runs;
            if (!run_name.empty()) {
                runs.push_back(fs::path(out_dir) / run_name);
            } else {
                if (!fs::exists(out_dir))
                    throw config_error(out_dir + ": path does not exist");
                for (const auto& e : fs::directory_iterator(out_dir))
                    if (e.is_directory() && e.path().filename().string().rfind("run-", 0) == 0)
                        runs.push_back(e.path());
                std::sort(runs.begin(), runs.end());
            }
            if (runs.empty()) throw config_error(out_dir + ": no run directories found");
            for (const auto& r : runs) {
                replay_verify(r.string());
                std::printf("replay: %s verified\n", r.string().c_str());
            }
            return 0;
        }

        HarnessConfig cfg = load_cli_config(config_path, overrides, seed);
        if (cmd_pretrain->parsed()) return run_pretrain_command(cfg, out_dir);

        PreparedRun prepared = prepare_run(cfg);
        std::string run_dir = create_run_directory(out_dir);
        if (cmd_run->parsed()) {
            RunRecord rec = run_row(prepared, cfg.finetune.flags, cfg.finetune.flags.label(),
                                    false);
            print_row(rec);
            write_run_records(run_dir, "run", cfg, {rec});
        } else if (cmd_ablate->parsed()) {
            std::vector<RunRecord> rows = run_ablation_suite(prepared);
            for (const auto& r : rows) print_row(r);
            write_run_records(run_dir, "ablate", cfg, rows);
        } else if (cmd_shots->parsed()) {
            std::vector<ShotSweepCell> cells = run_shot_sweep(prepared, cfg.shot_list);
            std::vector<RunRecord> rows;
            for (const auto& sc : cells) {
                print_row(sc.baseline);
                print_row(sc.plain);
                print_row(sc.full);
                std::printf("  shot %d: gain over none %.4f +/- %.4f, over B %.4f +/- %.4f\n",
                            sc.shot, sc.gain_full_vs_baseline.mean, sc.gain_full_vs_baseline.ci95,
                            sc.gain_full_vs_plain.mean, sc.gain_full_vs_plain.ci95);
                rows.push_back(sc.baseline);
                rows.push_back(sc.plain);
                rows.push_back(sc.full);
            }
            write_run_records(run_dir, "shots", cfg, rows, &cells);
        }
        std::printf("records written to %s\n", run_dir.c_str());
        return 0;
    } catch (const config_error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

} // namespace fewtune
