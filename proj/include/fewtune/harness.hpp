#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fewtune/backbone.hpp"
#include "fewtune/episodes.hpp"
#include "fewtune/finetune.hpp"

namespace fewtune {

extern const char kArtifactVersion[];

// Resolved experiment configuration. Parsed from a flat key=value file;
// unknown keys are rejected with their line number, and CLI flags override
// file keys. See parse_config_file for the schema.
struct HarnessConfig {
    std::string dataset; // "synthetic" | "idx"

    // synthetic.*
    std::size_t syn_dim = 16;
    std::size_t syn_base_classes = 8;
    std::size_t syn_novel_classes = 10;
    double syn_spread = 0.3;
    double syn_contamination = 0.0;
    double syn_shift_strength = 0.0; // log-scale anisotropy of the novel-domain map
    double syn_shift_offset = 0.0;   // magnitude of the novel-domain translation
    std::size_t syn_base_samples = 200;
    std::size_t syn_novel_samples = 60;

    // idx.*
    std::string idx_images;
    std::string idx_labels;
    std::vector<int> idx_novel_classes;

    // backbone.*
    std::string backbone_checkpoint;
    std::vector<std::size_t> backbone_hidden{64, 64};
    std::size_t backbone_embed_dim = 16;
    bool backbone_identity = false;

    PretrainConfig pretrain;

    // episode.*
    int episode_ways = 5;
    ShotSpec episode_shots{5, 5};
    int episode_queries = 15;
    int episode_count = 600;

    FinetuneConfig finetune;

    std::vector<int> shot_list{1, 2, 3, 5}; // shots subcommand
    int workers = 1;
    std::uint64_t seed = 0;

    void validate() const;
};

// Fully resolved key -> value map (every schema key, defaults included);
// embedded in summary.json so records are self-describing.
std::map<std::string, std::string> config_echo(const HarnessConfig& cfg);

HarnessConfig parse_config_file(const std::string& path);
// Applies key=value overrides on top of a parsed config (CLI --set, --seed).
void apply_override(HarnessConfig& cfg, const std::string& key, const std::string& value);

struct Aggregate {
    double mean = 0.0;
    double ci95 = 0.0; // 1.96 * sd / sqrt(n), sample sd (n-1)
};
Aggregate aggregate(const std::vector<double>& values); // throws on n < 2

struct EpisodeRecord {
    int index = 0;
    std::uint64_t seed = 0;
    std::uint64_t fingerprint = 0;
    bool failed = false;
    std::string error;
    std::vector<int> shots;
    std::vector<int> source_classes;
    double query_acc = 0.0;
    double query_loss = 0.0;
    std::vector<double> support_loss_curve;
    std::vector<double> support_acc_curve;
    std::vector<double> query_loss_curve;
    std::vector<double> query_acc_curve;
    std::vector<double> mean_chain_curve;
};

struct CurvePoint {
    double support_loss = 0.0, support_acc = 0.0, query_loss = 0.0, query_acc = 0.0;
};

struct RunRecord {
    std::string row;
    std::vector<EpisodeRecord> episodes;
    Aggregate query_acc;
    int excluded = 0;
    std::vector<CurvePoint> curves; // per-epoch means over included episodes

    std::vector<double> included_accuracies() const;
};

// Dataset and backbone prepared once and shared across all rows of a run, so
// every row consumes the identical episode stream (paired seeding).
struct PreparedRun {
    HarnessConfig cfg;
    Dataset novel;
    MlpParams backbone;
};

PreparedRun prepare_run(const HarnessConfig& cfg);

// One ablation row on the prepared episode stream. freeze_temperature_row
// forces the temperature frozen regardless of config (used by row "none",
// which must equal the untouched prototype baseline).
RunRecord run_row(const PreparedRun& run, const AblationFlags& flags, const std::string& label,
                  bool freeze_temperature_row);

// Table rows: none, B, B+FN, B+FN+S, B+FN+S+SS, all on identical episodes.
std::vector<RunRecord> run_ablation_suite(const PreparedRun& run);

struct ShotSweepCell {
    int shot = 0;
    RunRecord baseline;  // "none"
    RunRecord plain;     // "B"
    RunRecord full;      // "B+FN+S+SS"
    Aggregate gain_full_vs_baseline; // paired per-episode differences
    Aggregate gain_full_vs_plain;
};
std::vector<ShotSweepCell> run_shot_sweep(const PreparedRun& run, const std::vector<int>& shots);

// Run artifacts. Each invocation creates the next free out_dir/run-NNN and
// never touches prior records. Content is a pure function of (config, seed).
std::string create_run_directory(const std::string& out_dir);
void write_run_records(const std::string& run_dir, const std::string& command,
                       const HarnessConfig& cfg, const std::vector<RunRecord>& records,
                       const std::vector<ShotSweepCell>* sweep = nullptr);

// Recomputes aggregates and curve files from episodes_<row>.jsonl and
// verifies bit-equality against summary.json and curves_<row>.csv. Throws
// format_error naming the first mismatched field.
void replay_verify(const std::string& run_dir);

int cli_main(int argc, char** argv);

} // namespace fewtune
