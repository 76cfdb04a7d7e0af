#pragma once

#include "nncfl/datagen.hpp"
#include "nncfl/fedsim.hpp"
#include "nncfl/tokenizer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace nncfl::harness {

// Everything needed to reproduce a run. The text form is flat
// `key = value` lines; see config_keys() for the list.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    // vocab_size 0 means "size of the generated vocabulary".
    lm::ModelConfig model{64, 4, 4, 0, 160, 172};
    int rounds = 25;
    std::size_t clients = 5;
    double local_epochs = 1.0;
    std::size_t batch_size = 8;
    double lr = 3e-4;
    double weight_decay = 0.0;
    int qp = -26;
    int qp_density = 2;
    double sparsity = 0.0;
    bool bypass_codec = false;
    bool compress_downlink = true;
    bool uplink_error_feedback = false;
    bool downlink_error_feedback = true;
    fl::Weighting weighting = fl::Weighting::samples;
    double drop_probability = 0.0;
    std::size_t records = 9000;
    data::Ratios ratios = data::default_ratios();
    double test_fraction = 0.1;
    // Evaluate on the first N test records each round; 0 uses all of them.
    std::size_t eval_records = 0;
    std::size_t threads = 1;
    // Also run the same config with the codec bypassed and report the
    // difference. Ignored when bypass_codec is already set.
    bool paired_baseline = true;
    // Output directory for metrics.csv, summary.json and friends; empty
    // writes nothing.
    std::string out_dir;
    // Where to persist the parameter update tree; empty skips it.
    std::string put_dir;

    // Throws ArgumentError on the first invalid field.
    void validate() const;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

const std::vector<std::string>& config_keys();

std::string to_text(const ExperimentConfig& config);
// Unknown keys, duplicate keys and malformed values raise ArgumentError with
// the line number. Missing keys keep their defaults.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const ExperimentConfig& config);

// Applies "dim=64,layers=4,heads=4,vocab=0,seq=160,ffn=172"; any subset of
// keys is allowed.
void apply_model_spec(lm::ModelConfig& model, std::string_view spec);

// Same run apart from the codec: forces bypass, clears codec-only fields.
ExperimentConfig baseline_of(const ExperimentConfig& config);
// True when the two configs differ at most in codec settings.
bool paired(const ExperimentConfig& a, const ExperimentConfig& b);

struct Dataset {
    tok::Vocabulary vocab;
    std::vector<std::vector<lm::TokenSequence>> shards;  // one per client
    std::vector<lm::TokenSequence> test;                 // evaluation subset
    std::size_t test_records = 0;                        // full held-out set size
};

// bos + encode(serialize(record)) + eos.
lm::TokenSequence tokenize_record(const tok::Vocabulary& vocab, const data::CellularRecord& record);

Dataset prepare_data(const ExperimentConfig& config);

// Model config with vocab 0 resolved against the data.
lm::ModelConfig resolved_model(const ExperimentConfig& config, const Dataset& data);

struct ClientBytes {
    std::size_t up_raw = 0;
    std::size_t up_compressed = 0;
    std::size_t down_raw = 0;
    std::size_t down_compressed = 0;
};

struct RoundMetrics {
    int round = 0;
    std::vector<ClientBytes> clients;
    std::size_t live_clients = 0;
    std::size_t up_raw = 0;
    std::size_t up_compressed = 0;
    std::size_t down_raw = 0;
    std::size_t down_compressed = 0;
    double train_loss = 0.0;  // mean over live clients
    double top1_percent = 0.0;
    double perplexity = 0.0;
    double measured_sparsity = 0.0;
    double wall_seconds = 0.0;  // kept out of metrics.csv
};

// Column names of metrics.csv for `clients` clients.
std::vector<std::string> csv_header(std::size_t clients);
std::string metrics_csv(std::span<const RoundMetrics> rounds, std::size_t clients);

struct Summary {
    ExperimentConfig config;
    std::size_t parameters = 0;
    int rounds = 0;
    double final_top1 = 0.0;
    double final_perplexity = 0.0;
    std::size_t up_raw = 0;
    std::size_t up_compressed = 0;
    std::size_t down_raw = 0;
    std::size_t down_compressed = 0;
    double ratio_percent = 0.0;         // both directions
    double uplink_ratio_percent = 0.0;  // client uploads only
    double measured_sparsity = 0.0;     // mean over rounds
    double wall_seconds = 0.0;
};

struct RunResult {
    std::vector<RoundMetrics> rounds;
    Summary summary;
    ModelWeights final_weights;
    std::uint64_t latest_aggregate = 0;
};

// One federated run: data, base model, `rounds` rounds with evaluation after
// each aggregation. Errors from the round loop are rethrown with the round
// number prefixed. Persists the update tree when config.put_dir is set.
RunResult run_federation(const ExperimentConfig& config, const Dataset& data);
RunResult run_federation(const ExperimentConfig& config);

Summary summarize(const ExperimentConfig& config, std::size_t parameters,
                  std::span<const RoundMetrics> rounds);

struct Degradation {
    double top1 = 0.0;        // compressed - baseline, percentage points
    double perplexity = 0.0;  // compressed - baseline
};

struct Verdict {
    bool transparent = false;
    Degradation delta;
};

inline constexpr double kDefaultTop1Threshold = 0.5;
inline constexpr double kDefaultPerplexityThreshold = 0.01;

// Transparent iff |d top1| <= top1_threshold and |d ppl| <= ppl_threshold.
// Throws ArgumentError unless the summaries come from paired configs.
Verdict report_transparency(const Summary& compressed, const Summary& baseline,
                            double top1_threshold = kDefaultTop1Threshold,
                            double ppl_threshold = kDefaultPerplexityThreshold);

struct ExperimentResult {
    RunResult run;
    std::optional<RunResult> baseline;
    std::optional<Verdict> verdict;
};

// run_federation plus the paired bypass baseline; writes metrics.csv,
// baseline_metrics.csv, summary.json, timings.csv and config.txt to
// config.out_dir when it is set.
ExperimentResult run_experiment(const ExperimentConfig& config);

std::string summary_json(const ExperimentResult& result);

struct SweepRow {
    int qp = 0;
    double sparsity = 0.0;
    double lr = 0.0;
    bool ok = false;
    std::string error;
    Summary summary;
    Verdict verdict;
};

// One cell per (qp, sparsity, lr), lr-major then qp then sparsity. The bypass
// baseline is run once per lr. A failing cell becomes a row with ok = false.
std::vector<SweepRow> sweep(const ExperimentConfig& base, std::span<const int> qps,
                            std::span<const double> sparsities, std::span<const double> lrs);
std::string sweep_csv(std::span<const SweepRow> rows);

} // namespace nncfl::harness
