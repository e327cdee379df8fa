#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "calm/markov.hpp"
#include "calm/metrics.hpp"
#include "calm/stream.hpp"
#include "calm/trainer.hpp"
#include "calm/vocab.hpp"

namespace calm {

// Where a dataset's tokens come from: planted-family Markov chains generated
// on the fly, or one text file per class sharing a character vocabulary.
struct DatasetSpec {
    enum class Kind { Markov, Files };
    Kind kind = Kind::Markov;

    // Markov generation.
    int vocab_size = 32;
    int n_classes = 5;
    int n_families = 3;
    std::vector<int> family_of_class; // empty = round robin over families
    double perturbation = 0.15;
    int row_support = 4;
    long corpus_tokens = 200000; // per class; the stream wraps if exceeded

    // File ingestion.
    std::vector<std::string> paths; // one per class
    int min_char_count = 100;

    // Stream shape shared by both kinds.
    long n_fragments = 60;
    std::vector<double> lambdas = {10000.0}; // mean fragment length in tokens
    int batch_rows = 10;
    int window = 20;
    std::uint64_t seed = 1;
};

struct ExperimentSpec {
    std::string name = "calm";
    std::string out_dir = "out";
    DatasetSpec dataset;
    std::vector<TrainConfig> models; // vocab and per-run seed filled by the runner
    std::vector<std::uint64_t> seeds;
    int k_window = 10; // ppl_at_switch window
    bool save_checkpoints = false;
};

// Strict JSON parsing: unknown keys, missing required blocks, or invalid
// values throw ConfigError; malformed JSON throws IngestError. The emitted
// form parses back to the same spec.
ExperimentSpec spec_from_json(const std::string& text);
std::string spec_to_json(const ExperimentSpec& spec);
ExperimentSpec load_spec(const std::string& path);

// CALM_SEED (when set) replaces the spec's seed list with that single seed.
void apply_env_seed(ExperimentSpec& spec);

struct Dataset {
    Vocabulary vocab;
    std::vector<ClassCorpus> corpora;
    std::vector<MarkovChain> chains; // Markov kind only
};

Dataset build_dataset(const DatasetSpec& spec);

// Every run draws its own fragment schedule: same stream settings, fresh
// ordering per (lambda, run seed).
std::uint64_t schedule_seed(const DatasetSpec& spec, std::size_t lambda_index,
                            std::uint64_t run_seed);
FragmentSchedule make_schedule(const DatasetSpec& spec, std::size_t lambda_index,
                               std::uint64_t run_seed);

// "10000" for integral lambdas, shortest exact decimal otherwise.
std::string format_lambda(double lambda);
// "<model>__l<lambda>__s<seed>", the stem of every per-run output file.
std::string run_tag(const std::string& model, double lambda, std::uint64_t seed);

struct RunOptions {
    int jobs = 1;
    bool dry_run = false;
};

// Writes vocab, per-class token files, and one schedule per (lambda, seed)
// under <out_dir>/stream, then prints a summary per schedule.
int cmd_gen_stream(const ExperimentSpec& spec, std::ostream& log);

// Executes every model x lambda x seed job (worker pool of options.jobs),
// writing traces/, metrics/, optional checkpoints/, then report.csv and
// report_std.csv. Returns 0 when every run finished, 2 when any aborted
// (those are listed in failures.txt). Dry runs only print parameter counts
// and the job list.
int cmd_run(const ExperimentSpec& spec, const RunOptions& options, std::ostream& log);

// Re-aggregates whatever per-run metric files exist for the spec into the
// report CSVs; throws ConfigError when none are found.
int cmd_report(const ExperimentSpec& spec, std::ostream& log);

// Per trace: heatmap CSV, profile correlation CSV, dendrogram JSON, and
// per-class autocorrelation JSON under out_dir, named by the trace stem.
int cmd_analyze(const std::vector<std::string>& trace_paths, const std::string& out_dir,
                long last_m, long autocorr_m, std::ostream& log);

// Rebuilds the named model, loads the checkpoint, and samples length tokens
// after the prompt, decoded with the dataset's vocabulary.
std::string cmd_sample(const ExperimentSpec& spec, const std::string& model_name,
                       const std::string& checkpoint_path, const std::string& prompt, int length,
                       double temperature, std::uint64_t seed);

// Table-1 style CSV: one row per model, (ppl, pplsw, rec) columns per
// lambda, "%.6f" cells, empty where a metric is absent or every run of a
// cell failed. `stds` selects the standard-deviation table.
std::string report_csv(
    const ExperimentSpec& spec,
    const std::vector<std::vector<std::optional<AggregateMetrics>>>& by_model_lambda, bool stds);

} // namespace calm
