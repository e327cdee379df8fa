#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "calm/models.hpp"
#include "calm/stream.hpp"

namespace calm {

// Everything one run needs: the model recipe plus the loop knobs.
struct TrainConfig {
    ModelConfig model; // model.seed is derived per run, see run_experiment
    int learn_iters = 1;
    double warmup_frac = 0.5;
    bool log_gates = true;
};

struct TraceRecord {
    long t = 0;
    double loss = 0; // mean nats over the batch's rows*cols tokens
    int true_class = 0;
    bool is_switch = false;
    bool in_eval_span = false;
    bool clamped = false;
    std::vector<double> gates; // empty when the model has none or logging is off
};

struct RunTrace {
    std::string model_name;
    std::uint64_t run_seed = 0;
    std::uint64_t schedule_seed = 0;
    std::uint64_t model_seed = 0;
    double lambda_tokens = 0;
    long total_batches = 0;
    int n_classes = 0;
    double warmup_frac = 0.5;
    long eval_start = 0; // first batch index that counts toward metrics
    std::string config_digest;
    bool aborted = false;
    std::string abort_reason;
    std::vector<TraceRecord> records;
};

// Canonical settings string hashed to hex; traces sharing a digest are
// aggregation-compatible.
std::string train_config_digest(const TrainConfig& cfg, double lambda_tokens);

// One evaluate-then-train step: the loss is recorded before any update, then
// learn_iters training iterations run on the same batch, and the recurrent
// state advances once. Models that want the true class are routed here.
// in_eval_span is left for the caller, which knows the warmup split.
TraceRecord prequential_step(Model& model, const TokenBatch& batch, int learn_iters,
                             bool log_gates);

// The full prequential loop over one schedule. Training covers every batch;
// warmup_frac only marks which records later feed metrics, via eval_start =
// floor(warmup_frac * total). A non-finite loss aborts the run, leaving the
// partial trace with abort_reason set. The model is built fresh with seed
// mix_seed(run_seed, fnv1a(model name)).
RunTrace run_experiment(const TrainConfig& cfg, std::uint64_t run_seed,
                        const FragmentSchedule& schedule,
                        const std::vector<ClassCorpus>& corpora);
// Same loop on a caller-supplied model (recorded model_seed comes from it).
RunTrace run_experiment(Model& model, const TrainConfig& cfg, std::uint64_t run_seed,
                        const FragmentSchedule& schedule,
                        const std::vector<ClassCorpus>& corpora);

// JSONL: one metadata line, then one line per record.
std::string trace_to_jsonl(const RunTrace& trace);
RunTrace trace_from_jsonl(const std::string& text);
void write_trace(const RunTrace& trace, const std::string& path);
RunTrace read_trace(const std::string& path);

} // namespace calm
