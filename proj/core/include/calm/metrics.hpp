#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calm/stream.hpp"
#include "calm/trainer.hpp"

namespace calm {

// Mean recovery time plus how many switches never got back to the reference
// loss inside their fragment (those enter the mean at rec = fragment length).
struct RecoveryResult {
    std::optional<double> mean; // absent when no switch is eligible
    long counted = 0;
    long censored = 0;
};

// Per-class slice of the run metrics. ppl covers this class's eval-span
// batches; the switch metrics cover switches INTO this class.
struct ClassMetrics {
    int class_id = 0;
    std::optional<double> ppl;
    std::optional<double> ppl_at_switch;
    std::optional<double> recovery_time;
    long rec_censored = 0;
};

// Everything measured on one trace. config_digest travels along so
// aggregate_runs can refuse to mix incompatible runs.
struct RunMetrics {
    std::string model_name;
    std::string config_digest;
    std::uint64_t run_seed = 0;
    double lambda_tokens = 0;
    double ppl = 0;
    std::optional<double> ppl_at_switch; // absent without eval-span switches
    std::optional<double> recovery_time; // absent without eligible switches
    long sw_counted = 0;                 // switches in the ppl_at_switch mean
    long rec_counted = 0;                // switches in the recovery_time mean
    long rec_censored = 0;
    std::vector<ClassMetrics> per_class; // indexed by class id
};

struct MetricSummary {
    double mean = 0;
    std::optional<double> stddev; // sample std, absent when n < 2
    int n = 0;                    // runs the metric was present in
};

// Cross-seed aggregate of one configuration.
struct AggregateMetrics {
    std::string model_name;
    std::string config_digest;
    int n_runs = 0;
    MetricSummary ppl;
    std::optional<MetricSummary> ppl_at_switch; // absent when absent in every run
    std::optional<MetricSummary> recovery_time;
    long rec_censored = 0; // summed across runs
};

// exp(mean loss over t >= eval_start). Throws MetricError on an empty span.
double avg_perplexity(const RunTrace& trace, long eval_start);

// exp of the mean over eval-span switches of the mean loss over each
// switch's first min(k, fragment length) batches. Absent when no switch
// lands in the eval span. `switches` must be the full ordered log; the
// optional out-param receives the number of switches averaged.
std::optional<double> ppl_at_switch(const RunTrace& trace,
                                    const std::vector<SwitchRecord>& switches, int k = 10,
                                    long* counted = nullptr);

// Per eligible switch (eval-span start AND a same-class predecessor
// fragment), the smallest r >= 1 whose batch loss is <= the mean loss over
// that predecessor; capped at the fragment length when never reached.
RecoveryResult recovery_time(const RunTrace& trace, const std::vector<SwitchRecord>& switches);

// Rebuilds the switch log from the trace's own is_switch/true_class stream,
// so metrics need no schedule file. Matches switch_log(schedule) for traces
// produced by run_experiment.
std::vector<SwitchRecord> derive_switch_log(const RunTrace& trace);

// All metrics for one complete trace. Aborted or truncated traces throw
// MetricError. k is the ppl_at_switch window.
RunMetrics compute_metrics(const RunTrace& trace, int k = 10);

// Sample mean and n-1 standard deviation per metric across runs of one
// configuration; mismatched digests throw MetricError. A metric absent from
// a run is skipped for that metric only.
AggregateMetrics aggregate_runs(const std::vector<RunMetrics>& runs);

// JSON round trip for per-run metric files; parse failures throw IngestError.
std::string metrics_to_json(const RunMetrics& m);
RunMetrics metrics_from_json(const std::string& text);
// Output-only JSON for an aggregate.
std::string aggregate_to_json(const AggregateMetrics& a);

} // namespace calm
