#pragma once

#include <optional>
#include <string>
#include <vector>

#include "calm/trainer.hpp"

namespace calm {

// One logged batch: the gate weights a combiner reported after evaluating it.
struct GateEntry {
    long t = 0;
    int class_id = 0;
    std::vector<double> w;
};

struct GateLog {
    int n_modules = 0;
    int n_classes = 0;
    std::vector<GateEntry> entries; // one per trace record, in batch order
};

// Mean gate vector over the final `used` batches of one class.
struct ClassProfile {
    int class_id = 0;
    std::vector<double> w;
    long used = 0;
    bool truncated = false; // fewer than last_m batches were available
};

// Per-class profiles plus their pairwise Pearson correlation across the
// module dimension. Entries are NaN where a correlation is undefined (zero
// variance or an unobserved class); the diagonal of an observed class is 1.
struct ClassSimilarity {
    std::vector<std::optional<ClassProfile>> profiles;
    std::vector<std::vector<double>> corr;
};

// Agglomerative merge list. Leaves are class ids 0..n_leaves-1; merge j
// creates cluster id n_leaves + j. Average linkage keeps heights
// nondecreasing, so cutting after a number of merges equals a height cut.
struct Merge {
    int a = 0;
    int b = 0;
    double height = 0;
};

struct Dendrogram {
    int n_leaves = 0;
    std::vector<Merge> merges;
};

// Pulls the per-batch gate vectors out of a trace. Throws ConfigError when
// the run logged no gates at all, MetricError when the log is malformed
// (missing batches or varying width).
GateLog extract_gate_log(const RunTrace& trace);

// Mean gate vector over the last last_m batches of each class; classes with
// fewer batches use all of them and are flagged truncated. Unobserved
// classes get an absent entry.
std::vector<std::optional<ClassProfile>> class_weight_profiles(const GateLog& log,
                                                               long last_m = 100);

// Pearson correlation between per-class profiles across the module
// dimension. Needs at least two observed classes and two modules.
ClassSimilarity class_correlation(const std::vector<std::optional<ClassProfile>>& profiles);

// Pearson correlation between the mean gate vector of the class's last m
// batches and that of the preceding m. Absent when the class has fewer than
// 2m batches or the correlation is undefined; identical windows give 1.
std::optional<double> autocorrelation(const GateLog& log, int class_id, long m = 100);

// Average-linkage clustering on distance 1 - corr. Every class must be
// observed with every pairwise correlation defined, else MetricError.
// Equal-distance merges pick the lexicographically smallest member pair.
Dendrogram hierarchical_cluster(const ClassSimilarity& sim);

// Partition of the leaves after the first n_merges merges, each cluster
// sorted and clusters ordered by their smallest member.
std::vector<std::vector<int>> cut_clusters(const Dendrogram& tree, long n_merges);

} // namespace calm
