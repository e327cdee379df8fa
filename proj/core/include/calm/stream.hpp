#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "calm/common.hpp"
#include "calm/vocab.hpp"

namespace calm {

struct FragmentEntry {
    int class_id = 0;
    long batches = 0; // T_i
    long start = 0;   // S_i, batch index of the fragment's first batch
};

struct FragmentSchedule {
    std::vector<FragmentEntry> entries;
    double lambda_tokens = 0;
    int n_classes = 0;
    int batch_rows = 0; // b
    int window = 0;     // w
    std::uint64_t seed = 0;

    long total_batches() const;
    const FragmentEntry& fragment_at_batch(long t) const;
};

// Fragment lengths ~ Exp(lambda_tokens), rounded to the nearest multiple of
// b*w tokens with a 1-batch floor and a 10*lambda cap; classes round-robin
// N/n_classes each, order shuffled uniformly. Deterministic in seed.
FragmentSchedule sample_schedule(long n_fragments, double lambda_tokens, int n_classes, int b,
                                 int w, std::uint64_t seed);

void save_schedule_json(const std::string& path, const FragmentSchedule& s);
FragmentSchedule load_schedule_json(const std::string& path);

struct SwitchRecord {
    long fragment_index = 0; // i (0-based), always >= 1
    long t = 0;              // S_i
    int class_id = 0;
    std::optional<long> prev_fragment; // latest earlier fragment of the same class
};

std::vector<SwitchRecord> switch_log(const FragmentSchedule& s);

// Full batch as metrics and the trainer see it. Models get ModelInput, which
// deliberately carries no class identity or switch flag.
struct TokenBatch {
    std::vector<TokenId> x; // rows*cols, row-major
    std::vector<TokenId> y;
    int rows = 0;
    int cols = 0;
    long t = 0;
    int true_class = 0;
    bool is_switch = false;
};

struct ModelInput {
    const TokenId* x = nullptr;
    const TokenId* y = nullptr;
    int rows = 0;
    int cols = 0;
};

inline ModelInput model_view(const TokenBatch& b) {
    return {b.x.data(), b.y.data(), b.rows, b.cols};
}

// Serves the schedule batch by batch. Each fragment's token span (T_i*b*w
// tokens plus one for the final targets) is cut into b contiguous rows; rows
// advance one window of w per call. Per-class cursors start at seed-derived
// offsets and move sequentially, wrapping modulo corpus length when `wrap`
// is set; without wrap an exhausted corpus raises StreamError.
class StreamIterator {
public:
    StreamIterator(const FragmentSchedule& schedule, const std::vector<ClassCorpus>& corpora,
                   bool wrap = true);

    std::optional<TokenBatch> next();
    long total_batches() const { return schedule_.total_batches(); }

private:
    void begin_fragment(std::size_t index);

    FragmentSchedule schedule_;
    const std::vector<ClassCorpus>* corpora_;
    bool wrap_;
    std::vector<std::size_t> class_cursor_;
    std::size_t fragment_ = 0;
    long batch_in_fragment_ = 0;
    long t_ = 0;
    std::vector<TokenId> span_; // current fragment's tokens, length T*b*w + 1
};

} // namespace calm
