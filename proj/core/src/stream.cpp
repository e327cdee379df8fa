#include "calm/stream.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace calm {

using nlohmann::json;

long FragmentSchedule::total_batches() const {
    long total = 0;
    for (const auto& e : entries) total += e.batches;
    return total;
}

const FragmentEntry& FragmentSchedule::fragment_at_batch(long t) const {
    auto it = std::upper_bound(entries.begin(), entries.end(), t,
                               [](long v, const FragmentEntry& e) { return v < e.start; });
    if (it == entries.begin()) throw StreamError("batch index before schedule start");
    return *(it - 1);
}

FragmentSchedule sample_schedule(long n_fragments, double lambda_tokens, int n_classes, int b,
                                 int w, std::uint64_t seed) {
    if (n_fragments < 1) throw ConfigError("need at least one fragment");
    if (n_classes < 1) throw ConfigError("need at least one class");
    if (n_fragments % n_classes != 0)
        throw ConfigError("fragment count " + std::to_string(n_fragments) +
                          " not divisible by " + std::to_string(n_classes) + " classes");
    if (b < 1 || w < 1) throw ConfigError("batch geometry must be positive");
    const double batch_tokens = double(b) * w;
    if (lambda_tokens < batch_tokens)
        throw ConfigError("lambda must be at least one batch of tokens");

    Rng rng(seed);
    FragmentSchedule s;
    s.lambda_tokens = lambda_tokens;
    s.n_classes = n_classes;
    s.batch_rows = b;
    s.window = w;
    s.seed = seed;

    std::vector<int> classes(n_fragments);
    for (long i = 0; i < n_fragments; ++i) classes[i] = int(i % n_classes);
    rng.shuffle(classes);

    const long cap_batches = std::max<long>(1, long(std::floor(10.0 * lambda_tokens / batch_tokens)));
    long start = 0;
    for (long i = 0; i < n_fragments; ++i) {
        double tokens = std::min(rng.exponential(lambda_tokens), 10.0 * lambda_tokens);
        long batches = std::llround(tokens / batch_tokens);
        batches = std::clamp(batches, long(1), cap_batches);
        s.entries.push_back({classes[i], batches, start});
        start += batches;
    }
    return s;
}

std::vector<SwitchRecord> switch_log(const FragmentSchedule& s) {
    std::vector<SwitchRecord> out;
    std::vector<long> last_of_class(s.n_classes >= 1 ? s.n_classes : 1, -1);
    auto class_slot = [&](int c) -> long& {
        if (c >= long(last_of_class.size())) last_of_class.resize(c + 1, -1);
        return last_of_class[c];
    };
    for (std::size_t i = 0; i < s.entries.size(); ++i) {
        const auto& e = s.entries[i];
        if (i > 0) {
            SwitchRecord r;
            r.fragment_index = long(i);
            r.t = e.start;
            r.class_id = e.class_id;
            long prev = class_slot(e.class_id);
            if (prev >= 0) r.prev_fragment = prev;
            out.push_back(r);
        }
        class_slot(e.class_id) = long(i);
    }
    return out;
}

void save_schedule_json(const std::string& path, const FragmentSchedule& s) {
    json entries = json::array();
    for (const auto& e : s.entries)
        entries.push_back({{"class", e.class_id}, {"batches", e.batches}, {"start", e.start}});
    json doc{{"lambda_tokens", s.lambda_tokens}, {"n_fragments", s.entries.size()},
             {"n_classes", s.n_classes},          {"batch_rows", s.batch_rows},
             {"window", s.window},                {"seed", s.seed},
             {"entries", entries}};
    std::ofstream f(path);
    if (!f) throw IngestError("cannot write schedule: " + path);
    f << doc.dump(2) << '\n';
}

FragmentSchedule load_schedule_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IngestError("cannot read schedule: " + path);
    json doc = json::parse(f, nullptr, false);
    if (doc.is_discarded()) throw IngestError("malformed schedule: " + path);
    FragmentSchedule s;
    s.lambda_tokens = doc.at("lambda_tokens").get<double>();
    s.n_classes = doc.at("n_classes").get<int>();
    s.batch_rows = doc.at("batch_rows").get<int>();
    s.window = doc.at("window").get<int>();
    s.seed = doc.at("seed").get<std::uint64_t>();
    for (const auto& e : doc.at("entries")) {
        s.entries.push_back({e.at("class").get<int>(), e.at("batches").get<long>(),
                             e.at("start").get<long>()});
    }
    return s;
}

StreamIterator::StreamIterator(const FragmentSchedule& schedule,
                               const std::vector<ClassCorpus>& corpora, bool wrap)
    : schedule_(schedule), corpora_(&corpora), wrap_(wrap) {
    if (int(corpora.size()) < schedule.n_classes)
        throw StreamError("schedule needs " + std::to_string(schedule.n_classes) +
                          " corpora, got " + std::to_string(corpora.size()));
    for (const auto& e : schedule_.entries)
        if (e.class_id < 0 || e.class_id >= int(corpora.size()))
            throw StreamError("schedule references missing class " + std::to_string(e.class_id));

    // Each class reads its corpus sequentially from a seed-derived offset.
    Rng offset_rng(mix_seed(schedule.seed, fnv1a("stream-offsets")));
    class_cursor_.resize(corpora.size());
    for (std::size_t c = 0; c < corpora.size(); ++c) {
        if (corpora[c].tokens.empty()) throw StreamError("empty corpus for class " + std::to_string(int(c)));
        class_cursor_[c] = std::size_t(offset_rng.uniform_int(corpora[c].tokens.size()));
    }
    if (!schedule_.entries.empty()) begin_fragment(0);
}

void StreamIterator::begin_fragment(std::size_t index) {
    const auto& e = schedule_.entries[index];
    const auto& tokens = (*corpora_)[e.class_id].tokens;
    const std::size_t len = tokens.size();
    const std::size_t span_len =
        std::size_t(e.batches) * schedule_.batch_rows * schedule_.window;
    std::size_t& cursor = class_cursor_[e.class_id];
    if (!wrap_ && cursor + span_len + 1 > len)
        throw StreamError("class " + std::to_string(e.class_id) +
                          " corpus exhausted at fragment " + std::to_string(index));
    span_.resize(span_len + 1);
    for (std::size_t k = 0; k <= span_len; ++k) span_[k] = tokens[(cursor + k) % len];
    cursor = (cursor + span_len) % len;
    batch_in_fragment_ = 0;
}

std::optional<TokenBatch> StreamIterator::next() {
    if (fragment_ >= schedule_.entries.size()) return std::nullopt;
    const auto& e = schedule_.entries[fragment_];
    const int b = schedule_.batch_rows, w = schedule_.window;
    const long T = e.batches;

    TokenBatch batch;
    batch.rows = b;
    batch.cols = w;
    batch.t = t_;
    batch.true_class = e.class_id;
    batch.is_switch = (batch_in_fragment_ == 0 && fragment_ > 0);
    batch.x.resize(std::size_t(b) * w);
    batch.y.resize(std::size_t(b) * w);
    for (int r = 0; r < b; ++r) {
        const std::size_t row_base = std::size_t(r) * T * w + std::size_t(batch_in_fragment_) * w;
        for (int c = 0; c < w; ++c) {
            batch.x[std::size_t(r) * w + c] = span_[row_base + c];
            batch.y[std::size_t(r) * w + c] = span_[row_base + c + 1];
        }
    }

    t_++;
    if (++batch_in_fragment_ == T) {
        fragment_++;
        if (fragment_ < schedule_.entries.size()) begin_fragment(fragment_);
    }
    return batch;
}

} // namespace calm
