#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <vector>

#include "calm/stream.hpp"

using namespace calm;

TEST_SUITE_BEGIN("stream");

namespace {

// Naive previous-occurrence scan used as the switch_log oracle.
std::vector<SwitchRecord> naive_switch_log(const FragmentSchedule& s) {
    std::vector<SwitchRecord> out;
    for (std::size_t i = 1; i < s.entries.size(); ++i) {
        SwitchRecord r;
        r.fragment_index = long(i);
        r.t = s.entries[i].start;
        r.class_id = s.entries[i].class_id;
        for (long j = long(i) - 1; j >= 0; --j)
            if (s.entries[j].class_id == s.entries[i].class_id) {
                r.prev_fragment = j;
                break;
            }
        out.push_back(r);
    }
    return out;
}

ClassCorpus counting_corpus(int class_id, std::size_t len) {
    ClassCorpus c;
    c.class_id = class_id;
    c.class_name = "c" + std::to_string(class_id);
    for (std::size_t i = 0; i < len; ++i) c.tokens.push_back(TokenId(i));
    return c;
}

} // namespace

TEST_CASE("schedule distributes classes exactly evenly") {
    auto s = sample_schedule(4, 500, 2, 2, 5, 11);
    REQUIRE(s.entries.size() == 4);
    int count[2] = {0, 0};
    for (const auto& e : s.entries) count[e.class_id]++;
    CHECK(count[0] == 2);
    CHECK(count[1] == 2);
}

TEST_CASE("schedule is deterministic in the seed") {
    auto a = sample_schedule(20, 1000, 4, 2, 5, 77);
    auto b = sample_schedule(20, 1000, 4, 2, 5, 77);
    auto c = sample_schedule(20, 1000, 4, 2, 5, 78);
    REQUIRE(a.entries.size() == b.entries.size());
    bool same = true;
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(a.entries[i].class_id == b.entries[i].class_id);
        CHECK(a.entries[i].batches == b.entries[i].batches);
        CHECK(a.entries[i].start == b.entries[i].start);
        if (i < c.entries.size() &&
            (a.entries[i].class_id != c.entries[i].class_id ||
             a.entries[i].batches != c.entries[i].batches))
            same = false;
    }
    CHECK(!same);
}

TEST_CASE("schedule rejects N not divisible by class count") {
    CHECK_THROWS_AS(sample_schedule(5, 500, 2, 2, 5, 1), ConfigError);
}

TEST_CASE("mean fragment length tracks lambda within 10 percent") {
    const double lambda = 5000;
    const int b = 10, w = 20;
    auto s = sample_schedule(1000, lambda, 5, b, w, 321);
    double total_tokens = 0;
    for (const auto& e : s.entries) total_tokens += double(e.batches) * b * w;
    double mean = total_tokens / 1000;
    CHECK(std::fabs(mean - lambda) / lambda < 0.10);
}

TEST_CASE("fragment lengths respect the floor and the 10-lambda cap") {
    const double lambda = 600;
    const int b = 2, w = 10;
    auto s = sample_schedule(2000, lambda, 4, b, w, 9);
    const long cap = long(10 * lambda) / (b * w);
    long starts = 0;
    for (const auto& e : s.entries) {
        CHECK(e.batches >= 1);
        CHECK(e.batches <= cap);
        CHECK(e.start == starts);
        starts += e.batches;
    }
    CHECK(s.total_batches() == starts);
}

TEST_CASE("memorylessness: survival ratio matches unconditional survival") {
    // P(T > s+t | T > s) = P(T > t) for the exponential; rounding to batch
    // multiples is fine-grained enough at lambda = 50 batches.
    const double lambda = 10000;
    const int b = 10, w = 20;
    auto s = sample_schedule(20000, lambda, 1, b, w, 2718);
    auto survival = [&](double tokens) {
        long n = 0;
        for (const auto& e : s.entries)
            if (double(e.batches) * b * w > tokens) n++;
        return double(n) / double(s.entries.size());
    };
    double uncond = survival(lambda / 2);
    double cond = survival(lambda) / survival(lambda / 2);
    CHECK(std::fabs(cond - uncond) < 0.03);
}

TEST_CASE("switch_log handles the trivial and alternating cases") {
    FragmentSchedule s;
    s.n_classes = 2;
    s.entries = {{0, 3, 0}};
    CHECK(switch_log(s).empty());

    s.entries = {{0, 2, 0}, {1, 2, 2}, {0, 1, 4}, {1, 3, 5}};
    auto log = switch_log(s);
    REQUIRE(log.size() == 3);
    CHECK(log[0].t == 2);
    CHECK(!log[0].prev_fragment.has_value());
    CHECK(log[1].t == 4);
    CHECK(log[1].class_id == 0);
    REQUIRE(log[1].prev_fragment.has_value());
    CHECK(*log[1].prev_fragment == 0);
    REQUIRE(log[2].prev_fragment.has_value());
    CHECK(*log[2].prev_fragment == 1);
}

TEST_CASE("switch_log matches the naive scan on random schedules") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto s = sample_schedule(60, 800, 3, 2, 4, 1000 + seed);
        auto got = switch_log(s);
        auto want = naive_switch_log(s);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].fragment_index == want[i].fragment_index);
            CHECK(got[i].t == want[i].t);
            CHECK(got[i].class_id == want[i].class_id);
            CHECK(got[i].prev_fragment == want[i].prev_fragment);
        }
    }
}

TEST_CASE("schedule json round trip") {
    auto s = sample_schedule(12, 700, 3, 2, 5, 42);
    auto path = (std::filesystem::temp_directory_path() / "calm_sched.json").string();
    save_schedule_json(path, s);
    auto back = load_schedule_json(path);
    CHECK(back.lambda_tokens == s.lambda_tokens);
    CHECK(back.n_classes == s.n_classes);
    CHECK(back.batch_rows == s.batch_rows);
    CHECK(back.window == s.window);
    CHECK(back.seed == s.seed);
    REQUIRE(back.entries.size() == s.entries.size());
    for (std::size_t i = 0; i < s.entries.size(); ++i) {
        CHECK(back.entries[i].class_id == s.entries[i].class_id);
        CHECK(back.entries[i].batches == s.entries[i].batches);
        CHECK(back.entries[i].start == s.entries[i].start);
    }
    std::remove(path.c_str());
}

TEST_CASE("iterator serves exact shapes and replays the schedule") {
    auto s = sample_schedule(10, 300, 2, 3, 4, 5);
    std::vector<ClassCorpus> corpora{counting_corpus(0, 5000), counting_corpus(1, 5000)};
    StreamIterator it(s, corpora);

    std::vector<int> want_classes;
    std::vector<bool> want_switch;
    for (std::size_t i = 0; i < s.entries.size(); ++i)
        for (long k = 0; k < s.entries[i].batches; ++k) {
            want_classes.push_back(s.entries[i].class_id);
            want_switch.push_back(k == 0 && i > 0);
        }

    long t = 0;
    while (auto batch = it.next()) {
        CHECK(batch->rows == 3);
        CHECK(batch->cols == 4);
        CHECK(batch->t == t);
        CHECK(batch->true_class == want_classes[t]);
        CHECK(batch->is_switch == want_switch[t]);
        t++;
    }
    CHECK(t == s.total_batches());
}

TEST_CASE("iterator row layout is contiguous with offset-by-one targets") {
    const int b = 3, w = 4;
    auto s = sample_schedule(6, 200, 2, b, w, 17);
    const std::size_t len = 4096;
    std::vector<ClassCorpus> corpora{counting_corpus(0, len), counting_corpus(1, len)};
    StreamIterator it(s, corpora);

    std::size_t frag = 0;
    long k = 0; // batch index within fragment
    long base = -1;
    while (auto batch = it.next()) {
        const long T = s.entries[frag].batches;
        if (k == 0) base = long(batch->x[0]); // fragment span start, readable off the counting corpus
        for (int r = 0; r < b; ++r)
            for (int c = 0; c < w; ++c) {
                long pos = base + long(r) * T * w + k * w + c;
                CHECK(long(batch->x[r * w + c]) == pos % long(len));
                CHECK(long(batch->y[r * w + c]) == (pos + 1) % long(len));
            }
        if (++k == T) {
            frag++;
            k = 0;
        }
    }
    CHECK(frag == s.entries.size());
}

TEST_CASE("per-class cursors advance sequentially across fragments") {
    const int b = 2, w = 3;
    auto s = sample_schedule(8, 60, 2, b, w, 23);
    const std::size_t len = 100000;
    std::vector<ClassCorpus> corpora{counting_corpus(0, len), counting_corpus(1, len)};
    StreamIterator it(s, corpora);

    std::map<int, long> next_expected; // class -> next span base
    std::size_t frag = 0;
    long k = 0;
    while (auto batch = it.next()) {
        const auto& e = s.entries[frag];
        if (k == 0) {
            long base = long(batch->x[0]);
            if (next_expected.count(e.class_id)) CHECK(base == next_expected[e.class_id]);
            next_expected[e.class_id] = base + e.batches * b * w;
        }
        if (++k == e.batches) {
            frag++;
            k = 0;
        }
    }
}

TEST_CASE("iterator wraps around short corpora and errors without wrap") {
    auto s = sample_schedule(4, 400, 1, 2, 5, 31);
    std::vector<ClassCorpus> corpora{counting_corpus(0, 37)};
    StreamIterator it(s, corpora, /*wrap=*/true);
    long served = 0;
    while (auto batch = it.next()) {
        for (TokenId x : batch->x) CHECK(x < 37);
        served++;
    }
    CHECK(served == s.total_batches());

    CHECK_THROWS_AS(
        [&] {
            StreamIterator strict(s, corpora, /*wrap=*/false);
            while (strict.next()) {
            }
        }(),
        StreamError);
}

TEST_CASE("iterator is deterministic") {
    auto s = sample_schedule(6, 300, 3, 2, 4, 7);
    std::vector<ClassCorpus> corpora{counting_corpus(0, 999), counting_corpus(1, 999),
                                     counting_corpus(2, 999)};
    StreamIterator a(s, corpora), b(s, corpora);
    while (true) {
        auto ba = a.next(), bb = b.next();
        CHECK(ba.has_value() == bb.has_value());
        if (!ba) break;
        CHECK(ba->x == bb->x);
        CHECK(ba->y == bb->y);
    }
}

TEST_SUITE_END();
