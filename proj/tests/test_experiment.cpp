#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "calm/experiment.hpp"
#include "calm/models.hpp"

using namespace calm;
namespace fs = std::filesystem;

TEST_SUITE_BEGIN("experiment");

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path = fs::temp_directory_path() /
               ("calm_exp_" + tag + "_" + std::to_string(counter++) + "_" +
                std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void spit(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    REQUIRE(bool(out));
    out << text;
}

// Tiny markov spec that runs in well under a second.
ExperimentSpec tiny_spec(const std::string& out_dir) {
    ExperimentSpec s;
    s.name = "tiny";
    s.out_dir = out_dir;
    s.dataset.kind = DatasetSpec::Kind::Markov;
    s.dataset.vocab_size = 12;
    s.dataset.n_classes = 2;
    s.dataset.n_families = 2;
    s.dataset.corpus_tokens = 2000;
    s.dataset.n_fragments = 4;
    s.dataset.lambdas = {24.0}; // about 3 batches per fragment at b=2, w=4
    s.dataset.batch_rows = 2;
    s.dataset.window = 4;
    s.dataset.seed = 11;
    s.seeds = {1, 2};

    TrainConfig lstm;
    lstm.model.name = "lstm4";
    lstm.model.arch = Arch::Lstm;
    lstm.model.nhid = 4;
    lstm.model.embed = 3;
    lstm.learn_iters = 1;
    s.models.push_back(lstm);

    TrainConfig ens;
    ens.model.name = "ens2";
    ens.model.arch = Arch::Experts;
    ens.model.combiner = Combiner::Ensemble;
    ens.model.gate = GateKind::Uniform;
    ens.model.modules = 2;
    ens.model.nhid = 3;
    ens.model.embed = 2;
    s.models.push_back(ens);
    return s;
}

} // namespace

TEST_CASE("spec json round trip preserves every field") {
    TempDir tmp("roundtrip");
    ExperimentSpec s = tiny_spec(tmp.str());
    s.k_window = 7;
    s.save_checkpoints = true;
    s.models[0].model.dropout = 0.25;
    s.models[0].warmup_frac = 0.3;
    s.models[1].model.adapt_iters = 2;
    s.models[1].model.adapt_lr = 0.05;

    ExperimentSpec r = spec_from_json(spec_to_json(s));
    CHECK(r.name == s.name);
    CHECK(r.out_dir == s.out_dir);
    CHECK(r.k_window == 7);
    CHECK(r.save_checkpoints);
    CHECK(r.seeds == s.seeds);
    CHECK(r.dataset.vocab_size == 12);
    CHECK(r.dataset.n_classes == 2);
    CHECK(r.dataset.n_families == 2);
    CHECK(r.dataset.corpus_tokens == 2000);
    CHECK(r.dataset.n_fragments == 4);
    CHECK(r.dataset.lambdas == s.dataset.lambdas);
    CHECK(r.dataset.batch_rows == 2);
    CHECK(r.dataset.window == 4);
    CHECK(r.dataset.seed == 11);
    REQUIRE(r.models.size() == 2);
    CHECK(r.models[0].model.name == "lstm4");
    CHECK(r.models[0].model.arch == Arch::Lstm);
    CHECK(r.models[0].model.nhid == 4);
    CHECK(r.models[0].model.embed == 3);
    CHECK(r.models[0].model.dropout == 0.25);
    CHECK(r.models[0].warmup_frac == 0.3);
    CHECK(r.models[1].model.arch == Arch::Experts);
    CHECK(r.models[1].model.combiner == Combiner::Ensemble);
    CHECK(r.models[1].model.gate == GateKind::Uniform);
    CHECK(r.models[1].model.modules == 2);

    // A second round trip is byte-stable.
    CHECK(spec_to_json(r) == spec_to_json(s));
}

TEST_CASE("spec parsing accepts defaults and rejects malformed input") {
    const std::string minimal = R"({
        "dataset": {"kind": "markov", "n_classes": 2, "n_fragments": 4,
                    "lambdas": [32.0], "seed": 3},
        "models": [{"name": "m", "arch": "lstm", "nhid": 4}],
        "seeds": [1]
    })";
    ExperimentSpec s = spec_from_json(minimal);
    CHECK(s.name == "calm");
    CHECK(s.out_dir == "out");
    CHECK(s.k_window == 10);
    CHECK(s.dataset.vocab_size == 32);
    CHECK(s.dataset.batch_rows == 10);
    CHECK(s.dataset.window == 20);
    CHECK(s.models[0].learn_iters == 1);
    CHECK(s.models[0].warmup_frac == 0.5);
    CHECK(s.models[0].log_gates);

    auto patched = [&](const std::string& from, const std::string& to) {
        std::string t = minimal;
        t.replace(t.find(from), from.size(), to);
        return t;
    };
    // Unknown keys anywhere are hard errors.
    CHECK_THROWS_AS(spec_from_json(patched("\"seeds\"", "\"sedes\"")), ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("\"kind\"", "\"knid\"")), ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("\"nhid\": 4", "\"nhid\": 4, \"vocab\": 8")),
                    ConfigError);
    // Missing required keys.
    CHECK_THROWS_AS(spec_from_json("{\"models\": [], \"seeds\": [1]}"), ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("\"name\": \"m\", ", "")), ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched(", \"nhid\": 4", "")), ConfigError);
    // Value validation.
    CHECK_THROWS_AS(spec_from_json(patched("\"seeds\": [1]", "\"seeds\": []")), ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("\"seeds\": [1]", "\"seeds\": [1, 1]")), ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("[32.0]", "[]")), ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("[32.0]", "[0.0]")), ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("\"n_fragments\": 4", "\"n_fragments\": 5")),
                    ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("\"nhid\": 4", "\"nhid\": 4, \"dropout\": 1.0")),
                    ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("\"name\": \"m\"", "\"name\": \"m/../x\"")),
                    ConfigError);
    CHECK_THROWS_AS(
        spec_from_json(patched("\"kind\": \"markov\"", "\"kind\": \"markov\", \"paths\": [\"x\"]")),
        ConfigError);
    CHECK_THROWS_AS(spec_from_json(patched("\"kind\": \"markov\"", "\"kind\": \"csv\"")),
                    ConfigError);
    // Ensembles take no gate; duplicate model names collide on disk.
    CHECK_THROWS_AS(
        spec_from_json(patched(
            "\"arch\": \"lstm\"",
            "\"arch\": \"experts\", \"combiner\": \"ensemble\", \"gate\": \"lstm\", \"modules\": 2")),
        ConfigError);
    CHECK_THROWS_AS(
        spec_from_json(patched("[{\"name\": \"m\", \"arch\": \"lstm\", \"nhid\": 4}]",
                               "[{\"name\": \"m\", \"arch\": \"lstm\", \"nhid\": 4},"
                               " {\"name\": \"m\", \"arch\": \"lstm\", \"nhid\": 5}]")),
        ConfigError);
    // Broken JSON is an ingest error, not a config error.
    CHECK_THROWS_AS(spec_from_json("{\"models\": ["), IngestError);
}

TEST_CASE("environment seed override replaces the seed list") {
    TempDir tmp("envseed");
    ExperimentSpec s = tiny_spec(tmp.str());

    ::unsetenv("CALM_SEED");
    apply_env_seed(s);
    CHECK(s.seeds == std::vector<std::uint64_t>{1, 2});

    ::setenv("CALM_SEED", "42", 1);
    apply_env_seed(s);
    CHECK(s.seeds == std::vector<std::uint64_t>{42});

    ::setenv("CALM_SEED", "7crumbs", 1);
    CHECK_THROWS_AS(apply_env_seed(s), ConfigError);
    ::unsetenv("CALM_SEED");
}

TEST_CASE("markov dataset construction is deterministic and class complete") {
    DatasetSpec d;
    d.kind = DatasetSpec::Kind::Markov;
    d.vocab_size = 12;
    d.n_classes = 4;
    d.n_families = 2;
    d.corpus_tokens = 500;
    d.n_fragments = 4;
    d.seed = 21;

    Dataset a = build_dataset(d);
    Dataset b = build_dataset(d);
    REQUIRE(a.corpora.size() == 4);
    REQUIRE(a.chains.size() == 4);
    CHECK(a.vocab.size() == 12);
    for (int c = 0; c < 4; ++c) {
        CHECK(a.corpora[(size_t)c].class_id == c);
        CHECK(a.corpora[(size_t)c].class_name == "class" + std::to_string(c));
        CHECK(a.corpora[(size_t)c].tokens.size() == 500);
        CHECK(a.corpora[(size_t)c].tokens == b.corpora[(size_t)c].tokens);
    }
    // Distinct classes come from distinct chains.
    CHECK(a.corpora[0].tokens != a.corpora[1].tokens);

    // Another dataset seed gives other corpora.
    d.seed = 22;
    Dataset c = build_dataset(d);
    CHECK(c.corpora[0].tokens != a.corpora[0].tokens);
}

TEST_CASE("files dataset shares one character vocabulary and filters rare lines") {
    TempDir tmp("files");
    spit(tmp.path / "alpha.txt", "aaaa\naaab\n");
    spit(tmp.path / "beta.txt", "bbbb\nbbz\n");

    DatasetSpec d;
    d.kind = DatasetSpec::Kind::Files;
    d.paths = {(tmp.path / "alpha.txt").string(), (tmp.path / "beta.txt").string()};
    d.min_char_count = 2; // the single z drops its line
    d.n_classes = 2;
    d.n_fragments = 4;
    d.lambdas = {16.0};
    d.seed = 1;

    Dataset ds = build_dataset(d);
    REQUIRE(ds.corpora.size() == 2);
    CHECK(ds.vocab.size() == 2);
    CHECK(bool(ds.vocab.lookup("a")));
    CHECK(bool(ds.vocab.lookup("b")));
    CHECK_FALSE(bool(ds.vocab.lookup("z")));
    CHECK(ds.corpora[0].class_name == "alpha");
    CHECK(ds.corpora[1].class_name == "beta");
    CHECK(decode(ds.corpora[0].tokens, ds.vocab) == "aaaaaaab");
    CHECK(decode(ds.corpora[1].tokens, ds.vocab) == "bbbb");

    // Class count comes from the path list.
    const std::string spec_text = R"({
        "dataset": {"kind": "files", "paths": ["x.txt", "y.txt", "z.txt"],
                    "n_fragments": 6, "lambdas": [8.0], "seed": 1},
        "models": [{"name": "m", "arch": "lstm", "nhid": 4}],
        "seeds": [1]
    })";
    CHECK(spec_from_json(spec_text).dataset.n_classes == 3);
}

TEST_CASE("schedules derive from dataset seed, run seed, and lambda index") {
    DatasetSpec d;
    d.n_classes = 2;
    d.n_fragments = 6;
    d.lambdas = {24.0, 48.0};
    d.batch_rows = 2;
    d.window = 4;
    d.seed = 9;

    CHECK(schedule_seed(d, 0, 5) == mix_seed(9, mix_seed(5, 0)));
    CHECK(schedule_seed(d, 1, 5) == mix_seed(9, mix_seed(5, 1)));

    FragmentSchedule a = make_schedule(d, 0, 5);
    FragmentSchedule b = make_schedule(d, 0, 5);
    REQUIRE(a.entries.size() == 6);
    CHECK(a.n_classes == 2);
    for (size_t i = 0; i < a.entries.size(); ++i) {
        CHECK(a.entries[i].class_id == b.entries[i].class_id);
        CHECK(a.entries[i].batches == b.entries[i].batches);
    }
    // Per-class fragment counts are exactly even.
    int per_class[2] = {0, 0};
    for (const auto& e : a.entries) per_class[e.class_id]++;
    CHECK(per_class[0] == 3);
    CHECK(per_class[1] == 3);

    // Lambda index and run seed both move the schedule.
    FragmentSchedule c = make_schedule(d, 1, 5);
    FragmentSchedule e = make_schedule(d, 0, 6);
    auto sig = [](const FragmentSchedule& s) {
        std::string t;
        for (const auto& f : s.entries)
            t += std::to_string(f.class_id) + ":" + std::to_string(f.batches) + ",";
        return t;
    };
    CHECK(sig(c) != sig(a));
    CHECK(sig(e) != sig(a));
}

TEST_CASE("lambda formatting and run tags are filename friendly") {
    CHECK(format_lambda(10000.0) == "10000");
    CHECK(format_lambda(50.0) == "50");
    CHECK(format_lambda(2.5) == "2.5");
    CHECK(format_lambda(0.125) == "0.125");
    CHECK(run_tag("poe_pw", 10000.0, 7) == "poe_pw__l10000__s7");
    CHECK(run_tag("lstm", 2.5, 31) == "lstm__l2.5__s31");
}

TEST_CASE("gen-stream writes vocabulary, corpora, and schedules byte-stably") {
    TempDir t1("gen1"), t2("gen2");
    ExperimentSpec s1 = tiny_spec(t1.str());
    ExperimentSpec s2 = tiny_spec(t2.str());

    std::ostringstream log1, log2;
    CHECK(cmd_gen_stream(s1, log1) == 0);
    CHECK(cmd_gen_stream(s2, log2) == 0);

    for (const char* name :
         {"vocab.json", "corpus_0.bin", "corpus_1.bin", "schedule_l24_s1.json",
          "schedule_l24_s2.json"}) {
        fs::path p1 = t1.path / "stream" / name;
        fs::path p2 = t2.path / "stream" / name;
        REQUIRE(fs::exists(p1));
        CHECK(slurp(p1) == slurp(p2));
    }
    // Summary reports the even fragment split.
    CHECK(log1.str().find("4 fragments (2 per class)") != std::string::npos);

    // The written schedule round-trips through the stream loader.
    FragmentSchedule from_disk =
        load_schedule_json((t1.path / "stream" / "schedule_l24_s1.json").string());
    FragmentSchedule direct = make_schedule(s1.dataset, 0, 1);
    REQUIRE(from_disk.entries.size() == direct.entries.size());
    for (size_t i = 0; i < direct.entries.size(); ++i)
        CHECK(from_disk.entries[i].class_id == direct.entries[i].class_id);
}

TEST_CASE("run fans out over models and seeds and reports aggregates") {
    TempDir tmp("run");
    ExperimentSpec s = tiny_spec(tmp.str());
    std::ostringstream log;
    RunOptions opt;
    REQUIRE(cmd_run(s, opt, log) == 0);

    // 2 models x 1 lambda x 2 seeds -> 4 traces, 4 metric files.
    int traces = 0, metrics = 0;
    for (auto& e : fs::directory_iterator(tmp.path / "traces")) {
        (void)e;
        traces++;
    }
    for (auto& e : fs::directory_iterator(tmp.path / "metrics")) {
        if (e.path().filename().string().rfind("aggregate_", 0) != 0) metrics++;
    }
    CHECK(traces == 4);
    CHECK(metrics == 4);
    CHECK(fs::exists(tmp.path / "traces" / "lstm4__l24__s1.jsonl"));
    CHECK(fs::exists(tmp.path / "metrics" / "ens2__l24__s2.json"));
    CHECK(fs::exists(tmp.path / "metrics" / "aggregate_lstm4__l24.json"));
    CHECK_FALSE(fs::exists(tmp.path / "failures.txt"));

    // Header mirrors the metric columns per lambda; one row per model.
    std::string csv = slurp(tmp.path / "report.csv");
    std::istringstream rows(csv);
    std::string line;
    REQUIRE(std::getline(rows, line));
    CHECK(line == "model,ppl@l24,pplsw@l24,rec@l24");
    REQUIRE(std::getline(rows, line));
    CHECK(line.rfind("lstm4,", 0) == 0);
    CHECK(line.find(",,") == std::string::npos); // all three metrics present
    REQUIRE(std::getline(rows, line));
    CHECK(line.rfind("ens2,", 0) == 0);
    CHECK_FALSE(std::getline(rows, line));
    CHECK(fs::exists(tmp.path / "report_std.csv"));

    // The aggregate mirrors the per-run metric files.
    RunMetrics m1 = metrics_from_json(slurp(tmp.path / "metrics" / "lstm4__l24__s1.json"));
    RunMetrics m2 = metrics_from_json(slurp(tmp.path / "metrics" / "lstm4__l24__s2.json"));
    AggregateMetrics agg = aggregate_runs({m1, m2});
    char expect[32];
    std::snprintf(expect, sizeof expect, "%.6f", agg.ppl.mean);
    CHECK(csv.find(std::string("lstm4,") + expect) != std::string::npos);
}

TEST_CASE("run output is byte-identical across reruns and worker counts") {
    TempDir t1("det1"), t2("det2");
    ExperimentSpec s1 = tiny_spec(t1.str());
    ExperimentSpec s2 = tiny_spec(t2.str());
    std::ostringstream log1, log2;
    RunOptions serial; // jobs = 1
    RunOptions parallel;
    parallel.jobs = 4;
    REQUIRE(cmd_run(s1, serial, log1) == 0);
    REQUIRE(cmd_run(s2, parallel, log2) == 0);

    CHECK(slurp(t1.path / "report.csv") == slurp(t2.path / "report.csv"));
    CHECK(slurp(t1.path / "report_std.csv") == slurp(t2.path / "report_std.csv"));
    CHECK(slurp(t1.path / "traces" / "ens2__l24__s1.jsonl") ==
          slurp(t2.path / "traces" / "ens2__l24__s1.jsonl"));
    CHECK(slurp(t1.path / "metrics" / "lstm4__l24__s2.json") ==
          slurp(t2.path / "metrics" / "lstm4__l24__s2.json"));
    // Job summaries appear in job order regardless of worker count.
    auto job_lines = [](const std::string& text) {
        return text.substr(0, text.find("report:"));
    };
    CHECK(job_lines(log1.str()) == job_lines(log2.str()));
}

TEST_CASE("dry run prints parameter counts and executes nothing") {
    TempDir tmp("dry");
    ExperimentSpec s = tiny_spec(tmp.str());
    std::ostringstream log;
    RunOptions opt;
    opt.dry_run = true;
    CHECK(cmd_run(s, opt, log) == 0);

    ModelConfig mc = s.models[0].model;
    mc.vocab = 12;
    CHECK(log.str().find("lstm4: " + std::to_string(count_model_params(mc)) + " parameters") !=
          std::string::npos);
    CHECK(log.str().find("2 models x 1 lambdas x 2 seeds = 4 runs") != std::string::npos);
    CHECK_FALSE(fs::exists(tmp.path / "traces"));
    CHECK_FALSE(fs::exists(tmp.path / "report.csv"));
}

TEST_CASE("diverging runs land in failures.txt and flip the exit code") {
    TempDir tmp("fail");
    ExperimentSpec s = tiny_spec(tmp.str());
    TrainConfig bad;
    bad.model.name = "bad";
    bad.model.arch = Arch::Oracle;
    bad.model.modules = 1; // one head short: class 1 raises at first sight
    bad.model.nhid = 4;
    s.models.push_back(bad);
    s.seeds = {1};

    std::ostringstream log;
    RunOptions opt;
    CHECK(cmd_run(s, opt, log) == 2);
    REQUIRE(fs::exists(tmp.path / "failures.txt"));
    std::string failures = slurp(tmp.path / "failures.txt");
    CHECK(failures.find("bad__l24__s1") != std::string::npos);
    CHECK(failures.find("lstm4") == std::string::npos);

    // Healthy rows still aggregate; the bad row is present but empty.
    std::string csv = slurp(tmp.path / "report.csv");
    CHECK(csv.find("bad,,,") != std::string::npos);
    CHECK(csv.find("lstm4,,,") == std::string::npos);
    CHECK(log.str().find("FAILED bad__l24__s1") != std::string::npos);
}

TEST_CASE("report rebuilds the aggregate CSV from metric files alone") {
    TempDir tmp("report");
    ExperimentSpec s = tiny_spec(tmp.str());
    std::ostringstream run_log;
    REQUIRE(cmd_run(s, RunOptions{}, run_log) == 0);
    std::string original = slurp(tmp.path / "report.csv");

    fs::remove(tmp.path / "report.csv");
    fs::remove(tmp.path / "report_std.csv");
    std::ostringstream rep_log;
    CHECK(cmd_report(s, rep_log) == 0);
    CHECK(slurp(tmp.path / "report.csv") == original);
    CHECK(rep_log.str().find("model,ppl@l24") != std::string::npos);

    // Without any metric files there is nothing to report.
    TempDir empty("report_empty");
    ExperimentSpec none = tiny_spec(empty.str());
    std::ostringstream no_log;
    CHECK_THROWS_AS(cmd_report(none, no_log), ConfigError);
}

TEST_CASE("analyze emits gate artifacts and rejects gateless traces") {
    TempDir tmp("analyze");
    ExperimentSpec s = tiny_spec(tmp.str());
    // Swap the ensemble for a gated mixture so gates get logged.
    s.models[1].model.name = "moe2";
    s.models[1].model.combiner = Combiner::Moe;
    s.models[1].model.gate = GateKind::LstmGate;
    s.models[1].model.gating_nhid = 3;
    s.seeds = {1};
    std::ostringstream run_log;
    REQUIRE(cmd_run(s, RunOptions{}, run_log) == 0);

    fs::path trace = tmp.path / "traces" / "moe2__l24__s1.jsonl";
    fs::path out1 = tmp.path / "analysis1";
    fs::path out2 = tmp.path / "analysis2";
    std::ostringstream a_log;
    CHECK(cmd_analyze({trace.string()}, out1.string(), 50, 2, a_log) == 0);
    CHECK(cmd_analyze({trace.string()}, out2.string(), 50, 2, a_log) == 0);

    std::string heat = slurp(out1 / "moe2__l24__s1_heatmap.csv");
    CHECK(heat.rfind("t,class,w0,w1\n", 0) == 0);
    CHECK(fs::exists(out1 / "moe2__l24__s1_corr.csv"));
    CHECK(fs::exists(out1 / "moe2__l24__s1_autocorr.json"));

    auto dendro = nlohmann::json::parse(slurp(out1 / "moe2__l24__s1_dendrogram.json"));
    CHECK(dendro.at("n_leaves").get<int>() == 2);
    CHECK(dendro.at("merges").size() == 1);
    REQUIRE(dendro.at("cuts").size() == 2);
    CHECK(dendro.at("cuts")[0].size() == 2); // no merges applied: one cluster per class
    CHECK(dendro.at("cuts")[1].size() == 1);

    // Rerunning the analysis reproduces the same bytes.
    CHECK(slurp(out1 / "moe2__l24__s1_dendrogram.json") ==
          slurp(out2 / "moe2__l24__s1_dendrogram.json"));
    CHECK(slurp(out1 / "moe2__l24__s1_heatmap.csv") == slurp(out2 / "moe2__l24__s1_heatmap.csv"));

    // A plain LSTM trace logs no gates.
    fs::path gateless = tmp.path / "traces" / "lstm4__l24__s1.jsonl";
    std::ostringstream g_log;
    CHECK_THROWS_AS(cmd_analyze({gateless.string()}, out1.string(), 50, 2, g_log), ConfigError);
    CHECK_THROWS_AS(cmd_analyze({}, out1.string(), 50, 2, g_log), ConfigError);
}

TEST_CASE("sample restores a checkpoint and continues a prompt") {
    TempDir tmp("sample");
    ExperimentSpec s = tiny_spec(tmp.str());
    s.models.pop_back(); // one LSTM is enough
    s.seeds = {1};
    s.save_checkpoints = true;
    std::ostringstream run_log;
    REQUIRE(cmd_run(s, RunOptions{}, run_log) == 0);
    fs::path ckpt = tmp.path / "checkpoints" / "lstm4__l24__s1.ckpt";
    REQUIRE(fs::exists(ckpt));

    // V=12 synthetic vocabulary holds the printable characters from '!'.
    std::string a = cmd_sample(s, "lstm4", ckpt.string(), "!#", 8, 1.0, 9);
    std::string b = cmd_sample(s, "lstm4", ckpt.string(), "!#", 8, 1.0, 9);
    CHECK(a == b);
    CHECK(a.size() == 10);
    CHECK(a.rfind("!#", 0) == 0);
    for (char c : a) {
        CHECK(c >= '!');
        CHECK(c < '!' + 12);
    }
    // Greedy decoding ignores the seed.
    CHECK(cmd_sample(s, "lstm4", ckpt.string(), "!#", 4, 0.0, 1) ==
          cmd_sample(s, "lstm4", ckpt.string(), "!#", 4, 0.0, 2));

    CHECK_THROWS_AS(cmd_sample(s, "nosuch", ckpt.string(), "!#", 4, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(cmd_sample(s, "lstm4", ckpt.string(), "\xc3\xa9", 4, 1.0, 1), ConfigError);
}

TEST_SUITE_END();
