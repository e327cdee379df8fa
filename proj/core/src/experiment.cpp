#include "calm/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "calm/analysis.hpp"
#include "calm/models.hpp"

namespace calm {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write " + path.string());
    out << content;
    if (!out) throw IngestError("short write to " + path.string());
}

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& where) {
    for (const auto& [key, value] : j.items())
        if (!allowed.count(key)) throw ConfigError(where + ": unknown key \"" + key + "\"");
}

bool safe_name(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!std::isalnum((unsigned char)c) && c != '.' && c != '_' && c != '-') return false;
    return true;
}

DatasetSpec dataset_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"kind", "vocab_size", "n_classes", "n_families", "family_of_class",
                         "perturbation", "row_support", "corpus_tokens", "paths",
                         "min_char_count", "n_fragments", "lambdas", "batch_rows", "window",
                         "seed"},
                        "dataset");
    DatasetSpec d;
    std::string kind = j.value("kind", "markov");
    if (kind == "markov")
        d.kind = DatasetSpec::Kind::Markov;
    else if (kind == "files")
        d.kind = DatasetSpec::Kind::Files;
    else
        throw ConfigError("dataset: unknown kind \"" + kind + "\"");

    d.vocab_size = j.value("vocab_size", d.vocab_size);
    d.n_classes = j.value("n_classes", d.n_classes);
    d.n_families = j.value("n_families", d.n_families);
    if (j.contains("family_of_class"))
        d.family_of_class = j.at("family_of_class").get<std::vector<int>>();
    d.perturbation = j.value("perturbation", d.perturbation);
    d.row_support = j.value("row_support", d.row_support);
    d.corpus_tokens = j.value("corpus_tokens", d.corpus_tokens);
    if (j.contains("paths")) d.paths = j.at("paths").get<std::vector<std::string>>();
    d.min_char_count = j.value("min_char_count", d.min_char_count);
    d.n_fragments = j.value("n_fragments", d.n_fragments);
    if (j.contains("lambdas")) d.lambdas = j.at("lambdas").get<std::vector<double>>();
    d.batch_rows = j.value("batch_rows", d.batch_rows);
    d.window = j.value("window", d.window);
    d.seed = j.value("seed", d.seed);

    if (d.kind == DatasetSpec::Kind::Files) {
        if (d.paths.empty()) throw ConfigError("dataset: files kind needs paths");
        if (j.contains("n_classes") && d.n_classes != (int)d.paths.size())
            throw ConfigError("dataset: n_classes disagrees with the number of paths");
        d.n_classes = (int)d.paths.size();
    } else {
        if (!d.paths.empty()) throw ConfigError("dataset: paths are for the files kind");
        if (d.vocab_size < 2) throw ConfigError("dataset: vocab_size must be at least 2");
        if (d.n_families < 1) throw ConfigError("dataset: n_families must be at least 1");
        if (!d.family_of_class.empty()) {
            if ((int)d.family_of_class.size() != d.n_classes)
                throw ConfigError("dataset: family_of_class must list every class");
            for (int f : d.family_of_class)
                if (f < 0 || f >= d.n_families)
                    throw ConfigError("dataset: family " + std::to_string(f) + " outside 0.." +
                                      std::to_string(d.n_families - 1));
        }
        if (d.corpus_tokens < 2) throw ConfigError("dataset: corpus_tokens must be at least 2");
    }
    if (d.n_classes < 1) throw ConfigError("dataset: need at least one class");
    if (d.n_fragments < 1) throw ConfigError("dataset: n_fragments must be at least 1");
    if (d.n_fragments % d.n_classes != 0)
        throw ConfigError("dataset: n_fragments must divide evenly over classes");
    if (d.lambdas.empty()) throw ConfigError("dataset: lambdas must be non-empty");
    for (double l : d.lambdas)
        if (!(l > 0)) throw ConfigError("dataset: lambdas must be positive");
    if (d.batch_rows < 1 || d.window < 1)
        throw ConfigError("dataset: batch_rows and window must be at least 1");
    return d;
}

json dataset_to_json(const DatasetSpec& d) {
    json j;
    j["kind"] = d.kind == DatasetSpec::Kind::Markov ? "markov" : "files";
    if (d.kind == DatasetSpec::Kind::Markov) {
        j["vocab_size"] = d.vocab_size;
        j["n_classes"] = d.n_classes;
        j["n_families"] = d.n_families;
        if (!d.family_of_class.empty()) j["family_of_class"] = d.family_of_class;
        j["perturbation"] = d.perturbation;
        j["row_support"] = d.row_support;
        j["corpus_tokens"] = d.corpus_tokens;
    } else {
        j["paths"] = d.paths;
        j["min_char_count"] = d.min_char_count;
    }
    j["n_fragments"] = d.n_fragments;
    j["lambdas"] = d.lambdas;
    j["batch_rows"] = d.batch_rows;
    j["window"] = d.window;
    j["seed"] = d.seed;
    return j;
}

TrainConfig model_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"name", "arch", "combiner", "gate", "modules", "nhid", "embed",
                         "gating_nhid", "mos_heads", "clear_gating", "dropout", "adapt_iters",
                         "adapt_lr", "lr", "beta1", "beta2", "eps", "learn_iters", "warmup_frac",
                         "log_gates"},
                        "model");
    TrainConfig t;
    ModelConfig& m = t.model;
    m.name = j.at("name").get<std::string>();
    if (!safe_name(m.name))
        throw ConfigError("model: name \"" + m.name + "\" must be filesystem-safe");
    m.arch = arch_from_name(j.at("arch").get<std::string>());
    if (j.contains("combiner")) m.combiner = combiner_from_name(j.at("combiner").get<std::string>());
    if (j.contains("gate")) m.gate = gate_from_name(j.at("gate").get<std::string>());
    m.modules = j.value("modules", m.modules);
    m.nhid = j.at("nhid").get<int>();
    m.embed = j.value("embed", m.embed);
    m.gating_nhid = j.value("gating_nhid", m.gating_nhid);
    m.mos_heads = j.value("mos_heads", m.mos_heads);
    m.clear_gating = j.value("clear_gating", m.clear_gating);
    m.dropout = j.value("dropout", m.dropout);
    m.adapt_iters = j.value("adapt_iters", m.adapt_iters);
    m.adapt_lr = j.value("adapt_lr", m.adapt_lr);
    m.adam.lr = j.value("lr", m.adam.lr);
    m.adam.beta1 = j.value("beta1", m.adam.beta1);
    m.adam.beta2 = j.value("beta2", m.adam.beta2);
    m.adam.eps = j.value("eps", m.adam.eps);
    t.learn_iters = j.value("learn_iters", t.learn_iters);
    t.warmup_frac = j.value("warmup_frac", t.warmup_frac);
    t.log_gates = j.value("log_gates", t.log_gates);

    if (m.nhid < 1) throw ConfigError("model " + m.name + ": nhid must be at least 1");
    if (m.modules < 1) throw ConfigError("model " + m.name + ": modules must be at least 1");
    if (m.embed < 0 || m.gating_nhid < 0)
        throw ConfigError("model " + m.name + ": sizes cannot be negative");
    if (m.mos_heads < 1) throw ConfigError("model " + m.name + ": mos_heads must be at least 1");
    if (m.dropout < 0 || m.dropout >= 1)
        throw ConfigError("model " + m.name + ": dropout must be in [0, 1)");
    if (m.adapt_iters < 0)
        throw ConfigError("model " + m.name + ": adapt_iters cannot be negative");
    if (m.arch == Arch::Experts && m.combiner == Combiner::Ensemble &&
        m.gate != GateKind::Uniform)
        throw ConfigError("model " + m.name + ": ensembles take no gate");
    if (t.learn_iters < 1)
        throw ConfigError("model " + m.name + ": learn_iters must be at least 1");
    if (t.warmup_frac < 0 || t.warmup_frac >= 1)
        throw ConfigError("model " + m.name + ": warmup_frac must be in [0, 1)");
    return t;
}

json model_to_json(const TrainConfig& t) {
    const ModelConfig& m = t.model;
    json j;
    j["name"] = m.name;
    j["arch"] = arch_name(m.arch);
    if (m.arch == Arch::Experts) {
        j["combiner"] = combiner_name(m.combiner);
        j["gate"] = gate_name(m.gate);
        j["modules"] = m.modules;
        j["gating_nhid"] = m.gating_nhid;
        j["clear_gating"] = m.clear_gating;
        j["adapt_iters"] = m.adapt_iters;
        j["adapt_lr"] = m.adapt_lr;
    }
    if (m.arch == Arch::Mos) j["mos_heads"] = m.mos_heads;
    j["nhid"] = m.nhid;
    j["embed"] = m.embed;
    j["dropout"] = m.dropout;
    j["lr"] = m.adam.lr;
    j["beta1"] = m.adam.beta1;
    j["beta2"] = m.adam.beta2;
    j["eps"] = m.adam.eps;
    j["learn_iters"] = t.learn_iters;
    j["warmup_frac"] = t.warmup_frac;
    j["log_gates"] = t.log_gates;
    return j;
}

std::string cell(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

fs::path traces_dir(const ExperimentSpec& s) { return fs::path(s.out_dir) / "traces"; }
fs::path metrics_dir(const ExperimentSpec& s) { return fs::path(s.out_dir) / "metrics"; }
fs::path checkpoints_dir(const ExperimentSpec& s) { return fs::path(s.out_dir) / "checkpoints"; }

// Vocabulary without token generation, for sampling and prompt encoding.
Vocabulary dataset_vocab(const DatasetSpec& spec) {
    if (spec.kind == DatasetSpec::Kind::Markov) return synthetic_vocab(spec.vocab_size);
    std::vector<std::string> all_lines;
    for (const std::string& path : spec.paths) {
        std::vector<std::string> lines = read_lines(path);
        all_lines.insert(all_lines.end(), lines.begin(), lines.end());
    }
    return build_char_vocab(all_lines, spec.min_char_count).vocab;
}

struct JobResult {
    bool ok = false;
    RunMetrics metrics;
    std::string summary;
    std::string failure;
};

void write_aggregates(const ExperimentSpec& spec,
                      const std::vector<std::vector<std::optional<AggregateMetrics>>>& agg) {
    write_file(fs::path(spec.out_dir) / "report.csv", report_csv(spec, agg, false));
    write_file(fs::path(spec.out_dir) / "report_std.csv", report_csv(spec, agg, true));
    for (size_t mi = 0; mi < spec.models.size(); ++mi)
        for (size_t li = 0; li < spec.dataset.lambdas.size(); ++li)
            if (agg[mi][li]) {
                std::string name = "aggregate_" + spec.models[mi].model.name + "__l" +
                                   format_lambda(spec.dataset.lambdas[li]) + ".json";
                write_file(metrics_dir(spec) / name, aggregate_to_json(*agg[mi][li]));
            }
}

std::vector<std::vector<std::optional<AggregateMetrics>>> aggregate_grid(
    const ExperimentSpec& spec, const std::vector<std::vector<std::vector<RunMetrics>>>& found) {
    std::vector<std::vector<std::optional<AggregateMetrics>>> agg(
        spec.models.size(),
        std::vector<std::optional<AggregateMetrics>>(spec.dataset.lambdas.size()));
    for (size_t mi = 0; mi < spec.models.size(); ++mi)
        for (size_t li = 0; li < spec.dataset.lambdas.size(); ++li)
            if (!found[mi][li].empty()) agg[mi][li] = aggregate_runs(found[mi][li]);
    return agg;
}

} // namespace

ExperimentSpec spec_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw IngestError(std::string("spec json: ") + e.what());
    }
    try {
        reject_unknown_keys(
            j, {"name", "out_dir", "dataset", "models", "seeds", "k_window", "save_checkpoints"},
            "spec");
        ExperimentSpec s;
        s.name = j.value("name", s.name);
        s.out_dir = j.value("out_dir", s.out_dir);
        s.dataset = dataset_from_json(j.at("dataset"));
        for (const json& jm : j.at("models")) s.models.push_back(model_from_json(jm));
        s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        s.k_window = j.value("k_window", s.k_window);
        s.save_checkpoints = j.value("save_checkpoints", s.save_checkpoints);

        if (s.models.empty()) throw ConfigError("spec: models must be non-empty");
        std::set<std::string> names;
        for (const TrainConfig& t : s.models)
            if (!names.insert(t.model.name).second)
                throw ConfigError("spec: duplicate model name \"" + t.model.name + "\"");
        if (s.seeds.empty()) throw ConfigError("spec: seeds must be non-empty");
        std::set<std::uint64_t> unique_seeds(s.seeds.begin(), s.seeds.end());
        if (unique_seeds.size() != s.seeds.size())
            throw ConfigError("spec: duplicate seeds");
        if (s.k_window < 1) throw ConfigError("spec: k_window must be at least 1");
        return s;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("spec: ") + e.what());
    }
}

std::string spec_to_json(const ExperimentSpec& spec) {
    json j;
    j["name"] = spec.name;
    j["out_dir"] = spec.out_dir;
    j["dataset"] = dataset_to_json(spec.dataset);
    json models = json::array();
    for (const TrainConfig& t : spec.models) models.push_back(model_to_json(t));
    j["models"] = models;
    j["seeds"] = spec.seeds;
    j["k_window"] = spec.k_window;
    j["save_checkpoints"] = spec.save_checkpoints;
    return j.dump(2) + "\n";
}

ExperimentSpec load_spec(const std::string& path) { return spec_from_json(read_file(path)); }

void apply_env_seed(ExperimentSpec& spec) {
    const char* env = std::getenv("CALM_SEED");
    if (!env || !*env) return;
    char* end = nullptr;
    unsigned long long v = std::strtoull(env, &end, 10);
    if (!end || *end != '\0') throw ConfigError(std::string("CALM_SEED is not a number: ") + env);
    spec.seeds = {(std::uint64_t)v};
}

Dataset build_dataset(const DatasetSpec& spec) {
    Dataset ds;
    if (spec.kind == DatasetSpec::Kind::Markov) {
        MarkovFamilySpec mspec;
        mspec.vocab_size = spec.vocab_size;
        mspec.n_families = spec.n_families;
        mspec.perturbation = spec.perturbation;
        mspec.row_support = spec.row_support;
        mspec.seed = spec.seed;
        if (spec.family_of_class.empty())
            for (int c = 0; c < spec.n_classes; ++c)
                mspec.family_of_class.push_back(c % spec.n_families);
        else
            mspec.family_of_class = spec.family_of_class;
        ds.chains = build_family_chains(mspec);
        ds.vocab = synthetic_vocab(spec.vocab_size);
        for (int c = 0; c < spec.n_classes; ++c)
            ds.corpora.push_back(generate_markov_corpus(
                ds.chains[(size_t)c], c, "class" + std::to_string(c),
                (std::size_t)spec.corpus_tokens,
                mix_seed(spec.seed, fnv1a("corpus" + std::to_string(c)))));
        return ds;
    }

    // Files: shared character vocabulary over every class, then per-class
    // encoding of the lines whose characters all survived filtering.
    std::vector<std::vector<std::string>> per_class;
    std::vector<std::string> all_lines;
    for (const std::string& path : spec.paths) {
        per_class.push_back(read_lines(path));
        all_lines.insert(all_lines.end(), per_class.back().begin(), per_class.back().end());
    }
    ds.vocab = build_char_vocab(all_lines, spec.min_char_count).vocab;
    for (size_t c = 0; c < per_class.size(); ++c) {
        std::string kept;
        for (const std::string& line : per_class[c]) {
            bool ok = true;
            for (const std::string& cp : utf8_codepoints(line))
                if (!ds.vocab.lookup(cp)) {
                    ok = false;
                    break;
                }
            if (ok) kept += line;
        }
        if (kept.empty())
            throw IngestError("no text survived filtering for " + spec.paths[c]);
        ClassCorpus corpus;
        corpus.class_id = (int)c;
        corpus.class_name = fs::path(spec.paths[c]).stem().string();
        corpus.tokens = encode_chars(kept, ds.vocab);
        ds.corpora.push_back(std::move(corpus));
    }
    return ds;
}

std::uint64_t schedule_seed(const DatasetSpec& spec, std::size_t lambda_index,
                            std::uint64_t run_seed) {
    return mix_seed(spec.seed, mix_seed(run_seed, (std::uint64_t)lambda_index));
}

FragmentSchedule make_schedule(const DatasetSpec& spec, std::size_t lambda_index,
                               std::uint64_t run_seed) {
    return sample_schedule(spec.n_fragments, spec.lambdas[lambda_index], spec.n_classes,
                           spec.batch_rows, spec.window,
                           schedule_seed(spec, lambda_index, run_seed));
}

std::string format_lambda(double lambda) {
    char buf[64];
    if (lambda == std::floor(lambda) && std::abs(lambda) < 1e15) {
        std::snprintf(buf, sizeof buf, "%.0f", lambda);
        return buf;
    }
    std::snprintf(buf, sizeof buf, "%f", lambda);
    std::string s = buf;
    while (s.back() == '0') s.pop_back();
    if (s.back() == '.') s.pop_back();
    return s;
}

std::string run_tag(const std::string& model, double lambda, std::uint64_t seed) {
    return model + "__l" + format_lambda(lambda) + "__s" + std::to_string(seed);
}

int cmd_gen_stream(const ExperimentSpec& spec, std::ostream& log) {
    Dataset ds = build_dataset(spec.dataset);
    fs::path dir = fs::path(spec.out_dir) / "stream";
    fs::create_directories(dir);
    save_vocab_json((dir / "vocab.json").string(), ds.vocab);
    log << "vocab: " << ds.vocab.size() << " tokens\n";
    for (const ClassCorpus& corpus : ds.corpora) {
        fs::path path = dir / ("corpus_" + std::to_string(corpus.class_id) + ".bin");
        save_token_bin(path.string(), corpus, ds.vocab);
        log << "class " << corpus.class_id << " (" << corpus.class_name << "): "
            << corpus.tokens.size() << " tokens -> " << path.string() << "\n";
    }
    for (size_t li = 0; li < spec.dataset.lambdas.size(); ++li)
        for (std::uint64_t seed : spec.seeds) {
            FragmentSchedule schedule = make_schedule(spec.dataset, li, seed);
            std::string name = "schedule_l" + format_lambda(spec.dataset.lambdas[li]) + "_s" +
                               std::to_string(seed) + ".json";
            save_schedule_json((dir / name).string(), schedule);
            log << name << ": " << schedule.n_classes << " classes, "
                << schedule.entries.size() << " fragments ("
                << schedule.entries.size() / (size_t)schedule.n_classes << " per class), "
                << schedule.total_batches() << " batches, lambda "
                << format_lambda(spec.dataset.lambdas[li]) << " tokens\n";
        }
    return 0;
}

int cmd_run(const ExperimentSpec& spec, const RunOptions& options, std::ostream& log) {
    Dataset ds = build_dataset(spec.dataset);
    int vocab = ds.vocab.size();

    if (options.dry_run) {
        for (const TrainConfig& t : spec.models) {
            ModelConfig mc = t.model;
            mc.vocab = vocab;
            log << mc.name << ": " << count_model_params(mc) << " parameters\n";
        }
        log << spec.models.size() << " models x " << spec.dataset.lambdas.size()
            << " lambdas x " << spec.seeds.size() << " seeds = "
            << spec.models.size() * spec.dataset.lambdas.size() * spec.seeds.size()
            << " runs (dry run, nothing executed)\n";
        return 0;
    }

    fs::create_directories(traces_dir(spec));
    fs::create_directories(metrics_dir(spec));
    if (spec.save_checkpoints) fs::create_directories(checkpoints_dir(spec));

    struct Job {
        size_t mi, li, si;
    };
    std::vector<Job> jobs;
    for (size_t mi = 0; mi < spec.models.size(); ++mi)
        for (size_t li = 0; li < spec.dataset.lambdas.size(); ++li)
            for (size_t si = 0; si < spec.seeds.size(); ++si) jobs.push_back({mi, li, si});
    std::vector<JobResult> results(jobs.size());

    std::atomic<size_t> cursor{0};
    auto worker = [&]() {
        while (true) {
            size_t i = cursor.fetch_add(1);
            if (i >= jobs.size()) return;
            const Job& job = jobs[i];
            double lambda = spec.dataset.lambdas[job.li];
            std::uint64_t seed = spec.seeds[job.si];
            TrainConfig tc = spec.models[job.mi];
            tc.model.vocab = vocab;
            tc.model.seed = mix_seed(seed, fnv1a(tc.model.name));
            std::string tag = run_tag(tc.model.name, lambda, seed);
            JobResult& r = results[i];
            try {
                FragmentSchedule schedule = make_schedule(spec.dataset, job.li, seed);
                std::unique_ptr<Model> model = build_model(tc.model);
                RunTrace trace = run_experiment(*model, tc, seed, schedule, ds.corpora);
                write_trace(trace, (traces_dir(spec) / (tag + ".jsonl")).string());
                if (trace.aborted) {
                    r.failure = tag + ": " + trace.abort_reason;
                    continue;
                }
                r.metrics = compute_metrics(trace, spec.k_window);
                write_file(metrics_dir(spec) / (tag + ".json"), metrics_to_json(r.metrics));
                if (spec.save_checkpoints)
                    save_checkpoint(*model, (checkpoints_dir(spec) / (tag + ".ckpt")).string());
                char line[160];
                std::snprintf(line, sizeof line, "%s: ppl %.4f, pplsw %s, rec %s", tag.c_str(),
                              r.metrics.ppl,
                              r.metrics.ppl_at_switch ? cell(*r.metrics.ppl_at_switch).c_str()
                                                      : "-",
                              r.metrics.recovery_time ? cell(*r.metrics.recovery_time).c_str()
                                                      : "-");
                r.summary = line;
                r.ok = true;
            } catch (const std::exception& e) {
                r.failure = tag + ": " + e.what();
            }
        }
    };

    // One thread still goes through the pool so both paths stay identical.
    size_t n_threads = (size_t)std::max(1, options.jobs);
    n_threads = std::min(n_threads, jobs.size());
    std::vector<std::thread> pool;
    for (size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();

    std::vector<std::string> failures;
    std::vector<std::vector<std::vector<RunMetrics>>> found(
        spec.models.size(), std::vector<std::vector<RunMetrics>>(spec.dataset.lambdas.size()));
    for (size_t i = 0; i < jobs.size(); ++i) {
        if (results[i].ok) {
            log << results[i].summary << "\n";
            found[jobs[i].mi][jobs[i].li].push_back(results[i].metrics);
        } else {
            log << "FAILED " << results[i].failure << "\n";
            failures.push_back(results[i].failure);
        }
    }

    write_aggregates(spec, aggregate_grid(spec, found));
    if (!failures.empty()) {
        std::string body;
        for (const std::string& f : failures) body += f + "\n";
        write_file(fs::path(spec.out_dir) / "failures.txt", body);
        log << failures.size() << " of " << jobs.size() << " runs failed, see "
            << (fs::path(spec.out_dir) / "failures.txt").string() << "\n";
        return 2;
    }
    log << "report: " << (fs::path(spec.out_dir) / "report.csv").string() << "\n";
    return 0;
}

int cmd_report(const ExperimentSpec& spec, std::ostream& log) {
    std::vector<std::vector<std::vector<RunMetrics>>> found(
        spec.models.size(), std::vector<std::vector<RunMetrics>>(spec.dataset.lambdas.size()));
    size_t total = 0;
    for (size_t mi = 0; mi < spec.models.size(); ++mi)
        for (size_t li = 0; li < spec.dataset.lambdas.size(); ++li)
            for (std::uint64_t seed : spec.seeds) {
                fs::path path =
                    metrics_dir(spec) /
                    (run_tag(spec.models[mi].model.name, spec.dataset.lambdas[li], seed) +
                     ".json");
                if (!fs::exists(path)) continue;
                found[mi][li].push_back(metrics_from_json(read_file(path.string())));
                ++total;
            }
    if (total == 0)
        throw ConfigError("no metric files under " + metrics_dir(spec).string() +
                          " match the spec");
    auto agg = aggregate_grid(spec, found);
    write_aggregates(spec, agg);
    log << report_csv(spec, agg, false);
    return 0;
}

std::string report_csv(
    const ExperimentSpec& spec,
    const std::vector<std::vector<std::optional<AggregateMetrics>>>& by_model_lambda,
    bool stds) {
    std::string out = "model";
    for (double lambda : spec.dataset.lambdas) {
        std::string tag = "l" + format_lambda(lambda);
        out += ",ppl@" + tag + ",pplsw@" + tag + ",rec@" + tag;
    }
    out += "\n";
    for (size_t mi = 0; mi < spec.models.size(); ++mi) {
        out += spec.models[mi].model.name;
        for (size_t li = 0; li < spec.dataset.lambdas.size(); ++li) {
            const std::optional<AggregateMetrics>& a = by_model_lambda[mi][li];
            auto put = [&](const std::optional<MetricSummary>& s) {
                out += ",";
                if (!s) return;
                if (stds) {
                    if (s->stddev) out += cell(*s->stddev);
                } else {
                    out += cell(s->mean);
                }
            };
            put(a ? std::optional<MetricSummary>(a->ppl) : std::nullopt);
            put(a ? a->ppl_at_switch : std::nullopt);
            put(a ? a->recovery_time : std::nullopt);
        }
        out += "\n";
    }
    return out;
}

int cmd_analyze(const std::vector<std::string>& trace_paths, const std::string& out_dir,
                long last_m, long autocorr_m, std::ostream& log) {
    if (trace_paths.empty()) throw ConfigError("analyze: no trace files given");
    fs::create_directories(out_dir);
    for (const std::string& path : trace_paths) {
        RunTrace trace = read_trace(path);
        GateLog gates = extract_gate_log(trace);
        std::string stem = fs::path(path).stem().string();

        std::string heat = "t,class";
        for (int m = 0; m < gates.n_modules; ++m) heat += ",w" + std::to_string(m);
        heat += "\n";
        for (const GateEntry& e : gates.entries) {
            heat += std::to_string(e.t) + "," + std::to_string(e.class_id);
            for (double w : e.w) {
                char buf[48];
                std::snprintf(buf, sizeof buf, ",%.10g", w);
                heat += buf;
            }
            heat += "\n";
        }
        write_file(fs::path(out_dir) / (stem + "_heatmap.csv"), heat);

        auto profiles = class_weight_profiles(gates, last_m);
        ClassSimilarity sim = class_correlation(profiles);
        std::string corr = "class";
        for (int c = 0; c < gates.n_classes; ++c) corr += ",c" + std::to_string(c);
        corr += "\n";
        for (int i = 0; i < gates.n_classes; ++i) {
            corr += "c" + std::to_string(i);
            for (int j = 0; j < gates.n_classes; ++j) {
                double v = sim.corr[(size_t)i][(size_t)j];
                if (std::isnan(v)) {
                    corr += ",";
                } else {
                    char buf[48];
                    std::snprintf(buf, sizeof buf, ",%.10g", v);
                    corr += buf;
                }
            }
            corr += "\n";
        }
        write_file(fs::path(out_dir) / (stem + "_corr.csv"), corr);

        Dendrogram tree = hierarchical_cluster(sim);
        json jd;
        jd["n_leaves"] = tree.n_leaves;
        json merges = json::array();
        for (const Merge& m : tree.merges)
            merges.push_back({{"a", m.a}, {"b", m.b}, {"height", m.height}});
        jd["merges"] = merges;
        json cuts = json::array();
        for (long k = 0; k <= (long)tree.merges.size(); ++k) cuts.push_back(cut_clusters(tree, k));
        jd["cuts"] = cuts;
        write_file(fs::path(out_dir) / (stem + "_dendrogram.json"), jd.dump(2) + "\n");

        json ja;
        ja["m"] = autocorr_m;
        json per = json::array();
        for (int c = 0; c < gates.n_classes; ++c) {
            auto ac = autocorrelation(gates, c, autocorr_m);
            per.push_back(ac ? json(*ac) : json(nullptr));
        }
        ja["per_class"] = per;
        write_file(fs::path(out_dir) / (stem + "_autocorr.json"), ja.dump(2) + "\n");

        log << stem << ": heatmap, correlation, dendrogram, autocorrelation written to "
            << out_dir << "\n";
    }
    return 0;
}

std::string cmd_sample(const ExperimentSpec& spec, const std::string& model_name,
                       const std::string& checkpoint_path, const std::string& prompt, int length,
                       double temperature, std::uint64_t seed) {
    const TrainConfig* chosen = nullptr;
    for (const TrainConfig& t : spec.models)
        if (t.model.name == model_name) chosen = &t;
    if (!chosen) throw ConfigError("sample: no model named \"" + model_name + "\" in the spec");

    Vocabulary vocab = dataset_vocab(spec.dataset);
    ModelConfig mc = chosen->model;
    mc.vocab = vocab.size();
    std::unique_ptr<Model> model = build_model(mc);
    load_checkpoint(*model, checkpoint_path);

    std::vector<TokenId> prompt_ids;
    for (const std::string& cp : utf8_codepoints(prompt)) {
        std::optional<TokenId> id = vocab.lookup(cp);
        if (!id) throw ConfigError("sample: prompt character \"" + cp + "\" not in vocabulary");
        prompt_ids.push_back(*id);
    }
    std::vector<TokenId> sampled = sample_text(*model, prompt_ids, length, temperature, seed);
    std::vector<TokenId> full = prompt_ids;
    full.insert(full.end(), sampled.begin(), sampled.end());
    return decode(full, vocab);
}

} // namespace calm
