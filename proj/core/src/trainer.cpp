#include "calm/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

namespace calm {
namespace {

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void check_config(const TrainConfig& cfg) {
    if (cfg.learn_iters < 1) throw ConfigError("trainer: learn_iters must be positive");
    if (!(cfg.warmup_frac >= 0.0 && cfg.warmup_frac < 1.0))
        throw ConfigError("trainer: warmup fraction must lie in [0, 1)");
}

void check_vocab(const Model& model, const std::vector<ClassCorpus>& corpora) {
    const TokenId vocab = TokenId(model.config().vocab);
    for (const ClassCorpus& c : corpora)
        for (TokenId t : c.tokens)
            if (t >= vocab)
                throw ConfigError("trainer: corpus token " + std::to_string(t) +
                                  " outside the model's vocabulary of " + std::to_string(vocab));
}

nlohmann::json record_json(const TraceRecord& r) {
    nlohmann::json j;
    j["t"] = r.t;
    j["loss"] = r.loss;
    j["true_class"] = r.true_class;
    j["is_switch"] = r.is_switch;
    j["in_eval_span"] = r.in_eval_span;
    j["clamped"] = r.clamped;
    if (!r.gates.empty()) j["gates"] = r.gates;
    return j;
}

TraceRecord record_from_json(const nlohmann::json& j) {
    TraceRecord r;
    r.t = j.at("t").get<long>();
    r.loss = j.at("loss").get<double>();
    r.true_class = j.at("true_class").get<int>();
    r.is_switch = j.at("is_switch").get<bool>();
    r.in_eval_span = j.at("in_eval_span").get<bool>();
    r.clamped = j.at("clamped").get<bool>();
    if (j.contains("gates")) r.gates = j.at("gates").get<std::vector<double>>();
    return r;
}

} // namespace

std::string train_config_digest(const TrainConfig& cfg, double lambda_tokens) {
    const ModelConfig& m = cfg.model;
    std::ostringstream key;
    key << "name=" << m.name << ";arch=" << arch_name(m.arch)
        << ";combiner=" << combiner_name(m.combiner) << ";gate=" << gate_name(m.gate)
        << ";modules=" << m.modules << ";vocab=" << m.vocab << ";nhid=" << m.nhid
        << ";embed=" << m.embed << ";gating_nhid=" << m.gating_nhid
        << ";mos_heads=" << m.mos_heads << ";clear_gating=" << int(m.clear_gating)
        << ";dropout=" << fmt_double(m.dropout) << ";adapt_iters=" << m.adapt_iters
        << ";adapt_lr=" << fmt_double(m.adapt_lr) << ";lr=" << fmt_double(m.adam.lr)
        << ";beta1=" << fmt_double(m.adam.beta1) << ";beta2=" << fmt_double(m.adam.beta2)
        << ";eps=" << fmt_double(m.adam.eps) << ";learn_iters=" << cfg.learn_iters
        << ";warmup=" << fmt_double(cfg.warmup_frac) << ";lambda=" << fmt_double(lambda_tokens);
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(key.str())));
    return buf;
}

TraceRecord prequential_step(Model& model, const TokenBatch& batch, int learn_iters,
                             bool log_gates) {
    if (learn_iters < 1) throw ConfigError("trainer: learn_iters must be positive");
    if (model.wants_true_class()) model.set_true_class(batch.true_class);

    TraceRecord rec;
    rec.t = batch.t;
    rec.true_class = batch.true_class;
    rec.is_switch = batch.is_switch;

    const ModelInput in = model_view(batch);
    const EvalRecord eval = model.evaluate(in);
    rec.loss = eval.loss;
    rec.clamped = eval.clamped;
    if (log_gates) rec.gates = model.gate_values();

    for (int i = 0; i < learn_iters; ++i) model.train_iteration(in);
    model.advance_state();
    return rec;
}

RunTrace run_experiment(Model& model, const TrainConfig& cfg, std::uint64_t run_seed,
                        const FragmentSchedule& schedule,
                        const std::vector<ClassCorpus>& corpora) {
    check_config(cfg);
    check_vocab(model, corpora);

    RunTrace trace;
    trace.model_name = cfg.model.name;
    trace.run_seed = run_seed;
    trace.schedule_seed = schedule.seed;
    trace.model_seed = model.config().seed;
    trace.lambda_tokens = schedule.lambda_tokens;
    trace.total_batches = schedule.total_batches();
    trace.n_classes = schedule.n_classes;
    trace.warmup_frac = cfg.warmup_frac;
    trace.eval_start = long(std::floor(cfg.warmup_frac * double(trace.total_batches)));
    trace.config_digest = train_config_digest(cfg, schedule.lambda_tokens);
    trace.records.reserve(size_t(trace.total_batches));

    model.reset_state(schedule.batch_rows);
    StreamIterator stream(schedule, corpora);
    while (auto batch = stream.next()) {
        try {
            TraceRecord rec = prequential_step(model, *batch, cfg.learn_iters, cfg.log_gates);
            if (!std::isfinite(rec.loss))
                throw NumericError("non-finite loss " + std::to_string(rec.loss));
            rec.in_eval_span = rec.t >= trace.eval_start;
            trace.records.push_back(std::move(rec));
        } catch (const NumericError& e) {
            trace.aborted = true;
            trace.abort_reason = "batch " + std::to_string(batch->t) + ": " + e.what();
            break;
        }
    }
    return trace;
}

RunTrace run_experiment(const TrainConfig& cfg, std::uint64_t run_seed,
                        const FragmentSchedule& schedule,
                        const std::vector<ClassCorpus>& corpora) {
    check_config(cfg);
    ModelConfig mc = cfg.model;
    mc.seed = mix_seed(run_seed, fnv1a(mc.name));
    auto model = build_model(mc);
    return run_experiment(*model, cfg, run_seed, schedule, corpora);
}

std::string trace_to_jsonl(const RunTrace& trace) {
    nlohmann::json meta;
    meta["model"] = trace.model_name;
    meta["run_seed"] = trace.run_seed;
    meta["schedule_seed"] = trace.schedule_seed;
    meta["model_seed"] = trace.model_seed;
    meta["lambda_tokens"] = trace.lambda_tokens;
    meta["total_batches"] = trace.total_batches;
    meta["n_classes"] = trace.n_classes;
    meta["warmup_frac"] = trace.warmup_frac;
    meta["eval_start"] = trace.eval_start;
    meta["config_digest"] = trace.config_digest;
    meta["aborted"] = trace.aborted;
    meta["abort_reason"] = trace.abort_reason;

    std::string out = meta.dump();
    out.push_back('\n');
    for (const TraceRecord& r : trace.records) {
        out += record_json(r).dump();
        out.push_back('\n');
    }
    return out;
}

RunTrace trace_from_jsonl(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.empty())
        throw IngestError("trace: missing metadata line");
    RunTrace trace;
    try {
        nlohmann::json meta = nlohmann::json::parse(line);
        trace.model_name = meta.at("model").get<std::string>();
        trace.run_seed = meta.at("run_seed").get<std::uint64_t>();
        trace.schedule_seed = meta.at("schedule_seed").get<std::uint64_t>();
        trace.model_seed = meta.at("model_seed").get<std::uint64_t>();
        trace.lambda_tokens = meta.at("lambda_tokens").get<double>();
        trace.total_batches = meta.at("total_batches").get<long>();
        trace.n_classes = meta.at("n_classes").get<int>();
        trace.warmup_frac = meta.at("warmup_frac").get<double>();
        trace.eval_start = meta.at("eval_start").get<long>();
        trace.config_digest = meta.at("config_digest").get<std::string>();
        trace.aborted = meta.at("aborted").get<bool>();
        trace.abort_reason = meta.at("abort_reason").get<std::string>();
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            trace.records.push_back(record_from_json(nlohmann::json::parse(line)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IngestError(std::string("trace: malformed JSONL: ") + e.what());
    }
    return trace;
}

void write_trace(const RunTrace& trace, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write trace '" + path + "'");
    out << trace_to_jsonl(trace);
    if (!out) throw IngestError("short write on trace '" + path + "'");
}

RunTrace read_trace(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot read trace '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return trace_from_jsonl(buf.str());
}

} // namespace calm
