#include "calm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include <json.hpp>

namespace calm {
namespace {

using nlohmann::json;

// All aggregation here runs in double with fixed-order sums; traces are
// double end to end regardless of the model's scalar type.

void ensure_complete(const RunTrace& trace) {
    if (trace.aborted)
        throw MetricError("metrics on aborted trace (" + trace.abort_reason + ")");
    if ((long)trace.records.size() != trace.total_batches)
        throw MetricError("trace truncated: " + std::to_string(trace.records.size()) +
                          " records for " + std::to_string(trace.total_batches) + " batches");
    for (size_t i = 0; i < trace.records.size(); ++i) {
        const TraceRecord& r = trace.records[i];
        if (r.t != (long)i)
            throw MetricError("trace records out of order at index " + std::to_string(i));
        if (r.true_class < 0 || (trace.n_classes > 0 && r.true_class >= trace.n_classes))
            throw MetricError("record " + std::to_string(i) + ": class " +
                              std::to_string(r.true_class) + " outside 0.." +
                              std::to_string(trace.n_classes - 1));
    }
}

// The ordered full log is what makes "next switch" the fragment end.
void ensure_switch_log(const RunTrace& trace, const std::vector<SwitchRecord>& switches) {
    long prev_t = 0;
    for (size_t j = 0; j < switches.size(); ++j) {
        const SwitchRecord& s = switches[j];
        if (s.fragment_index != (long)j + 1)
            throw MetricError("switch log not contiguous at entry " + std::to_string(j));
        if (s.t <= prev_t || s.t >= trace.total_batches)
            throw MetricError("switch at t=" + std::to_string(s.t) + " outside trace");
        if (s.prev_fragment && (*s.prev_fragment < 0 || *s.prev_fragment > (long)j))
            throw MetricError("switch " + std::to_string(j + 1) + ": bad predecessor index");
        prev_t = s.t;
    }
}

// [start, end) of fragment p, given the ordered log. Fragment p+1 starts at
// switches[p].t; the last fragment runs to the end of the trace.
long fragment_start(const std::vector<SwitchRecord>& switches, long p) {
    return p == 0 ? 0 : switches[p - 1].t;
}
long fragment_end(const RunTrace& trace, const std::vector<SwitchRecord>& switches, long p) {
    return p < (long)switches.size() ? switches[p].t : trace.total_batches;
}

double mean_loss(const RunTrace& trace, long begin, long end) {
    double acc = 0;
    for (long t = begin; t < end; ++t) acc += trace.records[t].loss;
    return acc / double(end - begin);
}

struct SwitchWindow {
    int class_id = 0;
    double mean = 0;
};

// Window means for every eval-span switch; the global and per-class
// ppl_at_switch are both means over (subsets of) these.
std::vector<SwitchWindow> switch_window_means(const RunTrace& trace,
                                              const std::vector<SwitchRecord>& switches, int k) {
    if (k < 1) throw MetricError("ppl_at_switch: window must be at least 1");
    std::vector<SwitchWindow> out;
    for (size_t j = 0; j < switches.size(); ++j) {
        const SwitchRecord& s = switches[j];
        if (s.t < trace.eval_start) continue;
        long end = fragment_end(trace, switches, s.fragment_index);
        long win = std::min<long>(k, end - s.t);
        out.push_back({s.class_id, mean_loss(trace, s.t, s.t + win)});
    }
    return out;
}

struct SwitchRec {
    int class_id = 0;
    long rec = 0;
    bool censored = false;
};

std::vector<SwitchRec> switch_recs(const RunTrace& trace,
                                   const std::vector<SwitchRecord>& switches) {
    std::vector<SwitchRec> out;
    for (size_t j = 0; j < switches.size(); ++j) {
        const SwitchRecord& s = switches[j];
        if (s.t < trace.eval_start || !s.prev_fragment) continue;
        long p = *s.prev_fragment;
        double ref = mean_loss(trace, fragment_start(switches, p), fragment_end(trace, switches, p));
        long len = fragment_end(trace, switches, s.fragment_index) - s.t;
        SwitchRec r{s.class_id, len, true};
        for (long step = 1; step <= len; ++step) {
            if (trace.records[s.t + step - 1].loss <= ref) {
                r.rec = step;
                r.censored = false;
                break;
            }
        }
        out.push_back(r);
    }
    return out;
}

std::optional<double> json_opt(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<double>();
}

json opt_json(const std::optional<double>& v) {
    if (!v) return nullptr;
    return *v;
}

MetricSummary summarize(const std::vector<double>& values) {
    MetricSummary s;
    s.n = (int)values.size();
    double acc = 0;
    for (double v : values) acc += v;
    s.mean = acc / double(s.n);
    if (s.n > 1) {
        double sq = 0;
        for (double v : values) sq += (v - s.mean) * (v - s.mean);
        s.stddev = std::sqrt(sq / double(s.n - 1));
    }
    return s;
}

} // namespace

double avg_perplexity(const RunTrace& trace, long eval_start) {
    ensure_complete(trace);
    double acc = 0;
    long n = 0;
    for (const TraceRecord& r : trace.records) {
        if (r.t < eval_start) continue;
        acc += r.loss;
        ++n;
    }
    if (n == 0) throw MetricError("avg_perplexity: empty eval span");
    return std::exp(acc / double(n));
}

std::optional<double> ppl_at_switch(const RunTrace& trace,
                                    const std::vector<SwitchRecord>& switches, int k,
                                    long* counted) {
    ensure_complete(trace);
    ensure_switch_log(trace, switches);
    std::vector<SwitchWindow> wins = switch_window_means(trace, switches, k);
    if (counted) *counted = (long)wins.size();
    if (wins.empty()) return std::nullopt;
    double acc = 0;
    for (const SwitchWindow& w : wins) acc += w.mean;
    return std::exp(acc / double(wins.size()));
}

RecoveryResult recovery_time(const RunTrace& trace, const std::vector<SwitchRecord>& switches) {
    ensure_complete(trace);
    ensure_switch_log(trace, switches);
    std::vector<SwitchRec> recs = switch_recs(trace, switches);
    RecoveryResult out;
    out.counted = (long)recs.size();
    if (recs.empty()) return out;
    double acc = 0;
    for (const SwitchRec& r : recs) {
        acc += double(r.rec);
        if (r.censored) ++out.censored;
    }
    out.mean = acc / double(out.counted);
    return out;
}

std::vector<SwitchRecord> derive_switch_log(const RunTrace& trace) {
    ensure_complete(trace);
    std::vector<SwitchRecord> out;
    if (trace.records.empty()) return out;
    // Fragment boundaries are the flagged records; class identity comes from
    // the records themselves, so no schedule is needed.
    std::unordered_map<int, long> last_of_class;
    last_of_class[trace.records[0].true_class] = 0;
    long fragment = 0;
    for (const TraceRecord& r : trace.records) {
        if (r.t == 0 || !r.is_switch) continue;
        ++fragment;
        SwitchRecord s;
        s.fragment_index = fragment;
        s.t = r.t;
        s.class_id = r.true_class;
        auto it = last_of_class.find(s.class_id);
        if (it != last_of_class.end()) s.prev_fragment = it->second;
        last_of_class[s.class_id] = fragment;
        out.push_back(s);
    }
    return out;
}

RunMetrics compute_metrics(const RunTrace& trace, int k) {
    ensure_complete(trace);
    std::vector<SwitchRecord> switches = derive_switch_log(trace);

    RunMetrics m;
    m.model_name = trace.model_name;
    m.config_digest = trace.config_digest;
    m.run_seed = trace.run_seed;
    m.lambda_tokens = trace.lambda_tokens;
    m.ppl = avg_perplexity(trace, trace.eval_start);
    m.ppl_at_switch = ppl_at_switch(trace, switches, k, &m.sw_counted);
    RecoveryResult rec = recovery_time(trace, switches);
    m.recovery_time = rec.mean;
    m.rec_counted = rec.counted;
    m.rec_censored = rec.censored;

    std::vector<SwitchWindow> wins = switch_window_means(trace, switches, k);
    std::vector<SwitchRec> recs = switch_recs(trace, switches);
    for (int c = 0; c < trace.n_classes; ++c) {
        ClassMetrics cm;
        cm.class_id = c;
        double loss_acc = 0;
        long loss_n = 0;
        for (const TraceRecord& r : trace.records) {
            if (r.t < trace.eval_start || r.true_class != c) continue;
            loss_acc += r.loss;
            ++loss_n;
        }
        if (loss_n > 0) cm.ppl = std::exp(loss_acc / double(loss_n));
        double win_acc = 0;
        long win_n = 0;
        for (const SwitchWindow& w : wins) {
            if (w.class_id != c) continue;
            win_acc += w.mean;
            ++win_n;
        }
        if (win_n > 0) cm.ppl_at_switch = std::exp(win_acc / double(win_n));
        double rec_acc = 0;
        long rec_n = 0;
        for (const SwitchRec& r : recs) {
            if (r.class_id != c) continue;
            rec_acc += double(r.rec);
            ++rec_n;
            if (r.censored) ++cm.rec_censored;
        }
        if (rec_n > 0) cm.recovery_time = rec_acc / double(rec_n);
        m.per_class.push_back(cm);
    }
    return m;
}

AggregateMetrics aggregate_runs(const std::vector<RunMetrics>& runs) {
    if (runs.empty()) throw MetricError("aggregate_runs: no runs");
    AggregateMetrics a;
    a.model_name = runs[0].model_name;
    a.config_digest = runs[0].config_digest;
    a.n_runs = (int)runs.size();
    std::vector<double> ppl, sw, rec;
    for (const RunMetrics& r : runs) {
        if (r.config_digest != a.config_digest)
            throw MetricError("aggregate_runs: config mismatch (" + runs[0].model_name + " " +
                              a.config_digest + " vs " + r.model_name + " " + r.config_digest +
                              ")");
        ppl.push_back(r.ppl);
        if (r.ppl_at_switch) sw.push_back(*r.ppl_at_switch);
        if (r.recovery_time) rec.push_back(*r.recovery_time);
        a.rec_censored += r.rec_censored;
    }
    a.ppl = summarize(ppl);
    if (!sw.empty()) a.ppl_at_switch = summarize(sw);
    if (!rec.empty()) a.recovery_time = summarize(rec);
    return a;
}

std::string metrics_to_json(const RunMetrics& m) {
    json j;
    j["model"] = m.model_name;
    j["config_digest"] = m.config_digest;
    j["run_seed"] = m.run_seed;
    j["lambda_tokens"] = m.lambda_tokens;
    j["ppl"] = m.ppl;
    j["ppl_at_switch"] = opt_json(m.ppl_at_switch);
    j["recovery_time"] = opt_json(m.recovery_time);
    j["sw_counted"] = m.sw_counted;
    j["rec_counted"] = m.rec_counted;
    j["rec_censored"] = m.rec_censored;
    json per = json::array();
    for (const ClassMetrics& c : m.per_class) {
        json jc;
        jc["class_id"] = c.class_id;
        jc["ppl"] = opt_json(c.ppl);
        jc["ppl_at_switch"] = opt_json(c.ppl_at_switch);
        jc["recovery_time"] = opt_json(c.recovery_time);
        jc["rec_censored"] = c.rec_censored;
        per.push_back(jc);
    }
    j["per_class"] = per;
    return j.dump(2) + "\n";
}

RunMetrics metrics_from_json(const std::string& text) {
    try {
        json j = json::parse(text);
        RunMetrics m;
        m.model_name = j.at("model").get<std::string>();
        m.config_digest = j.at("config_digest").get<std::string>();
        m.run_seed = j.at("run_seed").get<std::uint64_t>();
        m.lambda_tokens = j.at("lambda_tokens").get<double>();
        m.ppl = j.at("ppl").get<double>();
        m.ppl_at_switch = json_opt(j, "ppl_at_switch");
        m.recovery_time = json_opt(j, "recovery_time");
        m.sw_counted = j.at("sw_counted").get<long>();
        m.rec_counted = j.at("rec_counted").get<long>();
        m.rec_censored = j.at("rec_censored").get<long>();
        for (const json& jc : j.at("per_class")) {
            ClassMetrics c;
            c.class_id = jc.at("class_id").get<int>();
            c.ppl = json_opt(jc, "ppl");
            c.ppl_at_switch = json_opt(jc, "ppl_at_switch");
            c.recovery_time = json_opt(jc, "recovery_time");
            c.rec_censored = jc.at("rec_censored").get<long>();
            m.per_class.push_back(c);
        }
        return m;
    } catch (const json::exception& e) {
        throw IngestError(std::string("metrics json: ") + e.what());
    }
}

std::string aggregate_to_json(const AggregateMetrics& a) {
    auto summary_json = [](const MetricSummary& s) {
        json j;
        j["mean"] = s.mean;
        j["std"] = opt_json(s.stddev);
        j["n"] = s.n;
        return j;
    };
    json j;
    j["model"] = a.model_name;
    j["config_digest"] = a.config_digest;
    j["n_runs"] = a.n_runs;
    j["ppl"] = summary_json(a.ppl);
    j["ppl_at_switch"] = a.ppl_at_switch ? summary_json(*a.ppl_at_switch) : json(nullptr);
    j["recovery_time"] = a.recovery_time ? summary_json(*a.recovery_time) : json(nullptr);
    j["rec_censored"] = a.rec_censored;
    return j.dump(2) + "\n";
}

} // namespace calm
