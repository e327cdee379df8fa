#include "calm/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace calm {
namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

// Pearson across coordinates; NaN when either side has zero variance,
// except that exactly equal vectors correlate perfectly.
double pearson(const std::vector<double>& u, const std::vector<double>& v) {
    size_t n = u.size();
    double mu = 0, mv = 0;
    for (size_t i = 0; i < n; ++i) {
        mu += u[i];
        mv += v[i];
    }
    mu /= double(n);
    mv /= double(n);
    double suv = 0, suu = 0, svv = 0;
    for (size_t i = 0; i < n; ++i) {
        suv += (u[i] - mu) * (v[i] - mv);
        suu += (u[i] - mu) * (u[i] - mu);
        svv += (v[i] - mv) * (v[i] - mv);
    }
    if (suu == 0 || svv == 0) return u == v ? 1.0 : kNan;
    return std::clamp(suv / std::sqrt(suu * svv), -1.0, 1.0);
}

std::vector<double> window_mean(const std::vector<const GateEntry*>& entries, size_t begin,
                                size_t end, int n_modules) {
    std::vector<double> mean((size_t)n_modules, 0.0);
    for (size_t i = begin; i < end; ++i)
        for (int m = 0; m < n_modules; ++m) mean[(size_t)m] += entries[i]->w[(size_t)m];
    for (double& x : mean) x /= double(end - begin);
    return mean;
}

std::vector<const GateEntry*> entries_of_class(const GateLog& log, int class_id) {
    std::vector<const GateEntry*> out;
    for (const GateEntry& e : log.entries)
        if (e.class_id == class_id) out.push_back(&e);
    return out;
}

} // namespace

GateLog extract_gate_log(const RunTrace& trace) {
    GateLog log;
    log.n_classes = trace.n_classes;
    bool any = false;
    for (const TraceRecord& r : trace.records)
        if (!r.gates.empty()) {
            any = true;
            log.n_modules = (int)r.gates.size();
            break;
        }
    if (!any) throw ConfigError("no gates logged for model " + trace.model_name);
    for (const TraceRecord& r : trace.records) {
        if ((int)r.gates.size() != log.n_modules)
            throw MetricError("gate log malformed at t=" + std::to_string(r.t) + ": got " +
                              std::to_string(r.gates.size()) + " weights, expected " +
                              std::to_string(log.n_modules));
        log.entries.push_back({r.t, r.true_class, r.gates});
    }
    return log;
}

std::vector<std::optional<ClassProfile>> class_weight_profiles(const GateLog& log, long last_m) {
    if (last_m < 1) throw MetricError("class_weight_profiles: last_m must be at least 1");
    std::vector<std::optional<ClassProfile>> out((size_t)log.n_classes);
    for (int c = 0; c < log.n_classes; ++c) {
        std::vector<const GateEntry*> mine = entries_of_class(log, c);
        if (mine.empty()) continue;
        ClassProfile p;
        p.class_id = c;
        p.used = std::min<long>(last_m, (long)mine.size());
        p.truncated = (long)mine.size() < last_m;
        p.w = window_mean(mine, mine.size() - (size_t)p.used, mine.size(), log.n_modules);
        out[(size_t)c] = p;
    }
    return out;
}

ClassSimilarity class_correlation(const std::vector<std::optional<ClassProfile>>& profiles) {
    ClassSimilarity sim;
    sim.profiles = profiles;
    size_t n = profiles.size();
    int observed = 0;
    int modules = 0;
    for (const auto& p : profiles)
        if (p) {
            ++observed;
            modules = (int)p->w.size();
        }
    if (observed < 2) throw MetricError("class_correlation: need at least 2 observed classes");
    if (modules < 2) throw MetricError("class_correlation: need at least 2 modules");

    sim.corr.assign(n, std::vector<double>(n, kNan));
    for (size_t i = 0; i < n; ++i) {
        if (!profiles[i]) continue;
        sim.corr[i][i] = 1.0;
        for (size_t j = i + 1; j < n; ++j) {
            if (!profiles[j]) continue;
            double r = pearson(profiles[i]->w, profiles[j]->w);
            sim.corr[i][j] = r;
            sim.corr[j][i] = r;
        }
    }
    return sim;
}

std::optional<double> autocorrelation(const GateLog& log, int class_id, long m) {
    if (m < 1) throw MetricError("autocorrelation: m must be at least 1");
    if (class_id < 0 || class_id >= log.n_classes)
        throw MetricError("autocorrelation: class " + std::to_string(class_id) +
                          " outside 0.." + std::to_string(log.n_classes - 1));
    std::vector<const GateEntry*> mine = entries_of_class(log, class_id);
    if ((long)mine.size() < 2 * m) return std::nullopt;
    std::vector<double> last = window_mean(mine, mine.size() - (size_t)m, mine.size(), log.n_modules);
    std::vector<double> prev = window_mean(mine, mine.size() - (size_t)(2 * m),
                                           mine.size() - (size_t)m, log.n_modules);
    double r = pearson(last, prev);
    if (std::isnan(r)) return std::nullopt;
    return r;
}

Dendrogram hierarchical_cluster(const ClassSimilarity& sim) {
    int n = (int)sim.profiles.size();
    for (int i = 0; i < n; ++i) {
        if (!sim.profiles[(size_t)i])
            throw MetricError("hierarchical_cluster: class " + std::to_string(i) +
                              " was never observed");
        for (int j = 0; j < n; ++j)
            if (std::isnan(sim.corr[(size_t)i][(size_t)j]))
                throw MetricError("hierarchical_cluster: correlation of classes " +
                                  std::to_string(i) + " and " + std::to_string(j) +
                                  " is undefined");
    }

    Dendrogram tree;
    tree.n_leaves = n;
    struct Cluster {
        int id = 0;
        std::vector<int> members;
    };
    std::vector<Cluster> active;
    for (int i = 0; i < n; ++i) active.push_back({i, {i}});

    // O(n^3) over class counts is nothing; clarity beats a heap here.
    auto linkage = [&](const Cluster& a, const Cluster& b) {
        double acc = 0;
        for (int i : a.members)
            for (int j : b.members) acc += 1.0 - sim.corr[(size_t)i][(size_t)j];
        return acc / double(a.members.size() * b.members.size());
    };

    int next_id = n;
    while (active.size() > 1) {
        size_t bi = 0, bj = 1;
        double best = linkage(active[0], active[1]);
        for (size_t i = 0; i < active.size(); ++i)
            for (size_t j = i + 1; j < active.size(); ++j) {
                double d = linkage(active[i], active[j]);
                // Members are sorted and disjoint, so ordering the pair by
                // member lists and concatenating yields a total order.
                bool better = d < best;
                if (d == best && !(i == bi && j == bj)) {
                    auto key = [&](size_t a, size_t b) {
                        const std::vector<int>& ma = active[a].members;
                        const std::vector<int>& mb = active[b].members;
                        std::vector<int> k = std::min(ma, mb);
                        const std::vector<int>& rest = ma < mb ? mb : ma;
                        k.insert(k.end(), rest.begin(), rest.end());
                        return k;
                    };
                    better = key(i, j) < key(bi, bj);
                }
                if (better) {
                    best = d;
                    bi = i;
                    bj = j;
                }
            }
        Cluster merged;
        merged.id = next_id++;
        merged.members = active[bi].members;
        merged.members.insert(merged.members.end(), active[bj].members.begin(),
                              active[bj].members.end());
        std::sort(merged.members.begin(), merged.members.end());
        tree.merges.push_back({std::min(active[bi].id, active[bj].id),
                               std::max(active[bi].id, active[bj].id), best});
        active.erase(active.begin() + (long)bj);
        active.erase(active.begin() + (long)bi);
        active.push_back(merged);
    }
    return tree;
}

std::vector<std::vector<int>> cut_clusters(const Dendrogram& tree, long n_merges) {
    if (n_merges < 0 || n_merges > (long)tree.merges.size())
        throw MetricError("cut_clusters: " + std::to_string(n_merges) + " merges out of 0.." +
                          std::to_string(tree.merges.size()));
    std::vector<std::vector<int>> members;
    std::vector<bool> consumed;
    for (int i = 0; i < tree.n_leaves; ++i) {
        members.push_back({i});
        consumed.push_back(false);
    }
    for (long j = 0; j < n_merges; ++j) {
        const Merge& m = tree.merges[(size_t)j];
        std::vector<int> joined = members[(size_t)m.a];
        joined.insert(joined.end(), members[(size_t)m.b].begin(), members[(size_t)m.b].end());
        std::sort(joined.begin(), joined.end());
        consumed[(size_t)m.a] = true;
        consumed[(size_t)m.b] = true;
        members.push_back(joined);
        consumed.push_back(false);
    }
    std::vector<std::vector<int>> out;
    for (size_t i = 0; i < members.size(); ++i)
        if (!consumed[i]) out.push_back(members[i]);
    std::sort(out.begin(), out.end());
    return out;
}

} // namespace calm
