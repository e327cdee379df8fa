#include "calm/markov.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace calm {

namespace {

// Random distribution over `support` indices: normalized exponential draws
// (flat Dirichlet), placed into a V-length row.
void fill_row(std::vector<double>& row, const std::vector<int>& support, Rng& rng) {
    std::fill(row.begin(), row.end(), 0.0);
    double sum = 0;
    std::vector<double> w(support.size());
    for (auto& x : w) {
        x = rng.exponential(1.0);
        sum += x;
    }
    for (std::size_t k = 0; k < support.size(); ++k) row[support[k]] = w[k] / sum;
}

std::vector<int> pick_support(int vocab, int support, Rng& rng) {
    std::vector<int> all(vocab);
    std::iota(all.begin(), all.end(), 0);
    rng.shuffle(all);
    all.resize(std::min(vocab, support));
    std::sort(all.begin(), all.end());
    return all;
}

} // namespace

void MarkovChain::validate() const {
    if (vocab_size < 2 || trans.size() != std::size_t(vocab_size) * vocab_size)
        throw ConfigError("markov chain shape invalid");
    for (int i = 0; i < vocab_size; ++i) {
        double sum = 0;
        for (int j = 0; j < vocab_size; ++j) {
            double v = p(i, j);
            if (v < 0 || v > 1 || !std::isfinite(v))
                throw ConfigError("markov row " + std::to_string(i) + " has invalid entry");
            sum += v;
        }
        if (std::fabs(sum - 1.0) > 1e-9)
            throw ConfigError("markov row " + std::to_string(i) + " sums to " + std::to_string(sum));
    }
}

std::vector<double> MarkovChain::stationary(int iters) const {
    std::vector<double> pi(vocab_size, 1.0 / vocab_size), next(vocab_size);
    for (int it = 0; it < iters; ++it) {
        std::fill(next.begin(), next.end(), 0.0);
        for (int i = 0; i < vocab_size; ++i)
            for (int j = 0; j < vocab_size; ++j) next[j] += pi[i] * p(i, j);
        double delta = 0;
        for (int j = 0; j < vocab_size; ++j) delta += std::fabs(next[j] - pi[j]);
        pi.swap(next);
        if (delta < 1e-14) break;
    }
    return pi;
}

double MarkovChain::entropy_rate() const {
    auto pi = stationary();
    double h = 0;
    for (int i = 0; i < vocab_size; ++i)
        for (int j = 0; j < vocab_size; ++j) {
            double v = p(i, j);
            if (v > 0) h -= pi[i] * v * std::log(v);
        }
    return h;
}

double chain_distance(const MarkovChain& a, const MarkovChain& b) {
    if (a.vocab_size != b.vocab_size) throw ConfigError("chain_distance: vocab mismatch");
    double total = 0;
    for (std::size_t k = 0; k < a.trans.size(); ++k) total += std::fabs(a.trans[k] - b.trans[k]);
    return total / a.vocab_size;
}

std::vector<MarkovChain> build_family_chains(const MarkovFamilySpec& spec) {
    if (spec.family_of_class.empty()) throw ConfigError("family_of_class is empty");
    if (spec.vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
    if (spec.n_families < 1) throw ConfigError("n_families must be >= 1");
    if (spec.perturbation < 0 || spec.perturbation >= 1)
        throw ConfigError("perturbation must be in [0, 1)");
    for (int f : spec.family_of_class)
        if (f < 0 || f >= spec.n_families)
            throw ConfigError("family id " + std::to_string(f) + " out of range");

    const int V = spec.vocab_size;
    const int n_classes = int(spec.family_of_class.size());
    const int support = std::max(2, std::min(V, spec.row_support));

    // The construction makes within-family distances ~perturbation while
    // cross-family rows live on independently drawn supports; the assertion
    // below guards against an unlucky draw, retrying on a salted seed.
    for (std::uint64_t salt = 0; salt < 8; ++salt) {
        Rng rng(mix_seed(spec.seed, salt));
        std::vector<std::vector<std::vector<int>>> fam_support(spec.n_families);
        std::vector<MarkovChain> bases;
        for (int f = 0; f < spec.n_families; ++f) {
            MarkovChain base(V);
            fam_support[f].resize(V);
            for (int i = 0; i < V; ++i) {
                fam_support[f][i] = pick_support(V, support, rng);
                std::vector<double> row(V);
                fill_row(row, fam_support[f][i], rng);
                for (int j = 0; j < V; ++j) base.p(i, j) = row[j];
            }
            bases.push_back(std::move(base));
        }

        std::vector<MarkovChain> chains;
        for (int c = 0; c < n_classes; ++c) {
            const int f = spec.family_of_class[c];
            MarkovChain chain(V);
            std::vector<double> q(V);
            for (int i = 0; i < V; ++i) {
                fill_row(q, fam_support[f][i], rng);
                for (int j = 0; j < V; ++j)
                    chain.p(i, j) = (1 - spec.perturbation) * bases[f].p(i, j) +
                                    spec.perturbation * q[j];
            }
            chain.validate();
            chains.push_back(std::move(chain));
        }

        double max_within = 0, min_cross = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n_classes; ++i)
            for (int j = i + 1; j < n_classes; ++j) {
                double d = chain_distance(chains[i], chains[j]);
                if (spec.family_of_class[i] == spec.family_of_class[j])
                    max_within = std::max(max_within, d);
                else
                    min_cross = std::min(min_cross, d);
            }
        if (max_within < min_cross) return chains;
    }
    throw ConfigError("could not realize the family separation; widen supports or lower perturbation");
}

ClassCorpus generate_markov_corpus(const MarkovChain& chain, int class_id,
                                   const std::string& class_name, std::size_t length,
                                   std::uint64_t seed, std::optional<TokenId> start) {
    chain.validate();
    if (length == 0) throw ConfigError("corpus length must be positive");
    Rng rng(seed);
    ClassCorpus corpus;
    corpus.class_id = class_id;
    corpus.class_name = class_name;
    corpus.tokens.reserve(length);

    TokenId cur = start ? *start : TokenId(rng.uniform_int(chain.vocab_size));
    if (cur >= TokenId(chain.vocab_size)) throw ConfigError("start token out of range");
    corpus.tokens.push_back(cur);
    while (corpus.tokens.size() < length) {
        double u = rng.uniform();
        double acc = 0;
        int next = chain.vocab_size - 1;
        for (int j = 0; j < chain.vocab_size; ++j) {
            acc += chain.p(cur, j);
            if (u < acc) {
                next = j;
                break;
            }
        }
        cur = TokenId(next);
        corpus.tokens.push_back(cur);
    }
    return corpus;
}

} // namespace calm
