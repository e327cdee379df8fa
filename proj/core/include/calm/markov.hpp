#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "calm/common.hpp"
#include "calm/vocab.hpp"

namespace calm {

// Order-1 chain over V tokens. Kept in double regardless of the library's
// compute precision so generated corpora are identical across builds.
struct MarkovChain {
    int vocab_size = 0;
    std::vector<double> trans; // V x V row-major, each row a distribution

    MarkovChain() = default;
    explicit MarkovChain(int v) : vocab_size(v), trans(static_cast<std::size_t>(v) * v, 0.0) {}

    double& p(int from, int to) { return trans[static_cast<std::size_t>(from) * vocab_size + to]; }
    double p(int from, int to) const { return trans[static_cast<std::size_t>(from) * vocab_size + to]; }

    void validate() const; // rows sum to 1 within 1e-9, entries in [0,1]
    std::vector<double> stationary(int iters = 2000) const;
    // H = -sum_i pi_i sum_j P_ij ln P_ij, in nats per token.
    double entropy_rate() const;
};

// Classes are perturbations of shared per-family base chains: family
// structure is planted in the transition geometry so gate-weight analysis
// has ground truth to recover.
struct MarkovFamilySpec {
    int vocab_size = 32;
    int n_families = 3;
    std::vector<int> family_of_class; // size = class count, values < n_families
    double perturbation = 0.15;       // within-family mixing weight toward a class-specific chain
    int row_support = 4;              // successor tokens with nonzero probability per row
    std::uint64_t seed = 0;
};

// Builds one chain per class. Guarantees (by construction plus assertion)
// that every within-family L1 distance is smaller than every cross-family
// one; retries with a salted seed a few times before giving up.
std::vector<MarkovChain> build_family_chains(const MarkovFamilySpec& spec);

// L1 distance between transition matrices, averaged over rows.
double chain_distance(const MarkovChain& a, const MarkovChain& b);

// First token drawn uniformly unless `start` is given; deterministic in seed.
ClassCorpus generate_markov_corpus(const MarkovChain& chain, int class_id,
                                   const std::string& class_name, std::size_t length,
                                   std::uint64_t seed,
                                   std::optional<TokenId> start = std::nullopt);

} // namespace calm
