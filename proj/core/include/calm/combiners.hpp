#pragma once

#include <vector>

#include "calm/matrix.hpp"

namespace calm {

enum class Combiner { Ensemble, Moe, Poe };

const char* combiner_name(Combiner c);
Combiner combiner_from_name(const std::string& name);

// Single-position combination rules. Ensemble averages ready-made
// distributions; the weighted rules take raw expert logits.
std::vector<real> combine_ensemble(const std::vector<std::vector<real>>& expert_probs);
std::vector<real> combine_moe(const std::vector<std::vector<real>>& expert_logits,
                              const std::vector<real>& w);
std::vector<real> combine_poe(const std::vector<std::vector<real>>& expert_logits,
                              const std::vector<real>& w);

// Batched mixture over P positions. Expert logits are P x V step-major
// blocks; w is 1 x n (shared across positions) or P x n (per position).
// Ensemble runs the MoE path with w = 0, which makes "MoE with constant
// weights equals Ensemble" hold bit for bit.
struct MixtureCache {
    Combiner kind = Combiner::Ensemble;
    int n = 0;
    bool broadcast_w = false;
    Matrix probs;                     // P x V combined distribution
    Matrix z;                         // PoE: combined logits
    std::vector<Matrix> expert_probs; // MoE/Ensemble: per-expert softmaxes
    Matrix gate_probs;                // MoE/Ensemble: softmax of w rows
};

void mixture_forward(Combiner kind, const std::vector<const Matrix*>& expert_logits,
                     const Matrix& w, MixtureCache& cache);

// Mean token cross-entropy over positions; sets *clamped when any target
// probability hit the floor.
real mean_cross_entropy(const Matrix& probs, const std::vector<int>& targets,
                        bool* clamped = nullptr);

// Gradients of the mean cross-entropy. dlogits must hold n matrices shaped
// like the logits (accumulated into); dw, when given, matches w's shape.
// PoE routes w_i * dz into expert i, so a zero weight blocks its gradient.
void mixture_backward(const std::vector<const Matrix*>& expert_logits, const Matrix& w,
                      const MixtureCache& cache, const std::vector<int>& targets,
                      std::vector<Matrix>* dlogits, Matrix* dw);

} // namespace calm
