#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "calm/combiners.hpp"
#include "calm/lstm.hpp"
#include "calm/matrix.hpp"
#include "calm/optim.hpp"
#include "calm/stream.hpp"

namespace calm {

enum class Arch { Lstm, Mos, Experts, Oracle };
enum class GateKind { Uniform, LstmGate, Plastic };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& name);
const char* gate_name(GateKind g);
GateKind gate_from_name(const std::string& name);

struct ModelConfig {
    std::string name;
    Arch arch = Arch::Lstm;
    Combiner combiner = Combiner::Ensemble; // Experts only
    GateKind gate = GateKind::Uniform;      // Experts only
    int modules = 1;                        // expert count / oracle class count
    int vocab = 0;
    int nhid = 0;
    int embed = 0;       // 0 resolves to nhid
    int gating_nhid = 0; // gate LSTM width, 0 resolves to nhid
    int mos_heads = 3;
    bool clear_gating = false;
    double dropout = 0.0;
    int adapt_iters = 1;    // plastic gate steps per learning iteration
    double adapt_lr = 0.1;  // plastic gate step size
    std::uint64_t seed = 0; // initialization seed
    AdamHyper adam;
};

struct EvalRecord {
    double loss = 0;
    bool clamped = false;
};

// Online language model under the evaluate-then-train protocol. evaluate()
// runs dropout-free from the committed recurrent state and parks its end
// state in a staging buffer; training iterations rerun from the committed
// state; advance_state() adopts the staged state for the next batch.
class Model {
public:
    virtual ~Model() = default;

    virtual const ModelConfig& config() const = 0;
    virtual void reset_state(int rows) = 0;
    virtual EvalRecord evaluate(const ModelInput& in) = 0;
    // Forward + backward from the committed state: returns the batch loss
    // and accumulates parameter gradients without stepping the optimizer.
    virtual double forward_backward(const ModelInput& in) = 0;
    // One optimizer step (plus any gate adaptation steps) on the batch.
    virtual void train_iteration(const ModelInput& in) = 0;
    virtual void advance_state() = 0;

    // Combination weights as used by the latest evaluation pass, averaged
    // over positions; plastic gates report their current values. Empty when
    // the model has no gates.
    virtual std::vector<double> gate_values() const { return {}; }

    virtual bool wants_true_class() const { return false; }
    virtual void set_true_class(int) {}

    // Feeds one token, advances the committed state, and returns the
    // predictive distribution for the next token (single-stream sampling).
    virtual std::vector<real> next_distribution(TokenId token) = 0;

    // Persistent tensors: trainable parameters plus gate values, in a fixed
    // order; the basis for checkpoints and parameter counting.
    virtual void collect_params(std::vector<ParamRef>& out) = 0;
    virtual long param_count() const = 0;
};

// Oracle models hold one independent per-class net; class c's net draws its
// initialization from mix_seed(cfg.seed, c), so a paired single-class run is
// reproducible with a plain LSTM.
std::unique_ptr<Model> build_model(const ModelConfig& cfg);

// Mixture of softmaxes over one trunk output: probs[p] = sum_k pi_k(h_p) *
// softmax(h_p * head_w[k] + head_b[k]) with pi = softmax of the prior head.
Matrix mos_probs(const Matrix& h, const std::vector<const Matrix*>& head_w,
                 const std::vector<const Matrix*>& head_b, const Matrix& prior_w,
                 const Matrix& prior_b);

// k gradient-descent steps on the gate values only, minimizing the mean
// cross-entropy of the cached expert logits against the targets.
void plastic_update(Combiner kind, const std::vector<const Matrix*>& expert_logits, Matrix& w,
                    const std::vector<int>& targets, int k, double lr);

// Autoregressive sampling. Temperature 0 takes the argmax (lowest index on
// ties); otherwise logits are scaled by 1/temperature before sampling. The
// prompt must be nonempty; the returned tokens exclude it.
std::vector<TokenId> sample_text(Model& model, std::span<const TokenId> prompt, int length,
                                 double temperature, std::uint64_t seed);

// Analytic parameter counts from shapes alone.
long count_lstm_params(int vocab, int embed, int nhid); // embedding + 2 layers + decoder
long count_model_params(const ModelConfig& cfg);
// Hidden size whose plain-LSTM count comes closest to target_params.
int match_lstm_nhid(long target_params, int vocab);

// Checkpoints: JSON header (name, tensor shapes) + little-endian f64 payload.
void save_checkpoint(Model& model, const std::string& path);
void load_checkpoint(Model& model, const std::string& path);

} // namespace calm
