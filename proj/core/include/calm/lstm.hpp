#pragma once

#include <string>
#include <vector>

#include "calm/common.hpp"
#include "calm/matrix.hpp"
#include "calm/optim.hpp"

namespace calm {

// All windowed activations use step-major layout: position p = step*rows + r,
// so each time step is one contiguous rows-sized block and the input
// projection of a whole window is a single matmul.

struct RecurrentState {
    Matrix h, c;
    void reset(int rows, int hidden);
    bool empty() const { return h.rows == 0; }
};

// One LSTM cell with gates packed [input, forget, candidate, output] along
// the 4H axis.
struct LstmLayer {
    int in = 0;
    int hidden = 0;
    Matrix w_x, w_h, b;       // (in x 4H), (H x 4H), (1 x 4H)
    Matrix g_w_x, g_w_h, g_b;

    void init(int in_dim, int hidden_dim, Rng& rng);
    void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
    long param_count() const;
};

struct LstmLayerCache {
    int rows = 0, steps = 0;
    Matrix x_all;      // inputs, kept for the weight gradient
    Matrix gates_all;  // post-activation i,f,g,o
    Matrix c_all;      // cell states
    Matrix tanhc_all;
    Matrix h_all;      // outputs (next layer's input)
    Matrix h_prev_all; // h_{t-1} per position (block 0 = incoming state)
    Matrix c_prev_all;
};

// Runs `steps` cell updates on `rows` parallel streams. `state` enters as the
// pre-window state and leaves as the post-window state.
void lstm_forward(const LstmLayer& layer, const Matrix& x_all, int rows, int steps,
                  RecurrentState& state, LstmLayerCache& cache);

// Backpropagates dh_all through the cached window, accumulating parameter
// gradients; returns dx_all. The gradient into the pre-window state is
// dropped: batch boundaries truncate BPTT by contract.
Matrix lstm_backward(LstmLayer& layer, const LstmLayerCache& cache, const Matrix& dh_all);

struct LstmStackConfig {
    int vocab = 0;
    int embed = 0;
    int hidden = 0;
    int layers = 2;
    double dropout = 0.0;
};

// Embedding + stacked LSTM layers with dropout between them (training passes
// only). Recurrent state is double-buffered: forward always starts from the
// committed state; passes run with stage=true park their final state in a
// staging buffer that commit_staged() adopts. That realizes evaluate-then-
// train on one batch: every training iteration re-reads the same committed
// state, and the evaluation pass's end state becomes the next batch's start.
class LstmStack {
public:
    LstmStack() = default;
    LstmStack(const LstmStackConfig& cfg, Rng& rng);

    // tokens: rows x steps ids, row-major like TokenBatch. Returns the top
    // layer's outputs (step-major). train enables dropout (needs rng).
    const Matrix& forward(const TokenId* tokens, int rows, int steps, bool train, bool stage,
                          Rng* dropout_rng);
    // dh_top: gradient on forward's return value. Accumulates into grads.
    void backward(const Matrix& dh_top);

    void reset_state(int rows);
    void commit_staged();

    void collect_params(const std::string& prefix, std::vector<ParamRef>& out);
    long param_count() const;
    const LstmStackConfig& config() const { return cfg_; }
    int out_dim() const { return cfg_.hidden; }

private:
    LstmStackConfig cfg_;
    Matrix embedding_, g_embedding_;
    std::vector<LstmLayer> layers_;
    std::vector<RecurrentState> state_, staged_;
    std::vector<LstmLayerCache> cache_;
    std::vector<Matrix> dropout_mask_; // per gap between layers, empty when unused
    std::vector<TokenId> last_tokens_; // for the embedding gradient scatter
    int last_rows_ = 0, last_steps_ = 0;
};

} // namespace calm
