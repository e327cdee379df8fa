#include "calm/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace calm {
namespace {

std::vector<int> step_major_targets(const ModelInput& in) {
    std::vector<int> t(size_t(in.rows) * size_t(in.cols));
    for (int r = 0; r < in.rows; ++r)
        for (int c = 0; c < in.cols; ++c)
            t[size_t(c) * size_t(in.rows) + size_t(r)] = int(in.y[r * in.cols + c]);
    return t;
}

// dL/dlogits of the mean cross-entropy under a plain softmax decoder.
void softmax_ce_backward(const Matrix& probs, const std::vector<int>& targets, Matrix& dlogits) {
    dlogits = probs;
    const real inv = real(1) / real(probs.rows);
    for (real& v : dlogits.data) v *= inv;
    for (int q = 0; q < probs.rows; ++q) dlogits.at(q, targets[size_t(q)]) -= inv;
}

bool same_tokens(const std::vector<TokenId>& cached, const ModelInput& in) {
    const size_t count = size_t(in.rows) * size_t(in.cols);
    return cached.size() == count &&
           std::equal(cached.begin(), cached.end(), in.x);
}

void check_common(const ModelConfig& cfg) {
    if (cfg.vocab < 2) throw ConfigError("model: vocab must be at least 2");
    if (cfg.nhid < 1) throw ConfigError("model: nhid must be positive");
    if (cfg.adapt_iters < 0) throw ConfigError("model: adapt_iters must be nonnegative");
}

ModelConfig resolved(ModelConfig cfg) {
    check_common(cfg);
    if (cfg.embed == 0) cfg.embed = cfg.nhid;
    if (cfg.gating_nhid == 0) cfg.gating_nhid = cfg.nhid;
    return cfg;
}

// Double-layer LSTM with its own embedding and softmax decoder.
struct ExpertNet {
    LstmStack stack;
    Matrix dec_w, dec_b, g_dec_w, g_dec_b;
    Matrix logits;
    const Matrix* last_h = nullptr;

    void init(int vocab, int embed, int nhid, double dropout, Rng& rng) {
        stack = LstmStack({vocab, embed, nhid, 2, dropout}, rng);
        const real bound = real(1.0 / std::sqrt(double(nhid)));
        dec_w = Matrix::uniform(nhid, vocab, -bound, bound, rng);
        dec_b = Matrix(1, vocab);
        g_dec_w = Matrix(nhid, vocab);
        g_dec_b = Matrix(1, vocab);
    }

    const Matrix& forward(const TokenId* x, int rows, int steps, bool train, bool stage,
                          Rng* drng) {
        const Matrix& h = stack.forward(x, rows, steps, train, stage, drng);
        last_h = &h;
        logits = affine(h, dec_w, dec_b);
        return logits;
    }

    void backward(const Matrix& dlogits) {
        AffineGrads g = affine_backward(*last_h, dec_w, dlogits);
        for (size_t i = 0; i < g_dec_w.data.size(); ++i) g_dec_w.data[i] += g.dw.data[i];
        for (size_t i = 0; i < g_dec_b.data.size(); ++i) g_dec_b.data[i] += g.dbias.data[i];
        stack.backward(g.dx);
    }

    void collect(const std::string& prefix, std::vector<ParamRef>& out) {
        stack.collect_params(prefix, out);
        out.push_back({prefix + ".dec_w", &dec_w, &g_dec_w});
        out.push_back({prefix + ".dec_b", &dec_b, &g_dec_b});
    }

    long param_count() const {
        return stack.param_count() + long(dec_w.size()) + long(dec_b.size());
    }
};

class LstmModel final : public Model {
public:
    explicit LstmModel(const ModelConfig& cfg) : cfg_(resolved(cfg)) {
        Rng rng(cfg_.seed);
        net_.init(cfg_.vocab, cfg_.embed, cfg_.nhid, cfg_.dropout, rng);
        net_.collect("net", params_);
        adam_ = AdamState::init(params_, cfg_.adam);
        drop_rng_ = Rng(mix_seed(cfg_.seed, fnv1a("dropout")));
    }

    const ModelConfig& config() const override { return cfg_; }

    void reset_state(int rows) override {
        net_.stack.reset_state(rows);
        cache_valid_ = false;
    }

    EvalRecord evaluate(const ModelInput& in) override {
        targets_ = step_major_targets(in);
        net_.forward(in.x, in.rows, in.cols, false, true, nullptr);
        probs_ = net_.logits;
        softmax_rows_inplace(probs_);
        bool clamped = false;
        const double loss = double(mean_cross_entropy(probs_, targets_, &clamped));
        eval_tokens_.assign(in.x, in.x + size_t(in.rows) * size_t(in.cols));
        cache_valid_ = (cfg_.dropout == 0.0);
        return {loss, clamped};
    }

    double forward_backward(const ModelInput& in) override {
        targets_ = step_major_targets(in);
        if (!(cache_valid_ && same_tokens(eval_tokens_, in))) {
            net_.forward(in.x, in.rows, in.cols, true, false, &drop_rng_);
            probs_ = net_.logits;
            softmax_rows_inplace(probs_);
        }
        const double loss = double(mean_cross_entropy(probs_, targets_));
        softmax_ce_backward(probs_, targets_, dlogits_);
        net_.backward(dlogits_);
        return loss;
    }

    void train_iteration(const ModelInput& in) override {
        zero_grads(params_);
        forward_backward(in);
        adam_step(adam_, params_);
        cache_valid_ = false;
    }

    void advance_state() override {
        net_.stack.commit_staged();
        cache_valid_ = false;
    }

    std::vector<real> next_distribution(TokenId token) override {
        net_.forward(&token, 1, 1, false, true, nullptr);
        net_.stack.commit_staged();
        cache_valid_ = false;
        probs_ = net_.logits;
        softmax_rows_inplace(probs_);
        auto row = probs_.row_span(0);
        return {row.begin(), row.end()};
    }

    void collect_params(std::vector<ParamRef>& out) override { net_.collect("net", out); }

    long param_count() const override { return net_.param_count(); }

private:
    ModelConfig cfg_;
    ExpertNet net_;
    std::vector<ParamRef> params_;
    AdamState adam_;
    Rng drop_rng_{0};
    Matrix probs_, dlogits_;
    std::vector<int> targets_;
    std::vector<TokenId> eval_tokens_;
    bool cache_valid_ = false;
};

class MosModel final : public Model {
public:
    explicit MosModel(const ModelConfig& cfg) : cfg_(resolved(cfg)) {
        if (cfg_.mos_heads < 1) throw ConfigError("model: mos_heads must be positive");
        Rng rng(cfg_.seed);
        trunk_ = LstmStack({cfg_.vocab, cfg_.embed, cfg_.nhid, 2, cfg_.dropout}, rng);
        const real bound = real(1.0 / std::sqrt(double(cfg_.nhid)));
        const int k = cfg_.mos_heads;
        head_w_.reserve(size_t(k));
        for (int i = 0; i < k; ++i) {
            head_w_.push_back(Matrix::uniform(cfg_.nhid, cfg_.vocab, -bound, bound, rng));
            head_b_.emplace_back(1, cfg_.vocab);
            g_head_w_.emplace_back(cfg_.nhid, cfg_.vocab);
            g_head_b_.emplace_back(1, cfg_.vocab);
        }
        prior_w_ = Matrix::uniform(cfg_.nhid, k, -bound, bound, rng);
        prior_b_ = Matrix(1, k);
        g_prior_w_ = Matrix(cfg_.nhid, k);
        g_prior_b_ = Matrix(1, k);
        collect_params(params_);
        adam_ = AdamState::init(params_, cfg_.adam);
        drop_rng_ = Rng(mix_seed(cfg_.seed, fnv1a("dropout")));
        head_logits_.resize(size_t(k));
    }

    const ModelConfig& config() const override { return cfg_; }

    void reset_state(int rows) override {
        trunk_.reset_state(rows);
        cache_valid_ = false;
    }

    EvalRecord evaluate(const ModelInput& in) override {
        targets_ = step_major_targets(in);
        run_forward(in, false, true);
        bool clamped = false;
        const double loss = double(mean_cross_entropy(mix_.probs, targets_, &clamped));
        eval_tokens_.assign(in.x, in.x + size_t(in.rows) * size_t(in.cols));
        cache_valid_ = (cfg_.dropout == 0.0);
        return {loss, clamped};
    }

    double forward_backward(const ModelInput& in) override {
        targets_ = step_major_targets(in);
        if (!(cache_valid_ && same_tokens(eval_tokens_, in))) run_forward(in, true, false);
        const double loss = double(mean_cross_entropy(mix_.probs, targets_));

        std::vector<Matrix> dheads;
        for (const Matrix& m : head_logits_) dheads.emplace_back(m.rows, m.cols);
        Matrix dprior(prior_logits_.rows, prior_logits_.cols);
        std::vector<const Matrix*> views = logit_views();
        mixture_backward(views, prior_logits_, mix_, targets_, &dheads, &dprior);

        Matrix dh(last_h_->rows, last_h_->cols);
        for (int i = 0; i < cfg_.mos_heads; ++i) {
            AffineGrads g = affine_backward(*last_h_, head_w_[size_t(i)], dheads[size_t(i)]);
            accumulate(g_head_w_[size_t(i)], g.dw);
            accumulate(g_head_b_[size_t(i)], g.dbias);
            accumulate(dh, g.dx);
        }
        AffineGrads g = affine_backward(*last_h_, prior_w_, dprior);
        accumulate(g_prior_w_, g.dw);
        accumulate(g_prior_b_, g.dbias);
        accumulate(dh, g.dx);
        trunk_.backward(dh);
        return loss;
    }

    void train_iteration(const ModelInput& in) override {
        zero_grads(params_);
        forward_backward(in);
        adam_step(adam_, params_);
        cache_valid_ = false;
    }

    void advance_state() override {
        trunk_.commit_staged();
        cache_valid_ = false;
    }

    std::vector<real> next_distribution(TokenId token) override {
        ModelInput in{&token, nullptr, 1, 1};
        run_forward(in, false, true);
        trunk_.commit_staged();
        cache_valid_ = false;
        auto row = mix_.probs.row_span(0);
        return {row.begin(), row.end()};
    }

    void collect_params(std::vector<ParamRef>& out) override {
        trunk_.collect_params("trunk", out);
        for (int i = 0; i < cfg_.mos_heads; ++i) {
            const std::string p = "head" + std::to_string(i);
            out.push_back({p + ".w", &head_w_[size_t(i)], &g_head_w_[size_t(i)]});
            out.push_back({p + ".b", &head_b_[size_t(i)], &g_head_b_[size_t(i)]});
        }
        out.push_back({"prior.w", &prior_w_, &g_prior_w_});
        out.push_back({"prior.b", &prior_b_, &g_prior_b_});
    }

    long param_count() const override {
        long total = trunk_.param_count();
        for (const Matrix& m : head_w_) total += long(m.size());
        for (const Matrix& m : head_b_) total += long(m.size());
        return total + long(prior_w_.size()) + long(prior_b_.size());
    }

private:
    static void accumulate(Matrix& into, const Matrix& from) {
        for (size_t i = 0; i < into.data.size(); ++i) into.data[i] += from.data[i];
    }

    std::vector<const Matrix*> logit_views() const {
        std::vector<const Matrix*> v;
        for (const Matrix& m : head_logits_) v.push_back(&m);
        return v;
    }

    void run_forward(const ModelInput& in, bool train, bool stage) {
        const Matrix& h = trunk_.forward(in.x, in.rows, in.cols, train, stage,
                                         train ? &drop_rng_ : nullptr);
        last_h_ = &h;
        for (int i = 0; i < cfg_.mos_heads; ++i)
            head_logits_[size_t(i)] = affine(h, head_w_[size_t(i)], head_b_[size_t(i)]);
        prior_logits_ = affine(h, prior_w_, prior_b_);
        mixture_forward(Combiner::Moe, logit_views(), prior_logits_, mix_);
    }

    ModelConfig cfg_;
    LstmStack trunk_;
    std::vector<Matrix> head_w_, head_b_, g_head_w_, g_head_b_;
    Matrix prior_w_, prior_b_, g_prior_w_, g_prior_b_;
    std::vector<Matrix> head_logits_;
    Matrix prior_logits_;
    MixtureCache mix_;
    const Matrix* last_h_ = nullptr;
    std::vector<ParamRef> params_;
    AdamState adam_;
    Rng drop_rng_{0};
    std::vector<int> targets_;
    std::vector<TokenId> eval_tokens_;
    bool cache_valid_ = false;
};

class ExpertBankModel final : public Model {
public:
    explicit ExpertBankModel(const ModelConfig& cfg) : cfg_(resolved(cfg)) {
        if (cfg_.modules < 1) throw ConfigError("model: modules must be positive");
        if (cfg_.combiner == Combiner::Ensemble && cfg_.gate != GateKind::Uniform)
            throw ConfigError("model: the ensemble combiner takes no gate");
        const int n = cfg_.modules;
        Rng rng(cfg_.seed);
        experts_.resize(size_t(n));
        for (auto& e : experts_) e.init(cfg_.vocab, cfg_.embed, cfg_.nhid, cfg_.dropout, rng);

        if (cfg_.gate == GateKind::LstmGate) {
            gate_stack_ =
                LstmStack({cfg_.vocab, cfg_.gating_nhid, cfg_.gating_nhid, 1, 0.0}, rng);
            // Zero head: every variant starts from uniform combination.
            gate_head_w_ = Matrix(cfg_.gating_nhid, n);
            gate_head_b_ = Matrix(1, n);
            g_gate_head_w_ = Matrix(cfg_.gating_nhid, n);
            g_gate_head_b_ = Matrix(1, n);
        } else if (cfg_.gate == GateKind::Plastic) {
            plastic_w_ = Matrix::filled(1, n, real(1) / real(n));
            g_plastic_w_ = Matrix(1, n);
        }
        // Uniform weights: zeros pass through the MoE softmax as exact 1/n;
        // PoE takes the 1/n geometric mean directly.
        uniform_w_ = cfg_.combiner == Combiner::Poe ? Matrix::filled(1, n, real(1) / real(n))
                                                    : Matrix(1, n);

        collect_adam_params();
        adam_ = AdamState::init(params_, cfg_.adam);
        drop_rng_ = Rng(mix_seed(cfg_.seed, fnv1a("dropout")));
        dlogits_.resize(size_t(n));
    }

    const ModelConfig& config() const override { return cfg_; }

    void reset_state(int rows) override {
        for (auto& e : experts_) e.stack.reset_state(rows);
        if (cfg_.gate == GateKind::LstmGate) gate_stack_.reset_state(rows);
        cache_valid_ = false;
    }

    EvalRecord evaluate(const ModelInput& in) override {
        targets_ = step_major_targets(in);
        run_forward(in, false, true);
        bool clamped = false;
        const double loss = double(mean_cross_entropy(mix_.probs, targets_, &clamped));
        store_eval_gates();
        eval_tokens_.assign(in.x, in.x + size_t(in.rows) * size_t(in.cols));
        cache_valid_ = (cfg_.dropout == 0.0);
        return {loss, clamped};
    }

    double forward_backward(const ModelInput& in) override {
        targets_ = step_major_targets(in);
        if (!(cache_valid_ && same_tokens(eval_tokens_, in))) run_forward(in, true, false);
        const double loss = double(mean_cross_entropy(mix_.probs, targets_));

        for (size_t i = 0; i < experts_.size(); ++i) {
            Matrix& d = dlogits_[i];
            if (d.rows != experts_[i].logits.rows || d.cols != experts_[i].logits.cols)
                d = Matrix(experts_[i].logits.rows, experts_[i].logits.cols);
            else
                d.zero();
        }
        const Matrix& w = active_weights();
        // Plastic gates stay frozen during the parameter step; their own
        // updates run separately on the cached logits.
        Matrix* dw = nullptr;
        Matrix dgate;
        if (cfg_.gate == GateKind::LstmGate) {
            dgate = Matrix(gate_w_.rows, gate_w_.cols);
            dw = &dgate;
        }
        mixture_backward(logit_views(), w, mix_, targets_, &dlogits_, dw);
        for (size_t i = 0; i < experts_.size(); ++i) experts_[i].backward(dlogits_[i]);
        if (cfg_.gate == GateKind::LstmGate) {
            AffineGrads g = affine_backward(*gate_h_, gate_head_w_, dgate);
            for (size_t i = 0; i < g_gate_head_w_.data.size(); ++i)
                g_gate_head_w_.data[i] += g.dw.data[i];
            for (size_t i = 0; i < g_gate_head_b_.data.size(); ++i)
                g_gate_head_b_.data[i] += g.dbias.data[i];
            gate_stack_.backward(g.dx);
        }
        return loss;
    }

    void train_iteration(const ModelInput& in) override {
        zero_grads(params_);
        forward_backward(in);
        adam_step(adam_, params_);
        if (cfg_.gate == GateKind::Plastic && cfg_.adapt_iters > 0)
            plastic_update(cfg_.combiner, logit_views(), plastic_w_, targets_, cfg_.adapt_iters,
                           cfg_.adapt_lr);
        cache_valid_ = false;
    }

    void advance_state() override {
        for (auto& e : experts_) e.stack.commit_staged();
        if (cfg_.gate == GateKind::LstmGate && !cfg_.clear_gating) gate_stack_.commit_staged();
        cache_valid_ = false;
    }

    std::vector<double> gate_values() const override {
        if (cfg_.gate == GateKind::Uniform) return {};
        if (cfg_.gate == GateKind::Plastic) {
            std::vector<real> w(plastic_w_.data);
            if (cfg_.combiner == Combiner::Moe)
                softmax_inplace(std::span<real>(w.data(), w.size()));
            return {w.begin(), w.end()};
        }
        return eval_gates_;
    }

    std::vector<real> next_distribution(TokenId token) override {
        ModelInput in{&token, nullptr, 1, 1};
        run_forward(in, false, true);
        for (auto& e : experts_) e.stack.commit_staged();
        if (cfg_.gate == GateKind::LstmGate && !cfg_.clear_gating) gate_stack_.commit_staged();
        cache_valid_ = false;
        auto row = mix_.probs.row_span(0);
        return {row.begin(), row.end()};
    }

    void collect_params(std::vector<ParamRef>& out) override {
        for (size_t i = 0; i < experts_.size(); ++i)
            experts_[i].collect("expert" + std::to_string(i), out);
        if (cfg_.gate == GateKind::LstmGate) {
            gate_stack_.collect_params("gate", out);
            out.push_back({"gate.head_w", &gate_head_w_, &g_gate_head_w_});
            out.push_back({"gate.head_b", &gate_head_b_, &g_gate_head_b_});
        } else if (cfg_.gate == GateKind::Plastic) {
            out.push_back({"gate.w", &plastic_w_, &g_plastic_w_});
        }
    }

    long param_count() const override {
        long total = 0;
        for (const auto& e : experts_) total += e.param_count();
        if (cfg_.gate == GateKind::LstmGate)
            total += gate_stack_.param_count() + long(gate_head_w_.size()) +
                     long(gate_head_b_.size());
        else if (cfg_.gate == GateKind::Plastic)
            total += long(plastic_w_.size());
        return total;
    }

private:
    std::vector<const Matrix*> logit_views() const {
        std::vector<const Matrix*> v;
        for (const auto& e : experts_) v.push_back(&e.logits);
        return v;
    }

    const Matrix& active_weights() const {
        switch (cfg_.gate) {
            case GateKind::Uniform: return uniform_w_;
            case GateKind::Plastic: return plastic_w_;
            case GateKind::LstmGate: return gate_w_;
        }
        throw ConfigError("model: unknown gate kind");
    }

    void run_forward(const ModelInput& in, bool train, bool stage) {
        for (auto& e : experts_)
            e.forward(in.x, in.rows, in.cols, train, stage, train ? &drop_rng_ : nullptr);
        if (cfg_.gate == GateKind::LstmGate) {
            if (cfg_.clear_gating) gate_stack_.reset_state(in.rows);
            const Matrix& h = gate_stack_.forward(in.x, in.rows, in.cols, false, stage, nullptr);
            gate_h_ = &h;
            gate_w_ = affine(h, gate_head_w_, gate_head_b_);
        }
        mixture_forward(cfg_.combiner, logit_views(), active_weights(), mix_);
    }

    void store_eval_gates() {
        eval_gates_.clear();
        if (cfg_.gate != GateKind::LstmGate) return;
        // Weights as the combiner used them, averaged over positions.
        const Matrix& src = cfg_.combiner == Combiner::Moe ? mix_.gate_probs : gate_w_;
        eval_gates_.assign(size_t(src.cols), 0.0);
        for (int q = 0; q < src.rows; ++q)
            for (int j = 0; j < src.cols; ++j) eval_gates_[size_t(j)] += double(src.at(q, j));
        for (double& v : eval_gates_) v /= double(src.rows);
    }

    void collect_adam_params() {
        for (size_t i = 0; i < experts_.size(); ++i)
            experts_[i].collect("expert" + std::to_string(i), params_);
        if (cfg_.gate == GateKind::LstmGate) {
            gate_stack_.collect_params("gate", params_);
            params_.push_back({"gate.head_w", &gate_head_w_, &g_gate_head_w_});
            params_.push_back({"gate.head_b", &gate_head_b_, &g_gate_head_b_});
        }
    }

    ModelConfig cfg_;
    std::vector<ExpertNet> experts_;
    LstmStack gate_stack_;
    Matrix gate_head_w_, gate_head_b_, g_gate_head_w_, g_gate_head_b_;
    Matrix plastic_w_, g_plastic_w_;
    Matrix uniform_w_;
    Matrix gate_w_;
    const Matrix* gate_h_ = nullptr;
    MixtureCache mix_;
    std::vector<Matrix> dlogits_;
    std::vector<ParamRef> params_;
    AdamState adam_;
    std::vector<double> eval_gates_;
    Rng drop_rng_{0};
    std::vector<int> targets_;
    std::vector<TokenId> eval_tokens_;
    bool cache_valid_ = false;
};

class OracleModel final : public Model {
public:
    explicit OracleModel(const ModelConfig& cfg) : cfg_(resolved(cfg)) {
        if (cfg_.modules < 1) throw ConfigError("model: modules must be positive");
        for (int c = 0; c < cfg_.modules; ++c) {
            auto sub = std::make_unique<Sub>();
            Rng rng(mix_seed(cfg_.seed, std::uint64_t(c)));
            sub->net.init(cfg_.vocab, cfg_.embed, cfg_.nhid, cfg_.dropout, rng);
            sub->net.collect("class" + std::to_string(c), sub->params);
            sub->adam = AdamState::init(sub->params, cfg_.adam);
            sub->drop_rng = Rng(mix_seed(mix_seed(cfg_.seed, std::uint64_t(c)), fnv1a("dropout")));
            subs_.push_back(std::move(sub));
        }
    }

    const ModelConfig& config() const override { return cfg_; }
    bool wants_true_class() const override { return true; }

    void set_true_class(int c) override {
        if (c < 0 || c >= cfg_.modules)
            throw ConfigError("oracle: unknown class " + std::to_string(c));
        current_ = c;
    }

    void reset_state(int rows) override {
        for (auto& s : subs_) s->net.stack.reset_state(rows);
        current_ = -1;
        cache_valid_ = false;
    }

    EvalRecord evaluate(const ModelInput& in) override {
        Sub& s = routed();
        targets_ = step_major_targets(in);
        s.net.forward(in.x, in.rows, in.cols, false, true, nullptr);
        probs_ = s.net.logits;
        softmax_rows_inplace(probs_);
        bool clamped = false;
        const double loss = double(mean_cross_entropy(probs_, targets_, &clamped));
        eval_tokens_.assign(in.x, in.x + size_t(in.rows) * size_t(in.cols));
        cached_class_ = current_;
        cache_valid_ = (cfg_.dropout == 0.0);
        return {loss, clamped};
    }

    double forward_backward(const ModelInput& in) override {
        Sub& s = routed();
        targets_ = step_major_targets(in);
        if (!(cache_valid_ && cached_class_ == current_ && same_tokens(eval_tokens_, in))) {
            s.net.forward(in.x, in.rows, in.cols, true, false, &s.drop_rng);
            probs_ = s.net.logits;
            softmax_rows_inplace(probs_);
        }
        const double loss = double(mean_cross_entropy(probs_, targets_));
        softmax_ce_backward(probs_, targets_, dlogits_);
        s.net.backward(dlogits_);
        return loss;
    }

    void train_iteration(const ModelInput& in) override {
        Sub& s = routed();
        zero_grads(s.params);
        forward_backward(in);
        adam_step(s.adam, s.params);
        cache_valid_ = false;
    }

    void advance_state() override {
        routed().net.stack.commit_staged();
        cache_valid_ = false;
    }

    std::vector<real> next_distribution(TokenId token) override {
        Sub& s = routed();
        s.net.forward(&token, 1, 1, false, true, nullptr);
        s.net.stack.commit_staged();
        cache_valid_ = false;
        probs_ = s.net.logits;
        softmax_rows_inplace(probs_);
        auto row = probs_.row_span(0);
        return {row.begin(), row.end()};
    }

    void collect_params(std::vector<ParamRef>& out) override {
        for (size_t c = 0; c < subs_.size(); ++c)
            subs_[c]->net.collect("class" + std::to_string(c), out);
    }

    long param_count() const override {
        long total = 0;
        for (const auto& s : subs_) total += s->net.param_count();
        return total;
    }

private:
    struct Sub {
        ExpertNet net;
        std::vector<ParamRef> params;
        AdamState adam;
        Rng drop_rng{0};
    };

    Sub& routed() {
        if (current_ < 0) throw ConfigError("oracle: true class not set");
        return *subs_[size_t(current_)];
    }

    ModelConfig cfg_;
    std::vector<std::unique_ptr<Sub>> subs_;
    int current_ = -1;
    int cached_class_ = -1;
    Matrix probs_, dlogits_;
    std::vector<int> targets_;
    std::vector<TokenId> eval_tokens_;
    bool cache_valid_ = false;
};

} // namespace

const char* arch_name(Arch a) {
    switch (a) {
        case Arch::Lstm: return "lstm";
        case Arch::Mos: return "mos";
        case Arch::Experts: return "experts";
        case Arch::Oracle: return "oracle";
    }
    throw ConfigError("arch_name: unknown arch");
}

Arch arch_from_name(const std::string& name) {
    if (name == "lstm") return Arch::Lstm;
    if (name == "mos") return Arch::Mos;
    if (name == "experts") return Arch::Experts;
    if (name == "oracle") return Arch::Oracle;
    throw ConfigError("unknown arch '" + name + "'");
}

const char* gate_name(GateKind g) {
    switch (g) {
        case GateKind::Uniform: return "uniform";
        case GateKind::LstmGate: return "lstm";
        case GateKind::Plastic: return "plastic";
    }
    throw ConfigError("gate_name: unknown gate");
}

GateKind gate_from_name(const std::string& name) {
    if (name == "uniform") return GateKind::Uniform;
    if (name == "lstm") return GateKind::LstmGate;
    if (name == "plastic") return GateKind::Plastic;
    throw ConfigError("unknown gate '" + name + "'");
}

std::unique_ptr<Model> build_model(const ModelConfig& cfg) {
    switch (cfg.arch) {
        case Arch::Lstm: return std::make_unique<LstmModel>(cfg);
        case Arch::Mos: return std::make_unique<MosModel>(cfg);
        case Arch::Experts: return std::make_unique<ExpertBankModel>(cfg);
        case Arch::Oracle: return std::make_unique<OracleModel>(cfg);
    }
    throw ConfigError("build_model: unknown arch");
}

Matrix mos_probs(const Matrix& h, const std::vector<const Matrix*>& head_w,
                 const std::vector<const Matrix*>& head_b, const Matrix& prior_w,
                 const Matrix& prior_b) {
    if (head_w.empty() || head_w.size() != head_b.size())
        throw ShapeError("mos_probs: need matching head weights and biases");
    std::vector<Matrix> logits;
    for (size_t k = 0; k < head_w.size(); ++k)
        logits.push_back(affine(h, *head_w[k], *head_b[k]));
    std::vector<const Matrix*> views;
    for (const Matrix& m : logits) views.push_back(&m);
    Matrix prior_logits = affine(h, prior_w, prior_b);
    MixtureCache cache;
    mixture_forward(Combiner::Moe, views, prior_logits, cache);
    return cache.probs;
}

void plastic_update(Combiner kind, const std::vector<const Matrix*>& expert_logits, Matrix& w,
                    const std::vector<int>& targets, int k, double lr) {
    if (k < 0) throw ConfigError("plastic_update: negative step count");
    Matrix dw(w.rows, w.cols);
    MixtureCache cache;
    for (int step = 0; step < k; ++step) {
        mixture_forward(kind, expert_logits, w, cache);
        dw.zero();
        mixture_backward(expert_logits, w, cache, targets, nullptr, &dw);
        for (size_t i = 0; i < w.data.size(); ++i) w.data[i] -= real(lr) * dw.data[i];
    }
}

std::vector<TokenId> sample_text(Model& model, std::span<const TokenId> prompt, int length,
                                 double temperature, std::uint64_t seed) {
    if (prompt.empty()) throw ConfigError("sample_text: prompt must be nonempty");
    if (length < 0) throw ConfigError("sample_text: negative length");
    if (temperature < 0) throw ConfigError("sample_text: negative temperature");
    Rng rng(seed);
    model.reset_state(1);
    std::vector<real> probs;
    for (TokenId t : prompt) probs = model.next_distribution(t);

    std::vector<TokenId> out;
    out.reserve(size_t(length));
    for (int i = 0; i < length; ++i) {
        TokenId pick = 0;
        if (temperature == 0.0) {
            for (size_t j = 1; j < probs.size(); ++j)
                if (probs[j] > probs[size_t(pick)]) pick = TokenId(j);
        } else {
            // Rescale in log space, then invert the CDF.
            std::vector<real> scaled(probs.size());
            for (size_t j = 0; j < probs.size(); ++j)
                scaled[j] = real(std::log(std::max(double(probs[j]), kProbFloor)) / temperature);
            softmax_inplace(std::span<real>(scaled.data(), scaled.size()));
            const double u = rng.uniform();
            double acc = 0;
            pick = TokenId(probs.size() - 1);
            for (size_t j = 0; j < scaled.size(); ++j) {
                acc += double(scaled[j]);
                if (u < acc) {
                    pick = TokenId(j);
                    break;
                }
            }
        }
        out.push_back(pick);
        probs = model.next_distribution(pick);
    }
    return out;
}

namespace {

long layer_params(int in, int h) { return long(in) * 4 * h + long(h) * 4 * h + 4L * h; }

} // namespace

long count_lstm_params(int vocab, int embed, int nhid) {
    return long(vocab) * embed + layer_params(embed, nhid) + layer_params(nhid, nhid) +
           long(nhid) * vocab + vocab;
}

long count_model_params(const ModelConfig& raw) {
    const ModelConfig cfg = resolved(raw);
    const long expert = count_lstm_params(cfg.vocab, cfg.embed, cfg.nhid);
    switch (cfg.arch) {
        case Arch::Lstm: return expert;
        case Arch::Mos:
            return long(cfg.vocab) * cfg.embed + layer_params(cfg.embed, cfg.nhid) +
                   layer_params(cfg.nhid, cfg.nhid) +
                   long(cfg.mos_heads) * (long(cfg.nhid) * cfg.vocab + cfg.vocab) +
                   long(cfg.nhid) * cfg.mos_heads + cfg.mos_heads;
        case Arch::Oracle: return long(cfg.modules) * expert;
        case Arch::Experts: {
            long total = long(cfg.modules) * expert;
            if (cfg.gate == GateKind::Plastic) total += cfg.modules;
            if (cfg.gate == GateKind::LstmGate)
                total += long(cfg.vocab) * cfg.gating_nhid +
                         layer_params(cfg.gating_nhid, cfg.gating_nhid) +
                         long(cfg.gating_nhid) * cfg.modules + cfg.modules;
            return total;
        }
    }
    throw ConfigError("count_model_params: unknown arch");
}

int match_lstm_nhid(long target_params, int vocab) {
    if (target_params < 1 || vocab < 2) throw ConfigError("match_lstm_nhid: invalid request");
    int best = 1;
    long best_diff = std::llabs(count_lstm_params(vocab, 1, 1) - target_params);
    for (int h = 2;; ++h) {
        const long count = count_lstm_params(vocab, h, h);
        const long diff = std::llabs(count - target_params);
        if (diff < best_diff) {
            best = h;
            best_diff = diff;
        }
        if (count > target_params && diff >= best_diff) break; // counts only grow from here
    }
    return best;
}

void save_checkpoint(Model& model, const std::string& path) {
    std::vector<ParamRef> params;
    model.collect_params(params);
    nlohmann::json header;
    header["format"] = "calm-ckpt-1";
    header["model"] = model.config().name;
    auto tensors = nlohmann::json::array();
    for (const ParamRef& p : params)
        tensors.push_back({{"name", p.name}, {"rows", p.value->rows}, {"cols", p.value->cols}});
    header["tensors"] = tensors;

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write checkpoint '" + path + "'");
    out << header.dump() << '\n';
    for (const ParamRef& p : params) {
        for (real v : p.value->data) {
            const auto bits = std::bit_cast<std::uint64_t>(double(v));
            char bytes[8];
            for (int b = 0; b < 8; ++b) bytes[b] = char((bits >> (8 * b)) & 0xff);
            out.write(bytes, 8);
        }
    }
    if (!out) throw IngestError("short write on checkpoint '" + path + "'");
}

void load_checkpoint(Model& model, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot read checkpoint '" + path + "'");
    std::string line;
    if (!std::getline(in, line)) throw IngestError("checkpoint '" + path + "' has no header");
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || header.value("format", "") != "calm-ckpt-1")
        throw IngestError("checkpoint '" + path + "' has a malformed header");

    std::vector<ParamRef> params;
    model.collect_params(params);
    const auto& tensors = header.at("tensors");
    if (tensors.size() != params.size())
        throw ConfigError("checkpoint '" + path + "' does not match the model's tensors");
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& t = tensors[i];
        if (t.at("name") != params[i].name || t.at("rows") != params[i].value->rows ||
            t.at("cols") != params[i].value->cols)
            throw ConfigError("checkpoint tensor '" + std::string(t.at("name")) +
                              "' does not match the model");
    }
    for (const ParamRef& p : params) {
        for (real& v : p.value->data) {
            char bytes[8];
            if (!in.read(bytes, 8)) throw IngestError("checkpoint '" + path + "' is truncated");
            std::uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= std::uint64_t(std::uint8_t(bytes[b])) << (8 * b);
            v = real(std::bit_cast<double>(bits));
        }
    }
}

} // namespace calm
