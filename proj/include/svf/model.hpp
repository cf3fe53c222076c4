#pragma once

#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <variant>
#include <vector>

#include "svf/linalg.hpp"
#include "svf/lora.hpp"
#include "svf/svf.hpp"
#include "svf/vocab.hpp"

namespace svf {

class SeededRng;

struct ModelConfig {
    std::size_t vocab_size = tok::kVocabSize;
    std::size_t context_len = 48;
    std::size_t n_layers = 2;
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t d_mlp = 64;
    std::set<Site> svf_sites{std::begin(kAllSites), std::end(kAllSites)};

    void validate() const;  // throws ConfigError
    std::size_t head_dim() const { return d_model / n_heads; }
    std::size_t site_rows(Site s) const;
    std::size_t site_cols(Site s) const;
    std::vector<MatrixId> svf_targets() const;  // every (layer, site) in svf_sites
    std::map<MatrixId, std::size_t> svf_ranks() const;
    std::map<MatrixId, LoraShape> lora_shapes(const std::set<Site>& sites) const;
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Identifies every trainable tensor. Kinds 0..5 coincide with Site values.
enum class ParamKind : std::uint8_t {
    q_proj = 0, k_proj = 1, v_proj = 2, o_proj = 3, mlp_in = 4, mlp_out = 5,
    tok_emb = 16, pos_emb = 17, ln1_g = 18, ln1_b = 19, ln2_g = 20, ln2_b = 21,
    b_in = 22, b_out = 23, lnf_g = 24, lnf_b = 25, lm_head = 26,
};

struct ParamKey {
    std::uint16_t layer = 0;
    ParamKind kind = ParamKind::tok_emb;
    auto operator<=>(const ParamKey&) const = default;
};

struct LayerParams {
    Matrix ln1_g, ln1_b;       // 1 x d
    Matrix wq, wk, wv, wo;     // d x d
    Matrix ln2_g, ln2_b;       // 1 x d
    Matrix w_in, b_in;         // d x d_mlp, 1 x d_mlp
    Matrix w_out, b_out;       // d_mlp x d, 1 x d

    Matrix& site(Site s);
    const Matrix& site(Site s) const;
    friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

// All base weights; also reused as the container for their gradients.
struct ModelParams {
    Matrix tok_emb;  // vocab x d
    Matrix pos_emb;  // context x d
    std::vector<LayerParams> layers;
    Matrix lnf_g, lnf_b;
    Matrix lm_head;  // d x vocab

    static ModelParams zeros(const ModelConfig& cfg);

    // Visits every tensor in a fixed order.
    void for_each(const std::function<void(ParamKey, Matrix&)>& fn);
    void for_each(const std::function<void(ParamKey, const Matrix&)>& fn) const;
    Matrix& at(ParamKey key);
    const Matrix& at(ParamKey key) const;
    std::size_t parameter_count() const;
    friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Activations retained by forward_cached for a later backward pass.
struct ForwardCache {
    struct Linear {
        Matrix input;      // what the weight multiplied
        Matrix lora_in;    // input after the dropout mask (LoRA sites only)
        Matrix lora_mask;  // 0 or 1/(1-p) per input entry; empty when no dropout
        Matrix lora_mid;   // lora_in * A
    };
    struct Norm {
        Matrix xhat;
        std::vector<double> rstd;
    };
    struct Layer {
        Matrix x_in;
        Norm ln1;
        Linear q, k, v, o;
        Matrix qm, km, vm;                   // projected activations
        std::vector<Matrix> probs;           // per head, T x T
        Matrix x_mid;
        Norm ln2;
        Linear mlp_in, mlp_out;
        Matrix h_pre;
    };

    std::uint64_t model_version = 0;
    bool adapted = false;
    std::vector<Token> tokens;
    std::vector<Layer> layers;
    Norm lnf;
    Matrix final_out;  // lm_head input
    Matrix log_probs;  // T x vocab
};

struct ModelGradients {
    ModelParams params;                          // site entries are d loss / d W_effective
    std::map<MatrixId, LoraEntry> lora;          // only when a LoRA adapter is active
};

using Adaptation = std::variant<std::monostate, ExpertVector, LoraAdapter>;

class PolicyModel;

// Token-by-token decoding with cached keys and values. The model must outlive
// the decoder and stay unmodified while it is used.
class Decoder {
public:
    Decoder(const PolicyModel& model, bool use_adaptation);
    // Feeds one token and returns the next-token log-probabilities.
    std::span<const double> step(Token t);
    std::size_t position() const { return pos_; }

private:
    const PolicyModel& model_;
    bool adapt_;
    std::size_t pos_ = 0;
    std::vector<Matrix> keys_, values_;  // per layer, context x d
    std::vector<double> log_probs_;
};

struct GenerateMode {
    double temperature = 0.0;   // 0 means greedy
    SeededRng* rng = nullptr;   // required when temperature > 0

    static GenerateMode greedy() { return {}; }
    static GenerateMode sample(double temperature, SeededRng& rng) { return {temperature, &rng}; }
};

// Draws a token from softmax(log_probs / temperature).
Token sample_token(std::span<const double> log_probs, double temperature, SeededRng& rng);
Token argmax_token(std::span<const double> log_probs);

class PolicyModel {
public:
    PolicyModel() = default;
    PolicyModel(ModelConfig cfg, std::uint64_t init_seed);
    PolicyModel(ModelConfig cfg, ModelParams params);

    const ModelConfig& config() const { return cfg_; }
    const ModelParams& params() const { return params_; }
    // Mutable access invalidates caches and the factor cache.
    ModelParams& mutable_params();
    void round_to_float();
    std::uint64_t version() const { return version_; }

    // Factor cache over every (layer, site) weight.
    void rebuild_factors();
    bool factors_current() const { return factors_current_; }
    const std::map<MatrixId, SvdFactors>& factors() const;
    const SvdFactors& factors(MatrixId id) const;

    // Adaptation management. set_expert requires current factors.
    void set_expert(ExpertVector e);
    void set_lora(LoraAdapter a);
    void clear_adaptation();
    bool has_adaptation() const { return !std::holds_alternative<std::monostate>(adaptation_); }
    const Adaptation& adaptation() const { return adaptation_; }
    const ExpertVector* expert() const { return std::get_if<ExpertVector>(&adaptation_); }
    const LoraAdapter* lora() const { return std::get_if<LoraAdapter>(&adaptation_); }
    // Matrix used at a site: W' when an expert covers it, else the base weight.
    const Matrix& effective_weight(MatrixId id, bool use_adaptation = true) const;

    // Per-position next-token log-probability table (row t predicts token t+1).
    Matrix forward(const TokenSequence& s) const;
    Matrix forward_base(const TokenSequence& s) const;
    ForwardCache forward_cached(const TokenSequence& s, SeededRng* dropout_rng = nullptr) const;

    // Gradients of a scalar loss given d loss / d logits (T x vocab).
    ModelGradients backward(const ForwardCache& cache, const Matrix& dlogits) const;
    // Gradient with respect to every active expert entry:
    // dL/dz_i = sigma_i * u_i^T (dL/dW') v_i.
    std::map<MatrixId, std::vector<double>> backward_z(const ForwardCache& cache, const Matrix& dlogits) const;
    std::map<MatrixId, std::vector<double>> z_gradients(const ModelGradients& g) const;

    TokenSequence generate(const TokenSequence& prompt, GenerateMode mode, std::size_t max_new,
                           bool use_adaptation = true) const;

    // Sum (and per-token values) of log pi(token_t | tokens_<t) over answer positions.
    std::pair<double, std::vector<double>> sequence_log_prob(const TokenSequence& s) const;
    // Mean over answer positions of KL(adapted || base). Throws AdapterMissing.
    double kl_to_base(const TokenSequence& s) const;

private:
    friend class Decoder;

    Matrix forward_impl(const TokenSequence& s, bool adapt, ForwardCache* cache, SeededRng* dropout_rng) const;
    Matrix linear(const Matrix& x, MatrixId id, bool adapt, ForwardCache::Linear* lc, SeededRng* dropout_rng) const;
    Matrix linear_backward(const Matrix& dy, MatrixId id, const ForwardCache::Linear& lc, bool adapted,
                           ModelGradients& g) const;
    void check_sequence(const TokenSequence& s) const;
    void touch() { ++version_; }

    ModelConfig cfg_;
    ModelParams params_;
    std::uint64_t version_ = 1;
    std::map<MatrixId, SvdFactors> factors_;
    bool factors_current_ = false;
    Adaptation adaptation_;
    std::map<MatrixId, Matrix> effective_;
};

// KL(p || q) = sum_v p(v) (log p(v) - log q(v)) from log-probabilities.
double kl_divergence(std::span<const double> log_p, std::span<const double> log_q);

// Row-wise log-softmax.
Matrix log_softmax_rows(const Matrix& logits);

}  // namespace svf
