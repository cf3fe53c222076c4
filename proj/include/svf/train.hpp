#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "svf/lora.hpp"
#include "svf/model.hpp"
#include "svf/svf.hpp"
#include "svf/tasks.hpp"

namespace svf {

enum class Objective { PolicyGradient, NextToken };
std::string_view objective_name(Objective o);

struct TrainConfig {
    double learning_rate = 2e-3;
    std::size_t batch_size = 64;
    double clip_max_norm = 1e-3;
    double kl_lambda = 0.0;
    std::size_t max_epochs = 10;
    std::size_t early_stop_patience = 4;
    double z_init_mean = 1.0;
    double z_init_variance = 1e-3;
    bool baseline_enabled = false;
    double temperature = 1.0;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t validation_limit = 0;  // 0 evaluates the whole validation portion

    void validate() const;  // throws ConfigError
};

// Cosine decay from learning_rate at step 0 to 0 at step total_steps - 1.
double cosine_lr(double base_lr, std::size_t step, std::size_t total_steps);

// Scales g in place so its L2 norm is at most max_norm; returns the pre-clip norm.
double clip_global_norm(std::span<double> g, double max_norm);

// Decoupled-weight-decay Adam over a flat parameter vector.
class AdamW {
public:
    AdamW(std::size_t n, double beta1, double beta2, double eps, double weight_decay);
    // theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    void step(std::span<double> theta, std::span<const double> grad, double lr);
    std::size_t steps() const { return t_; }

private:
    std::vector<double> m_, v_;
    double b1_, b2_, eps_, wd_;
    std::size_t t_ = 0;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double objective = 0.0;     // J for policy gradient, -cross-entropy for next-token
    double mean_reward = 0.0;
    double kl = 0.0;
    double val_acc = 0.0;
    double lr = 0.0;
};

struct TrainMetrics {
    std::vector<EpochMetrics> epochs;
    std::size_t best_epoch = 0;  // 1-based epoch index; 0 when no epoch ran
    double best_val_acc = 0.0;

    // epoch,J,reward,kl,val_acc,lr
    std::string to_csv() const;
};

using TrainableAdapter = std::variant<ExpertVector, LoraAdapter>;

// Flat views used by the optimizer.
std::vector<double> pack_adapter(const TrainableAdapter& a);
void unpack_adapter(TrainableAdapter& a, std::span<const double> flat);
std::vector<double> pack_adapter_gradient(const TrainableAdapter& a, const PolicyModel& adapted_model, const ModelGradients& g);
void install_adapter(PolicyModel& model, const TrainableAdapter& a);

// Greedy-decoding accuracy (fraction with reward +1). Throws EmptyEval.
double evaluate(const PolicyModel& model, std::span<const TaskInstance> instances);
double evaluate(const PolicyModel& model, const std::optional<TrainableAdapter>& adapter,
                std::span<const TaskInstance> instances);
// Per-instance greedy generations in input order.
std::vector<TokenSequence> greedy_answers(const PolicyModel& model, std::span<const TaskInstance> instances);

std::size_t generation_budget(const TaskInstance& inst);

// z ~ N(z_init_mean, z_init_variance) per entry over the model's SVF targets.
ExpertVector init_expert(const ModelConfig& cfg, const TrainConfig& tc, std::uint64_t seed, std::string name,
                         std::string domain_tag);

// Per-instance loss and d loss / d logits for one rollout or reference
// sequence. Exposed for gradient checks; `scale` multiplies the loss.
struct SequenceLoss {
    double loss = 0.0;
    Matrix dlogits;
};
// -(reward - baseline) * log pi(answer) + lambda * mean KL(adapted || base), times scale.
SequenceLoss policy_gradient_loss(const PolicyModel& model, const ForwardCache& cache, const Matrix& base_log_probs,
                                  std::size_t prompt_len, double advantage, double kl_lambda, double scale);
// Mean next-token cross-entropy over answer positions, times scale.
SequenceLoss next_token_loss(const ForwardCache& cache, std::size_t prompt_len, double scale);

// --- training loops --------------------------------------------------------

// SVF expert trained with REINFORCE plus a KL penalty to the base model.
// Throws EmptySplit and Diverged.
std::pair<ExpertVector, TrainMetrics> train_svf_expert(const PolicyModel& model, const TaskSplit& split,
                                                       const TrainConfig& config, std::uint64_t seed,
                                                       std::string name = "");

// Generic adapter loop shared by SVF and LoRA, for either objective. The
// initial adapter is trained in place of a fresh one.
std::pair<TrainableAdapter, TrainMetrics> train_adapter(const PolicyModel& model, TrainableAdapter initial,
                                                        const TaskSplit& split, Objective objective,
                                                        const TrainConfig& config, std::uint64_t seed);

std::pair<TrainableAdapter, TrainMetrics> train_next_token(const PolicyModel& model, TrainableAdapter initial,
                                                           const TaskSplit& split, const TrainConfig& config,
                                                           std::uint64_t seed);

// LoRA adapter (A ~ N(0, 0.02^2), B = 0) over the given sites, trained with
// either objective through train_adapter.
std::pair<LoraAdapter, TrainMetrics> train_lora(const PolicyModel& model, const TaskSplit& split, Objective objective,
                                                const TrainConfig& config, std::uint64_t seed,
                                                const std::set<Site>& sites = {Site::q_proj, Site::v_proj},
                                                std::size_t rank = 16, double alpha = 32.0, double dropout_p = 0.05);

inline constexpr double kLoraSweepLearningRates[] = {2e-4, 5e-4, 2e-5, 5e-5, 2e-6, 5e-6};
inline constexpr double kLoraSweepClipNorms[] = {1e-3, 1.0};

struct LoraSweepResult {
    LoraAdapter adapter;
    TrainMetrics metrics;
    double learning_rate = 0.0;
    double clip_max_norm = 0.0;
};

// Trains one adapter per (learning rate, clip norm) pair and keeps the best
// validation accuracy; ties go to the earlier pair.
LoraSweepResult lora_sweep(const PolicyModel& model, const TaskSplit& split, Objective objective,
                           const TrainConfig& config, std::uint64_t seed, const std::set<Site>& sites,
                           std::span<const double> learning_rates, std::span<const double> clip_norms);

// --- base model pretraining -----------------------------------------------

struct PretrainConfig {
    double learning_rate = 3e-3;
    std::size_t batch_size = 32;
    std::size_t max_epochs = 60;
    std::size_t eval_every = 16;         // optimizer steps between band checks
    std::size_t eval_limit = 128;        // validation instances per family per check
    double band_low = 0.40;
    double band_high = 0.75;
    double gate_target = 0.55;           // a family stops contributing once above this
    std::size_t classification_per_class = 128;
    // Fraction of train instances whose corpus answer is the family's distractor.
    double distractor_rate = 0.5;
    // Epochs over the auxiliary families alone before the main loop.
    std::size_t auxiliary_warmup_epochs = 0;
    double weight_decay = 0.0;
    double clip_max_norm = 1.0;
    // When false the loop runs max_epochs without gating or band checks.
    bool require_band = true;

    void validate() const;
};

struct PretrainMetrics {
    struct Row {
        std::size_t step = 0;
        double loss = 0.0;
        std::vector<double> family_acc;  // validation accuracy per corpus family
        double dispatch_acc = 0.0;
    };
    std::vector<Row> rows;
    std::vector<Family> families;  // band families first, then auxiliary ones
    std::vector<double> final_family_acc;
    bool band_satisfied = false;
    std::size_t warmup_steps = 0;

    std::string to_csv() const;
};

// Next-token training of every base weight on the union of the families'
// train portions plus dispatch examples for the band families. Stops as soon
// as every band family's validation accuracy sits inside [band_low,
// band_high]; auxiliary families only add corpus text, after an optional
// clean warmup on them alone. With max_epochs == 0
// the model is returned unchanged. Throws PretrainBandError when the band is
// not reached.
std::pair<PolicyModel, PretrainMetrics> pretrain_base(PolicyModel model, std::span<const TaskSplit> band_families,
                                                      const PretrainConfig& config, std::uint64_t seed,
                                                      std::span<const TaskSplit> auxiliary = {});

// Mean next-token loss of the model over a set of reference sequences.
double corpus_loss(const PolicyModel& model, std::span<const TaskInstance> instances);

}  // namespace svf
