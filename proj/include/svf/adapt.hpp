#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "svf/model.hpp"
#include "svf/svf.hpp"
#include "svf/tasks.hpp"
#include "svf/train.hpp"

namespace svf {

// K domain experts (index k serves Category k) plus an optional classifier z^c.
struct ExpertLibrary {
    std::vector<ExpertVector> experts;
    std::optional<ExpertVector> classifier;

    // The K expert domains followed by Others.
    std::vector<Category> categories() const;
    // Throws IncompatibleExperts on duplicate or unknown domain tags.
    void validate() const;
    const ExpertVector* expert_for(Category c) const;
};

// The first generated token read as a category; anything else is Others.
Category parse_dispatch_output(const TokenSequence& generated);

// Strategy A: the base model answers the dispatch template.
Category dispatch_prompt(const PolicyModel& model, const ExpertLibrary& library, const TokenSequence& prompt);
// Strategy B: the same template under z^c. Throws ClassifierMissing.
Category dispatch_classifier(const PolicyModel& model, const ExpertLibrary& library, const TokenSequence& prompt);

enum class Granularity { PerVector, PerLayer };
std::string_view granularity_name(Granularity g);
Granularity parse_granularity(std::string_view s);  // throws ConfigError

// z' for alphas laid out as [k] (per vector) or [k * n_layers + layer] (per layer).
ExpertVector compose_alphas(std::span<const ExpertVector> experts, std::span<const double> alphas, Granularity g,
                            std::size_t n_layers);

enum class StrategyKind { Prompt, Classifier, FixedAlpha };
std::string_view strategy_name(StrategyKind s);

struct Strategy {
    StrategyKind kind = StrategyKind::Prompt;
    std::vector<double> alphas;  // FixedAlpha only
    Granularity granularity = Granularity::PerVector;
};

struct TwoPassResult {
    TokenSequence output;                 // prompt followed by the generated answer
    std::optional<Category> category;     // dispatch strategies only
    double pass1_seconds = 0.0;
    double pass2_seconds = 0.0;
};

// Holds the base model, the library and one adapted model per category so
// repeated two-pass calls reuse the materialised W'.
class TwoPassEngine {
public:
    TwoPassEngine(const PolicyModel& base, ExpertLibrary library);

    const PolicyModel& base() const { return base_; }
    const ExpertLibrary& library() const { return library_; }

    Category classify(StrategyKind kind, const TokenSequence& prompt) const;
    // Model with the category's expert active; Others gives the base model.
    const PolicyModel& model_for(Category c) const;

    TwoPassResult infer(const Strategy& strategy, const TokenSequence& prompt, std::size_t max_new) const;

private:
    PolicyModel base_;
    ExpertLibrary library_;
    std::vector<PolicyModel> adapted_;   // by category index
    std::optional<PolicyModel> classifier_model_;
};

TwoPassResult two_pass_infer(const TwoPassEngine& engine, const Strategy& strategy, const TokenSequence& prompt,
                             std::size_t max_new);

// --- cross-entropy method ---------------------------------------------------

struct CemConfig {
    std::size_t num_samples = 32;
    std::size_t num_elites = 8;
    std::size_t max_iterations = 100;
    Granularity granularity = Granularity::PerVector;
    bool normalized = true;
    std::vector<double> init_mu;  // empty: 1/K everywhere
    double init_sigma = 0.5;
    double convergence_sigma = 1e-8;

    void validate() const;  // throws ConfigError
};

// Lexicographic: primary first, then the tie-break value.
struct CemScore {
    double primary = 0.0;
    double tiebreak = 0.0;
    friend bool operator==(const CemScore&, const CemScore&) = default;
};
bool better(const CemScore& a, const CemScore& b);

using CemScorer = std::function<CemScore(std::span<const double>)>;

struct CemStepResult {
    std::vector<double> mu;
    std::vector<double> sigma;
    std::vector<std::vector<double>> samples;
    std::vector<CemScore> scores;
};

// Elite mean and population standard deviation (divisor = num_elites) of the
// top num_elites samples; equal scores keep sample order.
std::pair<std::vector<double>, std::vector<double>> elite_update(const std::vector<std::vector<double>>& samples,
                                                                 std::span<const CemScore> scores,
                                                                 std::size_t num_elites);

// Draws candidate j from the stream (seed, Cem, {iteration, j}): one normal
// per coordinate, mu + sigma * N(0, 1). In normalized mode the candidate is
// divided by its sum and redrawn from the same stream while |sum| < 1e-6.
std::vector<double> cem_sample(std::span<const double> mu, std::span<const double> sigma, bool normalized,
                               std::uint64_t seed, std::size_t iteration, std::size_t index);

// One step: sample, score in parallel, refit to the elites.
CemStepResult cem_step(std::span<const double> mu, std::span<const double> sigma, const CemScorer& scorer,
                       const CemConfig& config, std::uint64_t seed, std::size_t iteration);

struct CemRun {
    std::vector<double> best;
    CemScore best_score;
    std::size_t iterations = 0;
    std::vector<double> final_mu;
    std::vector<double> final_sigma;
};

// Repeats cem_step and returns the best evaluated sample, not the final mean.
CemRun cem_optimize(std::size_t dim, const CemScorer& scorer, const CemConfig& config, std::uint64_t seed);

struct AdaptationResult {
    StrategyKind strategy = StrategyKind::FixedAlpha;
    std::vector<double> alphas;
    Granularity granularity = Granularity::PerVector;
    bool normalized = true;
    std::optional<Category> category;
    ExpertVector composed;
    double holdout_score = 0.0;
    double tiebreak_loglik = 0.0;
    std::size_t iterations = 0;
    // Prompt hashes of every instance the scorer looked at.
    std::vector<std::uint64_t> evaluated_prompts;

    std::string to_json() const;  // {strategy, alphas, granularity, normalized, holdout_score, tiebreak_loglik, iterations}
};

std::uint64_t prompt_hash(const TokenSequence& prompt);

// Thread-safe record of which prompts a scorer has evaluated.
class PromptLog {
public:
    void record(const TokenSequence& prompt);
    std::vector<std::uint64_t> hashes() const;  // sorted, unique

private:
    mutable std::mutex mu_;
    std::set<std::uint64_t> seen_;
};

// Holdout accuracy of z' plus the mean per-token log-likelihood of its own
// correct greedy answers (-inf when none is correct).
CemScore score_candidate(const PolicyModel& model, const ExpertVector& z, std::span<const TaskInstance> holdout,
                         PromptLog* log = nullptr);

// Few-shot search over interpolation weights. Throws EmptyLibrary.
AdaptationResult adapt_cem(const PolicyModel& model, std::span<const ExpertVector> experts,
                           std::span<const TaskInstance> holdout, const CemConfig& config, std::uint64_t seed);
AdaptationResult adapt_cem(const PolicyModel& model, const ExpertLibrary& library,
                           std::span<const TaskInstance> holdout, const CemConfig& config, std::uint64_t seed);

// z^c: an SVF expert trained to emit the category token for dispatch prompts.
std::pair<ExpertVector, TrainMetrics> train_classifier_expert(const PolicyModel& model,
                                                              const ClassificationDataset& dataset,
                                                              const TrainConfig& config, std::uint64_t seed);

}  // namespace svf
