#include "svf/adapt.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <nlohmann/json.hpp>

#include "svf/errors.hpp"
#include "svf/rng.hpp"

namespace svf {

std::vector<Category> ExpertLibrary::categories() const {
    std::vector<Category> out;
    for (const auto& e : experts) out.push_back(*parse_category(e.domain_tag));
    out.push_back(Category::Others);
    return out;
}

void ExpertLibrary::validate() const {
    std::set<std::string> seen;
    for (const auto& e : experts) {
        const auto c = parse_category(e.domain_tag);
        if (!c || *c == Category::Others) throw IncompatibleExperts("expert '" + e.name + "' has unknown domain tag '" + e.domain_tag + "'");
        if (!seen.insert(e.domain_tag).second) throw IncompatibleExperts("duplicate domain tag '" + e.domain_tag + "'");
    }
}

const ExpertVector* ExpertLibrary::expert_for(Category c) const {
    for (const auto& e : experts)
        if (parse_category(e.domain_tag) == c) return &e;
    return nullptr;
}

Category parse_dispatch_output(const TokenSequence& generated) {
    const auto ans = generated.answer();
    if (ans.empty()) return Category::Others;
    return category_from_token(ans.front()).value_or(Category::Others);
}

namespace {

Category classify_with(const PolicyModel& m, const TokenSequence& prompt) {
    const auto out = m.generate(dispatch_prompt_for(prompt), GenerateMode::greedy(), 1);
    return parse_dispatch_output(out);
}

// A category only counts when the library can serve it.
Category servable(const ExpertLibrary& lib, Category c) {
    return c != Category::Others && lib.expert_for(c) ? c : Category::Others;
}

PolicyModel with_expert(const PolicyModel& base, const ExpertVector& e) {
    PolicyModel m = base;
    m.set_expert(e);
    return m;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

Category dispatch_prompt(const PolicyModel& model, const ExpertLibrary& library, const TokenSequence& prompt) {
    PolicyModel base = model;
    base.clear_adaptation();
    return servable(library, classify_with(base, prompt));
}

Category dispatch_classifier(const PolicyModel& model, const ExpertLibrary& library, const TokenSequence& prompt) {
    if (!library.classifier) throw ClassifierMissing("library has no classification expert");
    return servable(library, classify_with(with_expert(model, *library.classifier), prompt));
}

std::string_view granularity_name(Granularity g) { return g == Granularity::PerVector ? "per_vector" : "per_layer"; }

Granularity parse_granularity(std::string_view s) {
    if (s == "per_vector") return Granularity::PerVector;
    if (s == "per_layer") return Granularity::PerLayer;
    throw ConfigError("unknown granularity '" + std::string(s) + "'");
}

ExpertVector compose_alphas(std::span<const ExpertVector> experts, std::span<const double> alphas, Granularity g,
                            std::size_t n_layers) {
    if (experts.empty()) throw EmptyLibrary("no experts to compose");
    if (g == Granularity::PerVector) {
        return compose(experts, CompositionWeights{std::vector<double>(alphas.begin(), alphas.end()), false});
    }
    if (alphas.size() != experts.size() * n_layers) {
        throw ShapeError("per-layer composition needs " + std::to_string(experts.size() * n_layers) + " weights, got " +
                         std::to_string(alphas.size()));
    }
    // Validates compatibility and provides the output skeleton.
    std::vector<double> ones(experts.size(), 1.0);
    ExpertVector out = compose(experts, CompositionWeights{ones, false});
    out.name = "composed";
    for (auto& [id, z] : out.entries) {
        if (id.layer >= n_layers) throw ShapeError("expert layer " + std::to_string(id.layer) + " outside the model");
        std::fill(z.begin(), z.end(), 0.0);
        for (std::size_t k = 0; k < experts.size(); ++k) {
            const double a = alphas[k * n_layers + id.layer];
            const auto& zk = experts[k].entries.at(id);
            for (std::size_t i = 0; i < z.size(); ++i) z[i] += a * zk[i];
        }
    }
    return out;
}

std::string_view strategy_name(StrategyKind s) {
    switch (s) {
        case StrategyKind::Prompt: return "prompt";
        case StrategyKind::Classifier: return "classifier";
        case StrategyKind::FixedAlpha: return "cem";
    }
    return "?";
}

TwoPassEngine::TwoPassEngine(const PolicyModel& base, ExpertLibrary library) : base_(base), library_(std::move(library)) {
    library_.validate();
    base_.clear_adaptation();
    for (std::size_t c = 0; c < kNumCategories; ++c) {
        const ExpertVector* e = library_.expert_for(static_cast<Category>(c));
        adapted_.push_back(e ? with_expert(base_, *e) : base_);
    }
    if (library_.classifier) classifier_model_ = with_expert(base_, *library_.classifier);
}

Category TwoPassEngine::classify(StrategyKind kind, const TokenSequence& prompt) const {
    switch (kind) {
        case StrategyKind::Prompt: return servable(library_, classify_with(base_, prompt));
        case StrategyKind::Classifier:
            if (!classifier_model_) throw ClassifierMissing("library has no classification expert");
            return servable(library_, classify_with(*classifier_model_, prompt));
        case StrategyKind::FixedAlpha: break;
    }
    throw ConfigError("fixed-alpha strategy does not classify");
}

const PolicyModel& TwoPassEngine::model_for(Category c) const { return adapted_.at(static_cast<std::size_t>(c)); }

TwoPassResult TwoPassEngine::infer(const Strategy& strategy, const TokenSequence& prompt, std::size_t max_new) const {
    TwoPassResult r;
    auto t0 = std::chrono::steady_clock::now();
    if (strategy.kind == StrategyKind::FixedAlpha) {
        PolicyModel m = with_expert(base_, compose_alphas(library_.experts, strategy.alphas, strategy.granularity,
                                                          base_.config().n_layers));
        r.pass1_seconds = seconds_since(t0);
        t0 = std::chrono::steady_clock::now();
        r.output = m.generate(prompt, GenerateMode::greedy(), max_new);
        r.pass2_seconds = seconds_since(t0);
        return r;
    }
    r.category = classify(strategy.kind, prompt);
    r.pass1_seconds = seconds_since(t0);
    t0 = std::chrono::steady_clock::now();
    r.output = model_for(*r.category).generate(prompt, GenerateMode::greedy(), max_new);
    r.pass2_seconds = seconds_since(t0);
    return r;
}

TwoPassResult two_pass_infer(const TwoPassEngine& engine, const Strategy& strategy, const TokenSequence& prompt,
                             std::size_t max_new) {
    return engine.infer(strategy, prompt, max_new);
}

// ---------------------------------------------------------------------------
// CEM

void CemConfig::validate() const {
    if (num_samples == 0) throw ConfigError("cem num_samples must be >= 1");
    if (num_elites == 0 || num_elites > num_samples) throw ConfigError("cem num_elites must lie in [1, num_samples]");
    if (max_iterations == 0) throw ConfigError("cem max_iterations must be >= 1");
    if (!(init_sigma >= 0.0)) throw ConfigError("cem init_sigma must be >= 0");
    if (!(convergence_sigma >= 0.0)) throw ConfigError("cem convergence_sigma must be >= 0");
}

bool better(const CemScore& a, const CemScore& b) {
    if (a.primary != b.primary) return a.primary > b.primary;
    return a.tiebreak > b.tiebreak;
}

std::pair<std::vector<double>, std::vector<double>> elite_update(const std::vector<std::vector<double>>& samples,
                                                                 std::span<const CemScore> scores,
                                                                 std::size_t num_elites) {
    if (samples.empty() || samples.size() != scores.size()) throw ShapeError("cem samples and scores differ in count");
    if (num_elites == 0 || num_elites > samples.size()) throw RangeError("num_elites outside [1, num_samples]");
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return better(scores[a], scores[b]); });

    const std::size_t dim = samples.front().size();
    std::vector<double> mu(dim, 0.0), sigma(dim, 0.0);
    for (std::size_t e = 0; e < num_elites; ++e)
        for (std::size_t d = 0; d < dim; ++d) mu[d] += samples[order[e]][d];
    for (auto& m : mu) m /= static_cast<double>(num_elites);
    for (std::size_t e = 0; e < num_elites; ++e)
        for (std::size_t d = 0; d < dim; ++d) {
            const double diff = samples[order[e]][d] - mu[d];
            sigma[d] += diff * diff;
        }
    for (auto& s : sigma) s = std::sqrt(s / static_cast<double>(num_elites));
    return {std::move(mu), std::move(sigma)};
}

std::vector<double> cem_sample(std::span<const double> mu, std::span<const double> sigma, bool normalized,
                               std::uint64_t seed, std::size_t iteration, std::size_t index) {
    if (mu.size() != sigma.size()) throw ShapeError("cem mu and sigma differ in length");
    SeededRng rng(seed, StreamPurpose::Cem, {iteration, index});
    std::vector<double> x(mu.size());
    for (int attempt = 0; attempt < 10000; ++attempt) {
        for (std::size_t d = 0; d < x.size(); ++d) x[d] = mu[d] + sigma[d] * rng.normal();
        if (!normalized) return x;
        const double sum = std::accumulate(x.begin(), x.end(), 0.0);
        if (std::abs(sum) < 1e-6) continue;
        for (auto& v : x) v /= sum;
        return x;
    }
    throw RangeError("cem could not draw a sample with a usable sum");
}

CemStepResult cem_step(std::span<const double> mu, std::span<const double> sigma, const CemScorer& scorer,
                       const CemConfig& config, std::uint64_t seed, std::size_t iteration) {
    config.validate();
    CemStepResult r;
    r.samples.resize(config.num_samples);
    r.scores.resize(config.num_samples);
    for (std::size_t j = 0; j < config.num_samples; ++j)
        r.samples[j] = cem_sample(mu, sigma, config.normalized, seed, iteration, j);
    const auto n = static_cast<long long>(config.num_samples);
#pragma omp parallel for schedule(dynamic)
    for (long long jj = 0; jj < n; ++jj) {
        const auto j = static_cast<std::size_t>(jj);
        r.scores[j] = scorer(r.samples[j]);
    }
    std::tie(r.mu, r.sigma) = elite_update(r.samples, r.scores, config.num_elites);
    return r;
}

CemRun cem_optimize(std::size_t dim, const CemScorer& scorer, const CemConfig& config, std::uint64_t seed) {
    config.validate();
    if (dim == 0) throw RangeError("cem dimension must be >= 1");
    CemRun run;
    std::vector<double> mu = config.init_mu;
    if (mu.empty()) mu.assign(dim, 1.0 / static_cast<double>(dim));
    if (mu.size() != dim) throw ShapeError("cem init_mu has " + std::to_string(mu.size()) + " entries, expected " + std::to_string(dim));
    std::vector<double> sigma(dim, config.init_sigma);
    bool have_best = false;
    for (std::size_t it = 0; it < config.max_iterations; ++it) {
        CemStepResult step = cem_step(mu, sigma, scorer, config, seed, it);
        for (std::size_t j = 0; j < step.samples.size(); ++j) {
            if (!have_best || better(step.scores[j], run.best_score)) {
                run.best = step.samples[j];
                run.best_score = step.scores[j];
                have_best = true;
            }
        }
        mu = std::move(step.mu);
        sigma = std::move(step.sigma);
        run.iterations = it + 1;
        if (std::all_of(sigma.begin(), sigma.end(), [&](double s) { return s < config.convergence_sigma; })) break;
    }
    run.final_mu = std::move(mu);
    run.final_sigma = std::move(sigma);
    return run;
}

std::uint64_t prompt_hash(const TokenSequence& prompt) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < prompt.prompt_len && i < prompt.tokens.size(); ++i) {
        h ^= prompt.tokens[i];
        h *= 1099511628211ull;
    }
    return h;
}

void PromptLog::record(const TokenSequence& prompt) {
    const auto h = prompt_hash(prompt);
    std::lock_guard<std::mutex> lock(mu_);
    seen_.insert(h);
}

std::vector<std::uint64_t> PromptLog::hashes() const {
    std::lock_guard<std::mutex> lock(mu_);
    return {seen_.begin(), seen_.end()};
}

CemScore score_candidate(const PolicyModel& model, const ExpertVector& z, std::span<const TaskInstance> holdout,
                         PromptLog* log) {
    if (holdout.empty()) throw EmptyEval("empty holdout");
    const PolicyModel m = with_expert(model, z);
    std::size_t correct = 0, tokens = 0;
    double loglik = 0.0;
    for (const auto& inst : holdout) {
        if (log) log->record(inst.prompt);
        const auto out = m.generate(inst.prompt, GenerateMode::greedy(), generation_budget(inst));
        if (reward(out, inst.reference) <= 0.0) continue;
        ++correct;
        const auto [sum, per_token] = m.sequence_log_prob(out);
        loglik += sum;
        tokens += per_token.size();
    }
    CemScore s;
    s.primary = static_cast<double>(correct) / static_cast<double>(holdout.size());
    s.tiebreak = tokens ? loglik / static_cast<double>(tokens) : -std::numeric_limits<double>::infinity();
    return s;
}

std::string AdaptationResult::to_json() const {
    nlohmann::json j;
    j["strategy"] = strategy_name(strategy);
    j["alphas"] = alphas;
    j["granularity"] = granularity_name(granularity);
    j["normalized"] = normalized;
    j["holdout_score"] = holdout_score;
    j["tiebreak_loglik"] = std::isfinite(tiebreak_loglik) ? nlohmann::json(tiebreak_loglik) : nlohmann::json(nullptr);
    j["iterations"] = iterations;
    if (category) j["category"] = category_name(*category);
    return j.dump(2);
}

AdaptationResult adapt_cem(const PolicyModel& model, std::span<const ExpertVector> experts,
                           std::span<const TaskInstance> holdout, const CemConfig& config, std::uint64_t seed) {
    if (experts.empty()) throw EmptyLibrary("cem needs at least one expert");
    if (holdout.empty()) throw EmptyEval("cem needs holdout instances");
    config.validate();
    PolicyModel base = model;
    base.clear_adaptation();
    const std::size_t n_layers = base.config().n_layers;
    const std::size_t dim = config.granularity == Granularity::PerVector ? experts.size() : experts.size() * n_layers;

    PromptLog log;
    CemScorer scorer = [&](std::span<const double> alphas) {
        return score_candidate(base, compose_alphas(experts, alphas, config.granularity, n_layers), holdout, &log);
    };
    const CemRun run = cem_optimize(dim, scorer, config, seed);

    AdaptationResult r;
    r.strategy = StrategyKind::FixedAlpha;
    r.alphas = run.best;
    r.granularity = config.granularity;
    r.normalized = config.normalized;
    r.composed = compose_alphas(experts, run.best, config.granularity, n_layers);
    r.composed.name = "cem";
    r.holdout_score = run.best_score.primary;
    r.tiebreak_loglik = run.best_score.tiebreak;
    r.iterations = run.iterations;
    r.evaluated_prompts = log.hashes();
    return r;
}

AdaptationResult adapt_cem(const PolicyModel& model, const ExpertLibrary& library,
                           std::span<const TaskInstance> holdout, const CemConfig& config, std::uint64_t seed) {
    return adapt_cem(model, std::span<const ExpertVector>(library.experts), holdout, config, seed);
}

std::pair<ExpertVector, TrainMetrics> train_classifier_expert(const PolicyModel& model,
                                                              const ClassificationDataset& dataset,
                                                              const TrainConfig& config, std::uint64_t seed) {
    const TaskSplit split = dataset.as_task_split();
    if (split.train.empty()) throw EmptySplit("classification dataset has no examples");
    ExpertVector init = init_expert(model.config(), config, seed, "classifier", "classifier");
    init.provenance.training_task = "dispatch";
    auto [trained, metrics] = train_adapter(model, std::move(init), split, Objective::PolicyGradient, config, seed);
    return {std::get<ExpertVector>(std::move(trained)), std::move(metrics)};
}

}  // namespace svf
