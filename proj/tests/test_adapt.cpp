#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "checks.hpp"
#include "svf/adapt.hpp"
#include "svf/errors.hpp"

using namespace svf;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.context_len = 24;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 12;
    return c;
}

ExpertVector random_expert(const PolicyModel& m, std::uint64_t seed, std::string domain) {
    SeededRng rng(seed, StreamPurpose::Test);
    ExpertVector e = ones_expert(m.config().svf_ranks(), "e" + std::to_string(seed));
    e.domain_tag = std::move(domain);
    for (auto& [id, z] : e.entries)
        for (auto& v : z) v = 1.0 + 0.3 * rng.normal();
    return e;
}

ExpertLibrary random_library(const PolicyModel& m) {
    ExpertLibrary lib;
    lib.experts = {random_expert(m, 1, "math"), random_expert(m, 2, "code"), random_expert(m, 3, "reasoning")};
    return lib;
}

using checks::quadratic;

}  // namespace

TEST_CASE("elite update on a worked example") {
    const std::vector<std::vector<double>> samples{{1}, {2}, {3}, {4}};
    const std::vector<CemScore> scores{{1, 0}, {2, 0}, {3, 0}, {4, 0}};
    const auto [mu, sigma] = elite_update(samples, scores, 2);
    CHECK(mu[0] == 3.5);
    CHECK(sigma[0] == 0.5);

    const auto [all_mu, all_sigma] = elite_update(samples, scores, 4);
    CHECK(all_mu[0] == 2.5);
    CHECK(all_sigma[0] == doctest::Approx(std::sqrt(1.25)).epsilon(1e-15));

    // ties fall back to the tiebreak, then to sample order
    const std::vector<CemScore> tied{{1, 0}, {1, 5}, {1, 5}, {0, 9}};
    CHECK(elite_update(samples, tied, 1).first[0] == 2.0);
    CHECK(better({1, -1}, {0, 100}));
    CHECK_FALSE(better({1, 0}, {1, 0}));
}

TEST_CASE("cem step matches the brute-force oracle") {
    CHECK(checks::cem_oracle_mismatches(20) == 0);
}

TEST_CASE("cem recovers the optimum of a quadratic") {
    const std::vector<double> target{0.2, 0.3, 0.5};
    CemConfig cfg;
    cfg.max_iterations = 50;
    const auto run = cem_optimize(3, [&](std::span<const double> a) { return quadratic(a, target); }, cfg, 4);
    CHECK(run.iterations <= 50);
    for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(run.best[i] - target[i]) <= 1e-2);

    // the returned point is the best sample seen
    CHECK(run.best_score == quadratic(run.best, target));
}

TEST_CASE("normalized sampling") {
    const std::vector<double> mu{0.1, 0.2, 0.3, 0.4}, sigma{0.5, 0.5, 0.5, 0.5};
    for (std::size_t j = 0; j < 200; ++j) {
        const auto x = cem_sample(mu, sigma, true, 8, 0, j);
        double s = 0.0;
        for (double v : x) s += v;
        CHECK(std::abs(s - 1.0) <= 1e-9);
    }
    CemConfig cfg;
    cfg.max_iterations = 3;
    const auto one = cem_optimize(1, [](std::span<const double>) { return CemScore{}; }, cfg, 0);
    CHECK(one.best == std::vector<double>{1.0});
    CHECK(cem_sample(mu, sigma, false, 8, 0, 3) == cem_sample(mu, sigma, false, 8, 0, 3));
    CHECK(cem_sample(mu, sigma, false, 8, 0, 3) != cem_sample(mu, sigma, false, 8, 1, 3));
}

TEST_CASE("cem configuration errors") {
    CemConfig cfg;
    cfg.num_elites = 40;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CemConfig ok;
    CHECK_THROWS_AS(cem_optimize(0, [](std::span<const double>) { return CemScore{}; }, ok, 0), RangeError);
    const PolicyModel m(small_config(), 1);
    const auto holdout = generate_family(Family::Mod10Add, 0, {4, 4, 4, 3}).few_shot_holdout;
    CHECK_THROWS_AS(adapt_cem(m, std::span<const ExpertVector>{}, holdout, ok, 0), EmptyLibrary);
    CHECK_THROWS_AS(parse_granularity("per_token"), ConfigError);
}

TEST_CASE("parse_dispatch_output") {
    CHECK(parse_dispatch_output({{tok::kBos, category_token(Category::Code)}, 1}) == Category::Code);
    CHECK(parse_dispatch_output({{tok::kBos, tok::digit(3)}, 1}) == Category::Others);
    CHECK(parse_dispatch_output({{tok::kBos}, 1}) == Category::Others);
}

TEST_CASE("compose_alphas") {
    const PolicyModel m(small_config(), 2);
    const auto lib = random_library(m);
    const std::vector<double> a{0.2, 0.5, 0.3};
    CHECK(compose_alphas(lib.experts, a, Granularity::PerVector, 2).entries ==
          compose(lib.experts, CompositionWeights{a, false}).entries);

    // per layer: [k * n_layers + layer]
    const std::vector<double> pl{1, 0, 0, 2, 0, 0};
    const auto z = compose_alphas(lib.experts, pl, Granularity::PerLayer, 2);
    for (const auto& [id, v] : z.entries) {
        const auto& src = id.layer == 0 ? lib.experts[0].entries.at(id) : lib.experts[1].entries.at(id);
        const double scale = id.layer == 0 ? 1.0 : 2.0;
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(v[i] == scale * src[i]);
    }
    CHECK_THROWS_AS(compose_alphas(lib.experts, a, Granularity::PerLayer, 2), ShapeError);
    CHECK_THROWS_AS(compose_alphas(std::span<const ExpertVector>{}, a, Granularity::PerVector, 2), EmptyLibrary);
}

TEST_CASE("dispatch strategies") {
    const PolicyModel m(small_config(), 3);
    ExpertLibrary lib = random_library(m);
    lib.classifier = ones_expert(m.config().svf_ranks(), "classifier");
    lib.classifier->domain_tag = "classifier";
    const TwoPassEngine engine(m, lib);
    for (Family f : kTrainingFamilies) {
        for (const auto& inst : generate_family(f, 0, {4, 4, 8, 2}).test) {
            // z^c of ones leaves the weights as they are
            CHECK(engine.classify(StrategyKind::Classifier, inst.prompt) ==
                  engine.classify(StrategyKind::Prompt, inst.prompt));
            CHECK(dispatch_classifier(m, lib, inst.prompt) == dispatch_prompt(m, lib, inst.prompt));
            const auto r = engine.infer(Strategy{}, inst.prompt, 4);
            REQUIRE(r.category.has_value());
            const PolicyModel& used = *r.category == Category::Others ? m : engine.model_for(*r.category);
            CHECK(r.output == used.generate(inst.prompt, GenerateMode::greedy(), 4));
        }
    }
    CHECK(engine.model_for(Category::Others).generate(generate_family(Family::Mod10Add, 1).test[0].prompt,
                                                      GenerateMode::greedy(), 2) ==
          m.generate(generate_family(Family::Mod10Add, 1).test[0].prompt, GenerateMode::greedy(), 2));

    ExpertLibrary no_cls = random_library(m);
    const TwoPassEngine plain(m, no_cls);
    const auto p = generate_family(Family::Mod10Add, 0).test[0].prompt;
    CHECK_THROWS_AS(plain.classify(StrategyKind::Classifier, p), ClassifierMissing);
    CHECK_THROWS_AS(dispatch_classifier(m, no_cls, p), ClassifierMissing);

    ExpertLibrary dup = random_library(m);
    dup.experts[1].domain_tag = "math";
    CHECK_THROWS_AS(dup.validate(), IncompatibleExperts);
}

TEST_CASE("fixed alpha inference uses the composed expert") {
    const PolicyModel m(small_config(), 4);
    const auto lib = random_library(m);
    const TwoPassEngine engine(m, lib);
    Strategy s;
    s.kind = StrategyKind::FixedAlpha;
    s.alphas = {0.0, 1.0, 0.0};
    const auto p = generate_family(Family::TokenReverse, 0).test[0].prompt;
    const auto r = engine.infer(s, p, 4);
    CHECK_FALSE(r.category.has_value());
    CHECK(r.output == engine.model_for(Category::Code).generate(p, GenerateMode::greedy(), 4));
}

TEST_CASE("adapt_cem only looks at the holdout") {
    const PolicyModel m(small_config(), 5);
    const auto lib = random_library(m);
    const auto split = generate_family(Family::Mod10Add3Op, 2, {8, 8, 8, 5});
    CemConfig cfg;
    cfg.num_samples = 6;
    cfg.num_elites = 2;
    cfg.max_iterations = 3;
    const auto r = adapt_cem(m, lib, split.few_shot_holdout, cfg, 7);
    std::vector<std::uint64_t> expect;
    for (const auto& inst : split.few_shot_holdout) expect.push_back(prompt_hash(inst.prompt));
    std::sort(expect.begin(), expect.end());
    expect.erase(std::unique(expect.begin(), expect.end()), expect.end());
    CHECK(r.evaluated_prompts == expect);
    CHECK(r.alphas.size() == 3);
    CHECK(r.composed.entries == compose_alphas(lib.experts, r.alphas, Granularity::PerVector, 2).entries);
    CHECK(r.holdout_score == score_candidate(m, r.composed, split.few_shot_holdout).primary);

    // same seed, same answer
    CHECK(adapt_cem(m, lib, split.few_shot_holdout, cfg, 7).alphas == r.alphas);

    cfg.granularity = Granularity::PerLayer;
    CHECK(adapt_cem(m, lib, split.few_shot_holdout, cfg, 7).alphas.size() == 6);
    CHECK(r.to_json().find("\"strategy\": \"cem\"") != std::string::npos);
}

TEST_CASE("score_candidate") {
    const PolicyModel m(small_config(), 6);
    const auto ones = ones_expert(m.config().svf_ranks());
    const auto split = generate_family(Family::ParityChoice, 0, {8, 8, 8, 10});
    const auto s = score_candidate(m, ones, split.few_shot_holdout);
    CHECK(s.primary == evaluate(m, split.few_shot_holdout));
    CHECK_THROWS_AS(score_candidate(m, ones, std::span<const TaskInstance>{}), EmptyEval);
}
