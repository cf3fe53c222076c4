#include "svf/pipeline.hpp"

#include "svf/checkpoint.hpp"
#include "svf/errors.hpp"

namespace svf {

std::vector<TaskSplit> training_splits(const RunConfig& cfg, std::uint64_t seed) {
    std::vector<TaskSplit> out;
    for (Family f : kTrainingFamilies) out.push_back(generate_family(f, seed, cfg.sizes));
    return out;
}

std::vector<TaskSplit> unseen_splits(const RunConfig& cfg, std::uint64_t seed) {
    std::vector<TaskSplit> out;
    for (Family f : kUnseenFamilies) out.push_back(generate_family(f, seed, cfg.sizes));
    return out;
}

std::pair<PolicyModel, PretrainMetrics> pretrain_reference(const RunConfig& cfg, std::uint64_t seed) {
    const auto band = training_splits(cfg, seed);
    std::vector<TaskSplit> aux;
    if (cfg.pretrain_auxiliary) aux = unseen_splits(cfg, seed);
    auto [model, metrics] = pretrain_base(PolicyModel(cfg.model, cfg.init_seed), band, cfg.pretrain, seed, aux);
    model.round_to_float();
    return {std::move(model), std::move(metrics)};
}

TrainedExpert train_family_expert(const PolicyModel& model, const TaskSplit& split, Objective objective,
                                  const RunConfig& cfg, std::uint64_t seed) {
    TrainedExpert out;
    if (objective == Objective::PolicyGradient) {
        auto [e, m] = train_svf_expert(model, split, cfg.train, seed);
        out = {std::move(e), std::move(m)};
    } else {
        ExpertVector init = init_expert(model.config(), cfg.train, seed, std::string(family_name(split.family)),
                                        std::string(category_name(domain_of(split.family))));
        init.provenance.training_task = std::string(family_name(split.family));
        auto [a, m] = train_next_token(model, std::move(init), split, cfg.train, seed);
        out = {std::get<ExpertVector>(std::move(a)), std::move(m)};
    }
    out.expert.provenance.source_model_hash = model_hash(model);
    out.expert.provenance.config_hash = cfg.hash();
    return out;
}

TrainedExpert train_reference_classifier(const PolicyModel& model, std::span<const TaskSplit> splits,
                                         const RunConfig& cfg, std::uint64_t seed) {
    const auto ds = build_classification_dataset(splits, seed, cfg.experiment.classification_per_class);
    auto [e, m] = train_classifier_expert(model, ds, cfg.train, seed);
    e.provenance.source_model_hash = model_hash(model);
    e.provenance.config_hash = cfg.hash();
    return {std::move(e), std::move(m)};
}

ExpertLibrary build_library(const PolicyModel& model, std::span<const TaskSplit> splits, const RunConfig& cfg,
                            std::uint64_t seed, bool with_classifier) {
    ExpertLibrary lib;
    for (const auto& s : splits) lib.experts.push_back(train_family_expert(model, s, Objective::PolicyGradient, cfg, seed).expert);
    if (with_classifier) lib.classifier = train_reference_classifier(model, splits, cfg, seed).expert;
    lib.validate();
    return lib;
}

double two_pass_accuracy(const TwoPassEngine& engine, StrategyKind kind, std::span<const TaskInstance> instances) {
    if (instances.empty()) throw EmptyEval("no instances to score");
    Strategy st;
    st.kind = kind;
    std::size_t correct = 0;
    for (const auto& inst : instances) {
        const auto r = engine.infer(st, inst.prompt, generation_budget(inst));
        correct += reward(r.output, inst.reference) > 0;
    }
    return static_cast<double>(correct) / static_cast<double>(instances.size());
}

}  // namespace svf
