#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "svf/adapt.hpp"
#include "svf/config.hpp"
#include "svf/model.hpp"
#include "svf/tasks.hpp"
#include "svf/train.hpp"

namespace svf {

// The steps shared by the command-line tool and the acceptance run, so both
// produce the same artifacts from the same config and seed.

std::vector<TaskSplit> training_splits(const RunConfig& cfg, std::uint64_t seed);
std::vector<TaskSplit> unseen_splits(const RunConfig& cfg, std::uint64_t seed);

// Fresh model from cfg.init_seed, pretrained on the run seed's data, then
// rounded to float32 so a saved checkpoint reloads to the same weights.
std::pair<PolicyModel, PretrainMetrics> pretrain_reference(const RunConfig& cfg, std::uint64_t seed);

struct TrainedExpert {
    ExpertVector expert;
    TrainMetrics metrics;
};

// SVF expert for one family with either objective; provenance filled in.
TrainedExpert train_family_expert(const PolicyModel& model, const TaskSplit& split, Objective objective,
                                  const RunConfig& cfg, std::uint64_t seed);

TrainedExpert train_reference_classifier(const PolicyModel& model, std::span<const TaskSplit> splits,
                                         const RunConfig& cfg, std::uint64_t seed);

// One policy-gradient expert per training family plus z^c.
ExpertLibrary build_library(const PolicyModel& model, std::span<const TaskSplit> splits, const RunConfig& cfg,
                            std::uint64_t seed, bool with_classifier = true);

// Test accuracy of per-prompt two-pass inference.
double two_pass_accuracy(const TwoPassEngine& engine, StrategyKind kind, std::span<const TaskInstance> instances);

}  // namespace svf
