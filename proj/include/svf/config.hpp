#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "svf/adapt.hpp"
#include "svf/model.hpp"
#include "svf/tasks.hpp"
#include "svf/train.hpp"

namespace svf {

struct LoraSettings {
    std::size_t rank = 16;
    double alpha = 32.0;
    double dropout = 0.05;
    std::set<Site> sites{Site::q_proj, Site::v_proj};
    std::vector<double> sweep_learning_rates{std::begin(kLoraSweepLearningRates), std::end(kLoraSweepLearningRates)};
    std::vector<double> sweep_clip_norms{std::begin(kLoraSweepClipNorms), std::end(kLoraSweepClipNorms)};
};

struct ExperimentSettings {
    std::uint64_t seed = 0;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::uint64_t> shuffle_seeds{0, 1, 2, 3, 4};
    std::size_t classification_per_class = 128;
    std::vector<std::size_t> pca_grid{1, 2, 4, 8, 16, 32};
};

// Everything a subcommand needs, read from a plain-text document:
//
//   # comment
//   [section]
//   key = value          lists are comma separated
//
// Sections: model, task, pretrain, train, lora, cem, experiment. Every field
// has a default; unknown sections or keys and repeated keys are errors.
struct RunConfig {
    ModelConfig model;
    std::uint64_t init_seed = 0;  // base weights start from this seed whatever the run seed
    SplitSizes sizes;
    PretrainConfig pretrain;
    bool pretrain_auxiliary = true;  // unseen families' train portions join the corpus
    TrainConfig train;
    LoraSettings lora;
    CemConfig cem;
    ExperimentSettings experiment;

    // Throws ConfigError with the offending line number.
    static RunConfig parse(std::string_view text);
    static RunConfig load(const std::string& path);

    // Every field, one [section] block per section with keys sorted. Parses back
    // to the same config.
    std::string canonical() const;
    // 16 hex digits over canonical(); independent of key order in the source.
    std::string hash() const;

    void validate() const;  // throws ConfigError
};

// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t v);

}  // namespace svf
