#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "svf/adapt.hpp"
#include "svf/model.hpp"
#include "svf/tasks.hpp"
#include "svf/train.hpp"

namespace svf {

// --- singular-value spectrum --------------------------------------------------

// Share of the singular-value mass in the top r values. sigma must be sorted
// descending. An all-zero spectrum gives 1. Throws RangeError unless
// 1 <= r <= sigma.size().
double pca_ratio(std::span<const double> sigma, std::size_t r);
double pca_ratio(const SvdFactors& f, std::size_t r);

struct PcaReport {
    struct Entry {
        MatrixId id;
        std::vector<double> sigma;
        std::vector<std::pair<std::size_t, double>> ratios;  // (r, ratio)
    };
    std::vector<Entry> entries;

    std::string to_csv() const;  // matrix,r,ratio
};

// Grid values above a matrix's rank are clamped to the rank.
PcaReport pca_report(const PolicyModel& model, std::span<const std::size_t> r_grid);

// --- dispatch confusion --------------------------------------------------------

struct ConfusionMatrix {
    std::size_t k = 0;                              // expert categories; column k is Others
    std::vector<std::vector<std::size_t>> counts;   // k rows x (k + 1) columns

    std::vector<std::vector<double>> rates() const;  // row-stochastic
    double pooled_accuracy() const;
    // Every diagonal entry strictly exceeds the other entries of its row.
    bool diagonal_dominant() const;
    std::string to_csv() const;
};

using Dispatcher = std::function<Category(const TokenSequence&)>;

// Row = true category of the prompt. Throws RangeError for labels outside
// the K categories and EmptyEval when a row has no prompts.
ConfusionMatrix confusion(const Dispatcher& dispatch, std::span<const LabeledPrompt> prompts, std::size_t k);
ConfusionMatrix confusion(const TwoPassEngine& engine, StrategyKind strategy, std::span<const LabeledPrompt> prompts);

// Prompts from a portion of each split, labelled with the family's domain.
std::vector<LabeledPrompt> labeled_prompts(std::span<const TaskSplit> splits, std::string_view portion,
                                           std::size_t per_family = 0);

// --- cross-model transfer ----------------------------------------------------------

struct TransferRow {
    Family task = Family::Mod10Add3Op;
    double base = 0.0;
    double ordered = 0.0;
    double shuffled_mean = 0.0;
    double shuffled_std = 0.0;
    std::vector<double> shuffled;
    std::optional<double> cross_cem;
};

struct TransferReport {
    std::vector<TransferRow> rows;
    std::string to_csv() const;  // task,base,ordered,shuffled_mean,shuffled_std,cross_cem
};

// Throws IncompatibleArchitecture when any source z does not fit the target's ranks.
void check_transferable(const ExpertLibrary& source, const PolicyModel& target);

// Per task, evaluates the source expert for the task's domain on the target
// model ("ordered"), the same expert shuffled with each seed, and, when a
// target library is given, CEM over the pooled experts of both models.
TransferReport transfer_experiment(const ExpertLibrary& source, const PolicyModel& target,
                                   std::span<const TaskSplit> tasks, std::span<const std::uint64_t> shuffle_seeds,
                                   const ExpertLibrary* target_library, const CemConfig& cem, std::uint64_t seed);

// --- ablation grid -------------------------------------------------------------------

enum class Method { Svf, Lora };
enum class SiteGroup { Mlp, Attention, Both };
std::string_view method_name(Method m);
std::string_view site_group_name(SiteGroup g);
// SVF attention means q, k, v, o; LoRA attention means q, v.
std::set<Site> sites_for(Method m, SiteGroup g);

struct AblationCell {
    Method method = Method::Svf;
    Objective objective = Objective::PolicyGradient;
    SiteGroup sites = SiteGroup::Both;
};

// The seven rows of the reference ablation table, in order.
std::vector<AblationCell> reference_ablation_cells();

struct AblationSpec {
    TaskSplit train_task;     // adapter trained here and scored on its test portion
    TaskSplit unseen_task;    // zero-shot score on its test portion
    TrainConfig svf_config;
    TrainConfig lora_config;  // learning rate and clip come from the sweep
    std::vector<double> lora_learning_rates{std::begin(kLoraSweepLearningRates), std::end(kLoraSweepLearningRates)};
    std::vector<double> lora_clip_norms{std::begin(kLoraSweepClipNorms), std::end(kLoraSweepClipNorms)};
    std::uint64_t seed = 0;
};

struct AblationRow {
    AblationCell cell;
    std::size_t parameters = 0;
    double train_score = 0.0;
    double unseen_score = 0.0;
    double val_acc = 0.0;
    double learning_rate = 0.0;
    double clip_max_norm = 0.0;
};

std::size_t svf_parameter_count(const ModelConfig& cfg, const std::set<Site>& sites);

std::vector<AblationRow> run_ablation_grid(const PolicyModel& model, const AblationSpec& spec,
                                           std::span<const AblationCell> cells);
// index,method,objective,sites,params,train_score,unseen_score,val_acc,lr,clip
std::string ablation_csv(std::span<const AblationRow> rows);

}  // namespace svf
