#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "svf/vocab.hpp"

namespace svf {

// Synthetic task families. The first three are the expert training tasks;
// the last three are unseen tasks built as harder compositions of the same
// skills over the same vocabulary.
enum class Family : std::uint8_t {
    Mod10Add = 0,        // "47+85=" -> "2"             (math)
    TokenReverse = 1,    // "abcd>" -> "dcba"            (code)
    ParityChoice = 2,    // "#3852?" -> "A" if the number is even  (reasoning)
    Mod10Add3Op = 3,     // "14+17+29=" -> "10": running digit after two operands, then the sum
    TokenReverse6 = 4,   // "abcdef>" -> "fedcba"
    MajorityChoice = 5,  // "#38527?" -> "A" if most digits are even
};

inline constexpr Family kTrainingFamilies[] = {Family::Mod10Add, Family::TokenReverse, Family::ParityChoice};
inline constexpr Family kUnseenFamilies[] = {Family::Mod10Add3Op, Family::TokenReverse6, Family::MajorityChoice};

std::string_view family_name(Family f);
Family parse_family(std::string_view name);  // throws UnknownFamily
bool is_training_family(Family f);

// Dispatch categories; index k < 3 matches the expert domain of training
// family k, and Others means "use the base weights".
enum class Category : std::uint8_t { Math = 0, Code = 1, Reasoning = 2, Others = 3 };
inline constexpr std::size_t kNumCategories = 4;

std::string_view category_name(Category c);
std::optional<Category> parse_category(std::string_view name);
Category domain_of(Family f);            // unseen families map to the domain they extend
Token category_token(Category c);
std::optional<Category> category_from_token(Token t);

struct TaskInstance {
    TokenSequence prompt;      // starts with <bos>; prompt_len == size()
    TokenSequence reference;   // answer tokens only, no <eos>
    Family family = Family::Mod10Add;

    // <bos> prompt answer <eos>, prompt_len marking where the answer starts.
    TokenSequence full_sequence() const;
    friend bool operator==(const TaskInstance&, const TaskInstance&) = default;
};

struct SplitSizes {
    std::size_t train = 512;
    std::size_t validation = 512;
    std::size_t test = 256;
    std::size_t few_shot_holdout = 10;
};

struct TaskSplit {
    Family family = Family::Mod10Add;
    std::vector<TaskInstance> train;
    std::vector<TaskInstance> validation;
    std::vector<TaskInstance> test;
    std::vector<TaskInstance> few_shot_holdout;

    std::span<const TaskInstance> portion(std::string_view name) const;  // "train", "validation", "test", "holdout"
};

// Deterministic in (family, seed); all four portions are disjoint.
TaskSplit generate_family(Family family, std::uint64_t seed, const SplitSizes& sizes = {});

// Longest answer (tokens, excluding <eos>) a family can produce.
std::size_t max_answer_len(Family family);

// +1 iff the generated answer (with a trailing <eos> stripped) equals the
// reference exactly, -1 otherwise.
double reward(const TokenSequence& generated, const TokenSequence& reference);

// A plausible wrong answer: the ones digit of the last operand, the reversal
// with its last two symbols swapped, or the parity of the leading digit. The
// pretraining corpus mixes these in so the base model holds both behaviours.
std::vector<Token> distractor_answer(const TaskInstance& inst);

// Wraps a task prompt in the dispatch template: <bos> [Q] prompt [C].
TokenSequence dispatch_prompt_for(const TokenSequence& task_prompt);

struct LabeledPrompt {
    TokenSequence prompt;  // the raw task prompt
    Category label = Category::Others;
    Family family = Family::Mod10Add;
};

struct ClassificationDataset {
    std::vector<LabeledPrompt> examples;
    std::vector<Category> categories;  // the K expert domains followed by Others

    // Dispatch-template instances whose reference is the category token.
    // Even-indexed examples go to train and odd ones to validation.
    TaskSplit as_task_split() const;
};

// Balanced over the K families, drawing from their train portions only.
// Throws EmptySplit when a split has no training data and RangeError for K < 2.
ClassificationDataset build_classification_dataset(std::span<const TaskSplit> splits, std::uint64_t seed,
                                                   std::size_t per_class);

// Line-delimited JSON dump: {family, prompt, reference, split}.
std::string dump_ldjson(const TaskSplit& split);

}  // namespace svf
