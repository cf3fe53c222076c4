#include "svf/tasks.hpp"

#include <algorithm>
#include <set>

#include <nlohmann/json.hpp>

#include "svf/errors.hpp"
#include "svf/rng.hpp"

namespace svf {

namespace {

void append_number(std::vector<Token>& out, int n) {
    if (n >= 10) out.push_back(tok::digit(n / 10));
    out.push_back(tok::digit(n % 10));
}

struct Drawn {
    std::vector<Token> prompt;  // without <bos>
    std::vector<Token> answer;
};

Drawn draw(Family family, SeededRng& rng) {
    Drawn d;
    switch (family) {
        case Family::Mod10Add:
        case Family::Mod10Add3Op: {
            const int ops = family == Family::Mod10Add ? 2 : 3;
            int sum = 0;
            for (int i = 0; i < ops; ++i) {
                const int v = 10 + static_cast<int>(rng.below(90));
                if (i) d.prompt.push_back(tok::kPlus);
                append_number(d.prompt, v);
                sum += v;
                // three operands: the running digit after the second one comes first
                if (i == 1 && ops == 3) d.answer.push_back(tok::digit(sum % 10));
            }
            d.prompt.push_back(tok::kEquals);
            d.answer.push_back(tok::digit(sum % 10));
            break;
        }
        case Family::TokenReverse:
        case Family::TokenReverse6: {
            const int len = family == Family::TokenReverse ? 4 : 6;
            for (int i = 0; i < len; ++i) d.prompt.push_back(tok::letter(static_cast<int>(rng.below(tok::kNumLetters))));
            d.answer.assign(d.prompt.rbegin(), d.prompt.rend());
            d.prompt.push_back(tok::kArrow);
            break;
        }
        case Family::ParityChoice:
        case Family::MajorityChoice: {
            const int len = family == Family::ParityChoice ? 4 : 5;
            d.prompt.push_back(tok::kHash);
            int last = 0;
            int evens = 0;
            for (int i = 0; i < len; ++i) {
                const int v = static_cast<int>(rng.below(10));
                d.prompt.push_back(tok::digit(v));
                last = v;
                evens += (v % 2 == 0);
            }
            d.prompt.push_back(tok::kQuery);
            const bool pick_a = family == Family::ParityChoice ? (last % 2 == 0) : (2 * evens > len);
            d.answer.push_back(pick_a ? tok::kChoiceA : tok::kChoiceB);
            break;
        }
    }
    return d;
}

TaskInstance make_instance(Family family, const Drawn& d) {
    TaskInstance inst;
    inst.family = family;
    inst.prompt.tokens.push_back(tok::kBos);
    inst.prompt.tokens.insert(inst.prompt.tokens.end(), d.prompt.begin(), d.prompt.end());
    inst.prompt.prompt_len = inst.prompt.tokens.size();
    inst.reference.tokens = d.answer;
    inst.reference.prompt_len = 0;
    return inst;
}

std::vector<Token> strip_eos(std::vector<Token> v) {
    if (!v.empty() && v.back() == tok::kEos) v.pop_back();
    return v;
}

}  // namespace

std::string_view family_name(Family f) {
    switch (f) {
        case Family::Mod10Add: return "mod10-add";
        case Family::TokenReverse: return "token-reverse";
        case Family::ParityChoice: return "parity-choice";
        case Family::Mod10Add3Op: return "mod10-add-3op";
        case Family::TokenReverse6: return "token-reverse-6";
        case Family::MajorityChoice: return "majority-choice";
    }
    return "?";
}

Family parse_family(std::string_view name) {
    for (int i = 0; i < 6; ++i) {
        const auto f = static_cast<Family>(i);
        if (family_name(f) == name) return f;
    }
    throw UnknownFamily(std::string(name));
}

bool is_training_family(Family f) { return static_cast<int>(f) < 3; }

std::string_view category_name(Category c) {
    switch (c) {
        case Category::Math: return "math";
        case Category::Code: return "code";
        case Category::Reasoning: return "reasoning";
        case Category::Others: return "others";
    }
    return "?";
}

std::optional<Category> parse_category(std::string_view name) {
    for (std::size_t i = 0; i < kNumCategories; ++i) {
        const auto c = static_cast<Category>(i);
        if (category_name(c) == name) return c;
    }
    return std::nullopt;
}

Category domain_of(Family f) { return static_cast<Category>(static_cast<int>(f) % 3); }

Token category_token(Category c) { return static_cast<Token>(tok::kMath + static_cast<int>(c)); }

std::optional<Category> category_from_token(Token t) {
    if (t >= tok::kMath && t <= tok::kOthers) return static_cast<Category>(t - tok::kMath);
    return std::nullopt;
}

TokenSequence TaskInstance::full_sequence() const {
    TokenSequence s;
    s.tokens = prompt.tokens;
    s.prompt_len = prompt.tokens.size();
    s.tokens.insert(s.tokens.end(), reference.tokens.begin(), reference.tokens.end());
    s.tokens.push_back(tok::kEos);
    return s;
}

std::span<const TaskInstance> TaskSplit::portion(std::string_view name) const {
    if (name == "train") return train;
    if (name == "validation" || name == "val") return validation;
    if (name == "test") return test;
    if (name == "holdout" || name == "few_shot_holdout") return few_shot_holdout;
    throw RangeError("unknown split portion '" + std::string(name) + "'");
}

std::size_t max_answer_len(Family family) {
    switch (family) {
        case Family::TokenReverse: return 4;
        case Family::Mod10Add3Op: return 2;
        case Family::TokenReverse6: return 6;
        default: return 1;
    }
}

TaskSplit generate_family(Family family, std::uint64_t seed, const SplitSizes& sizes) {
    if (static_cast<int>(family) > 5) throw UnknownFamily(std::to_string(static_cast<int>(family)));
    if (sizes.train == 0 || sizes.validation == 0 || sizes.test == 0 || sizes.few_shot_holdout == 0) {
        throw RangeError("every split size must be at least 1");
    }
    const std::size_t total = sizes.train + sizes.validation + sizes.test + sizes.few_shot_holdout;
    SeededRng rng(seed, StreamPurpose::TaskData, {static_cast<std::uint64_t>(family)});
    std::set<std::vector<Token>> seen;
    std::vector<TaskInstance> pool;
    pool.reserve(total);
    std::size_t attempts = 0;
    while (pool.size() < total) {
        if (++attempts > total * 200) throw RangeError(std::string(family_name(family)) + ": prompt space too small for requested sizes");
        Drawn d = draw(family, rng);
        if (!seen.insert(d.prompt).second) continue;
        pool.push_back(make_instance(family, d));
    }
    TaskSplit split;
    split.family = family;
    auto take = [&](std::vector<TaskInstance>& dst, std::size_t begin, std::size_t n) {
        dst.assign(pool.begin() + static_cast<long>(begin), pool.begin() + static_cast<long>(begin + n));
    };
    take(split.train, 0, sizes.train);
    take(split.validation, sizes.train, sizes.validation);
    take(split.test, sizes.train + sizes.validation, sizes.test);
    take(split.few_shot_holdout, sizes.train + sizes.validation + sizes.test, sizes.few_shot_holdout);
    return split;
}

double reward(const TokenSequence& generated, const TokenSequence& reference) {
    const auto got = strip_eos(generated.answer());
    const auto want = strip_eos(reference.answer());
    if (got.empty()) return -1.0;
    return got == want ? 1.0 : -1.0;
}

std::vector<Token> distractor_answer(const TaskInstance& inst) {
    std::vector<Token> body;
    for (std::size_t i = 0; i < inst.prompt.prompt_len; ++i)
        if (inst.prompt.tokens[i] != tok::kBos) body.push_back(inst.prompt.tokens[i]);
    switch (inst.family) {
        case Family::Mod10Add: {
            // ones digit of the last operand, as if the sum were skipped
            return {body.at(body.size() - 2)};
        }
        case Family::Mod10Add3Op: {
            // correct running digit, then the last operand's ones digit
            return {inst.reference.tokens.at(0), body.at(body.size() - 2)};
        }
        case Family::TokenReverse:
        case Family::TokenReverse6: {
            std::vector<Token> out(body.rbegin() + 1, body.rend());
            std::swap(out[out.size() - 2], out[out.size() - 1]);
            return out;
        }
        case Family::ParityChoice:
        case Family::MajorityChoice: {
            const int first = body.at(1) - tok::kDigit0;
            return {first % 2 == 0 ? tok::kChoiceA : tok::kChoiceB};
        }
    }
    throw UnknownFamily(std::to_string(static_cast<int>(inst.family)));
}

TokenSequence dispatch_prompt_for(const TokenSequence& task_prompt) {
    TokenSequence s;
    s.tokens.push_back(tok::kBos);
    s.tokens.push_back(tok::kCategorize);
    for (std::size_t i = 0; i < task_prompt.prompt_len; ++i) {
        if (task_prompt.tokens[i] != tok::kBos) s.tokens.push_back(task_prompt.tokens[i]);
    }
    s.tokens.push_back(tok::kAnswerIs);
    s.prompt_len = s.tokens.size();
    return s;
}

TaskSplit ClassificationDataset::as_task_split() const {
    TaskSplit split;
    split.family = Family::Mod10Add;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        TaskInstance inst;
        inst.family = examples[i].family;
        inst.prompt = dispatch_prompt_for(examples[i].prompt);
        inst.reference.tokens = {category_token(examples[i].label)};
        (i % 2 == 0 ? split.train : split.validation).push_back(std::move(inst));
    }
    return split;
}

ClassificationDataset build_classification_dataset(std::span<const TaskSplit> splits, std::uint64_t seed,
                                                   std::size_t per_class) {
    if (splits.size() < 2) throw RangeError("classification dataset needs K >= 2 task splits");
    ClassificationDataset ds;
    for (const auto& s : splits) {
        if (s.train.empty()) throw EmptySplit(std::string(family_name(s.family)) + " has no training instances");
        ds.categories.push_back(domain_of(s.family));
    }
    ds.categories.push_back(Category::Others);

    for (std::size_t k = 0; k < splits.size(); ++k) {
        const auto& s = splits[k];
        std::vector<std::size_t> idx(s.train.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        SeededRng rng(seed, StreamPurpose::TaskData, {1000 + k});
        rng.shuffle(idx);
        for (std::size_t i = 0; i < per_class; ++i) {
            const auto& inst = s.train[idx[i % idx.size()]];
            ds.examples.push_back({inst.prompt, domain_of(s.family), s.family});
        }
    }
    // Interleave classes so any prefix stays roughly balanced.
    SeededRng rng(seed, StreamPurpose::TaskData, {2000});
    rng.shuffle(ds.examples);
    return ds;
}

std::string dump_ldjson(const TaskSplit& split) {
    std::string out;
    const std::pair<const char*, const std::vector<TaskInstance>*> parts[] = {
        {"train", &split.train}, {"validation", &split.validation}, {"test", &split.test}, {"holdout", &split.few_shot_holdout}};
    for (const auto& [name, vec] : parts) {
        for (const auto& inst : *vec) {
            nlohmann::json j;
            j["family"] = family_name(inst.family);
            j["prompt"] = render(inst.prompt.tokens);
            j["reference"] = render(inst.reference.tokens);
            j["split"] = name;
            out += j.dump() + "\n";
        }
    }
    return out;
}

}  // namespace svf
