#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "svf/errors.hpp"
#include "svf/tasks.hpp"

using namespace svf;

namespace {

// Reads the task back from its rendered prompt and solves it independently.
std::string solve(Family f, const std::string& prompt) {
    const std::string& body = prompt;  // render() drops <bos>
    switch (f) {
        case Family::Mod10Add:
        case Family::Mod10Add3Op: {
            std::vector<int> ops;
            int cur = 0;
            for (char c : body) {
                if (std::isdigit(static_cast<unsigned char>(c))) cur = cur * 10 + (c - '0');
                else { ops.push_back(cur); cur = 0; }
            }
            std::string out;
            int sum = 0;
            for (std::size_t i = 0; i < ops.size(); ++i) {
                sum += ops[i];
                if (ops.size() == 3 && i == 1) out += char('0' + sum % 10);
            }
            return out + char('0' + sum % 10);
        }
        case Family::TokenReverse:
        case Family::TokenReverse6: {
            const std::string letters = body.substr(0, body.find('>'));
            return {letters.rbegin(), letters.rend()};
        }
        case Family::ParityChoice:
        case Family::MajorityChoice: {
            std::vector<int> d;
            for (char c : body)
                if (std::isdigit(static_cast<unsigned char>(c))) d.push_back(c - '0');
            bool a;
            if (f == Family::ParityChoice) a = d.back() % 2 == 0;
            else {
                int ev = 0;
                for (int v : d) ev += v % 2 == 0;
                a = 2 * ev > static_cast<int>(d.size());
            }
            return a ? "A" : "B";
        }
    }
    return "";
}

TokenSequence answer_seq(std::vector<Token> t) { return {std::move(t), 0}; }

}  // namespace

TEST_CASE("families are solved correctly and split disjointly") {
    for (int fi = 0; fi < 6; ++fi) {
        const auto f = static_cast<Family>(fi);
        CAPTURE(family_name(f));
        const auto split = generate_family(f, 3);
        CHECK(split.train.size() == 512);
        CHECK(split.few_shot_holdout.size() == 10);
        std::set<std::vector<Token>> seen;
        std::size_t total = 0;
        for (const char* portion : {"train", "validation", "test", "holdout"}) {
            for (const auto& inst : split.portion(portion)) {
                ++total;
                seen.insert(inst.prompt.tokens);
                CHECK(inst.family == f);
                CHECK(inst.prompt.tokens.front() == tok::kBos);
                CHECK(inst.reference.tokens.size() <= max_answer_len(f));
                for (Token t : inst.prompt.tokens) CHECK(t < tok::kVocabSize);
                CHECK(render(inst.reference.tokens) == solve(f, render(inst.prompt.tokens)));
                CHECK(reward(answer_seq(inst.reference.tokens), inst.reference) == 1.0);
            }
        }
        CHECK(seen.size() == total);
    }
}

TEST_CASE("generation is deterministic") {
    CHECK(generate_family(Family::TokenReverse, 7).test == generate_family(Family::TokenReverse, 7).test);
    CHECK(generate_family(Family::TokenReverse, 7).test != generate_family(Family::TokenReverse, 8).test);
}

TEST_CASE("rendered examples") {
    const auto inst = generate_family(Family::Mod10Add3Op, 0).train[0];
    const std::string p = render(inst.prompt.tokens);
    CHECK(render(inst.reference.tokens) == solve(Family::Mod10Add3Op, p));
    CHECK(inst.reference.tokens.size() == 2);
    const auto rev = generate_family(Family::TokenReverse, 0).train[0];
    CHECK(rev.reference.tokens.size() == 4);
}

TEST_CASE("reward") {
    const TokenSequence ref = answer_seq({tok::digit(7)});
    CHECK(reward(answer_seq({tok::digit(7)}), ref) == 1.0);
    CHECK(reward(answer_seq({tok::digit(7), tok::kEos}), ref) == 1.0);
    CHECK(reward(answer_seq({tok::digit(8)}), ref) == -1.0);
    CHECK(reward(answer_seq({tok::digit(7), tok::digit(7)}), ref) == -1.0);
    CHECK(reward(answer_seq({}), ref) == -1.0);
    CHECK(reward(answer_seq({tok::kEos}), ref) == -1.0);
}

TEST_CASE("distractors differ from references") {
    for (Family f : kTrainingFamilies) {
        const auto split = generate_family(f, 1);
        std::size_t differ = 0;
        for (const auto& inst : split.train) differ += distractor_answer(inst) != inst.reference.tokens;
        CHECK(differ > split.train.size() / 3);
    }
}

TEST_CASE("classification dataset") {
    std::vector<TaskSplit> splits;
    for (Family f : kTrainingFamilies) splits.push_back(generate_family(f, 2));
    const auto ds = build_classification_dataset(splits, 4, 30);
    CHECK(ds.examples.size() == 90);
    std::map<Category, int> per;
    for (const auto& e : ds.examples) {
        ++per[e.label];
        CHECK(e.label == domain_of(e.family));
        bool from_train = false;
        for (const auto& s : splits)
            for (const auto& inst : s.train) from_train |= inst.prompt == e.prompt;
        CHECK(from_train);
    }
    CHECK(per[Category::Math] == 30);
    CHECK(per[Category::Code] == 30);
    CHECK(per[Category::Reasoning] == 30);
    CHECK(ds.categories.size() == 4);
    CHECK(build_classification_dataset(splits, 4, 30).examples.size() == 90);

    const auto again = build_classification_dataset(splits, 4, 30);
    for (std::size_t i = 0; i < 90; ++i) CHECK(again.examples[i].prompt == ds.examples[i].prompt);

    auto empty = splits;
    empty[1].train.clear();
    CHECK_THROWS_AS(build_classification_dataset(empty, 4, 30), EmptySplit);
    CHECK_THROWS_AS(build_classification_dataset(std::span(splits).first(1), 4, 30), RangeError);

    const auto ts = ds.as_task_split();
    CHECK(ts.train.size() + ts.validation.size() == 90);
    CHECK(ts.train[0].reference.tokens == std::vector<Token>{category_token(ds.examples[0].label)});
}

TEST_CASE("names and categories") {
    for (int i = 0; i < 6; ++i) CHECK(parse_family(family_name(static_cast<Family>(i))) == static_cast<Family>(i));
    CHECK_THROWS_AS(parse_family("gsm8k"), UnknownFamily);
    CHECK(domain_of(Family::Mod10Add) == Category::Math);
    CHECK(domain_of(Family::TokenReverse6) == Category::Code);
    CHECK(domain_of(Family::MajorityChoice) == Category::Reasoning);
    for (std::size_t c = 0; c < kNumCategories; ++c) {
        const auto cat = static_cast<Category>(c);
        CHECK(category_from_token(category_token(cat)) == cat);
        CHECK(parse_category(category_name(cat)) == cat);
    }
    CHECK_FALSE(category_from_token(tok::digit(3)).has_value());
}

TEST_CASE("ldjson dump") {
    const auto split = generate_family(Family::ParityChoice, 0, {2, 1, 1, 1});
    const auto text = dump_ldjson(split);
    CHECK(std::count(text.begin(), text.end(), '\n') == 5);
    CHECK(text.find("\"split\":\"holdout\"") != std::string::npos);
}
