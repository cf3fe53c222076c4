#include "svf/vocab.hpp"

#include <array>

namespace svf {

namespace {

constexpr std::array<std::string_view, tok::kVocabSize> kTexts = {
    "<bos>", "<eos>", "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "a", "b", "c", "d", "e",
    "f",     "g",     "h", "+", "=", ">", "#", "?", "A", "B", "[Q]", "[C]", "math", "code", "reasoning", "others",
};

}  // namespace

std::string_view token_text(Token t) { return t < kTexts.size() ? kTexts[t] : std::string_view("<unk>"); }

std::optional<Token> token_from_text(std::string_view s) {
    for (std::size_t i = 0; i < kTexts.size(); ++i)
        if (kTexts[i] == s) return static_cast<Token>(i);
    return std::nullopt;
}

std::string render(const std::vector<Token>& tokens) {
    std::string out;
    for (auto t : tokens) {
        if (t == tok::kBos) continue;
        out += token_text(t);
    }
    return out;
}

}  // namespace svf
