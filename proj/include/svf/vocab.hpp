#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace svf {

using Token = std::uint16_t;

// Fixed symbol table shared by every task family, the dispatch template and
// the category answers.
namespace tok {
inline constexpr Token kBos = 0;
inline constexpr Token kEos = 1;
inline constexpr Token kDigit0 = 2;   // '0'..'9' -> 2..11
inline constexpr Token kLetterA = 12; // 'a'..'h' -> 12..19
inline constexpr Token kPlus = 20;
inline constexpr Token kEquals = 21;
inline constexpr Token kArrow = 22;
inline constexpr Token kHash = 23;
inline constexpr Token kQuery = 24;
inline constexpr Token kChoiceA = 25;
inline constexpr Token kChoiceB = 26;
inline constexpr Token kCategorize = 27;  // "[Q]" opens the dispatch question
inline constexpr Token kAnswerIs = 28;    // "[C]" asks for the category
inline constexpr Token kMath = 29;
inline constexpr Token kCode = 30;
inline constexpr Token kReasoning = 31;
inline constexpr Token kOthers = 32;
inline constexpr std::size_t kVocabSize = 33;
inline constexpr int kNumLetters = 8;

inline constexpr Token digit(int d) { return static_cast<Token>(kDigit0 + d); }
inline constexpr Token letter(int i) { return static_cast<Token>(kLetterA + i); }
}  // namespace tok

std::string_view token_text(Token t);
std::optional<Token> token_from_text(std::string_view s);

// Concatenates token texts. Multi-character symbols are kept verbatim, so the
// output is for display and dumps only.
std::string render(const std::vector<Token>& tokens);

// A token sequence whose first prompt_len tokens are the conditioning context.
struct TokenSequence {
    std::vector<Token> tokens;
    std::size_t prompt_len = 0;

    std::size_t size() const { return tokens.size(); }
    std::vector<Token> answer() const { return {tokens.begin() + static_cast<long>(prompt_len), tokens.end()}; }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

}  // namespace svf
