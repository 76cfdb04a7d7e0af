#pragma once

#include "nncfl/model.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace nncfl::tok {

using lm::TokenId;
using lm::TokenSequence;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kSpecialCount = 4;

// Structural characters, then digits; each is its own single-character token.
inline constexpr std::string_view kStructuralChars = " ,=-.";
inline constexpr std::string_view kDigits = "0123456789";

// What UNK renders as.
inline constexpr std::string_view kReplacementGlyph = "\xEF\xBF\xBD";  // U+FFFD

// Fixed token table: specials, structural characters, digits, then word
// tokens (feature names and categorical values) in the order given.
class Vocabulary {
public:
    // Throws ArgumentError for an empty or duplicate word, or a word that
    // collides with a special/character token.
    static Vocabulary build(std::span<const std::string> words);

    // One token per line, line number = id.
    static Vocabulary load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const { return tokens_.size(); }
    const std::string& token(TokenId id) const;
    // -1 when absent.
    TokenId id_of(std::string_view token) const;
    std::span<const std::string> tokens() const { return tokens_; }

    TokenSequence encode(std::string_view text) const;
    std::string decode(std::span<const TokenId> ids) const;

    friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

private:
    explicit Vocabulary(std::vector<std::string> tokens);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
    // Word tokens sorted by decreasing length for longest-match.
    std::vector<std::pair<std::string, TokenId>> words_by_length_;
    TokenId char_ids_[256];
};

} // namespace nncfl::tok
