#include "nncfl/tokenizer.hpp"

#include <algorithm>
#include <fstream>

namespace nncfl::tok {

namespace {

const std::vector<std::string> kSpecialNames = {"<pad>", "<bos>", "<eos>", "<unk>"};

// Byte length of the UTF-8 sequence starting with `lead` (1 for stray bytes).
std::size_t utf8_length(unsigned char lead) {
    if (lead >= 0xF0 && lead < 0xF8) {
        return 4;
    }
    if (lead >= 0xE0) {
        return lead < 0xF0 ? 3 : 1;
    }
    if (lead >= 0xC0) {
        return 2;
    }
    return 1;
}

} // namespace

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    std::fill(std::begin(char_ids_), std::end(char_ids_), kUnk);
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        const auto id = static_cast<TokenId>(i);
        if (!ids_.emplace(tokens_[i], id).second) {
            throw ArgumentError("vocabulary: duplicate token '" + tokens_[i] + "'");
        }
        if (i < kSpecialCount) {
            continue;
        }
        if (tokens_[i].size() == 1) {
            char_ids_[static_cast<unsigned char>(tokens_[i][0])] = id;
        }
        words_by_length_.emplace_back(tokens_[i], id);
    }
    std::stable_sort(words_by_length_.begin(), words_by_length_.end(),
                     [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
    // Single characters are handled by the byte table.
    std::erase_if(words_by_length_, [](const auto& w) { return w.first.size() == 1; });
}

Vocabulary Vocabulary::build(std::span<const std::string> words) {
    std::vector<std::string> tokens = kSpecialNames;
    for (const char c : kStructuralChars) {
        tokens.emplace_back(1, c);
    }
    for (const char c : kDigits) {
        tokens.emplace_back(1, c);
    }
    for (const auto& w : words) {
        if (w.empty()) {
            throw ArgumentError("vocabulary: empty word token");
        }
        if (w.find('\n') != std::string::npos) {
            throw ArgumentError("vocabulary: word token contains a newline");
        }
        tokens.push_back(w);
    }
    return Vocabulary(std::move(tokens));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open vocabulary file " + path.string());
    }
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        tokens.push_back(line);
    }
    if (tokens.size() < kSpecialCount ||
        !std::equal(kSpecialNames.begin(), kSpecialNames.end(), tokens.begin())) {
        throw FormatError("vocabulary file " + path.string() + " does not start with the special tokens");
    }
    return Vocabulary(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write vocabulary file " + path.string());
    }
    for (const auto& t : tokens_) {
        out << t << '\n';
    }
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw ArgumentError("token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(tokens_.size()));
    }
    return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id_of(std::string_view token) const {
    const auto it = ids_.find(std::string(token));
    return it == ids_.end() ? -1 : it->second;
}

TokenSequence Vocabulary::encode(std::string_view text) const {
    TokenSequence out;
    std::size_t i = 0;
    while (i < text.size()) {
        bool matched = false;
        for (const auto& [word, id] : words_by_length_) {
            if (text.compare(i, word.size(), word) == 0) {
                out.push_back(id);
                i += word.size();
                matched = true;
                break;
            }
        }
        if (matched) {
            continue;
        }
        const auto c = static_cast<unsigned char>(text[i]);
        const TokenId id = char_ids_[c];
        out.push_back(id);
        i += id == kUnk ? std::min(utf8_length(c), text.size() - i) : 1;
    }
    return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
    std::string out;
    for (const TokenId id : ids) {
        const std::string& t = token(id);
        if (id == kUnk) {
            out += kReplacementGlyph;
        } else if (static_cast<std::size_t>(id) >= kSpecialCount) {
            out += t;
        }
    }
    return out;
}

} // namespace nncfl::tok
