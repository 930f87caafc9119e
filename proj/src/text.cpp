#include "rotar/text.hpp"

#include <algorithm>
#include <cctype>
#include <map>

#include "rotar/error.hpp"

namespace rotar {

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto ch = static_cast<unsigned char>(raw);
    if (ch < 0x80 && std::isspace(ch)) {
      flush();
    } else if (ch < 0x80 && std::ispunct(ch)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      current.push_back(ch < 0x80 ? static_cast<char>(std::tolower(ch)) : raw);
    }
  }
  flush();
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : text) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

Vocabulary::Vocabulary()
    : Vocabulary(std::vector<std::string>{
          std::string(special::kPadToken), std::string(special::kUnkToken),
          std::string(special::kClsToken), std::string(special::kColToken),
          std::string(special::kValToken)}) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  const std::string_view reserved[] = {special::kPadToken, special::kUnkToken, special::kClsToken,
                                       special::kColToken, special::kValToken};
  if (tokens_.size() < special::kCount) {
    throw FormatError("vocabulary is missing reserved tokens");
  }
  for (std::size_t i = 0; i < special::kCount; ++i) {
    if (tokens_[i] != reserved[i]) {
      throw FormatError("vocabulary id " + std::to_string(i) + " must be " +
                        std::string(reserved[i]) + ", found '" + tokens_[i] + "'");
    }
  }
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], i).second) {
      throw FormatError("duplicate vocabulary token '" + tokens_[i] + "'");
    }
  }
}

std::size_t Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? special::kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.contains(std::string(token));
}

Vocabulary build_vocab_from_texts(const std::vector<std::string>& texts, std::size_t min_count) {
  if (min_count < 1) throw ConfigError("build_vocab: min_count must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const std::string& text : texts) {
    for (std::string& tok : tokenize(text)) ++counts[std::move(tok)];
  }
  std::vector<std::pair<std::string, std::size_t>> kept;
  for (auto& [tok, n] : counts) {
    if (n >= min_count) kept.emplace_back(tok, n);
  }
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocabulary base;
  std::vector<std::string> tokens = base.tokens();
  // Reserved spellings tokenize into brackets + word, so they never collide.
  for (auto& [tok, n] : kept) tokens.push_back(tok);
  return Vocabulary(std::move(tokens));
}

}  // namespace rotar
