#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rotar {

// Lowercases ASCII, splits on whitespace, and emits every ASCII punctuation
// character as its own token.
std::vector<std::string> tokenize(std::string_view text);

std::string join_tokens(const std::vector<std::string>& tokens);

// 64-bit FNV-1a. Stable across platforms and runs.
std::uint64_t stable_hash(std::string_view text);

namespace special {
inline constexpr std::size_t kPad = 0;
inline constexpr std::size_t kUnk = 1;
inline constexpr std::size_t kCls = 2;
inline constexpr std::size_t kCol = 3;
inline constexpr std::size_t kVal = 4;
inline constexpr std::size_t kCount = 5;
inline constexpr std::string_view kPadToken = "[PAD]";
inline constexpr std::string_view kUnkToken = "[UNK]";
inline constexpr std::string_view kClsToken = "[CLS]";
inline constexpr std::string_view kColToken = "[COL]";
inline constexpr std::string_view kValToken = "[VAL]";
}  // namespace special

class Vocabulary {
 public:
  // Reserved tokens only.
  Vocabulary();
  // `tokens` must start with the five reserved tokens in id order.
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  // [UNK] for tokens not in the vocabulary.
  std::size_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Builds a vocabulary from token streams: tokens with frequency >= min_count,
// ordered by (frequency desc, token asc), after the reserved tokens.
Vocabulary build_vocab_from_texts(const std::vector<std::string>& texts, std::size_t min_count);

}  // namespace rotar
