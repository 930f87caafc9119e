#include "rotar/ngram.hpp"

#include <algorithm>
#include <cctype>
#include <iterator>
#include <vector>

#include "rotar/error.hpp"
#include "rotar/text.hpp"

namespace rotar {

std::vector<std::string> ngram_list(std::string_view text, std::size_t n, NgramUnit unit) {
  if (n == 0) throw ValueError("ngram order must be >= 1");
  std::vector<std::string> grams;
  if (unit == NgramUnit::character) {
    std::string lower(text);
    for (char& c : lower) {
      const auto u = static_cast<unsigned char>(c);
      if (u < 0x80) c = static_cast<char>(std::tolower(u));
    }
    if (lower.empty()) return grams;
    if (lower.size() < n) {
      grams.push_back(lower);
      return grams;
    }
    for (std::size_t i = 0; i + n <= lower.size(); ++i) grams.push_back(lower.substr(i, n));
  } else {
    std::vector<std::string> tokens = tokenize(text);
    if (tokens.empty()) return grams;
    if (tokens.size() < n) {
      grams.push_back(join_tokens(tokens));
      return grams;
    }
    if (n == 1) {
      grams = std::move(tokens);
    } else {
      for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        std::string g = tokens[i];
        for (std::size_t k = 1; k < n; ++k) g += " " + tokens[i + k];
        grams.push_back(std::move(g));
      }
    }
  }
  std::sort(grams.begin(), grams.end());
  grams.erase(std::unique(grams.begin(), grams.end()), grams.end());
  return grams;
}

std::set<std::string> ngram_set(std::string_view text, std::size_t n, NgramUnit unit) {
  auto list = ngram_list(text, n, unit);
  return {std::make_move_iterator(list.begin()), std::make_move_iterator(list.end())};
}

namespace {

template <typename A, typename B>
double sorted_dice(const A& a, const B& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t common = 0;
  auto ia = a.begin();
  auto ib = b.begin();
  while (ia != a.end() && ib != b.end()) {
    if (std::string_view(*ia) < std::string_view(*ib)) {
      ++ia;
    } else if (std::string_view(*ib) < std::string_view(*ia)) {
      ++ib;
    } else {
      ++common;
      ++ia;
      ++ib;
    }
  }
  return 2.0 * static_cast<double>(common) / static_cast<double>(a.size() + b.size());
}

}  // namespace

double dice(const std::set<std::string>& a, const std::set<std::string>& b) { return sorted_dice(a, b); }
double dice(const std::vector<std::string>& a, const std::vector<std::string>& b) { return sorted_dice(a, b); }

namespace {

void lower_ascii(std::string_view text, std::string& out) {
  out.assign(text);
  for (char& c : out) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80) c = static_cast<char>(std::tolower(u));
  }
}

// Views into an already lowercased text; same grams as ngram_list except for
// word grams longer than one token, which the caller handles.
void gram_views(std::string_view lower, std::size_t n, NgramUnit unit, std::vector<std::string_view>& out) {
  out.clear();
  if (unit == NgramUnit::character) {
    if (lower.empty()) return;
    if (lower.size() < n) {
      out.push_back(lower);
    } else {
      for (std::size_t i = 0; i + n <= lower.size(); ++i) out.push_back(lower.substr(i, n));
    }
  } else {
    std::size_t start = 0;
    for (std::size_t i = 0; i <= lower.size(); ++i) {
      const auto ch = i < lower.size() ? static_cast<unsigned char>(lower[i]) : ' ';
      const bool space = ch < 0x80 && std::isspace(ch);
      const bool punct = ch < 0x80 && std::ispunct(ch);
      if (space || punct) {
        if (i > start) out.push_back(lower.substr(start, i - start));
        if (punct) out.push_back(lower.substr(i, 1));
        start = i + 1;
      }
    }
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
}

}  // namespace

std::vector<double> ngram_similarities(std::string_view query, std::span<const std::string> texts,
                                       std::size_t n, NgramUnit unit) {
  const std::vector<std::string> q = ngram_list(query, n, unit);
  std::vector<double> out(texts.size(), 0.0);
  if (unit == NgramUnit::word && n > 1) {
    for (std::size_t i = 0; i < texts.size(); ++i) out[i] = dice(ngram_list(texts[i], n, unit), q);
    return out;
  }
  std::string lower;
  std::vector<std::string_view> grams;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    lower_ascii(texts[i], lower);
    gram_views(lower, n, unit, grams);
    out[i] = sorted_dice(grams, q);
  }
  return out;
}

double ngram_similarity(std::string_view a, std::string_view b, std::size_t n, NgramUnit unit) {
  return dice(ngram_list(a, n, unit), ngram_list(b, n, unit));
}

}  // namespace rotar
