#pragma once

#include <cstddef>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace rotar {

enum class NgramUnit { character, word };

// Deduplicated contiguous n-grams. Word grams run over tokenize(text) and are
// space-joined; character grams run over the lowercased raw text. A text
// shorter than n yields one gram holding the whole text, or nothing if empty.
std::set<std::string> ngram_set(std::string_view text, std::size_t n, NgramUnit unit);
// Same grams as ngram_set, as a sorted vector without duplicates.
std::vector<std::string> ngram_list(std::string_view text, std::size_t n, NgramUnit unit);

// Dice coefficient 2|A ∩ B| / (|A| + |B|) over gram sets; 0 when both are empty.
double ngram_similarity(std::string_view a, std::string_view b, std::size_t n, NgramUnit unit);
double dice(const std::set<std::string>& a, const std::set<std::string>& b);
double dice(const std::vector<std::string>& a, const std::vector<std::string>& b);

// ngram_similarity(query, texts[i]) for every i, sharing the query's grams.
std::vector<double> ngram_similarities(std::string_view query, std::span<const std::string> texts,
                                       std::size_t n, NgramUnit unit);

}  // namespace rotar
