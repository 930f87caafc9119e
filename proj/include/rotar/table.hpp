#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "rotar/text.hpp"

namespace rotar {

struct Table {
  std::string table_id;
  std::vector<std::string> schema;
  std::vector<std::vector<std::string>> rows;

  std::size_t num_rows() const { return rows.size(); }
  std::size_t num_cols() const { return schema.size(); }

  // Throws ValueError unless N >= 1, L >= 1 and every row has L cells.
  void validate() const;

  bool operator==(const Table&) const = default;
};

struct Statement {
  std::string statement_id;
  std::string table_id;
  std::string text;
  bool label = false;

  bool operator==(const Statement&) const = default;
};

// Annotation value for tokens that belong to no cell ([CLS], query tokens).
inline constexpr int kNoCell = -1;
inline constexpr std::size_t kDefaultAttributeBuckets = 1024;

struct TokenAnnotation {
  int cell_index = kNoCell;
  std::size_t intra_cell_index = 0;
  // hash bucket of the cell's attribute name, kNoCell outside cells.
  int attribute_id = kNoCell;
  std::size_t absolute_index = 0;

  bool operator==(const TokenAnnotation&) const = default;
};

struct TokenizedRow {
  std::vector<std::size_t> token_ids;
  std::vector<TokenAnnotation> annotations;
  bool truncated = false;

  std::size_t size() const { return token_ids.size(); }
  bool operator==(const TokenizedRow&) const = default;
};

int attribute_bucket(const std::string& attribute, std::size_t buckets);

// [COL] attribute-tokens [VAL] value-tokens
std::vector<std::string> serialize_cell(const std::string& attribute, const std::string& value);

// [CLS] followed by every cell's serialization, mapped through `vocab` and
// cut at `max_len`.
TokenizedRow serialize_row(const std::vector<std::string>& schema,
                           const std::vector<std::string>& row, const Vocabulary& vocab,
                           std::size_t max_len,
                           std::size_t attribute_buckets = kDefaultAttributeBuckets);

// Whole-table input for the query-aware teacher: [CLS] query rows...
TokenizedRow serialize_table_with_query(const Table& table, const std::string& query,
                                        const Vocabulary& vocab, std::size_t max_len,
                                        std::size_t attribute_buckets = kDefaultAttributeBuckets);

// [CLS] query, with cell sentinels and intra index = position.
TokenizedRow serialize_query(const std::string& query, const Vocabulary& vocab,
                             std::size_t max_len);

// Plain attribute + value text of a row without marker tokens. This is what
// n-gram similarity sees.
std::string row_text(const std::vector<std::string>& schema, const std::vector<std::string>& row);

Vocabulary build_vocab(const std::vector<Table>& tables, const std::vector<Statement>& statements,
                       std::size_t min_count);

}  // namespace rotar
