#include "rotar/table.hpp"

#include "rotar/error.hpp"

namespace rotar {

void Table::validate() const {
  if (schema.empty()) throw ValueError("table '" + table_id + "' has an empty schema");
  if (rows.empty()) throw ValueError("table '" + table_id + "' has no rows");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != schema.size()) {
      throw ValueError("table '" + table_id + "' row " + std::to_string(i) + " has " +
                       std::to_string(rows[i].size()) + " cells, schema has " +
                       std::to_string(schema.size()));
    }
  }
}

int attribute_bucket(const std::string& attribute, std::size_t buckets) {
  if (buckets == 0) throw ConfigError("attribute bucket count must be positive");
  return static_cast<int>(stable_hash(attribute) % buckets);
}

std::vector<std::string> serialize_cell(const std::string& attribute, const std::string& value) {
  std::vector<std::string> out{std::string(special::kColToken)};
  for (auto& t : tokenize(attribute)) out.push_back(std::move(t));
  out.emplace_back(special::kValToken);
  for (auto& t : tokenize(value)) out.push_back(std::move(t));
  return out;
}

namespace {

// Appends tokens to `row` unless `max_len` is reached. Returns false once full.
bool push_token(TokenizedRow& row, std::size_t id, TokenAnnotation ann, std::size_t max_len) {
  if (row.token_ids.size() >= max_len) {
    row.truncated = true;
    return false;
  }
  ann.absolute_index = row.token_ids.size();
  row.token_ids.push_back(id);
  row.annotations.push_back(ann);
  return true;
}

void append_cells(TokenizedRow& out, const std::vector<std::string>& schema,
                  const std::vector<std::string>& row, const Vocabulary& vocab, std::size_t max_len,
                  std::size_t buckets) {
  for (std::size_t j = 0; j < schema.size(); ++j) {
    const int attr = attribute_bucket(schema[j], buckets);
    const auto tokens = serialize_cell(schema[j], row[j]);
    for (std::size_t k = 0; k < tokens.size(); ++k) {
      std::size_t id;
      if (k == 0) {
        id = special::kCol;
      } else if (tokens[k] == special::kValToken) {
        id = special::kVal;
      } else {
        id = vocab.id(tokens[k]);
      }
      if (!push_token(out, id, {static_cast<int>(j), k, attr, 0}, max_len)) return;
    }
  }
}

}  // namespace

TokenizedRow serialize_row(const std::vector<std::string>& schema,
                           const std::vector<std::string>& row, const Vocabulary& vocab,
                           std::size_t max_len, std::size_t attribute_buckets) {
  if (row.size() != schema.size()) {
    throw ValueError("serialize_row: row has " + std::to_string(row.size()) +
                     " cells but schema has " + std::to_string(schema.size()));
  }
  if (max_len < 2) throw ConfigError("serialize_row: max_len must be >= 2");
  TokenizedRow out;
  push_token(out, special::kCls, {}, max_len);
  append_cells(out, schema, row, vocab, max_len, attribute_buckets);
  return out;
}

TokenizedRow serialize_table_with_query(const Table& table, const std::string& query,
                                        const Vocabulary& vocab, std::size_t max_len,
                                        std::size_t attribute_buckets) {
  if (max_len < 2) throw ConfigError("serialize_table_with_query: max_len must be >= 2");
  TokenizedRow out = serialize_query(query, vocab, max_len);
  for (const auto& row : table.rows) {
    if (out.truncated) break;
    if (row.size() != table.schema.size()) {
      throw ValueError("serialize_table_with_query: ragged row in table '" + table.table_id + "'");
    }
    append_cells(out, table.schema, row, vocab, max_len, attribute_buckets);
  }
  return out;
}

TokenizedRow serialize_query(const std::string& query, const Vocabulary& vocab,
                             std::size_t max_len) {
  if (max_len < 2) throw ConfigError("serialize_query: max_len must be >= 2");
  TokenizedRow out;
  push_token(out, special::kCls, {}, max_len);
  const auto tokens = tokenize(query);
  for (std::size_t q = 0; q < tokens.size(); ++q) {
    if (!push_token(out, vocab.id(tokens[q]), {kNoCell, q + 1, kNoCell, 0}, max_len)) break;
  }
  return out;
}

std::string row_text(const std::vector<std::string>& schema, const std::vector<std::string>& row) {
  std::vector<std::string> tokens;
  for (std::size_t j = 0; j < schema.size() && j < row.size(); ++j) {
    for (auto& t : tokenize(schema[j])) tokens.push_back(std::move(t));
    for (auto& t : tokenize(row[j])) tokens.push_back(std::move(t));
  }
  return join_tokens(tokens);
}

Vocabulary build_vocab(const std::vector<Table>& tables, const std::vector<Statement>& statements,
                       std::size_t min_count) {
  std::vector<std::string> texts;
  for (const Table& t : tables) {
    for (const auto& a : t.schema) texts.push_back(a);
    for (const auto& row : t.rows)
      for (const auto& cell : row) texts.push_back(cell);
  }
  for (const Statement& s : statements) texts.push_back(s.text);
  return build_vocab_from_texts(texts, min_count);
}

}  // namespace rotar
