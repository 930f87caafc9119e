#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "rotar/table.hpp"
#include "json.hpp"

namespace rotar {

struct Dataset {
  std::vector<Table> tables;
  std::vector<Statement> statements;
  nlohmann::json manifest = nlohmann::json::object();

  // Index of the table with `table_id`; throws NotFoundError.
  const Table& table(const std::string& table_id) const;
};

// RFC 4180 parsing. Errors carry the 1-based record number.
std::vector<std::vector<std::string>> parse_csv(const std::string& text);
std::string format_csv(const std::vector<std::vector<std::string>>& records);

// One table per CSV file: first record is the schema, table_id = file stem.
Table load_table_csv(const std::filesystem::path& path);
void save_table_csv(const Table& table, const std::filesystem::path& path);

// A directory of *.csv files (sorted by name) or a single CSV file.
std::vector<Table> load_tables(const std::filesystem::path& path);

// JSON-lines {statement_id, table_id, text, label}. When `tables` is given,
// every table_id must resolve.
std::vector<Statement> load_statements(const std::filesystem::path& path,
                                       const std::vector<Table>* tables = nullptr);
void save_statements(const std::vector<Statement>& statements, const std::filesystem::path& path);

// Directory layout: tables/*.csv, statements.jsonl, manifest.json.
Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

struct AttributePool {
  std::string attribute;
  std::vector<std::string> values;
};

struct SyntheticConfig {
  std::size_t num_tables = 200;
  std::pair<std::size_t, std::size_t> rows_range{8, 32};
  std::pair<std::size_t, std::size_t> cols_range{3, 5};
  std::size_t statements_per_table = 10;
  std::uint64_t seed = 17;
  std::vector<AttributePool> vocab_pools = default_attribute_pools();

  static std::vector<AttributePool> default_attribute_pools();
  nlohmann::json to_json() const;
};

// Tables sampled from the attribute pools with statements of the form
//   "the <attr> of the row where <attr2> is <val2> is <val>"
// where <val2> identifies exactly one row. Labels alternate over the whole
// dataset. Deterministic in `seed`.
Dataset generate_synthetic(const SyntheticConfig& config);

}  // namespace rotar
