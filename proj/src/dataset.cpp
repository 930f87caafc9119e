#include "rotar/dataset.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

#include "rotar/error.hpp"

namespace rotar {

namespace fs = std::filesystem;

const Table& Dataset::table(const std::string& table_id) const {
  for (const Table& t : tables) {
    if (t.table_id == table_id) return t;
  }
  throw NotFoundError("unknown table_id '" + table_id + "'");
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool field_started = false;
  std::size_t record_no = 1;
  auto end_field = [&] {
    record.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    records.push_back(std::move(record));
    record.clear();
    ++record_no;
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty()) {
          throw ParseError("csv record " + std::to_string(record_no) +
                           ": quote inside unquoted field");
        }
        in_quotes = true;
        field_started = true;
        break;
      case ',':
        end_field();
        field_started = true;
        break;
      case '\r':
        if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
        end_record();
        break;
      case '\n':
        end_record();
        break;
      default:
        field.push_back(c);
        field_started = true;
    }
  }
  if (in_quotes) {
    throw ParseError("csv record " + std::to_string(record_no) + ": unterminated quoted field");
  }
  if (field_started || !field.empty() || !record.empty()) end_record();
  return records;
}

std::string format_csv(const std::vector<std::vector<std::string>>& records) {
  std::string out;
  for (const auto& rec : records) {
    for (std::size_t i = 0; i < rec.size(); ++i) {
      if (i) out.push_back(',');
      const std::string& f = rec[i];
      if (f.find_first_of(",\"\r\n") == std::string::npos) {
        out += f;
        continue;
      }
      out.push_back('"');
      for (char c : f) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
      }
      out.push_back('"');
    }
    out.push_back('\n');
  }
  return out;
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << content;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace

Table load_table_csv(const fs::path& path) {
  auto records = parse_csv(read_file(path));
  if (records.empty()) throw ParseError(path.string() + ": empty csv (no schema record)");
  Table t;
  t.table_id = path.stem().string();
  t.schema = std::move(records.front());
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].size() != t.schema.size()) {
      throw ParseError(path.string() + ": row " + std::to_string(r + 1) + " has " +
                       std::to_string(records[r].size()) + " fields, expected " +
                       std::to_string(t.schema.size()));
    }
    t.rows.push_back(std::move(records[r]));
  }
  t.validate();
  return t;
}

void save_table_csv(const Table& table, const fs::path& path) {
  std::vector<std::vector<std::string>> records;
  records.push_back(table.schema);
  for (const auto& row : table.rows) records.push_back(row);
  write_file(path, format_csv(records));
}

std::vector<Table> load_tables(const fs::path& path) {
  if (!fs::is_directory(path)) return {load_table_csv(path)};
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Table> tables;
  for (const auto& f : files) tables.push_back(load_table_csv(f));
  return tables;
}

std::vector<Statement> load_statements(const fs::path& path, const std::vector<Table>* tables) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::map<std::string, bool> known;
  if (tables) {
    for (const Table& t : *tables) known[t.table_id] = true;
  }
  std::vector<Statement> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    Statement s;
    try {
      const auto j = nlohmann::json::parse(line);
      s.statement_id = j.at("statement_id").get<std::string>();
      s.table_id = j.at("table_id").get<std::string>();
      s.text = j.at("text").get<std::string>();
      s.label = j.at("label").get<bool>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": line " + std::to_string(line_no) + ": " + e.what());
    }
    if (tables && !known.contains(s.table_id)) {
      throw NotFoundError(path.string() + ": line " + std::to_string(line_no) +
                          ": unknown table_id '" + s.table_id + "'");
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_statements(const std::vector<Statement>& statements, const fs::path& path) {
  std::string content;
  for (const Statement& s : statements) {
    nlohmann::json j = {{"statement_id", s.statement_id},
                        {"table_id", s.table_id},
                        {"text", s.text},
                        {"label", s.label}};
    content += j.dump() + "\n";
  }
  write_file(path, content);
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  d.tables = load_tables(dir / "tables");
  d.statements = load_statements(dir / "statements.jsonl", &d.tables);
  if (fs::exists(dir / "manifest.json")) {
    try {
      d.manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError((dir / "manifest.json").string() + ": " + e.what());
    }
  }
  return d;
}

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir / "tables");
  for (const Table& t : dataset.tables) save_table_csv(t, dir / "tables" / (t.table_id + ".csv"));
  save_statements(dataset.statements, dir / "statements.jsonl");
  write_file(dir / "manifest.json", dataset.manifest.dump(2) + "\n");
}

std::vector<AttributePool> SyntheticConfig::default_attribute_pools() {
  return {
      {"city",
       {"amsterdam", "berlin", "cairo", "dublin", "lisbon", "madrid", "oslo", "paris",
        "prague", "rome", "vienna", "warsaw", "athens", "bern", "sofia", "riga", "tallinn",
        "vilnius", "zagreb", "budapest", "helsinki", "copenhagen", "stockholm", "brussels",
        "lima", "quito", "bogota", "santiago", "havana", "manila"}},
      {"color",
       {"red", "blue", "green", "yellow", "purple", "orange", "black", "white", "gray", "pink",
        "brown", "cyan", "magenta", "teal", "navy", "maroon", "olive", "lime", "indigo",
        "violet", "gold", "silver", "beige", "coral", "crimson", "ivory", "khaki", "lavender",
        "mint", "amber"}},
      {"animal",
       {"cat", "dog", "horse", "cow", "sheep", "goat", "pig", "lion", "tiger", "bear", "wolf",
        "fox", "deer", "rabbit", "otter", "beaver", "badger", "eagle", "hawk", "owl", "falcon",
        "shark", "whale", "dolphin", "seal", "zebra", "giraffe", "camel", "llama", "panda"}},
      {"fruit",
       {"apple", "banana", "cherry", "grape", "lemon", "mango", "melon", "peach", "pear", "plum",
        "kiwi", "papaya", "guava", "fig", "apricot", "coconut", "lychee", "nectarine", "pomelo",
        "quince", "raspberry", "strawberry", "blueberry", "blackberry", "cranberry", "tangerine",
        "persimmon", "pineapple", "passionfruit", "durian"}},
      {"sport",
       {"soccer", "tennis", "hockey", "cricket", "rugby", "baseball", "basketball", "volleyball",
        "golf", "boxing", "cycling", "rowing", "sailing", "skiing", "surfing", "swimming",
        "fencing", "judo", "karate", "archery", "badminton", "squash", "polo", "curling",
        "bowling", "handball", "lacrosse", "softball", "wrestling", "triathlon"}},
      {"instrument",
       {"piano", "guitar", "violin", "cello", "flute", "trumpet", "drums", "harp", "oboe",
        "clarinet", "saxophone", "trombone", "tuba", "banjo", "mandolin", "ukulele", "accordion",
        "harmonica", "bassoon", "piccolo", "viola", "sitar", "lute", "organ", "xylophone",
        "marimba", "bagpipes", "dulcimer", "zither", "tambourine"}},
      {"element",
       {"hydrogen", "helium", "lithium", "carbon", "nitrogen", "oxygen", "neon", "sodium",
        "magnesium", "aluminum", "silicon", "sulfur", "chlorine", "argon", "potassium", "calcium",
        "iron", "copper", "zinc", "nickel", "cobalt", "tin", "lead", "mercury", "platinum",
        "uranium", "radon", "xenon", "krypton", "titanium"}},
      {"language",
       {"english", "french", "german", "spanish", "italian", "dutch", "polish", "russian",
        "greek", "turkish", "arabic", "hebrew", "hindi", "bengali", "urdu", "persian", "swahili",
        "japanese", "korean", "chinese", "thai", "vietnamese", "malay", "finnish", "swedish",
        "norwegian", "danish", "czech", "hungarian", "romanian"}},
      {"job title",
       {"baker", "teacher", "doctor", "nurse", "pilot", "farmer", "lawyer", "plumber", "chef",
        "artist", "writer", "singer", "dancer", "actor", "engineer", "architect", "dentist",
        "pharmacist", "carpenter", "electrician", "mechanic", "tailor", "butcher", "florist",
        "librarian", "banker", "judge", "soldier", "sailor", "miner"}},
      {"home country",
       {"peru", "chile", "brazil", "canada", "mexico", "kenya", "egypt", "ghana", "nigeria",
        "morocco", "india", "nepal", "japan", "korea", "vietnam", "norway", "sweden", "finland",
        "ireland", "iceland", "portugal", "spain", "italy", "greece", "turkey", "poland",
        "austria", "belgium", "denmark", "estonia"}},
  };
}

nlohmann::json SyntheticConfig::to_json() const {
  return {{"num_tables", num_tables},
          {"rows_range", {rows_range.first, rows_range.second}},
          {"cols_range", {cols_range.first, cols_range.second}},
          {"statements_per_table", statements_per_table},
          {"seed", seed},
          {"attribute_pools", vocab_pools.size()}};
}

namespace {

// Portable modulo draw; std distributions are implementation-defined.
std::size_t draw(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

std::size_t draw_in(std::mt19937_64& rng, std::pair<std::size_t, std::size_t> range) {
  return range.first + draw(rng, range.second - range.first + 1);
}

std::string statement_text(const std::string& attr, const std::string& key_attr,
                           const std::string& key_val, const std::string& val) {
  return "the " + attr + " of the row where " + key_attr + " is " + key_val + " is " + val;
}

}  // namespace

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  const auto& pools = cfg.vocab_pools;
  if (cfg.num_tables == 0) throw ConfigError("synthetic: num_tables must be >= 1");
  if (cfg.rows_range.first < 1 || cfg.rows_range.first > cfg.rows_range.second) {
    throw ConfigError("synthetic: invalid rows range");
  }
  if (cfg.cols_range.first < 1 || cfg.cols_range.first > cfg.cols_range.second) {
    throw ConfigError("synthetic: invalid cols range");
  }
  if (cfg.cols_range.second > pools.size()) {
    throw ConfigError("synthetic: cols range max " + std::to_string(cfg.cols_range.second) +
                      " exceeds attribute pool of " + std::to_string(pools.size()));
  }
  if (cfg.statements_per_table > 0 && cfg.cols_range.first < 2) {
    throw ConfigError("synthetic: statements need at least 2 columns per table");
  }
  for (const auto& p : pools) {
    if (p.values.size() < 2) {
      throw ConfigError("synthetic: attribute pool '" + p.attribute + "' needs >= 2 values");
    }
  }

  std::mt19937_64 rng(cfg.seed);
  Dataset out;
  std::size_t global_statement = 0;
  constexpr int kMaxAttempts = 1000;

  for (std::size_t t = 0; t < cfg.num_tables; ++t) {
    char id_buf[32];
    std::snprintf(id_buf, sizeof(id_buf), "t%04zu", t);
    Table table;
    std::vector<std::size_t> attr_of_col;
    // Resample until some column holds a value that appears exactly once.
    for (int attempt = 0;; ++attempt) {
      if (attempt == kMaxAttempts) {
        throw ConfigError("synthetic: cannot build a table with an identifying value; "
                          "enlarge value pools or shrink rows range");
      }
      table = Table{id_buf, {}, {}};
      const std::size_t cols = draw_in(rng, cfg.cols_range);
      const std::size_t rows = draw_in(rng, cfg.rows_range);
      std::vector<std::size_t> order(pools.size());
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = 0; i < cols; ++i) std::swap(order[i], order[i + draw(rng, order.size() - i)]);
      attr_of_col.assign(order.begin(), order.begin() + static_cast<long>(cols));
      for (std::size_t c : attr_of_col) table.schema.push_back(pools[c].attribute);
      for (std::size_t r = 0; r < rows; ++r) {
        std::vector<std::string> row;
        for (std::size_t c : attr_of_col) row.push_back(pools[c].values[draw(rng, pools[c].values.size())]);
        table.rows.push_back(std::move(row));
      }
      if (cfg.statements_per_table == 0) break;
      bool has_key = false;
      for (std::size_t c = 0; c < cols && !has_key; ++c) {
        std::map<std::string, int> counts;
        for (const auto& row : table.rows) ++counts[row[c]];
        for (const auto& [v, n] : counts) has_key |= n == 1;
      }
      if (has_key) break;
    }

    const std::size_t cols = table.num_cols();
    // (column, row) pairs whose value identifies its row.
    std::vector<std::pair<std::size_t, std::size_t>> keys;
    for (std::size_t c = 0; c < cols; ++c) {
      std::map<std::string, int> counts;
      for (const auto& row : table.rows) ++counts[row[c]];
      for (std::size_t r = 0; r < table.num_rows(); ++r) {
        if (counts[table.rows[r][c]] == 1) keys.emplace_back(c, r);
      }
    }

    for (std::size_t k = 0; k < cfg.statements_per_table; ++k, ++global_statement) {
      const bool label = global_statement % 2 == 0;
      const auto [key_col, row] = keys[draw(rng, keys.size())];
      std::size_t col = draw(rng, cols - 1);
      if (col >= key_col) ++col;
      const std::string& truth = table.rows[row][col];
      std::string value = truth;
      if (!label) {
        // Prefer a value from another row of the same column.
        std::vector<std::string> others;
        for (const auto& r : table.rows) {
          if (r[col] != truth && std::find(others.begin(), others.end(), r[col]) == others.end()) {
            others.push_back(r[col]);
          }
        }
        if (others.empty()) {
          for (const auto& v : pools[attr_of_col[col]].values)
            if (v != truth) others.push_back(v);
        }
        value = others[draw(rng, others.size())];
      }
      Statement s;
      s.statement_id = table.table_id + "-s" + std::to_string(k);
      s.table_id = table.table_id;
      s.text = statement_text(table.schema[col], table.schema[key_col], table.rows[row][key_col], value);
      s.label = label;
      out.statements.push_back(std::move(s));
    }
    out.tables.push_back(std::move(table));
  }

  out.manifest = {{"seed", cfg.seed},
                  {"generator", cfg.to_json()},
                  {"counts", {{"tables", out.tables.size()}, {"statements", out.statements.size()}}}};
  return out;
}

}  // namespace rotar
