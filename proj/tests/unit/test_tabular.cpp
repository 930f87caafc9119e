#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "rotar/dataset.hpp"
#include "rotar/table.hpp"
#include "rotar/text.hpp"

using namespace rotar;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("rotar_unit_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

std::vector<std::string> tokens_of(const TokenizedRow& row, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (std::size_t id : row.token_ids) out.push_back(vocab.token(id));
  return out;
}

}  // namespace

TEST_CASE("tokenize examples") {
  CHECK(tokenize("Alice, 42") == std::vector<std::string>{"alice", ",", "42"});
  CHECK(tokenize("").empty());
  CHECK(tokenize("  New-York  ") == std::vector<std::string>{"new", "-", "york"});
}

TEST_CASE("tokenize is idempotent on its own output") {
  std::mt19937_64 rng(4);
  const std::string alphabet = "abcXYZ019 ,.;-!'\"\t";
  for (int i = 0; i < 300; ++i) {
    std::string s;
    for (std::size_t k = rng() % 30; k > 0; --k) s.push_back(alphabet[rng() % alphabet.size()]);
    const auto t = tokenize(s);
    CHECK(tokenize(join_tokens(t)) == t);
    CHECK(t == oracle::words(s));
  }
}

TEST_CASE("stable_hash is FNV-1a") {
  CHECK(stable_hash("") == 0xcbf29ce484222325ULL);
  CHECK(stable_hash("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("vocabulary reserved ids and build order") {
  Vocabulary v;
  CHECK(v.size() == 5);
  CHECK(v.id("[PAD]") == special::kPad);
  CHECK(v.id("[VAL]") == special::kVal);
  CHECK(v.id("never-seen") == special::kUnk);

  auto two = build_vocab_from_texts({"a a b"}, 2);
  CHECK(two.size() == 6);
  CHECK(two.token(5) == "a");
  auto one = build_vocab_from_texts({"a a b"}, 1);
  CHECK(one.size() == 7);
  CHECK(one.token(5) == "a");
  CHECK(one.token(6) == "b");
  CHECK(build_vocab_from_texts({}, 1).size() == 5);
  CHECK_THROWS(Vocabulary({"x", "[UNK]", "[CLS]", "[COL]", "[VAL]"}));
}

TEST_CASE("vocabulary is independent of corpus order") {
  SyntheticConfig cfg;
  cfg.num_tables = 6;
  auto data = generate_synthetic(cfg);
  auto a = build_vocab(data.tables, data.statements, 1);
  std::mt19937_64 rng(3);
  std::shuffle(data.tables.begin(), data.tables.end(), rng);
  std::shuffle(data.statements.begin(), data.statements.end(), rng);
  CHECK(build_vocab(data.tables, data.statements, 1) == a);
}

TEST_CASE("serialize_cell examples") {
  CHECK(serialize_cell("age", "42") == std::vector<std::string>{"[COL]", "age", "[VAL]", "42"});
  CHECK(serialize_cell("", "") == std::vector<std::string>{"[COL]", "[VAL]"});
  CHECK(serialize_cell("full name", "Alice Smith") ==
        std::vector<std::string>{"[COL]", "full", "name", "[VAL]", "alice", "smith"});
}

TEST_CASE("serialize_row layout and annotations") {
  const auto vocab = build_vocab_from_texts({"name alice age 42"}, 1);
  const std::vector<std::string> schema{"name", "age"};
  auto row = serialize_row(schema, {"alice", "42"}, vocab, 128);
  CHECK(tokens_of(row, vocab) ==
        std::vector<std::string>{"[CLS]", "[COL]", "name", "[VAL]", "alice", "[COL]", "age", "[VAL]", "42"});
  const int cells[] = {kNoCell, 0, 0, 0, 0, 1, 1, 1, 1};
  const std::size_t intra[] = {0, 0, 1, 2, 3, 0, 1, 2, 3};
  REQUIRE(row.annotations.size() == 9);
  for (std::size_t i = 0; i < 9; ++i) {
    CHECK(row.annotations[i].cell_index == cells[i]);
    CHECK(row.annotations[i].intra_cell_index == intra[i]);
    CHECK(row.annotations[i].absolute_index == i);
    if (cells[i] >= 0) {
      CHECK(row.annotations[i].attribute_id ==
            attribute_bucket(schema[static_cast<std::size_t>(cells[i])], kDefaultAttributeBuckets));
    } else {
      CHECK(row.annotations[i].attribute_id == kNoCell);
    }
  }
  CHECK_FALSE(row.truncated);

  auto empty = serialize_row({"x"}, {""}, vocab, 128);
  CHECK(tokens_of(empty, vocab) == std::vector<std::string>{"[CLS]", "[COL]", "[UNK]", "[VAL]"});

  auto cut = serialize_row(schema, {"alice", "42"}, vocab, 4);
  CHECK(cut.size() == 4);
  CHECK(cut.truncated);
  CHECK(tokens_of(cut, vocab) == std::vector<std::string>{"[CLS]", "[COL]", "name", "[VAL]"});

  CHECK_THROWS_AS(serialize_row(schema, {"alice"}, vocab, 128), ValueError);
  CHECK(serialize_row(schema, {"alice", "42"}, vocab, 128) == row);
}

TEST_CASE("intra index resets exactly at [COL] across random rows") {
  SyntheticConfig cfg;
  cfg.num_tables = 5;
  const auto data = generate_synthetic(cfg);
  const auto vocab = build_vocab(data.tables, data.statements, 1);
  for (const auto& t : data.tables) {
    for (const auto& r : t.rows) {
      auto row = serialize_row(t.schema, r, vocab, 128);
      for (std::size_t i = 1; i < row.size(); ++i) {
        const auto& a = row.annotations[i];
        CHECK((a.intra_cell_index == 0) == (row.token_ids[i] == special::kCol));
        CHECK(a.absolute_index > row.annotations[i - 1].absolute_index);
        CHECK(a.attribute_id == attribute_bucket(t.schema[static_cast<std::size_t>(a.cell_index)], kDefaultAttributeBuckets));
      }
    }
  }
}

TEST_CASE("serialize_table_with_query counts and truncation") {
  const auto vocab = build_vocab_from_texts({"name alice bob is who"}, 1);
  Table one{"t", {"name"}, {{"alice"}}};
  auto seq = serialize_table_with_query(one, "who is alice", vocab, 512);
  const auto row = serialize_row(one.schema, one.rows[0], vocab, 512);
  CHECK_FALSE(seq.truncated);
  CHECK(seq.size() == 1 + 3 + (row.size() - 1));

  Table big{"b", {"name"}, {}};
  for (int i = 0; i < 100; ++i) big.rows.push_back({i % 2 ? "alice" : "bob"});
  auto cut = serialize_table_with_query(big, "who is alice", vocab, 64);
  CHECK(cut.truncated);
  CHECK(cut.size() == 64);

  std::size_t expected = 1 + 3;
  Table three{"3", {"name", "name"}, {{"alice", "bob"}, {"bob", "alice bob"}, {"bob", ""}}};
  for (const auto& r : three.rows) expected += serialize_row(three.schema, r, vocab, 512).size() - 1;
  CHECK(serialize_table_with_query(three, "who is alice", vocab, 512).size() == expected);
}

TEST_CASE("table validation") {
  CHECK_THROWS_AS((Table{"t", {}, {{"a"}}}.validate()), ValueError);
  CHECK_THROWS_AS((Table{"t", {"a"}, {}}.validate()), ValueError);
  CHECK_THROWS_AS((Table{"t", {"a", "b"}, {{"x"}}}.validate()), ValueError);
  CHECK_NOTHROW((Table{"t", {"a"}, {{"x"}}}.validate()));
}

TEST_CASE("csv parsing") {
  auto recs = parse_csv("a,b\n1,2\n");
  CHECK(recs == std::vector<std::vector<std::string>>{{"a", "b"}, {"1", "2"}});
  auto quoted = parse_csv("\"x, y\",\"he said \"\"hi\"\"\"\r\nz,\"multi\nline\"\n");
  CHECK(quoted[0][0] == "x, y");
  CHECK(quoted[0][1] == "he said \"hi\"");
  CHECK(quoted[1][1] == "multi\nline");
  CHECK_THROWS_AS(parse_csv("a,\"open\n"), ParseError);
  CHECK(parse_csv(format_csv(quoted)) == quoted);
}

TEST_CASE("table and statement loading") {
  const auto dir = scratch_dir("load");
  write(dir / "t1.csv", "a,b\n1,2");
  auto t = load_table_csv(dir / "t1.csv");
  CHECK(t.table_id == "t1");
  CHECK(t.schema == std::vector<std::string>{"a", "b"});
  CHECK(t.rows == std::vector<std::vector<std::string>>{{"1", "2"}});

  write(dir / "bad.csv", "a,b\n1,2\n3\n");
  try {
    load_table_csv(dir / "bad.csv");
    FAIL("ragged csv accepted");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("row 3") != std::string::npos);
  }

  write(dir / "s.jsonl", "{\"statement_id\":\"s1\",\"table_id\":\"t1\",\"text\":\"x\",\"label\":true}\n");
  const std::vector<Table> tables{t};
  auto st = load_statements(dir / "s.jsonl", &tables);
  REQUIRE(st.size() == 1);
  CHECK(st[0] == Statement{"s1", "t1", "x", true});

  write(dir / "unknown.jsonl", "{\"statement_id\":\"s1\",\"table_id\":\"zz\",\"text\":\"x\",\"label\":true}\n");
  CHECK_THROWS_AS(load_statements(dir / "unknown.jsonl", &tables), NotFoundError);

  write(dir / "broken.jsonl", "{\"statement_id\":\"s1\",\"table_id\":\"t1\",\"text\":\"x\",\"label\":true}\n{oops\n");
  try {
    load_statements(dir / "broken.jsonl");
    FAIL("malformed json accepted");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 2") != std::string::npos);
  }
  CHECK_THROWS_AS(load_table_csv(dir / "missing.csv"), IoError);
  fs::remove_all(dir);
}

TEST_CASE("synthetic generator: determinism, balance, soundness") {
  SyntheticConfig cfg;
  cfg.num_tables = 40;
  const auto a = generate_synthetic(cfg);
  const auto b = generate_synthetic(cfg);
  CHECK(a.tables == b.tables);
  CHECK(a.statements == b.statements);

  std::size_t trues = 0;
  for (const auto& s : a.statements) {
    const auto verdict = oracle::scan_evaluate(a.table(s.table_id), s.text);
    REQUIRE(verdict.has_value());
    CHECK(*verdict == s.label);
    trues += s.label;
  }
  CHECK(a.statements.size() == 400);
  const auto falses = a.statements.size() - trues;
  CHECK((trues > falses ? trues - falses : falses - trues) <= a.statements.size() % 2);

  std::map<std::string, std::pair<int, int>> per_table;
  for (const auto& s : a.statements) (s.label ? per_table[s.table_id].first : per_table[s.table_id].second)++;
  for (const auto& [id, c] : per_table) CHECK(std::abs(c.first - c.second) <= 1);

  for (const auto& t : a.tables) {
    CHECK(t.num_rows() >= 8);
    CHECK(t.num_rows() <= 32);
    CHECK(t.num_cols() >= 3);
    CHECK(t.num_cols() <= 5);
  }

  SyntheticConfig other = cfg;
  other.seed = 18;
  CHECK_FALSE(generate_synthetic(other).statements == a.statements);

  SyntheticConfig bad = cfg;
  bad.cols_range = {3, 50};
  CHECK_THROWS_AS(generate_synthetic(bad), ConfigError);
}

TEST_CASE("dataset directory round trip") {
  SyntheticConfig cfg;
  cfg.num_tables = 7;
  const auto data = generate_synthetic(cfg);
  const auto dir = scratch_dir("roundtrip");
  save_dataset(data, dir);
  CHECK(fs::exists(dir / "manifest.json"));
  const auto back = load_dataset(dir);
  CHECK(back.tables == data.tables);
  CHECK(back.statements == data.statements);
  CHECK(back.manifest.at("seed") == 17);
  fs::remove_all(dir);
}
