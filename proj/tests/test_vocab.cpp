#include <unordered_set>

#include <catch2/catch_amalgamated.hpp>

#include "dupkit/rng.hpp"
#include "dupkit/vocab.hpp"

using namespace dupkit;

namespace {

// Random marker-normalized vocabulary without control characters (those
// are json-map-only territory).
Vocabulary random_vocab(Rng& rng, std::size_t n) {
  std::vector<std::string> entries;
  entries.push_back("<eos>");
  std::unordered_set<std::string> seen{"<eos>"};
  const std::string alphabet = "abcdefgxyzABCDEFs.,'-0123456789";
  while (entries.size() < n) {
    std::string e;
    if (rng.uniform01() < 0.4) e += kMarker;
    auto len = 1 + rng.uniform_int(8);
    for (std::uint64_t i = 0; i < len; ++i)
      e.push_back(alphabet[rng.uniform_int(alphabet.size())]);
    if (rng.uniform01() < 0.1) e += kMarker;
    if (seen.insert(e).second) entries.push_back(std::move(e));
  }
  return Vocabulary(std::move(entries), 0, Marker::kMetasymbol);
}

}  // namespace

TEST_CASE("plain-lines load assigns file order and detects marker") {
  std::string text = "<eos>\na\n\xE2\x96\x81sa\n";
  auto v = load_vocab_string(text, VocabFormat::kPlainLines);
  REQUIRE(v.size() == 3);
  CHECK(v.eos_id() == 0);
  CHECK(v.id_of("a") == 1);
  CHECK(v.id_of(std::string(kMarker) + "sa") == 2);
  CHECK(v.source_marker() == Marker::kMetasymbol);
  CHECK(v.surface(1) == "a");
}

TEST_CASE("duplicate surfaces are rejected with the colliding ids") {
  std::string text = "<eos>\nfoo\nfoo\n";
  try {
    load_vocab_string(text, VocabFormat::kPlainLines);
    FAIL("expected duplicate-entry rejection");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("1") != std::string::npos);
    CHECK(msg.find("2") != std::string::npos);
  }
}

TEST_CASE("missing eos rejected unless the append flag is set") {
  std::string text = "a\nb\n";
  CHECK_THROWS(load_vocab_string(text, VocabFormat::kPlainLines));
  LoadVocabOptions opt;
  opt.add_eos_if_missing = true;
  auto v = load_vocab_string(text, VocabFormat::kPlainLines, opt);
  REQUIRE(v.size() == 3);
  CHECK(v.surface(v.eos_id()) == "<eos>");
}

TEST_CASE("json-map uses explicit ids and the eos key") {
  std::string text = R"({"b": 1, "a": 0, "<end>": 2, "eos": 2})";
  auto v = load_vocab_string(text, VocabFormat::kJsonMap);
  REQUIRE(v.size() == 3);
  CHECK(v.eos_id() == 2);
  CHECK(v.surface(0) == "a");
  CHECK(v.surface(1) == "b");
}

TEST_CASE("literal-space and byte-level vocabs normalize to the metasymbol") {
  {
    std::string text = "<eos>\n the\nthe\n";
    auto v = load_vocab_string(text, VocabFormat::kPlainLines);
    CHECK(v.source_marker() == Marker::kLiteralSpace);
    CHECK(v.id_of(std::string(kMarker) + "the") == 1);
  }
  {
    // "Ġthe" in byte-level spelling: 0xC4 0xA0 = U+0120
    std::string text = "<eos>\n\xC4\xA0the\nthe\n";
    auto v = load_vocab_string(text, VocabFormat::kPlainLines);
    CHECK(v.source_marker() == Marker::kByteLevel);
    CHECK(v.id_of(std::string(kMarker) + "the") == 1);
  }
}

TEST_CASE("byte fallback and invalid-utf8 entries are flagged opaque") {
  std::string text = "<eos>\n<0x0A>\nok\n\xFF\xFE\n";
  auto v = load_vocab_string(text, VocabFormat::kPlainLines,
                             {.marker_override = Marker::kMetasymbol});
  CHECK(v.opaque(1));
  CHECK_FALSE(v.opaque(2));
  CHECK(v.opaque(3));
}

TEST_CASE("sentencepiece tsv keeps row order") {
  std::string text = "<eos>\t0\nfoo\t-1.5\nbar\t-2\n";
  auto v = load_vocab_string(text, VocabFormat::kSentencePieceTsv);
  REQUIRE(v.size() == 3);
  CHECK(v.id_of("bar") == 2);
}

TEST_CASE("save-then-load round trip over random vocabularies") {
  Rng rng(0x5eedULL);
  for (int iter = 0; iter < 30; ++iter) {
    auto v = random_vocab(rng, 2 + rng.uniform_int(60));
    for (auto fmt : {VocabFormat::kPlainLines, VocabFormat::kSentencePieceTsv,
                     VocabFormat::kJsonMap}) {
      auto text = save_vocab_string(v, fmt);
      auto v2 = load_vocab_string(text, fmt);
      REQUIRE(v2 == v);
      // id_of(entries[i]) == i
      for (std::size_t i = 0; i < v2.size(); ++i)
        REQUIRE(v2.id_of(v2.surface(static_cast<int>(i))) ==
                static_cast<int>(i));
    }
  }
}
