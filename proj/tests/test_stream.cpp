#include <filesystem>

#include <catch2/catch_amalgamated.hpp>

#include "dupkit/bpe.hpp"
#include "dupkit/kappa.hpp"
#include "dupkit/rng.hpp"
#include "dupkit/stream.hpp"

using namespace dupkit;

namespace {

VocabPtr small_vocab() {
  std::vector<std::string> entries{"<eos>", "the", "Now", "now", "books"};
  entries.push_back(std::string(kMarker) + "the");
  entries.push_back(std::string(kMarker) + "Books");
  return std::make_shared<Vocabulary>(std::move(entries), 0,
                                      Marker::kMetasymbol);
}

TokenStream random_stream(const Vocabulary& v, Rng& rng, std::size_t n) {
  TokenStream s;
  s.vocab_hash = v.hash();
  s.vocab_size = static_cast<std::uint32_t>(v.size());
  s.doc_offsets.push_back(0);
  for (std::size_t i = 0; i + 1 < n; ++i)
    s.ids.push_back(static_cast<std::uint32_t>(
        1 + rng.uniform_int(v.size() - 1)));
  s.ids.push_back(static_cast<std::uint32_t>(v.eos_id()));
  return s;
}

}  // namespace

TEST_CASE("toks binary round trip, 16-bit and 32-bit") {
  Rng rng(3);
  auto v = small_vocab();
  auto s = random_stream(*v, rng, 500);
  s.doc_offsets = {0, 100, 350};

  auto bytes = stream_to_bytes(s);
  auto s2 = stream_from_bytes(bytes);
  CHECK(s2.ids == s.ids);
  CHECK(s2.doc_offsets == s.doc_offsets);
  CHECK(s2.vocab_hash == s.vocab_hash);

  // force the 32-bit path
  s.vocab_size = 70000;
  auto bytes32 = stream_to_bytes(s);
  CHECK(bytes32.size() > bytes.size());
  auto s3 = stream_from_bytes(bytes32);
  CHECK(s3.ids == s.ids);
}

TEST_CASE("corrupt stream files are rejected") {
  CHECK_THROWS(stream_from_bytes("BOGUS"));
  Rng rng(4);
  auto v = small_vocab();
  auto s = random_stream(*v, rng, 20);
  auto bytes = stream_to_bytes(s);
  bytes.resize(bytes.size() / 2);
  CHECK_THROWS(stream_from_bytes(bytes));
}

TEST_CASE("flag stream packing round trip") {
  FlagStream f;
  f.stream_hash = 123;
  for (int i = 0; i < 33; ++i)
    f.flags.push_back(static_cast<std::uint8_t>(i % 8));
  auto f2 = flags_from_bytes(flags_to_bytes(f));
  CHECK(f2.flags == f.flags);
  CHECK(f2.stream_hash == f.stream_hash);
}

TEST_CASE("apply_kappa matches elementwise lookup and preserves layout") {
  Rng rng(5);
  auto v = small_vocab();
  auto map = build_kappa(v, DedupRule::kAll);
  auto s = random_stream(*v, rng, 300);
  s.doc_offsets = {0, 51, 200};
  auto t = apply_kappa_stream(s, map);
  REQUIRE(t.ids.size() == s.ids.size());
  CHECK(t.doc_offsets == s.doc_offsets);
  CHECK(t.vocab_size == map.canonical_count());
  for (std::size_t i = 0; i < s.ids.size(); ++i)
    REQUIRE(t.ids[i] == static_cast<std::uint32_t>(map.kappa_of(
                            static_cast<std::int32_t>(s.ids[i]))));
}

TEST_CASE("identity map leaves a stream unchanged") {
  Rng rng(6);
  auto v = small_vocab();
  auto map = build_kappa(v, DedupRule::kIdentity);
  auto s = random_stream(*v, rng, 100);
  auto t = apply_kappa_stream(s, map);
  CHECK(t.ids == s.ids);
}

TEST_CASE("vocab mismatch is rejected") {
  Rng rng(7);
  auto v = small_vocab();
  auto map = build_kappa(v, DedupRule::kAll);
  auto s = random_stream(*v, rng, 10);
  s.vocab_hash ^= 1;
  CHECK_THROWS(apply_kappa_stream(s, map));
}

TEST_CASE("unigram pushforward: canonical counts are group sums") {
  Rng rng(8);
  auto v = small_vocab();
  auto map = build_kappa(v, DedupRule::kAll);
  auto s = random_stream(*v, rng, 5000);
  auto t = apply_kappa_stream(s, map);
  auto cs = unigram_counts(s);
  auto ct = unigram_counts(t);
  for (std::size_t g = 0; g < map.canonical_count(); ++g) {
    std::uint64_t sum = 0;
    for (auto id : map.group_members(static_cast<std::int32_t>(g)))
      sum += cs[id];
    REQUIRE(ct[g] == sum);
  }
}

TEST_CASE("duplicate sampling: degenerate choice probabilities") {
  Rng rng(9);
  auto v = small_vocab();
  auto s = random_stream(*v, rng, 200);

  auto dup0 = build_synthetic_dup(v, 1.0, 0.0, 3);
  auto t0 = duplicate_sample_stream(s, dup0.scheme, 11);
  CHECK(t0.ids == s.ids);  // ids coincide: twins share base positions

  auto dup1 = build_synthetic_dup(v, 1.0, 1.0, 3);
  auto t1 = duplicate_sample_stream(s, dup1.scheme, 11);
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    auto base = static_cast<std::int32_t>(s.ids[i]);
    if (dup1.scheme.prime_of[base] >= 0)
      REQUIRE(t1.ids[i] ==
              static_cast<std::uint32_t>(dup1.scheme.prime_of[base]));
    else
      REQUIRE(t1.ids[i] == s.ids[i]);
  }
}

TEST_CASE("duplicate sampling round trip through kappa") {
  Rng rng(10);
  auto v = small_vocab();
  auto dup = build_synthetic_dup(v, 0.7, 0.5, 21);
  auto s = random_stream(*v, rng, 400);
  auto t = duplicate_sample_stream(s, dup.scheme, 33);
  auto back = apply_kappa_stream(t, dup.map);
  CHECK(back.ids == s.ids);
}

TEST_CASE("duplicate sampling hits the choice probability at 1e6 scale") {
  std::vector<std::string> entries{"<eos>", "a"};
  auto v = std::make_shared<Vocabulary>(std::move(entries), 0,
                                        Marker::kMetasymbol);
  auto dup = build_synthetic_dup(v, 1.0, 0.5, 3);
  TokenStream s;
  s.vocab_hash = v->hash();
  s.vocab_size = 2;
  s.doc_offsets = {0};
  const std::size_t n = 1'000'000;
  s.ids.assign(n, 1);
  auto t = duplicate_sample_stream(s, dup.scheme, 1234);
  std::size_t primed = 0;
  for (auto id : t.ids)
    if (id != 1) ++primed;
  double frac = static_cast<double>(primed) / static_cast<double>(n);
  // 3 sigma binomial bound at p = 0.5
  CHECK(frac == Catch::Approx(0.5).margin(0.0015));
}

TEST_CASE("transforms are shard-independent") {
  Rng rng(11);
  auto v = small_vocab();
  auto dup = build_synthetic_dup(v, 0.8, 0.5, 5);
  auto s = random_stream(*v, rng, 999);
  auto whole = duplicate_sample_stream(s, dup.scheme, 77);

  // sampling a shard must agree with the same positions of the whole:
  // randomness is keyed on absolute position, which the shard offset
  // re-creates here by construction
  for (std::size_t split : {1ul, 500ul, 998ul}) {
    TokenStream shard;
    shard.vocab_hash = s.vocab_hash;
    shard.vocab_size = s.vocab_size;
    shard.doc_offsets = {0};
    shard.ids.assign(s.ids.begin(), s.ids.begin() + split);
    auto out = duplicate_sample_stream(shard, dup.scheme, 77);
    for (std::size_t i = 0; i < split; ++i)
      REQUIRE(out.ids[i] == whole.ids[i]);
  }
}

TEST_CASE("swap twins exchanges every pair and is an involution") {
  Rng rng(12);
  auto v = small_vocab();
  auto dup = build_synthetic_dup(v, 0.6, 0.5, 13);
  auto s0 = random_stream(*v, rng, 300);
  auto s = duplicate_sample_stream(s0, dup.scheme, 14);
  auto w = swap_twins_stream(s, dup.scheme);
  auto ww = swap_twins_stream(w, dup.scheme);
  CHECK(ww.ids == s.ids);
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    auto base = dup.scheme.base_of[static_cast<std::int32_t>(s.ids[i])];
    if (dup.scheme.prime_of[base] >= 0) REQUIRE(w.ids[i] != s.ids[i]);
  }
}

TEST_CASE("noncanonical flags mirror provenance of original ids") {
  Rng rng(13);
  auto v = small_vocab();
  auto map = build_kappa(v, DedupRule::kAll);
  auto s = random_stream(*v, rng, 200);
  auto f = noncanonical_flag_stream(s, map);
  REQUIRE(f.flags.size() == s.ids.size());
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    auto id = static_cast<std::int32_t>(s.ids[i]);
    REQUIRE(f.flags[i] == map.provenance_of(id));
    REQUIRE((f.flags[i] != 0) == !map.is_canonical(id));
  }
}

TEST_CASE("identity map yields all-zero flags") {
  Rng rng(14);
  auto v = small_vocab();
  auto map = build_kappa(v, DedupRule::kIdentity);
  auto s = random_stream(*v, rng, 50);
  auto f = noncanonical_flag_stream(s, map);
  for (auto fl : f.flags) REQUIRE(fl == 0);
}

TEST_CASE("Books under kappa_all sets all three flags in the stream") {
  auto v = small_vocab();
  auto map = build_kappa(v, DedupRule::kAll);
  int books = v->id_of(std::string(kMarker) + "Books");
  REQUIRE(books >= 0);
  TokenStream s;
  s.vocab_hash = v->hash();
  s.vocab_size = static_cast<std::uint32_t>(v->size());
  s.doc_offsets = {0};
  s.ids = {static_cast<std::uint32_t>(books),
           static_cast<std::uint32_t>(v->eos_id())};
  auto f = noncanonical_flag_stream(s, map);
  CHECK(f.flags[0] == (kFlagSpace | kFlagLower | kFlagPlural));
  CHECK(f.flags[1] == 0);
}
