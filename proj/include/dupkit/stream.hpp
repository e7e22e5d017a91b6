#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include "dupkit/common.hpp"
#include "dupkit/kappa.hpp"
#include "dupkit/rng.hpp"
#include "dupkit/vocab.hpp"

namespace dupkit {

// Token ids with document boundaries. Transforms preserve positions, so
// doc_offsets carry over unchanged.
struct TokenStream {
  std::vector<std::uint32_t> ids;
  std::vector<std::uint64_t> doc_offsets;  // sorted, first is 0
  std::uint64_t vocab_hash = 0;
  std::uint32_t vocab_size = 0;

  std::size_t size() const { return ids.size(); }

  void validate() const {
    if (!doc_offsets.empty() && doc_offsets.front() != 0)
      throw std::runtime_error("stream: first doc offset must be 0");
    for (std::size_t i = 1; i < doc_offsets.size(); ++i)
      if (doc_offsets[i] <= doc_offsets[i - 1])
        throw std::runtime_error("stream: doc offsets must be increasing");
    if (!doc_offsets.empty() && doc_offsets.back() >= ids.size() &&
        !ids.empty())
      throw std::runtime_error("stream: doc offset past end");
    for (auto id : ids)
      if (id >= vocab_size)
        throw std::runtime_error("stream: token id out of range");
  }
};

// Per-position rule flags (3 bits), aligned 1:1 with a TokenStream.
struct FlagStream {
  std::vector<std::uint8_t> flags;
  std::uint64_t stream_hash = 0;

  std::size_t size() const { return flags.size(); }
};

inline std::uint64_t stream_content_hash(const TokenStream& s) {
  std::uint64_t h = fnv1a64_bytes(s.ids.data(), s.ids.size() * sizeof(std::uint32_t));
  h = fnv1a64_bytes(s.doc_offsets.data(), s.doc_offsets.size() * sizeof(std::uint64_t),
              h);
  return h;
}

// --------------------------------------------------------------------------
// .toks binary format
//
//   magic "DTKS" | u16 version | u8 id_width (2|4) | u8 pad
//   u64 vocab_hash | u32 vocab_size | u32 pad | u64 n_ids | u64 n_docs
//   doc_offsets u64[n_docs] | ids u16/u32[n_ids]       (little endian)
// --------------------------------------------------------------------------

namespace detail {

template <class T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <class T>
T get_raw(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size())
    throw std::runtime_error("token stream file truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

inline std::string stream_to_bytes(const TokenStream& s) {
  std::string out;
  const std::uint8_t width = s.vocab_size < 65536 ? 2 : 4;
  out.reserve(32 + s.doc_offsets.size() * 8 + s.ids.size() * width);
  out += "DTKS";
  detail::put_raw<std::uint16_t>(out, 1);
  detail::put_raw<std::uint8_t>(out, width);
  detail::put_raw<std::uint8_t>(out, 0);
  detail::put_raw<std::uint64_t>(out, s.vocab_hash);
  detail::put_raw<std::uint32_t>(out, s.vocab_size);
  detail::put_raw<std::uint32_t>(out, 0);
  detail::put_raw<std::uint64_t>(out, s.ids.size());
  detail::put_raw<std::uint64_t>(out, s.doc_offsets.size());
  for (auto d : s.doc_offsets) detail::put_raw<std::uint64_t>(out, d);
  if (width == 2) {
    for (auto id : s.ids)
      detail::put_raw<std::uint16_t>(out, static_cast<std::uint16_t>(id));
  } else {
    for (auto id : s.ids) detail::put_raw<std::uint32_t>(out, id);
  }
  return out;
}

inline TokenStream stream_from_bytes(const std::string& in) {
  std::size_t pos = 0;
  if (in.size() < 4 || in.compare(0, 4, "DTKS") != 0)
    throw std::runtime_error("not a token stream file (bad magic)");
  pos = 4;
  auto version = detail::get_raw<std::uint16_t>(in, pos);
  if (version != 1)
    throw std::runtime_error("unsupported token stream version");
  auto width = detail::get_raw<std::uint8_t>(in, pos);
  detail::get_raw<std::uint8_t>(in, pos);
  TokenStream s;
  s.vocab_hash = detail::get_raw<std::uint64_t>(in, pos);
  s.vocab_size = detail::get_raw<std::uint32_t>(in, pos);
  detail::get_raw<std::uint32_t>(in, pos);
  auto n_ids = detail::get_raw<std::uint64_t>(in, pos);
  auto n_docs = detail::get_raw<std::uint64_t>(in, pos);
  s.doc_offsets.reserve(n_docs);
  for (std::uint64_t i = 0; i < n_docs; ++i)
    s.doc_offsets.push_back(detail::get_raw<std::uint64_t>(in, pos));
  s.ids.reserve(n_ids);
  if (width == 2) {
    for (std::uint64_t i = 0; i < n_ids; ++i)
      s.ids.push_back(detail::get_raw<std::uint16_t>(in, pos));
  } else if (width == 4) {
    for (std::uint64_t i = 0; i < n_ids; ++i)
      s.ids.push_back(detail::get_raw<std::uint32_t>(in, pos));
  } else {
    throw std::runtime_error("bad id width in token stream file");
  }
  s.validate();
  return s;
}

inline void save_stream(const TokenStream& s, const std::string& path) {
  write_file_atomic(path, stream_to_bytes(s));
}

inline TokenStream load_stream(const std::string& path) {
  return stream_from_bytes(read_file(path));
}

// .flags sidecar: 4 bits per position, two positions per byte.
inline std::string flags_to_bytes(const FlagStream& f) {
  std::string out;
  out += "DFLG";
  detail::put_raw<std::uint16_t>(out, 1);
  detail::put_raw<std::uint16_t>(out, 0);
  detail::put_raw<std::uint64_t>(out, f.stream_hash);
  detail::put_raw<std::uint64_t>(out, f.flags.size());
  out.reserve(out.size() + (f.flags.size() + 1) / 2);
  for (std::size_t i = 0; i < f.flags.size(); i += 2) {
    std::uint8_t b = f.flags[i] & 0x0F;
    if (i + 1 < f.flags.size()) b |= (f.flags[i + 1] & 0x0F) << 4;
    out.push_back(static_cast<char>(b));
  }
  return out;
}

inline FlagStream flags_from_bytes(const std::string& in) {
  std::size_t pos = 0;
  if (in.size() < 4 || in.compare(0, 4, "DFLG") != 0)
    throw std::runtime_error("not a flag stream file (bad magic)");
  pos = 4;
  if (detail::get_raw<std::uint16_t>(in, pos) != 1)
    throw std::runtime_error("unsupported flag stream version");
  detail::get_raw<std::uint16_t>(in, pos);
  FlagStream f;
  f.stream_hash = detail::get_raw<std::uint64_t>(in, pos);
  auto n = detail::get_raw<std::uint64_t>(in, pos);
  f.flags.resize(n);
  for (std::uint64_t i = 0; i < n; i += 2) {
    auto b = static_cast<std::uint8_t>(detail::get_raw<char>(in, pos));
    f.flags[i] = b & 0x0F;
    if (i + 1 < n) f.flags[i + 1] = (b >> 4) & 0x0F;
  }
  return f;
}

inline void save_flags(const FlagStream& f, const std::string& path) {
  write_file_atomic(path, flags_to_bytes(f));
}

inline FlagStream load_flags(const std::string& path) {
  return flags_from_bytes(read_file(path));
}

// --------------------------------------------------------------------------
// Transforms (pure; deterministic given the seed regardless of sharding)
// --------------------------------------------------------------------------

// Elementwise kappa over a stream; output ids index canonical symbols.
inline TokenStream apply_kappa_stream(const TokenStream& s,
                                      const DedupMap& map) {
  if (s.vocab_hash != map.vocab().hash())
    throw std::runtime_error("apply_kappa: stream/vocabulary mismatch");
  TokenStream out;
  out.ids.resize(s.ids.size());
  out.doc_offsets = s.doc_offsets;
  out.vocab_hash = map.canonical_hash();
  out.vocab_size = static_cast<std::uint32_t>(map.canonical_count());
  for (std::size_t i = 0; i < s.ids.size(); ++i)
    out.ids[i] = static_cast<std::uint32_t>(
        map.kappa_of(static_cast<std::int32_t>(s.ids[i])));
  return out;
}

// Independently resample each duplicable position to its primed form with
// the scheme's choice probability. Randomness is a pure function of
// (seed, absolute position).
inline TokenStream duplicate_sample_stream(const TokenStream& s,
                                           const DupScheme& scheme,
                                           std::uint64_t seed) {
  if (s.vocab_hash != scheme.base_vocab->hash())
    throw std::runtime_error("duplicate_sample: stream/vocabulary mismatch");
  TokenStream out;
  out.ids.resize(s.ids.size());
  out.doc_offsets = s.doc_offsets;
  out.vocab_hash = scheme.dup_vocab->hash();
  out.vocab_size = static_cast<std::uint32_t>(scheme.dup_vocab->size());
  constexpr std::uint64_t kStream = 0x64757063686f6963ULL;  // "dupchoic"
  for (std::size_t i = 0; i < s.ids.size(); ++i) {
    auto id = static_cast<std::int32_t>(s.ids[i]);
    auto primed = scheme.prime_of[id];
    if (primed >= 0 &&
        counter_uniform01(seed, kStream, i) < scheme.choice_prob[id])
      out.ids[i] = static_cast<std::uint32_t>(primed);
    else
      out.ids[i] = s.ids[i];
  }
  return out;
}

// Swap every twin pair (w <-> w'), leaving non-duplicated ids in place.
inline TokenStream swap_twins_stream(const TokenStream& s,
                                     const DupScheme& scheme) {
  if (s.vocab_hash != scheme.dup_vocab->hash())
    throw std::runtime_error("swap_twins: stream/vocabulary mismatch");
  TokenStream out = s;
  for (auto& id : out.ids) {
    auto sid = static_cast<std::int32_t>(id);
    auto base = scheme.base_of[sid];
    if (scheme.prime_of[base] >= 0)
      id = static_cast<std::uint32_t>(
          sid == base ? scheme.prime_of[base] : base);
  }
  return out;
}

// Rule provenance of each position's original id; zero at canonical ids.
inline FlagStream noncanonical_flag_stream(const TokenStream& s,
                                           const DedupMap& map) {
  if (s.vocab_hash != map.vocab().hash())
    throw std::runtime_error("flag_stream: stream/vocabulary mismatch");
  FlagStream f;
  f.flags.resize(s.ids.size());
  f.stream_hash = stream_content_hash(s);
  for (std::size_t i = 0; i < s.ids.size(); ++i)
    f.flags[i] = map.provenance_of(static_cast<std::int32_t>(s.ids[i]));
  return f;
}

// Token frequency per id (used by the pushforward property and binning).
inline std::vector<std::uint64_t> unigram_counts(const TokenStream& s) {
  std::vector<std::uint64_t> counts(s.vocab_size, 0);
  for (auto id : s.ids) counts[id]++;
  return counts;
}

}  // namespace dupkit
