#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "dupkit/common.hpp"
#include "dupkit/stream.hpp"
#include "dupkit/vocab.hpp"

namespace dupkit {

// Minimal greedy BPE: highest-frequency pair merging over a
// whitespace-marked chunk inventory. No dropout, no unigram LM; the
// experiments here evaluate fixed tokenizations.
class BpeModel {
 public:
  BpeModel() = default;
  BpeModel(VocabPtr vocab, std::vector<std::pair<std::string, std::string>> merges)
      : vocab_(std::move(vocab)), merges_(std::move(merges)) {
    build_tables();
  }

  const Vocabulary& vocab() const { return *vocab_; }
  VocabPtr vocab_ptr() const { return vocab_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const {
    return merges_;
  }

  // Greedy merge application for one pre-tokenized chunk.
  void encode_chunk(std::string_view chunk, std::vector<std::uint32_t>& out) const {
    auto it = cache_.find(std::string(chunk));
    if (it != cache_.end()) {
      out.insert(out.end(), it->second.begin(), it->second.end());
      return;
    }
    std::vector<std::int32_t> syms;
    symbols_of(chunk, syms);
    while (syms.size() > 1) {
      int best_rank = -1;
      std::size_t best_pos = 0;
      std::int32_t best_id = -1;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto r = rank_.find(pack(syms[i], syms[i + 1]));
        if (r != rank_.end() &&
            (best_rank < 0 || r->second.first < best_rank)) {
          best_rank = r->second.first;
          best_pos = i;
          best_id = r->second.second;
        }
      }
      if (best_rank < 0) break;
      // merge every occurrence of the best pair, left to right
      std::vector<std::int32_t> next;
      next.reserve(syms.size());
      auto l = syms[best_pos], r = syms[best_pos + 1];
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
          next.push_back(best_id);
          i += 2;
        } else {
          next.push_back(syms[i]);
          ++i;
        }
      }
      syms.swap(next);
    }
    std::vector<std::uint32_t> ids;
    ids.reserve(syms.size());
    for (auto s : syms) ids.push_back(static_cast<std::uint32_t>(s));
    out.insert(out.end(), ids.begin(), ids.end());
    if (cache_.size() < kCacheLimit) cache_.emplace(std::string(chunk), std::move(ids));
  }

  static std::uint64_t pack(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

 private:
  void build_tables() {
    const auto& v = *vocab_;
    for (std::size_t id = 0; id < v.size(); ++id) {
      const auto& s = v.surface(static_cast<int>(id));
      auto cps = utf8_decode(s);
      if (cps.size() == 1 && cps[0] >= 0)
        char_id_.emplace(cps[0], static_cast<std::int32_t>(id));
      if (auto b = parse_byte_entry(s)) byte_id_[*b] = static_cast<std::int32_t>(id);
    }
    for (std::size_t k = 0; k < merges_.size(); ++k) {
      int a = v.id_of(merges_[k].first);
      int b = v.id_of(merges_[k].second);
      int m = v.id_of(merges_[k].first + merges_[k].second);
      if (a < 0 || b < 0 || m < 0)
        throw std::runtime_error("bpe: merge references unknown vocab entry");
      rank_.emplace(pack(a, b), std::make_pair(static_cast<int>(k), m));
    }
  }

  // Chunk -> initial symbol ids; characters missing from the vocabulary
  // fall back to their UTF-8 bytes, so every input is encodable.
  void symbols_of(std::string_view chunk, std::vector<std::int32_t>& syms) const {
    std::size_t i = 0;
    while (i < chunk.size()) {
      std::size_t start = i;
      std::int32_t cp = utf8_next(chunk, i);
      bool known = false;
      if (cp >= 0) {
        auto it = char_id_.find(cp);
        if (it != char_id_.end()) {
          syms.push_back(it->second);
          known = true;
        }
      }
      if (!known) {
        for (std::size_t b = start; b < i; ++b) {
          auto id = byte_id_[static_cast<unsigned char>(chunk[b])];
          if (id < 0) throw std::runtime_error("bpe: vocabulary lacks byte fallback");
          syms.push_back(id);
        }
      }
    }
  }

  static constexpr std::size_t kCacheLimit = 1 << 20;

  VocabPtr vocab_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::int32_t, std::int32_t> char_id_;
  std::array<std::int32_t, 256> byte_id_ = [] {
    std::array<std::int32_t, 256> a{};
    a.fill(-1);
    return a;
  }();
  std::unordered_map<std::uint64_t, std::pair<int, std::int32_t>> rank_;
  mutable std::unordered_map<std::string, std::vector<std::uint32_t>> cache_;
};

namespace detail {

// Whitespace handling: each space turns into a marker that starts a new
// chunk; newlines close the chunk they end. Concatenating chunks (marker
// back to space) reproduces the document byte for byte.
inline void pretokenize(std::string_view text,
                        const std::function<void(std::string_view)>& emit) {
  std::string chunk;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (c == ' ') {
      if (!chunk.empty()) emit(chunk);
      chunk.assign(kMarker);
    } else if (c == '\n') {
      chunk.push_back(c);
      emit(chunk);
      chunk.clear();
    } else {
      chunk.push_back(c);
    }
  }
  if (!chunk.empty()) emit(chunk);
}

}  // namespace detail

struct BpeTrainStats {
  std::size_t base_symbols = 0;
  std::size_t merges = 0;
  std::uint64_t total_chunks = 0;
};

// Greedy highest-frequency pair merging until target_size entries exist
// or no pair occurs twice. Ties break on the lexicographically smaller
// merged string, which keeps retraining deterministic.
inline BpeModel train_bpe(const std::vector<std::string>& docs,
                          std::size_t target_size,
                          BpeTrainStats* stats = nullptr) {
  if (docs.empty()) throw std::runtime_error("bpe train: empty corpus");

  std::unordered_map<std::string, std::uint64_t> chunk_count;
  std::uint64_t total_chunks = 0;
  for (const auto& d : docs)
    detail::pretokenize(d, [&](std::string_view c) {
      chunk_count[std::string(c)]++;
      ++total_chunks;
    });
  if (chunk_count.empty()) throw std::runtime_error("bpe train: empty corpus");

  // Base inventory: eos + byte fallbacks + every observed character.
  std::vector<std::string> entries;
  entries.push_back("<eos>");
  for (int b = 0; b < 256; ++b) entries.push_back(byte_entry(static_cast<unsigned char>(b)));
  std::unordered_set<std::string> char_set;
  for (const auto& [chunk, cnt] : chunk_count) {
    std::size_t i = 0;
    while (i < chunk.size()) {
      std::size_t start = i;
      std::int32_t cp = utf8_next(chunk, i);
      if (cp >= 0) char_set.insert(chunk.substr(start, i - start));
    }
  }
  std::vector<std::string> chars(char_set.begin(), char_set.end());
  std::sort(chars.begin(), chars.end());
  for (auto& c : chars) entries.push_back(c);

  if (target_size < entries.size())
    throw std::runtime_error(
        "bpe train: target size " + std::to_string(target_size) +
        " below base symbol count " + std::to_string(entries.size()));

  std::unordered_map<std::string, std::int32_t> id_of;
  for (std::size_t i = 0; i < entries.size(); ++i)
    id_of.emplace(entries[i], static_cast<std::int32_t>(i));

  // Distinct chunks as symbol-id sequences, weighted by count.
  struct Chunk {
    std::vector<std::int32_t> syms;
    std::uint64_t count;
  };
  std::vector<Chunk> chunks;
  chunks.reserve(chunk_count.size());
  for (const auto& [chunk, cnt] : chunk_count) {
    Chunk c;
    c.count = cnt;
    std::size_t i = 0;
    while (i < chunk.size()) {
      std::size_t start = i;
      std::int32_t cp = utf8_next(chunk, i);
      if (cp >= 0) {
        c.syms.push_back(id_of.at(chunk.substr(start, i - start)));
      } else {
        for (std::size_t b = start; b < i; ++b)
          c.syms.push_back(id_of.at(byte_entry(static_cast<unsigned char>(chunk[b]))));
      }
    }
    chunks.push_back(std::move(c));
  }

  std::unordered_map<std::uint64_t, std::int64_t> pair_count;
  std::unordered_map<std::uint64_t, std::unordered_set<std::uint32_t>> pair_chunks;
  auto add_pairs = [&](std::uint32_t ci, std::int64_t sign) {
    const auto& syms = chunks[ci].syms;
    auto w = static_cast<std::int64_t>(chunks[ci].count) * sign;
    for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
      auto key = BpeModel::pack(syms[i], syms[i + 1]);
      pair_count[key] += w;
      if (sign > 0) pair_chunks[key].insert(ci);
    }
  };
  for (std::uint32_t ci = 0; ci < chunks.size(); ++ci) add_pairs(ci, +1);

  std::vector<std::pair<std::string, std::string>> merges;
  std::unordered_set<std::uint64_t> banned;
  while (entries.size() < target_size) {
    std::int64_t best_count = 0;
    std::uint64_t best_key = 0;
    std::string best_surface;
    for (const auto& [key, cnt] : pair_count) {
      if (cnt < 2 || banned.count(key)) continue;
      if (cnt > best_count) {
        best_count = cnt;
        best_key = key;
        best_surface.clear();
      } else if (cnt == best_count) {
        if (best_surface.empty())
          best_surface = entries[best_key >> 32] + entries[best_key & 0xFFFFFFFF];
        std::string cand = entries[key >> 32] + entries[key & 0xFFFFFFFF];
        if (cand < best_surface) {
          best_key = key;
          best_surface = std::move(cand);
        }
      }
    }
    if (best_count < 2) break;

    auto a = static_cast<std::int32_t>(best_key >> 32);
    auto b = static_cast<std::int32_t>(best_key & 0xFFFFFFFF);
    std::string merged = entries[a] + entries[b];
    if (id_of.count(merged)) {  // merged surface collides with an existing entry
      banned.insert(best_key);
      continue;
    }
    auto merged_id = static_cast<std::int32_t>(entries.size());
    entries.push_back(merged);
    id_of.emplace(merged, merged_id);
    merges.emplace_back(entries[a], entries[b]);

    auto affected = pair_chunks[best_key];  // copy: add_pairs mutates the index
    for (auto ci : affected) {
      add_pairs(ci, -1);
      auto& syms = chunks[ci].syms;
      std::vector<std::int32_t> next;
      next.reserve(syms.size());
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
          next.push_back(merged_id);
          i += 2;
        } else {
          next.push_back(syms[i]);
          ++i;
        }
      }
      syms.swap(next);
      add_pairs(ci, +1);
    }
    pair_count.erase(best_key);
    pair_chunks.erase(best_key);
  }

  if (stats) {
    stats->base_symbols = entries.size() - merges.size();
    stats->merges = merges.size();
    stats->total_chunks = total_chunks;
  }
  auto vocab = std::make_shared<Vocabulary>(std::move(entries), 0,
                                            Marker::kMetasymbol);
  return BpeModel(std::move(vocab), std::move(merges));
}

// Encode documents; eos terminates each document.
inline TokenStream encode(const std::vector<std::string>& docs,
                          const BpeModel& model) {
  TokenStream s;
  s.vocab_hash = model.vocab().hash();
  s.vocab_size = static_cast<std::uint32_t>(model.vocab().size());
  const auto eos = static_cast<std::uint32_t>(model.vocab().eos_id());
  for (const auto& d : docs) {
    s.doc_offsets.push_back(s.ids.size());
    detail::pretokenize(d, [&](std::string_view c) { model.encode_chunk(c, s.ids); });
    s.ids.push_back(eos);
  }
  return s;
}

// Inverse of encode: eos closes a document; markers turn back into spaces
// and byte entries into raw bytes.
inline std::vector<std::string> decode(const TokenStream& s,
                                       const Vocabulary& vocab) {
  if (s.vocab_hash != vocab.hash())
    throw std::runtime_error("decode: stream/vocabulary mismatch");
  std::vector<std::string> docs;
  std::string cur;
  const auto marker_len = std::char_traits<char>::length(kMarker);
  for (auto id : s.ids) {
    if (static_cast<int>(id) == vocab.eos_id()) {
      docs.push_back(std::move(cur));
      cur.clear();
      continue;
    }
    const auto& surf = vocab.surface(static_cast<int>(id));
    if (auto b = parse_byte_entry(surf)) {
      cur.push_back(static_cast<char>(*b));
      continue;
    }
    std::size_t i = 0;
    while (i < surf.size()) {
      if (surf.compare(i, marker_len, kMarker) == 0) {
        cur.push_back(' ');
        i += marker_len;
      } else {
        cur.push_back(surf[i]);
        ++i;
      }
    }
  }
  if (!cur.empty()) docs.push_back(std::move(cur));
  return docs;
}

// Merges file: one "left<TAB>right" per line, in merge order.
inline std::string merges_to_string(const BpeModel& m) {
  std::string out;
  for (const auto& [a, b] : m.merges()) {
    out += a;
    out.push_back('\t');
    out += b;
    out.push_back('\n');
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> merges_from_string(
    const std::string& text) {
  std::vector<std::pair<std::string, std::string>> merges;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error("merges file: missing tab separator");
    merges.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return merges;
}

}  // namespace dupkit
