#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dupkit/common.hpp"

namespace dupkit {

enum class Marker { kMetasymbol, kByteLevel, kLiteralSpace };
enum class VocabFormat { kPlainLines, kSentencePieceTsv, kJsonMap };

inline const char* marker_name(Marker m) {
  switch (m) {
    case Marker::kMetasymbol: return "metasymbol";
    case Marker::kByteLevel: return "byte-level";
    case Marker::kLiteralSpace: return "literal-space";
  }
  return "?";
}

// GPT-2 style byte<->unicode table used by byte-level BPE exports.
// Printable bytes map to themselves; the rest are shifted into a
// private printable range starting at U+0100.
inline const std::vector<std::int32_t>& byte_to_unicode() {
  static const std::vector<std::int32_t> table = [] {
    std::vector<std::int32_t> t(256, 0);
    std::vector<bool> direct(256, false);
    for (int b = 33; b <= 126; ++b) direct[b] = true;
    for (int b = 161; b <= 172; ++b) direct[b] = true;
    for (int b = 174; b <= 255; ++b) direct[b] = true;
    int n = 0;
    for (int b = 0; b < 256; ++b) {
      if (direct[b]) t[b] = b;
      else t[b] = 256 + n++;
    }
    return t;
  }();
  return table;
}

// Inverse of byte_to_unicode(); nullopt when the code point is not part
// of the byte-level alphabet.
inline std::optional<unsigned char> unicode_to_byte(std::int32_t cp) {
  static const std::unordered_map<std::int32_t, unsigned char> inv = [] {
    std::unordered_map<std::int32_t, unsigned char> m;
    const auto& t = byte_to_unicode();
    for (int b = 0; b < 256; ++b) m[t[b]] = static_cast<unsigned char>(b);
    return m;
  }();
  auto it = inv.find(cp);
  if (it == inv.end()) return std::nullopt;
  return it->second;
}

// SentencePiece-style byte fallback entry, e.g. "<0x0A>".
inline std::optional<unsigned char> parse_byte_entry(std::string_view s) {
  if (s.size() != 6 || s[0] != '<' || s[1] != '0' || s[2] != 'x' || s[5] != '>')
    return std::nullopt;
  auto hex = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
  };
  int hi = hex(s[3]), lo = hex(s[4]);
  if (hi < 0 || lo < 0) return std::nullopt;
  return static_cast<unsigned char>(hi * 16 + lo);
}

inline std::string byte_entry(unsigned char b) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "<0x%02X>", b);
  return buf;
}

// Subword vocabulary with a single internal whitespace convention:
// surface strings use the U+2581 metasymbol regardless of the export
// format they were loaded from. Immutable once built.
class Vocabulary {
 public:
  Vocabulary() = default;

  // entries are already marker-normalized; throws on duplicates.
  Vocabulary(std::vector<std::string> entries, int eos_id, Marker source_marker)
      : entries_(std::move(entries)),
        eos_id_(eos_id),
        source_marker_(source_marker) {
    if (eos_id_ < 0 || eos_id_ >= static_cast<int>(entries_.size()))
      throw std::runtime_error("vocab: eos id out of range");
    id_of_.reserve(entries_.size() * 2);
    opaque_.resize(entries_.size(), false);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].empty())
        throw std::runtime_error("vocab: empty entry at id " + std::to_string(i));
      auto [it, fresh] = id_of_.emplace(entries_[i], static_cast<int>(i));
      if (!fresh)
        throw std::runtime_error("vocab: duplicate surface string at ids " +
                                 std::to_string(it->second) + " and " +
                                 std::to_string(i) + ": \"" + entries_[i] + "\"");
      opaque_[i] = is_opaque_surface(entries_[i]);
    }
    opaque_[eos_id_] = false;
    hash_ = compute_hash();
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& entries() const { return entries_; }
  const std::string& surface(int id) const { return entries_.at(id); }
  int eos_id() const { return eos_id_; }
  Marker source_marker() const { return source_marker_; }
  bool opaque(int id) const { return opaque_.at(id); }
  std::uint64_t hash() const { return hash_; }

  int id_of(std::string_view s) const {
    auto it = id_of_.find(std::string(s));
    return it == id_of_.end() ? -1 : it->second;
  }

  bool operator==(const Vocabulary& o) const {
    return entries_ == o.entries_ && eos_id_ == o.eos_id_;
  }

  // Non-text entries stay out of dedup groups: raw byte fallbacks and
  // strings that do not decode as UTF-8.
  static bool is_opaque_surface(std::string_view s) {
    if (parse_byte_entry(s)) return true;
    return !utf8_valid(s);
  }

 private:
  std::uint64_t compute_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& e : entries_) {
      h = fnv1a64(e, h);
      h = fnv1a64("\x1f", h);
    }
    h = fnv1a64(std::to_string(eos_id_), h);
    return h;
  }

  std::vector<std::string> entries_;
  std::unordered_map<std::string, int> id_of_;
  std::vector<bool> opaque_;
  int eos_id_ = -1;
  Marker source_marker_ = Marker::kMetasymbol;
  std::uint64_t hash_ = 0;
};

using VocabPtr = std::shared_ptr<const Vocabulary>;

namespace detail {

inline bool starts_with(std::string_view s, std::string_view p) {
  return s.size() >= p.size() && s.substr(0, p.size()) == p;
}

// "Ġ" (U+0120) / "Ċ" (U+010A) mark spaces/newlines in byte-level exports.
inline bool looks_byte_level(const std::vector<std::string>& entries) {
  for (const auto& e : entries)
    if (starts_with(e, "\xC4\xA0") || starts_with(e, "\xC4\x8A")) return true;
  return false;
}

inline Marker detect_marker(const std::vector<std::string>& entries) {
  for (const auto& e : entries)
    if (starts_with(e, kMarker)) return Marker::kMetasymbol;
  if (looks_byte_level(entries)) return Marker::kByteLevel;
  for (const auto& e : entries)
    if (!e.empty() && e[0] == ' ') return Marker::kLiteralSpace;
  return Marker::kMetasymbol;
}

// Byte-level entries are shifted unicode; decode them to raw bytes first.
inline std::string decode_byte_level(std::string_view s, bool& ok) {
  std::string raw;
  raw.reserve(s.size());
  std::size_t i = 0;
  ok = true;
  while (i < s.size()) {
    std::int32_t cp = utf8_next(s, i);
    if (cp < 0) {
      ok = false;
      return std::string(s);
    }
    auto b = unicode_to_byte(cp);
    if (!b) {
      ok = false;
      return std::string(s);
    }
    raw.push_back(static_cast<char>(*b));
  }
  return raw;
}

inline std::string normalize_surface(std::string_view s, Marker m) {
  switch (m) {
    case Marker::kMetasymbol:
      return std::string(s);
    case Marker::kLiteralSpace: {
      std::string out;
      out.reserve(s.size() + 2);
      for (char c : s) {
        if (c == ' ') out += kMarker;
        else out.push_back(c);
      }
      return out;
    }
    case Marker::kByteLevel: {
      bool ok = false;
      std::string raw = decode_byte_level(s, ok);
      if (!ok) return std::string(s);
      if (!utf8_valid(raw)) return raw;  // kept verbatim, flagged opaque
      std::string out;
      out.reserve(raw.size() + 2);
      for (char c : raw) {
        if (c == ' ') out += kMarker;
        else out.push_back(c);
      }
      return out;
    }
  }
  return std::string(s);
}

inline const std::vector<std::string>& known_eos_surfaces() {
  static const std::vector<std::string> k = {"<eos>", "</s>", "<|endoftext|>",
                                             "<|end_of_text|>", "<EOS>"};
  return k;
}

}  // namespace detail

struct LoadVocabOptions {
  std::optional<Marker> marker_override;  // skip auto-detection
  bool add_eos_if_missing = false;
};

inline Vocabulary make_vocab(std::vector<std::string> raw_entries,
                             std::optional<int> eos_id, Marker marker,
                             const LoadVocabOptions& opt) {
  for (auto& e : raw_entries) e = detail::normalize_surface(e, marker);

  int eos = -1;
  if (eos_id) {
    eos = *eos_id;
  } else {
    for (const auto& surf : detail::known_eos_surfaces()) {
      auto it = std::find(raw_entries.begin(), raw_entries.end(), surf);
      if (it != raw_entries.end()) {
        eos = static_cast<int>(it - raw_entries.begin());
        break;
      }
    }
    if (eos < 0) {
      if (!opt.add_eos_if_missing)
        throw std::runtime_error(
            "vocab: no end-of-sequence entry found (pass add_eos to append one)");
      raw_entries.push_back("<eos>");
      eos = static_cast<int>(raw_entries.size()) - 1;
    }
  }
  return Vocabulary(std::move(raw_entries), eos, marker);
}

inline Vocabulary load_vocab_string(const std::string& text, VocabFormat format,
                                    const LoadVocabOptions& opt = {}) {
  std::vector<std::string> entries;
  std::optional<int> eos_id;

  switch (format) {
    case VocabFormat::kPlainLines: {
      std::size_t pos = 0;
      while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        entries.emplace_back(text.substr(pos, nl - pos));
        pos = nl + 1;
      }
      if (!entries.empty() && entries.back().empty()) entries.pop_back();
      break;
    }
    case VocabFormat::kSentencePieceTsv: {
      std::size_t pos = 0;
      while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) nl = text.size();
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty() && pos >= text.size()) break;
        std::size_t tab = line.find('\t');
        entries.emplace_back(tab == std::string::npos ? line
                                                      : line.substr(0, tab));
      }
      break;
    }
    case VocabFormat::kJsonMap: {
      auto j = nlohmann::json::parse(text);
      if (!j.is_object())
        throw std::runtime_error("vocab json-map: top level must be an object");
      int max_id = -1;
      std::vector<std::pair<std::string, int>> pairs;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (it.key() == "eos") {
          eos_id = it.value().get<int>();
          continue;
        }
        int id = it.value().get<int>();
        pairs.emplace_back(it.key(), id);
        max_id = std::max(max_id, id);
      }
      entries.assign(max_id + 1, "");
      for (auto& [surf, id] : pairs) {
        if (id < 0 || id > max_id || !entries[id].empty())
          throw std::runtime_error("vocab json-map: bad or duplicate id " +
                                   std::to_string(id));
        entries[id] = surf;
      }
      for (std::size_t i = 0; i < entries.size(); ++i)
        if (entries[i].empty())
          throw std::runtime_error("vocab json-map: missing id " +
                                   std::to_string(i));
      break;
    }
  }

  Marker marker = opt.marker_override ? *opt.marker_override
                                      : detail::detect_marker(entries);
  return make_vocab(std::move(entries), eos_id, marker, opt);
}

inline Vocabulary load_vocab(const std::string& path, VocabFormat format,
                             const LoadVocabOptions& opt = {}) {
  return load_vocab_string(read_file(path), format, opt);
}

inline std::string save_vocab_string(const Vocabulary& v, VocabFormat format) {
  switch (format) {
    case VocabFormat::kPlainLines: {
      std::string out;
      for (const auto& e : v.entries()) {
        if (e.find('\n') != std::string::npos)
          throw std::runtime_error(
              "plain-lines cannot hold entries containing newlines; use json-map");
        out += e;
        out.push_back('\n');
      }
      return out;
    }
    case VocabFormat::kSentencePieceTsv: {
      std::string out;
      for (const auto& e : v.entries()) {
        if (e.find_first_of("\n\t") != std::string::npos)
          throw std::runtime_error(
              "sentencepiece-tsv cannot hold entries containing tab/newline; "
              "use json-map");
        out += e;
        out += "\t0";
        out.push_back('\n');
      }
      return out;
    }
    case VocabFormat::kJsonMap: {
      nlohmann::json j = nlohmann::json::object();
      for (std::size_t i = 0; i < v.size(); ++i)
        j[v.surface(static_cast<int>(i))] = i;
      j["eos"] = v.eos_id();
      return j.dump(2) + "\n";
    }
  }
  throw std::runtime_error("unknown vocab format");
}

inline void save_vocab(const Vocabulary& v, const std::string& path,
                       VocabFormat format) {
  write_file_atomic(path, save_vocab_string(v, format));
}

inline std::optional<VocabFormat> vocab_format_from_name(std::string_view s) {
  if (s == "plain-lines") return VocabFormat::kPlainLines;
  if (s == "sentencepiece-tsv") return VocabFormat::kSentencePieceTsv;
  if (s == "json-map") return VocabFormat::kJsonMap;
  return std::nullopt;
}

}  // namespace dupkit
