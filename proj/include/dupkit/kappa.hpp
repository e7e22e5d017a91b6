#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dupkit/common.hpp"
#include "dupkit/rng.hpp"
#include "dupkit/vocab.hpp"

namespace dupkit {

enum class DedupRule { kSpace, kLower, kPlural, kAll, kIdentity, kCustom };

// Provenance bits: which sub-rules changed an entry's surface.
inline constexpr std::uint8_t kFlagSpace = 1;
inline constexpr std::uint8_t kFlagLower = 2;
inline constexpr std::uint8_t kFlagPlural = 4;

inline const char* rule_name(DedupRule r) {
  switch (r) {
    case DedupRule::kSpace: return "space";
    case DedupRule::kLower: return "lower";
    case DedupRule::kPlural: return "plural";
    case DedupRule::kAll: return "all";
    case DedupRule::kIdentity: return "identity";
    case DedupRule::kCustom: return "custom";
  }
  return "?";
}

inline std::optional<DedupRule> rule_from_name(std::string_view s) {
  if (s == "space") return DedupRule::kSpace;
  if (s == "lower") return DedupRule::kLower;
  if (s == "plural") return DedupRule::kPlural;
  if (s == "all") return DedupRule::kAll;
  if (s == "identity") return DedupRule::kIdentity;
  if (s == "custom") return DedupRule::kCustom;
  return std::nullopt;
}

namespace detail {

inline constexpr std::int32_t kMarkerCp = 0x2581;

inline bool is_ws_cp(std::int32_t cp) {
  return cp == kMarkerCp || cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r';
}

// Un-tailored single-codepoint lowercase over the algorithmic ranges
// (ASCII, Latin-1, Latin Extended-A, Greek, Cyrillic). Everything else
// is left unchanged.
inline std::int32_t simple_lower(std::int32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp >= 0x00C0 && cp <= 0x00DE && cp != 0x00D7) return cp + 32;
  if (cp == 0x0130) return 0x0069;  // I with dot above
  if (cp == 0x0178) return 0x00FF;  // Y with diaeresis
  if (cp >= 0x0100 && cp <= 0x0137) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp >= 0x0139 && cp <= 0x0148) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x014A && cp <= 0x0177) return (cp % 2 == 0) ? cp + 1 : cp;
  if (cp >= 0x0179 && cp <= 0x017E) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x0386 && cp <= 0x038F) {  // Greek tonos capitals
    switch (cp) {
      case 0x0386: return 0x03AC;
      case 0x0388: return 0x03AD;
      case 0x0389: return 0x03AE;
      case 0x038A: return 0x03AF;
      case 0x038C: return 0x03CC;
      case 0x038E: return 0x03CD;
      case 0x038F: return 0x03CE;
      default: return cp;
    }
  }
  if (cp >= 0x0391 && cp <= 0x03A9 && cp != 0x03A2) return cp + 32;
  if (cp >= 0x0410 && cp <= 0x042F) return cp + 32;
  if (cp >= 0x0400 && cp <= 0x040F) return cp + 80;
  return cp;
}

inline std::string key_space(std::string_view s) {
  auto cps = utf8_decode(s);
  std::size_t lo = 0, hi = cps.size();
  while (lo < hi && is_ws_cp(cps[lo])) ++lo;
  while (hi > lo && is_ws_cp(cps[hi - 1])) --hi;
  std::string out;
  for (std::size_t i = lo; i < hi; ++i) utf8_append(out, cps[i]);
  return out;
}

inline std::string key_lower(std::string_view s) {
  auto cps = utf8_decode(s);
  std::string out;
  out.reserve(s.size());
  for (auto cp : cps) utf8_append(out, cp < 0 ? cp : simple_lower(cp));
  return out;
}

// Trailing "s" dropped iff the entry has at least four characters, not
// counting whitespace markers. The key keeps its markers.
inline std::string key_plural(std::string_view s) {
  auto cps = utf8_decode(s);
  if (cps.empty() || cps.back() != 's') return std::string(s);
  std::size_t n_chars = 0;
  for (auto cp : cps)
    if (!is_ws_cp(cp)) ++n_chars;
  if (n_chars < 4) return std::string(s);
  std::string out;
  for (std::size_t i = 0; i + 1 < cps.size(); ++i) utf8_append(out, cps[i]);
  return out;
}

}  // namespace detail

// Pure key transform behind every deduplication mapping. Inputs are
// marker-normalized surfaces; opaque entries should not be passed here.
inline std::string canonical_key(std::string_view surface, DedupRule rule) {
  switch (rule) {
    case DedupRule::kIdentity:
      return std::string(surface);
    case DedupRule::kSpace:
      return detail::key_space(surface);
    case DedupRule::kLower:
      return detail::key_lower(surface);
    case DedupRule::kPlural:
      return detail::key_plural(surface);
    case DedupRule::kAll:
      return detail::key_plural(detail::key_lower(detail::key_space(surface)));
  }
  return std::string(surface);
}

// Surjective map from subword ids onto canonical symbols. Groups are the
// equivalence classes of canonical_key; eos, opaque entries, and entries
// whose key would be empty stay in singleton groups keyed by their own
// surface. Canonical symbols are key strings and need not be vocabulary
// members.
class DedupMap {
 public:
  DedupMap() = default;
  DedupMap(VocabPtr vocab, DedupRule rule, std::vector<std::string> keys,
           std::vector<std::int32_t> kappa, std::vector<std::uint8_t> prov)
      : vocab_(std::move(vocab)),
        rule_(rule),
        canonical_keys_(std::move(keys)),
        kappa_of_(std::move(kappa)),
        provenance_of_(std::move(prov)) {
    if (kappa_of_.size() != vocab_->size() ||
        provenance_of_.size() != vocab_->size())
      throw std::runtime_error("dedup map: size mismatch with vocabulary");
    members_.resize(canonical_keys_.size());
    for (std::size_t id = 0; id < kappa_of_.size(); ++id) {
      auto g = kappa_of_[id];
      if (g < 0 || g >= static_cast<std::int32_t>(canonical_keys_.size()))
        throw std::runtime_error("dedup map: canonical index out of range");
      members_[g].push_back(static_cast<std::int32_t>(id));
    }
    for (const auto& m : members_)
      if (m.empty())
        throw std::runtime_error("dedup map: empty canonical group");
  }

  const Vocabulary& vocab() const { return *vocab_; }
  VocabPtr vocab_ptr() const { return vocab_; }
  DedupRule rule() const { return rule_; }
  std::size_t vocab_size() const { return kappa_of_.size(); }
  std::size_t canonical_count() const { return canonical_keys_.size(); }
  const std::vector<std::string>& canonical_keys() const {
    return canonical_keys_;
  }
  std::int32_t kappa_of(std::int32_t id) const { return kappa_of_.at(id); }
  std::uint8_t provenance_of(std::int32_t id) const {
    return provenance_of_.at(id);
  }
  const std::vector<std::int32_t>& group_members(std::int32_t g) const {
    return members_.at(g);
  }
  bool is_canonical(std::int32_t id) const {
    return vocab_->surface(id) == canonical_keys_[kappa_of_[id]];
  }
  // Canonical index of eos's singleton group.
  std::int32_t eos_group() const { return kappa_of_.at(vocab_->eos_id()); }

  // Fingerprint of the canonical symbol list; identifies streams written
  // over the canonical alphabet.
  std::uint64_t canonical_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& k : canonical_keys_) {
      h = fnv1a64(k, h);
      h = fnv1a64("\x1f", h);
    }
    h = fnv1a64(std::to_string(eos_group()), h);
    return h;
  }

 private:
  VocabPtr vocab_;
  DedupRule rule_ = DedupRule::kIdentity;
  std::vector<std::string> canonical_keys_;
  std::vector<std::int32_t> kappa_of_;
  std::vector<std::uint8_t> provenance_of_;
  std::vector<std::vector<std::int32_t>> members_;
};

inline DedupMap build_kappa(VocabPtr vocab, DedupRule rule) {
  const auto& v = *vocab;
  const std::size_t n = v.size();
  std::vector<std::string> keys;
  std::vector<std::int32_t> kappa(n, -1);
  std::vector<std::uint8_t> prov(n, 0);

  // Group key namespace: real keys vs forced singletons (eos/opaque/empty).
  std::unordered_map<std::string, std::int32_t> group_of;
  group_of.reserve(n * 2);

  for (std::size_t id = 0; id < n; ++id) {
    const std::string& surface = v.surface(static_cast<int>(id));
    bool forced_singleton = (static_cast<int>(id) == v.eos_id()) ||
                            v.opaque(static_cast<int>(id));
    std::string key;
    std::uint8_t flags = 0;
    if (!forced_singleton) {
      switch (rule) {
        case DedupRule::kIdentity:
          key = surface;
          break;
        case DedupRule::kSpace:
          key = detail::key_space(surface);
          if (key != surface) flags |= kFlagSpace;
          break;
        case DedupRule::kLower:
          key = detail::key_lower(surface);
          if (key != surface) flags |= kFlagLower;
          break;
        case DedupRule::kPlural:
          key = detail::key_plural(surface);
          if (key != surface) flags |= kFlagPlural;
          break;
        case DedupRule::kAll: {
          std::string s1 = detail::key_space(surface);
          if (s1 != surface) flags |= kFlagSpace;
          std::string s2 = detail::key_lower(s1);
          if (s2 != s1) flags |= kFlagLower;
          key = detail::key_plural(s2);
          if (key != s2) flags |= kFlagPlural;
          break;
        }
      }
      if (key.empty()) {  // pure-whitespace entry: keep it unmerged
        forced_singleton = true;
        flags = 0;
      }
    }

    std::string group_key = forced_singleton
                                ? "\x01" + std::to_string(id)
                                : "\x02" + key;
    auto it = group_of.find(group_key);
    if (it == group_of.end()) {
      std::int32_t g = static_cast<std::int32_t>(keys.size());
      group_of.emplace(std::move(group_key), g);
      keys.push_back(forced_singleton ? surface : key);
      kappa[id] = g;
    } else {
      kappa[id] = it->second;
    }
    prov[id] = flags;
  }

  return DedupMap(std::move(vocab), rule, std::move(keys), std::move(kappa),
                  std::move(prov));
}

// Arbitrary partition of the id set into groups (eos must be a
// singleton). Canonical key of each group is its first member's surface.
inline DedupMap build_grouping(VocabPtr vocab,
                               const std::vector<std::vector<std::int32_t>>& groups) {
  const auto n = vocab->size();
  std::vector<std::string> keys;
  std::vector<std::int32_t> kappa(n, -1);
  std::vector<std::uint8_t> prov(n, 0);
  for (const auto& g : groups) {
    if (g.empty()) throw std::runtime_error("grouping: empty group");
    auto gi = static_cast<std::int32_t>(keys.size());
    keys.push_back(vocab->surface(g.front()));
    for (auto id : g) {
      if (kappa.at(id) != -1)
        throw std::runtime_error("grouping: id assigned twice");
      kappa[id] = gi;
      if (id == vocab->eos_id() && g.size() != 1)
        throw std::runtime_error("grouping: eos must stay a singleton");
    }
  }
  for (auto k : kappa)
    if (k == -1) throw std::runtime_error("grouping: id not covered");
  return DedupMap(std::move(vocab), DedupRule::kCustom, std::move(keys),
                  std::move(kappa), std::move(prov));
}

// 1 - |canonical alphabet| / |vocabulary|.
inline double near_duplicate_rate(const DedupMap& map) {
  return 1.0 - static_cast<double>(map.canonical_count()) /
                   static_cast<double>(map.vocab_size());
}

// Synthetic duplication: a seeded subset of the base vocabulary gets a
// primed twin; sampling a token stream then picks the primed form with
// choice_prob per occurrence.
struct DupScheme {
  VocabPtr base_vocab;
  VocabPtr dup_vocab;
  std::vector<std::int32_t> prime_of;   // base id -> primed id, -1 if none
  std::vector<std::int32_t> base_of;    // dup id -> base id
  std::vector<double> choice_prob;      // base id -> p(primed form)
  double fraction = 0.0;
  std::uint64_t seed = 0;

  std::size_t duplicated_count() const {
    std::size_t k = 0;
    for (auto p : prime_of)
      if (p >= 0) ++k;
    return k;
  }
};

struct SyntheticDup {
  DupScheme scheme;
  DedupMap map;  // over the duplicated vocabulary, onto base surfaces
};

inline SyntheticDup build_synthetic_dup(VocabPtr base, double fraction,
                                        double choice_p, std::uint64_t seed) {
  if (fraction < 0.0 || fraction > 1.0)
    throw std::runtime_error("synthetic dup: fraction outside [0,1]");
  if (choice_p < 0.0 || choice_p > 1.0)
    throw std::runtime_error("synthetic dup: choice probability outside [0,1]");

  const auto& v = *base;
  const std::size_t n = v.size();
  std::vector<std::int32_t> candidates;
  candidates.reserve(n - 1);
  for (std::size_t id = 0; id < n; ++id)
    if (static_cast<int>(id) != v.eos_id())
      candidates.push_back(static_cast<std::int32_t>(id));

  auto k = static_cast<std::size_t>(
      std::llround(fraction * static_cast<double>(candidates.size())));
  Rng rng(seed);
  rng.shuffle(candidates);
  candidates.resize(k);
  std::sort(candidates.begin(), candidates.end());

  std::vector<std::string> dup_entries = v.entries();
  std::vector<std::int32_t> prime_of(n, -1);
  std::vector<std::int32_t> base_of(n);
  for (std::size_t i = 0; i < n; ++i) base_of[i] = static_cast<std::int32_t>(i);
  std::unordered_map<std::string, int> taken;
  for (const auto& e : dup_entries) taken.emplace(e, 1);

  for (auto id : candidates) {
    std::string primed = v.surface(id) + "′";
    while (taken.count(primed)) primed += "′";
    taken.emplace(primed, 1);
    prime_of[id] = static_cast<std::int32_t>(dup_entries.size());
    base_of.push_back(id);
    dup_entries.push_back(std::move(primed));
  }

  auto dup_vocab = std::make_shared<Vocabulary>(std::move(dup_entries),
                                                v.eos_id(), v.source_marker());

  // kappa over the duplicated vocabulary: every base id is its own
  // canonical symbol; twins map back to it.
  std::vector<std::string> keys = v.entries();
  std::vector<std::int32_t> kappa(dup_vocab->size());
  std::vector<std::uint8_t> prov(dup_vocab->size(), 0);
  for (std::size_t id = 0; id < dup_vocab->size(); ++id)
    kappa[id] = base_of[id];

  std::vector<double> choice(n, 0.0);
  for (auto id : candidates) choice[id] = choice_p;

  DupScheme scheme{base, dup_vocab, std::move(prime_of), std::move(base_of),
                   std::move(choice), fraction, seed};
  DedupMap map(dup_vocab, DedupRule::kCustom, std::move(keys),
               std::move(kappa), std::move(prov));
  return SyntheticDup{std::move(scheme), std::move(map)};
}

// --------------------------------------------------------------------------
// JSON serialization
// --------------------------------------------------------------------------

inline nlohmann::json dedup_map_to_json(const DedupMap& map) {
  nlohmann::json j;
  j["rule"] = rule_name(map.rule());
  j["vocab_hash"] = hex64(map.vocab().hash());
  j["canonical_keys"] = map.canonical_keys();
  std::vector<std::int32_t> kappa(map.vocab_size());
  std::vector<int> prov(map.vocab_size());
  for (std::size_t id = 0; id < map.vocab_size(); ++id) {
    kappa[id] = map.kappa_of(static_cast<std::int32_t>(id));
    prov[id] = map.provenance_of(static_cast<std::int32_t>(id));
  }
  j["kappa"] = kappa;
  j["provenance"] = prov;
  return j;
}

inline DedupMap dedup_map_from_json(const nlohmann::json& j, VocabPtr vocab) {
  if (j.at("vocab_hash").get<std::string>() != hex64(vocab->hash()))
    throw std::runtime_error("dedup map: vocabulary hash mismatch");
  auto rule = rule_from_name(j.at("rule").get<std::string>());
  if (!rule) throw std::runtime_error("dedup map: unknown rule");
  std::vector<std::uint8_t> prov;
  for (const auto& p : j.at("provenance"))
    prov.push_back(static_cast<std::uint8_t>(p.get<int>()));
  return DedupMap(std::move(vocab), *rule,
                  j.at("canonical_keys").get<std::vector<std::string>>(),
                  j.at("kappa").get<std::vector<std::int32_t>>(),
                  std::move(prov));
}

inline nlohmann::json dup_scheme_to_json(const DupScheme& s) {
  nlohmann::json j;
  j["base_vocab_hash"] = hex64(s.base_vocab->hash());
  j["dup_vocab_hash"] = hex64(s.dup_vocab->hash());
  j["fraction"] = s.fraction;
  j["seed"] = s.seed;
  nlohmann::json pairs = nlohmann::json::array();
  for (std::size_t id = 0; id < s.prime_of.size(); ++id)
    if (s.prime_of[id] >= 0)
      pairs.push_back({{"base", id},
                       {"prime", s.prime_of[id]},
                       {"choice_prob", s.choice_prob[id]}});
  j["pairs"] = pairs;
  return j;
}

inline DupScheme dup_scheme_from_json(const nlohmann::json& j, VocabPtr base,
                                      VocabPtr dup) {
  if (j.at("base_vocab_hash").get<std::string>() != hex64(base->hash()) ||
      j.at("dup_vocab_hash").get<std::string>() != hex64(dup->hash()))
    throw std::runtime_error("dup scheme: vocabulary hash mismatch");
  DupScheme s;
  s.base_vocab = std::move(base);
  s.dup_vocab = std::move(dup);
  s.fraction = j.at("fraction").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.prime_of.assign(s.base_vocab->size(), -1);
  s.choice_prob.assign(s.base_vocab->size(), 0.0);
  s.base_of.resize(s.dup_vocab->size());
  for (std::size_t i = 0; i < s.dup_vocab->size(); ++i)
    s.base_of[i] = static_cast<std::int32_t>(i);
  for (const auto& p : j.at("pairs")) {
    int b = p.at("base").get<int>();
    int pr = p.at("prime").get<int>();
    s.prime_of.at(b) = pr;
    s.base_of.at(pr) = b;
    s.choice_prob.at(b) = p.at("choice_prob").get<double>();
  }
  return s;
}

}  // namespace dupkit
