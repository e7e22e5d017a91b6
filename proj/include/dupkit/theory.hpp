#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dupkit/common.hpp"
#include "dupkit/kappa.hpp"
#include "dupkit/vocab.hpp"

namespace dupkit {

// Exactly enumerable distribution over eos-terminated sequences of
// length <= max_len. Mid-sequence eos carries zero probability by
// construction of the sequence space.
struct DistSpec {
  enum class Kind { kExplicit, kMarkov };

  VocabPtr vocab;
  Kind kind = Kind::kExplicit;
  int max_len = 0;

  // explicit: complete sequences (last symbol eos) with their mass
  std::vector<std::pair<std::vector<std::int32_t>, double>> sequences;

  // markov: stationary chain with absorbing eos; must be fully absorbed
  // within max_len
  std::vector<double> initial;
  std::vector<std::vector<double>> transition;
};

struct ExactReport {
  double h_w = 0;             // H(W), sequence entropy
  double h_wbar = 0;          // H(W-bar), pushforward entropy
  double h_w_given_wbar = 0;  // H(W | W-bar)
  double h_kappa = 0;         // projected entropy
  double h_cond_leq = 0;      // H(W_<T | Wbar_<=T)
  double h_cond_lt = 0;       // H(W_<T | Wbar_<T)
  double mi = 0;              // time-dependent MI, h_cond_lt - h_cond_leq
};

namespace theory_detail {

constexpr double kMassTolerance = 1e-12;
constexpr std::uint64_t kEnumerationBound = 10'000'000;

inline void check_enumeration_bound(std::size_t n_symbols, int max_len) {
  double states = 1;
  for (int i = 0; i < max_len; ++i) {
    states *= static_cast<double>(n_symbols);
    if (states > static_cast<double>(kEnumerationBound))
      throw std::runtime_error("distspec: |vocab|^max_len exceeds enumeration bound");
  }
}

// Prefix trie; node 0 is the root. subtree[n] carries the total mass of
// complete sequences below (or at) the node, complete[n] the mass of the
// sequence that ends exactly there.
struct Trie {
  std::size_t n_symbols;
  std::vector<double> subtree{0.0};
  std::vector<double> complete{0.0};
  std::unordered_map<std::uint64_t, std::uint32_t> child_of;

  explicit Trie(std::size_t n) : n_symbols(n) {}

  std::uint64_t key(std::uint32_t node, std::int32_t sym) const {
    return static_cast<std::uint64_t>(node) * n_symbols +
           static_cast<std::uint64_t>(sym);
  }

  std::int64_t child(std::uint32_t node, std::int32_t sym) const {
    auto it = child_of.find(key(node, sym));
    return it == child_of.end() ? -1 : static_cast<std::int64_t>(it->second);
  }

  std::uint32_t ensure_child(std::uint32_t node, std::int32_t sym) {
    auto k = key(node, sym);
    auto it = child_of.find(k);
    if (it != child_of.end()) return it->second;
    auto id = static_cast<std::uint32_t>(subtree.size());
    subtree.push_back(0.0);
    complete.push_back(0.0);
    child_of.emplace(k, id);
    return id;
  }

  double subtree_mass(std::int64_t node) const {
    return node < 0 ? 0.0 : subtree[static_cast<std::size_t>(node)];
  }

  template <class Seq>
  void insert(const Seq& seq, double p) {
    std::uint32_t node = 0;
    subtree[0] += p;
    for (auto sym : seq) {
      node = ensure_child(node, sym);
      subtree[node] += p;
    }
    complete[node] += p;
  }
};

}  // namespace theory_detail

// Expands the spec into its complete sequence list. Validates total mass,
// termination, and the enumeration bound.
inline std::vector<std::pair<std::vector<std::int32_t>, double>>
enumerate_sequences(const DistSpec& spec) {
  const auto& v = *spec.vocab;
  const auto eos = v.eos_id();
  theory_detail::check_enumeration_bound(v.size(), spec.max_len);

  std::vector<std::pair<std::vector<std::int32_t>, double>> out;
  dupkit::KahanSum mass;

  if (spec.kind == DistSpec::Kind::kExplicit) {
    for (const auto& [seq, p] : spec.sequences) {
      if (p < 0) throw std::runtime_error("distspec: negative probability");
      if (p == 0) continue;
      if (seq.empty() || seq.back() != eos)
        throw std::runtime_error("distspec: sequence must end with eos");
      if (static_cast<int>(seq.size()) > spec.max_len)
        throw std::runtime_error("distspec: sequence longer than max_len");
      for (std::size_t t = 0; t + 1 < seq.size(); ++t)
        if (seq[t] == eos)
          throw std::runtime_error("distspec: mid-sequence eos has zero mass");
      for (auto s : seq)
        if (s < 0 || s >= static_cast<std::int32_t>(v.size()))
          throw std::runtime_error("distspec: symbol out of range");
      out.emplace_back(seq, p);
      mass.add(p);
    }
  } else {
    if (spec.initial.size() != v.size() || spec.transition.size() != v.size())
      throw std::runtime_error("distspec: markov matrices must match vocab size");
    double leftover = 0.0;
    std::vector<std::int32_t> prefix;
    std::function<void(double, int)> dfs = [&](double p, int prev) {
      if (p == 0.0) return;
      const auto& row = prev < 0 ? spec.initial : spec.transition[prev];
      for (std::size_t a = 0; a < v.size(); ++a) {
        double q = p * row[a];
        if (q == 0.0) continue;
        if (static_cast<std::int32_t>(a) == eos) {
          auto seq = prefix;
          seq.push_back(eos);
          out.emplace_back(std::move(seq), q);
          mass.add(q);
        } else if (static_cast<int>(prefix.size()) + 2 <= spec.max_len) {
          prefix.push_back(static_cast<std::int32_t>(a));
          dfs(q, static_cast<int>(a));
          prefix.pop_back();
        } else {
          leftover += q;  // non-eos continuation past the horizon
        }
      }
    };
    dfs(1.0, -1);
    if (leftover > theory_detail::kMassTolerance)
      throw std::runtime_error(
          "distspec: markov chain not absorbed within max_len (leftover mass " +
          std::to_string(leftover) + ")");
  }

  if (std::abs(mass.value() - 1.0) > theory_detail::kMassTolerance)
    throw std::runtime_error("distspec: probabilities sum to " +
                             std::to_string(mass.value()) + ", not 1");
  return out;
}

// Everything the appendix identities talk about, computed by exhaustive
// enumeration: sequence entropies, the pushforward, the projected
// entropy, and the two time-dependent conditional entropies whose
// difference is the mutual information.
inline ExactReport exact_quantities(const DistSpec& spec, const DedupMap& map) {
  if (map.vocab().hash() != spec.vocab->hash())
    throw std::runtime_error("exact_quantities: map/vocab mismatch");

  auto sequences = enumerate_sequences(spec);

  theory_detail::Trie sigma(spec.vocab->size());
  theory_detail::Trie dedup(map.canonical_count());
  std::vector<std::int32_t> dseq;
  for (const auto& [seq, p] : sequences) {
    sigma.insert(seq, p);
    dseq.clear();
    for (auto s : seq) dseq.push_back(map.kappa_of(s));
    dedup.insert(dseq, p);
  }

  KahanSum h_w, h_wbar, h_cond, h_kappa, h_leq, h_lt;

  for (const auto& [seq, p] : sequences)
    h_w.add(-p * std::log(p));

  // distinct dedup sequences live at nodes with complete mass
  for (std::size_t n = 0; n < dedup.complete.size(); ++n)
    if (dedup.complete[n] > 0)
      h_wbar.add(-dedup.complete[n] * std::log(dedup.complete[n]));

  for (const auto& [seq, p] : sequences) {
    // p(w | wbar) = p(w) / pbar(kappa(w))
    std::uint32_t dn = 0;
    for (auto s : seq)
      dn = static_cast<std::uint32_t>(dedup.child(dn, map.kappa_of(s)));
    h_cond.add(-p * std::log(p / dedup.complete[dn]));

    std::uint32_t node = 0, dnode = 0;
    KahanSum kappa_terms, leq_terms, lt_terms;
    for (auto sym : seq) {
      auto g = map.kappa_of(sym);
      double joint = 0.0;
      for (auto member : map.group_members(g))
        joint += sigma.subtree_mass(sigma.child(node, member));
      double prefix_mass = sigma.subtree[node];
      auto dnext = dedup.child(dnode, g);
      double dmass_next = dedup.subtree_mass(dnext);
      double dmass_here = dedup.subtree[dnode];

      kappa_terms.add(std::log(prefix_mass / joint));  // -log p_kappa(g | w_<t)
      leq_terms.add(std::log(dmass_next / joint));     // -log p(w_<t | wbar_<=t)
      lt_terms.add(std::log(dmass_here / prefix_mass));  // -log p(w_<t | wbar_<t)

      node = static_cast<std::uint32_t>(sigma.child(node, sym));
      dnode = static_cast<std::uint32_t>(dnext);
    }
    h_kappa.add(p * kappa_terms.value());
    h_leq.add(p * leq_terms.value());
    h_lt.add(p * lt_terms.value());
  }

  ExactReport r;
  r.h_w = h_w.value();
  r.h_wbar = h_wbar.value();
  r.h_w_given_wbar = h_cond.value();
  r.h_kappa = h_kappa.value();
  r.h_cond_leq = h_leq.value();
  r.h_cond_lt = h_lt.value();
  r.mi = r.h_cond_lt - r.h_cond_leq;
  return r;
}

// p(w) = prod_t p(wbar_t | wbar_<t) * p(w_t | wbar_t): every occurrence
// of a duplicated symbol independently picks its form.
inline DistSpec make_perfect_duplication(const DistSpec& base,
                                         const DupScheme& scheme) {
  if (base.vocab->hash() != scheme.base_vocab->hash())
    throw std::runtime_error("perfect duplication: base vocab mismatch");
  auto sequences = enumerate_sequences(base);

  DistSpec out;
  out.vocab = scheme.dup_vocab;
  out.kind = DistSpec::Kind::kExplicit;
  out.max_len = base.max_len;

  std::vector<std::int32_t> cur;
  std::function<void(const std::vector<std::int32_t>&, std::size_t, double)>
      expand = [&](const std::vector<std::int32_t>& seq, std::size_t t,
                   double p) {
        if (p == 0.0) return;
        if (t == seq.size()) {
          out.sequences.emplace_back(cur, p);
          if (out.sequences.size() > theory_detail::kEnumerationBound)
            throw std::runtime_error("perfect duplication: expansion too large");
          return;
        }
        auto base_id = seq[t];
        auto primed = scheme.prime_of[base_id];
        double cp = scheme.choice_prob[base_id];
        if (primed >= 0 && cp > 0.0) {
          cur.push_back(primed);
          expand(seq, t + 1, p * cp);
          cur.pop_back();
        }
        if (primed < 0 || cp < 1.0) {
          cur.push_back(base_id);
          expand(seq, t + 1, p * (primed >= 0 ? 1.0 - cp : 1.0));
          cur.pop_back();
        }
      };
  for (const auto& [seq, p] : sequences) expand(seq, 0, p);
  return out;
}

// Form annotation conditioned on position or the previous realized form.
// The canonical process is drawn first and forms are filled in afterwards,
// so the next canonical symbol is conditionally independent of past forms
// given past canonicals: the time-dependent MI of such distributions is
// exactly zero. Kept as the negative control for the context-dependent
// construction below. chooser(t, prev_sigma_id, base_id) returns the
// primed-form probability at position t (1-based; prev_sigma_id is -1 at
// t = 1).
using TwinChooser = std::function<double(int, std::int32_t, std::int32_t)>;

inline DistSpec make_form_annotated_duplication(const DistSpec& base,
                                                const DupScheme& scheme,
                                                const TwinChooser& chooser) {
  if (base.vocab->hash() != scheme.base_vocab->hash())
    throw std::runtime_error("context duplication: base vocab mismatch");
  auto sequences = enumerate_sequences(base);

  DistSpec out;
  out.vocab = scheme.dup_vocab;
  out.kind = DistSpec::Kind::kExplicit;
  out.max_len = base.max_len;

  std::vector<std::int32_t> cur;
  std::function<void(const std::vector<std::int32_t>&, std::size_t, double)>
      expand = [&](const std::vector<std::int32_t>& seq, std::size_t t,
                   double p) {
        if (p == 0.0) return;
        if (t == seq.size()) {
          out.sequences.emplace_back(cur, p);
          if (out.sequences.size() > theory_detail::kEnumerationBound)
            throw std::runtime_error("context duplication: expansion too large");
          return;
        }
        auto base_id = seq[t];
        auto primed = scheme.prime_of[base_id];
        std::int32_t prev = cur.empty() ? -1 : cur.back();
        double cp = primed >= 0
                        ? chooser(static_cast<int>(t) + 1, prev, base_id)
                        : 0.0;
        if (cp < 0.0 || cp > 1.0)
          throw std::runtime_error("context duplication: chooser outside [0,1]");
        if (primed >= 0 && cp > 0.0) {
          cur.push_back(primed);
          expand(seq, t + 1, p * cp);
          cur.pop_back();
        }
        if (cp < 1.0) {
          cur.push_back(base_id);
          expand(seq, t + 1, p * (1.0 - cp));
          cur.pop_back();
        }
      };
  for (const auto& [seq, p] : sequences) expand(seq, 0, p);
  return out;
}

// Genuinely context-dependent duplication: the realized form feeds back
// into the next canonical symbol. From a primed form, the base chain's
// transition row is reweighted by tilt(prev_canonical, next_canonical)
// and renormalized; from an unprimed form the row is untouched. Support
// is unchanged, so absorption within max_len carries over from the base
// chain. A non-constant tilt on a reachable duplicated symbol makes past
// forms informative about the next canonical symbol, which is what makes
// the time-dependent MI strictly positive and the projected entropy drop
// below the pushforward entropy.
using TransitionTilt = std::function<double(std::int32_t, std::int32_t)>;

inline DistSpec make_context_dependent_duplication(const DistSpec& base,
                                                   const DupScheme& scheme,
                                                   const TransitionTilt& tilt) {
  if (base.vocab->hash() != scheme.base_vocab->hash())
    throw std::runtime_error("context duplication: base vocab mismatch");
  if (base.kind != DistSpec::Kind::kMarkov)
    throw std::runtime_error(
        "context duplication: base distribution must be a markov spec");

  const auto n_base = scheme.base_vocab->size();
  const auto n_dup = scheme.dup_vocab->size();
  const auto eos = scheme.base_vocab->eos_id();

  DistSpec out;
  out.vocab = scheme.dup_vocab;
  out.kind = DistSpec::Kind::kMarkov;
  out.max_len = base.max_len;
  out.initial.assign(n_dup, 0.0);
  out.transition.assign(n_dup, std::vector<double>(n_dup, 0.0));

  // split canonical mass between the two forms of each duplicated symbol
  auto split_into = [&](std::vector<double>& row,
                        const std::vector<double>& canonical_row) {
    for (std::size_t c = 0; c < n_base; ++c) {
      double p = canonical_row[c];
      if (p == 0.0) continue;
      auto primed = scheme.prime_of[static_cast<std::int32_t>(c)];
      double cp = primed >= 0 ? scheme.choice_prob[c] : 0.0;
      row[c] += p * (1.0 - cp);
      if (primed >= 0) row[primed] += p * cp;
    }
  };

  split_into(out.initial, base.initial);

  std::vector<double> tilted(n_base);
  for (std::size_t f = 0; f < n_dup; ++f) {
    auto b = scheme.base_of[static_cast<std::int32_t>(f)];
    if (b == eos) continue;  // absorbing
    bool primed_form = static_cast<std::int32_t>(f) != b;
    const auto& row = base.transition[b];
    if (!primed_form) {
      split_into(out.transition[f], row);
      continue;
    }
    double z = 0.0;
    for (std::size_t c = 0; c < n_base; ++c) {
      double w = row[c] > 0.0 ? tilt(b, static_cast<std::int32_t>(c)) : 0.0;
      if (w < 0.0)
        throw std::runtime_error("context duplication: negative tilt weight");
      tilted[c] = row[c] * w;
      z += tilted[c];
    }
    if (z <= 0.0)
      throw std::runtime_error("context duplication: tilt wiped out a row");
    for (auto& w : tilted) w /= z;
    split_into(out.transition[f], tilted);
  }
  return out;
}

// --------------------------------------------------------------------------
// Softmax collapse (twin rows identical => twin-summed softmax equals the
// deduplicated softmax)
// --------------------------------------------------------------------------

inline std::vector<double> softmax(const std::vector<double>& logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

// groups[g] lists the sigma rows mapping to canonical g. Returns the
// largest |sum of twin probabilities - dedup probability| over all
// hidden states and canonical symbols.
inline double softmax_collapse_check(
    const std::vector<std::vector<double>>& hiddens,
    const std::vector<std::vector<double>>& sigma_rows,
    const std::vector<std::vector<double>>& dedup_rows,
    const std::vector<std::vector<std::int32_t>>& groups) {
  auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
  };
  double worst = 0.0;
  for (const auto& h : hiddens) {
    std::vector<double> sigma_logits(sigma_rows.size());
    for (std::size_t i = 0; i < sigma_rows.size(); ++i)
      sigma_logits[i] = dot(sigma_rows[i], h);
    std::vector<double> dedup_logits(dedup_rows.size());
    for (std::size_t g = 0; g < dedup_rows.size(); ++g)
      dedup_logits[g] = dot(dedup_rows[g], h);
    auto ps = softmax(sigma_logits);
    auto pd = softmax(dedup_logits);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      double sum = 0.0;
      for (auto i : groups[g]) sum += ps[i];
      worst = std::max(worst, std::abs(sum - pd[g]));
    }
  }
  return worst;
}

// Convenience wrapper for the fully paired case: every base row gets a
// twin with the identical embedding. Full pairing is what makes the
// denominators cancel; with unpaired symbols in the mix the identity is
// genuinely false, which the generic overload above will report.
inline double softmax_collapse_check(
    const std::vector<std::vector<double>>& hiddens,
    const std::vector<std::vector<double>>& base_rows) {
  const auto n = base_rows.size();
  std::vector<std::vector<double>> sigma_rows;
  sigma_rows.reserve(2 * n);
  std::vector<std::vector<std::int32_t>> groups(n);
  for (std::size_t i = 0; i < n; ++i) {
    groups[i] = {static_cast<std::int32_t>(i),
                 static_cast<std::int32_t>(n + i)};
    sigma_rows.push_back(base_rows[i]);
  }
  for (std::size_t i = 0; i < n; ++i) sigma_rows.push_back(base_rows[i]);
  return softmax_collapse_check(hiddens, sigma_rows, base_rows, groups);
}

// --------------------------------------------------------------------------
// JSON serialization
// --------------------------------------------------------------------------

inline nlohmann::json dist_spec_to_json(const DistSpec& spec) {
  nlohmann::json j;
  j["vocab"] = spec.vocab->entries();
  j["eos"] = spec.vocab->eos_id();
  j["max_len"] = spec.max_len;
  if (spec.kind == DistSpec::Kind::kExplicit) {
    j["kind"] = "explicit";
    auto seqs = nlohmann::json::array();
    for (const auto& [seq, p] : spec.sequences)
      seqs.push_back({{"seq", seq}, {"prob", p}});
    j["sequences"] = seqs;
  } else {
    j["kind"] = "markov";
    j["initial"] = spec.initial;
    j["transition"] = spec.transition;
  }
  return j;
}

inline DistSpec dist_spec_from_json(const nlohmann::json& j) {
  DistSpec spec;
  auto entries = j.at("vocab").get<std::vector<std::string>>();
  spec.vocab = std::make_shared<Vocabulary>(std::move(entries),
                                            j.at("eos").get<int>(),
                                            Marker::kMetasymbol);
  spec.max_len = j.at("max_len").get<int>();
  auto kind = j.at("kind").get<std::string>();
  if (kind == "explicit") {
    spec.kind = DistSpec::Kind::kExplicit;
    for (const auto& e : j.at("sequences"))
      spec.sequences.emplace_back(
          e.at("seq").get<std::vector<std::int32_t>>(),
          e.at("prob").get<double>());
  } else if (kind == "markov") {
    spec.kind = DistSpec::Kind::kMarkov;
    spec.initial = j.at("initial").get<std::vector<double>>();
    spec.transition =
        j.at("transition").get<std::vector<std::vector<double>>>();
  } else {
    throw std::runtime_error("distspec: unknown kind " + kind);
  }
  return spec;
}

inline nlohmann::json exact_report_to_json(const ExactReport& r) {
  return nlohmann::json{{"h_w", r.h_w},
                        {"h_wbar", r.h_wbar},
                        {"h_w_given_wbar", r.h_w_given_wbar},
                        {"h_kappa", r.h_kappa},
                        {"h_cond_leq", r.h_cond_leq},
                        {"h_cond_lt", r.h_cond_lt},
                        {"mi", r.mi}};
}

}  // namespace dupkit
