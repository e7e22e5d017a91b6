#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dupkit/kappa.hpp"
#include "dupkit/rng.hpp"
#include "dupkit/theory.hpp"
#include "dupkit/vocab.hpp"

namespace dupkit {

// Randomized enumerable instances for checking the entropy identities:
// generic (distribution, grouping) pairs, perfect-duplication instances,
// and context-dependent ones. Everything is seed-driven.

enum class TheoryFamily { kGeneric, kPerfectDup, kContextDep };

struct TheoryCheck {
  std::string name;
  TheoryFamily family = TheoryFamily::kGeneric;
  ExactReport report;
  double chain_rule_residual = 0;  // H(W) - (H(Wbar) + H(W|Wbar))
  double lemma_residual = 0;       // H_kappa - (H(Wbar) - MI)
  bool ok = false;
  std::string detail;
};

struct TheoryTolerances {
  double identity = 1e-9;     // chain rule / lemma residuals
  double mi_zero = 1e-10;     // |MI| for perfect duplication
  double mi_positive = 1e-6;  // MI floor for context-dependent instances
};

namespace theory_suite_detail {

inline VocabPtr tiny_vocab(std::size_t n) {
  std::vector<std::string> entries{"<eos>"};
  for (std::size_t i = 1; i < n; ++i)
    entries.push_back(std::string(1, static_cast<char>('a' + i - 1)));
  return std::make_shared<Vocabulary>(std::move(entries), 0,
                                      Marker::kMetasymbol);
}

// Random explicit distribution with full enumeration of the sequence
// space; residual mass after normalization lands on the largest entry so
// the total is exact to the last ulp.
inline DistSpec random_explicit(Rng& rng, VocabPtr vocab, int max_len) {
  DistSpec spec;
  spec.vocab = vocab;
  spec.kind = DistSpec::Kind::kExplicit;
  spec.max_len = max_len;
  const auto eos = vocab->eos_id();
  const auto n = static_cast<std::int32_t>(vocab->size());

  std::vector<std::int32_t> prefix;
  std::function<void(int)> gen = [&](int depth) {
    {
      auto seq = prefix;
      seq.push_back(eos);
      double u = rng.uniform01();
      double w = u < 0.25 ? 0.0 : u * u;
      if (w > 0) spec.sequences.emplace_back(std::move(seq), w);
    }
    if (depth + 2 > max_len) return;
    for (std::int32_t s = 0; s < n; ++s) {
      if (s == eos) continue;
      prefix.push_back(s);
      gen(depth + 1);
      prefix.pop_back();
    }
  };
  gen(0);
  if (spec.sequences.empty())
    spec.sequences.emplace_back(std::vector<std::int32_t>{eos}, 1.0);

  KahanSum total;
  for (auto& [seq, p] : spec.sequences) total.add(p);
  std::size_t largest = 0;
  for (auto& [seq, p] : spec.sequences) p /= total.value();
  KahanSum check;
  for (std::size_t i = 0; i < spec.sequences.size(); ++i) {
    check.add(spec.sequences[i].second);
    if (spec.sequences[i].second > spec.sequences[largest].second) largest = i;
  }
  spec.sequences[largest].second += 1.0 - check.value();
  return spec;
}

// Staged chain: symbol i only reaches symbols > i or eos, so every path
// absorbs within |vocab| steps.
inline DistSpec random_staged_markov(Rng& rng, VocabPtr vocab) {
  DistSpec spec;
  spec.vocab = vocab;
  spec.kind = DistSpec::Kind::kMarkov;
  const auto n = vocab->size();
  const auto eos = static_cast<std::size_t>(vocab->eos_id());
  spec.max_len = static_cast<int>(n);

  auto normalize_exact = [&](std::vector<double>& row) {
    KahanSum s;
    for (auto v : row) s.add(v);
    for (auto& v : row) v /= s.value();
    KahanSum check;
    for (auto v : row) check.add(v);
    row[eos] += 1.0 - check.value();
  };

  spec.initial.assign(n, 0.0);
  for (std::size_t a = 0; a < n; ++a)
    spec.initial[a] = 0.05 + rng.uniform01();
  normalize_exact(spec.initial);

  spec.transition.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t a = 0; a < n; ++a) {
    if (a == eos) continue;
    auto& row = spec.transition[a];
    row[eos] = 0.1 + rng.uniform01();
    for (std::size_t b = a + 1; b < n; ++b) row[b] = rng.uniform01();
    normalize_exact(row);
  }
  return spec;
}

inline DedupMap random_grouping(Rng& rng, VocabPtr vocab) {
  const auto n = vocab->size();
  std::vector<std::int32_t> ids;
  for (std::size_t i = 0; i < n; ++i)
    if (static_cast<int>(i) != vocab->eos_id())
      ids.push_back(static_cast<std::int32_t>(i));
  rng.shuffle(ids);
  std::vector<std::vector<std::int32_t>> groups;
  groups.push_back({static_cast<std::int32_t>(vocab->eos_id())});
  std::size_t i = 0;
  while (i < ids.size()) {
    auto take = 1 + rng.uniform_int(std::min<std::uint64_t>(3, ids.size() - i));
    groups.emplace_back(ids.begin() + i, ids.begin() + i + take);
    i += take;
  }
  return build_grouping(vocab, groups);
}

}  // namespace theory_suite_detail

// One generic instance: random distribution + random grouping.
inline TheoryCheck check_instance(const DistSpec& dist, const DedupMap& map,
                                  TheoryFamily family, std::string name,
                                  const TheoryTolerances& tol) {
  TheoryCheck c;
  c.name = std::move(name);
  c.family = family;
  c.report = exact_quantities(dist, map);
  const auto& r = c.report;
  c.chain_rule_residual = r.h_w - (r.h_wbar + r.h_w_given_wbar);
  c.lemma_residual = r.h_kappa - (r.h_wbar - r.mi);
  c.ok = true;

  auto fail = [&](const std::string& why) {
    c.ok = false;
    c.detail += (c.detail.empty() ? "" : "; ") + why;
  };
  if (std::abs(c.chain_rule_residual) > tol.identity)
    fail("chain rule residual " + std::to_string(c.chain_rule_residual));
  if (std::abs(c.lemma_residual) > tol.identity)
    fail("lemma residual " + std::to_string(c.lemma_residual));
  if (r.mi < -tol.mi_zero) fail("negative MI " + std::to_string(r.mi));
  if (r.h_wbar > r.h_w + tol.identity)
    fail("data processing violated: H(Wbar) > H(W)");
  if (family == TheoryFamily::kPerfectDup) {
    if (std::abs(r.mi) > tol.mi_zero)
      fail("perfect duplication MI " + std::to_string(r.mi));
    if (std::abs(r.h_kappa - r.h_wbar) > tol.mi_zero)
      fail("H_kappa != H(Wbar) under perfect duplication");
  }
  if (family == TheoryFamily::kContextDep) {
    if (r.mi <= tol.mi_positive)
      fail("context-dependent MI not positive: " + std::to_string(r.mi));
    if (r.h_kappa >= r.h_wbar)
      fail("H_kappa not strictly below H(Wbar)");
  }
  return c;
}

// The bundled verification suite: >= n_instances randomized instances
// split across the three families, |vocab| <= 6, max_len <= 6.
inline std::vector<TheoryCheck> run_theory_suite(
    std::size_t n_instances = 120, std::uint64_t seed = 20240901,
    const TheoryTolerances& tol = {}) {
  using namespace theory_suite_detail;
  Rng rng(seed);
  std::vector<TheoryCheck> checks;

  while (checks.size() < n_instances) {
    std::size_t i = checks.size();
    switch (i % 4) {
      case 0: {  // generic explicit
        auto vocab = tiny_vocab(2 + rng.uniform_int(5));
        int max_len = vocab->size() > 4 ? 4 : 3 + static_cast<int>(rng.uniform_int(3));
        auto dist = random_explicit(rng, vocab, max_len);
        auto map = random_grouping(rng, vocab);
        checks.push_back(check_instance(dist, map, TheoryFamily::kGeneric,
                                        "explicit-" + std::to_string(i), tol));
        break;
      }
      case 1: {  // generic markov
        auto vocab = tiny_vocab(3 + rng.uniform_int(4));
        auto dist = random_staged_markov(rng, vocab);
        auto map = random_grouping(rng, vocab);
        checks.push_back(check_instance(dist, map, TheoryFamily::kGeneric,
                                        "markov-" + std::to_string(i), tol));
        break;
      }
      case 2: {  // perfect duplication
        auto base = tiny_vocab(2 + rng.uniform_int(2));
        double fraction = rng.uniform01() < 0.5 ? 1.0 : 0.5;
        double choice = 0.1 + 0.8 * rng.uniform01();
        auto dup = build_synthetic_dup(base, fraction, choice, rng.next_u64());
        auto dist = rng.uniform01() < 0.5
                        ? random_explicit(rng, base, 4)
                        : random_staged_markov(rng, base);
        auto expanded = make_perfect_duplication(dist, dup.scheme);
        checks.push_back(check_instance(expanded, dup.map,
                                        TheoryFamily::kPerfectDup,
                                        "perfect-" + std::to_string(i), tol));
        break;
      }
      case 3: {  // context-dependent duplication
        auto base = tiny_vocab(3);
        auto dup = build_synthetic_dup(base, 1.0, 0.5, rng.next_u64());
        auto dist = random_staged_markov(rng, base);
        auto eos = static_cast<std::int32_t>(base->eos_id());
        auto expanded = make_context_dependent_duplication(
            dist, dup.scheme, [eos](std::int32_t, std::int32_t next) {
              return next == eos ? 9.0 : 1.0;
            });
        checks.push_back(check_instance(expanded, dup.map,
                                        TheoryFamily::kContextDep,
                                        "context-" + std::to_string(i), tol));
        break;
      }
    }
  }
  return checks;
}

}  // namespace dupkit
