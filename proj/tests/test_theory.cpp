#include <cmath>
#include <functional>
#include <map>

#include <catch2/catch_amalgamated.hpp>

#include "dupkit/theory.hpp"
#include "dupkit/theory_suite.hpp"

using namespace dupkit;

namespace {

using Seq = std::vector<std::int32_t>;
using SeqList = std::vector<std::pair<Seq, double>>;

// Independent oracle: direct scans over the sequence list, no tries, no
// shared code with exact_quantities.
struct NaiveReport {
  double h_w = 0, h_wbar = 0, h_w_given_wbar = 0, h_kappa = 0;
  double h_cond_leq = 0, h_cond_lt = 0, mi = 0;
};

NaiveReport naive_quantities(const SeqList& seqs,
                             const std::function<std::int32_t(std::int32_t)>& kap) {
  auto prefix_eq = [](const Seq& x, const Seq& w, std::size_t len) {
    if (x.size() < len) return false;
    for (std::size_t i = 0; i < len; ++i)
      if (x[i] != w[i]) return false;
    return true;
  };
  auto kappa_prefix_eq = [&](const Seq& x, const Seq& w, std::size_t len) {
    if (x.size() < len) return false;
    for (std::size_t i = 0; i < len; ++i)
      if (kap(x[i]) != kap(w[i])) return false;
    return true;
  };

  NaiveReport r;
  std::map<Seq, double> pushforward;
  for (const auto& [w, p] : seqs) {
    r.h_w += -p * std::log(p);
    Seq wb;
    for (auto s : w) wb.push_back(kap(s));
    pushforward[wb] += p;
  }
  for (const auto& [wb, p] : pushforward) r.h_wbar += -p * std::log(p);
  for (const auto& [w, p] : seqs) {
    Seq wb;
    for (auto s : w) wb.push_back(kap(s));
    r.h_w_given_wbar += -p * std::log(p / pushforward[wb]);
  }

  for (const auto& [w, p] : seqs) {
    for (std::size_t t = 1; t <= w.size(); ++t) {
      double joint = 0, den_prefix = 0, dmass_leq = 0, dmass_lt = 0;
      for (const auto& [x, q] : seqs) {
        bool pfx = prefix_eq(x, w, t - 1);
        if (pfx) den_prefix += q;
        if (pfx && x.size() >= t && kap(x[t - 1]) == kap(w[t - 1])) joint += q;
        if (kappa_prefix_eq(x, w, t)) dmass_leq += q;
        if (kappa_prefix_eq(x, w, t - 1)) dmass_lt += q;
      }
      r.h_kappa += -p * std::log(joint / den_prefix);
      r.h_cond_leq += -p * std::log(joint / dmass_leq);
      r.h_cond_lt += -p * std::log(den_prefix / dmass_lt);
    }
  }
  r.mi = r.h_cond_lt - r.h_cond_leq;
  return r;
}

void compare_with_naive(const DistSpec& dist, const DedupMap& map,
                        double tol = 1e-10) {
  auto seqs = enumerate_sequences(dist);
  auto naive = naive_quantities(
      seqs, [&](std::int32_t id) { return map.kappa_of(id); });
  auto exact = exact_quantities(dist, map);
  CHECK(exact.h_w == Catch::Approx(naive.h_w).margin(tol));
  CHECK(exact.h_wbar == Catch::Approx(naive.h_wbar).margin(tol));
  CHECK(exact.h_w_given_wbar ==
        Catch::Approx(naive.h_w_given_wbar).margin(tol));
  CHECK(exact.h_kappa == Catch::Approx(naive.h_kappa).margin(tol));
  CHECK(exact.h_cond_leq == Catch::Approx(naive.h_cond_leq).margin(tol));
  CHECK(exact.h_cond_lt == Catch::Approx(naive.h_cond_lt).margin(tol));
  CHECK(exact.mi == Catch::Approx(naive.mi).margin(tol));
}

VocabPtr tiny(std::size_t n) {
  std::vector<std::string> e{"<eos>"};
  for (std::size_t i = 1; i < n; ++i)
    e.push_back(std::string(1, static_cast<char>('a' + i - 1)));
  return std::make_shared<Vocabulary>(std::move(e), 0, Marker::kMetasymbol);
}

}  // namespace

TEST_CASE("deterministic distribution has zero entropies") {
  auto v = tiny(3);
  DistSpec spec;
  spec.vocab = v;
  spec.kind = DistSpec::Kind::kExplicit;
  spec.max_len = 3;
  spec.sequences = {{{1, 2, 0}, 1.0}};
  auto map = build_kappa(v, DedupRule::kIdentity);
  auto r = exact_quantities(spec, map);
  CHECK(r.h_w == Catch::Approx(0.0).margin(1e-15));
  CHECK(r.h_wbar == Catch::Approx(0.0).margin(1e-15));
  CHECK(r.h_kappa == Catch::Approx(0.0).margin(1e-15));
  CHECK(r.mi == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("uniform iid micro space matches hand enumeration") {
  // p(a)=p(b)=p(eos)=1/3 per step, forced absorption at length 3;
  // kappa merges {a,b} into one symbol
  auto v = tiny(3);
  DistSpec spec;
  spec.vocab = v;
  spec.kind = DistSpec::Kind::kExplicit;
  spec.max_len = 3;
  spec.sequences = {
      {{0}, 1.0 / 3},
      {{1, 0}, 1.0 / 9},      {{2, 0}, 1.0 / 9},
      {{1, 1, 0}, 1.0 / 9},   {{1, 2, 0}, 1.0 / 9},
      {{2, 1, 0}, 1.0 / 9},   {{2, 2, 0}, 1.0 / 9},
  };
  auto map = build_grouping(v, {{0}, {1, 2}});
  auto r = exact_quantities(spec, map);

  const double ln2 = std::log(2.0), ln3 = std::log(3.0);
  CHECK(r.h_w == Catch::Approx(5.0 / 3.0 * ln3).epsilon(1e-12));
  CHECK(r.h_w_given_wbar == Catch::Approx(10.0 / 9.0 * ln2).epsilon(1e-12));
  double h_wbar_hand = 1.0 / 3 * ln3 + 2.0 / 9 * std::log(9.0 / 2) +
                       4.0 / 9 * std::log(9.0 / 4);
  CHECK(r.h_wbar == Catch::Approx(h_wbar_hand).epsilon(1e-12));
  // uniform in-group choice is a perfect duplication: MI vanishes
  CHECK(std::abs(r.mi) < 1e-12);
  CHECK(r.h_kappa == Catch::Approx(r.h_wbar).margin(1e-12));
  compare_with_naive(spec, map);
}

TEST_CASE("mid-sequence eos and unnormalized mass are rejected") {
  auto v = tiny(3);
  DistSpec spec;
  spec.vocab = v;
  spec.kind = DistSpec::Kind::kExplicit;
  spec.max_len = 3;
  spec.sequences = {{{1, 0, 0}, 1.0}};
  CHECK_THROWS(enumerate_sequences(spec));
  spec.sequences = {{{1, 0}, 0.5}};
  CHECK_THROWS(enumerate_sequences(spec));
  spec.sequences = {{{1, 1, 1, 0}, 1.0}};
  CHECK_THROWS(enumerate_sequences(spec));  // longer than max_len
}

TEST_CASE("markov chains must absorb within the horizon") {
  auto v = tiny(2);
  DistSpec spec;
  spec.vocab = v;
  spec.kind = DistSpec::Kind::kMarkov;
  spec.max_len = 4;
  spec.initial = {0.0, 1.0};
  spec.transition = {{0, 0}, {0.5, 0.5}};  // geometric tail: never absorbed
  CHECK_THROWS(enumerate_sequences(spec));
}

TEST_CASE("enumeration bound is enforced") {
  auto v = tiny(6);
  DistSpec spec;
  spec.vocab = v;
  spec.kind = DistSpec::Kind::kExplicit;
  spec.max_len = 30;
  spec.sequences = {{{0}, 1.0}};
  CHECK_THROWS(enumerate_sequences(spec));
}

TEST_CASE("perfect duplication: relabeling at choice 1 preserves entropy") {
  Rng rng(31);
  auto base = theory_suite_detail::tiny_vocab(3);
  auto dist = theory_suite_detail::random_explicit(rng, base, 4);
  auto dup = build_synthetic_dup(base, 1.0, 1.0, 5);
  auto expanded = make_perfect_duplication(dist, dup.scheme);
  auto id_base = build_kappa(base, DedupRule::kIdentity);
  auto r_base = exact_quantities(dist, id_base);
  auto r = exact_quantities(expanded, dup.map);
  CHECK(r.h_w == Catch::Approx(r_base.h_w).margin(1e-12));
  CHECK(r.h_wbar == Catch::Approx(r_base.h_w).margin(1e-12));
}

TEST_CASE("perfect duplication: closed-form entropy increase at choice 0.5") {
  Rng rng(32);
  auto base = theory_suite_detail::tiny_vocab(3);
  auto dist = theory_suite_detail::random_explicit(rng, base, 4);
  auto dup = build_synthetic_dup(base, 1.0, 0.5, 5);
  auto expanded = make_perfect_duplication(dist, dup.scheme);
  auto r = exact_quantities(expanded, dup.map);

  double expected_extra = 0;  // ln 2 per duplicable occurrence
  double expected_occ = 0;
  for (const auto& [seq, p] : enumerate_sequences(dist))
    expected_occ += p * static_cast<double>(seq.size() - 1);
  expected_extra = std::log(2.0) * expected_occ;

  auto id_base = build_kappa(base, DedupRule::kIdentity);
  auto r_base = exact_quantities(dist, id_base);
  CHECK(r.h_w == Catch::Approx(r_base.h_w + expected_extra).margin(1e-10));
  // Eq-10-style decomposition and the perfect-duplication identities
  CHECK(r.h_w == Catch::Approx(r.h_wbar + r.h_w_given_wbar).margin(1e-10));
  CHECK(std::abs(r.mi) < 1e-10);
  CHECK(r.h_kappa == Catch::Approx(r.h_wbar).margin(1e-10));
}

TEST_CASE("form annotation without feedback keeps MI at zero") {
  Rng rng(33);
  auto base = theory_suite_detail::tiny_vocab(2);
  DistSpec dist = theory_suite_detail::random_staged_markov(rng, base);
  // two-state chain over {A, eos}; twins picked by parity of position
  auto dup = build_synthetic_dup(base, 1.0, 0.5, 6);
  auto annotated = make_form_annotated_duplication(
      dist, dup.scheme,
      [](int t, std::int32_t, std::int32_t) { return t % 2 == 0 ? 1.0 : 0.0; });
  auto seqs = enumerate_sequences(annotated);
  auto naive = naive_quantities(
      seqs, [&](std::int32_t id) { return dup.map.kappa_of(id); });
  auto r = exact_quantities(annotated, dup.map);
  CHECK(r.mi == Catch::Approx(naive.mi).margin(1e-10));
  CHECK(std::abs(r.mi) < 1e-10);

  // previous-form-dependent annotation is still feedback-free
  auto annotated2 = make_form_annotated_duplication(
      dist, dup.scheme, [&](int, std::int32_t prev, std::int32_t) {
        return prev >= static_cast<std::int32_t>(base->size()) ? 0.9 : 0.2;
      });
  auto r2 = exact_quantities(annotated2, dup.map);
  CHECK(std::abs(r2.mi) < 1e-10);
}

TEST_CASE("context-dependent duplication has strictly positive MI") {
  Rng rng(34);
  auto base = theory_suite_detail::tiny_vocab(3);
  auto dist = theory_suite_detail::random_staged_markov(rng, base);
  auto dup = build_synthetic_dup(base, 1.0, 0.5, 7);
  auto ctx = make_context_dependent_duplication(
      dist, dup.scheme,
      [](std::int32_t, std::int32_t next) { return next == 0 ? 9.0 : 1.0; });
  auto r = exact_quantities(ctx, dup.map);
  CHECK(r.mi > 1e-6);
  CHECK(r.h_kappa < r.h_wbar);
  // Lemma identity still holds
  CHECK(r.h_kappa == Catch::Approx(r.h_wbar - r.mi).margin(1e-10));
  compare_with_naive(ctx, dup.map, 1e-9);

  // degenerate tilt reduces to perfect duplication
  auto flat = make_context_dependent_duplication(
      dist, dup.scheme, [](std::int32_t, std::int32_t) { return 1.0; });
  auto r_flat = exact_quantities(flat, dup.map);
  CHECK(std::abs(r_flat.mi) < 1e-10);
}

TEST_CASE("random instances match the naive oracle") {
  Rng rng(35);
  for (int iter = 0; iter < 8; ++iter) {
    auto vocab = theory_suite_detail::tiny_vocab(2 + rng.uniform_int(3));
    auto dist = iter % 2 == 0
                    ? theory_suite_detail::random_explicit(rng, vocab, 3)
                    : theory_suite_detail::random_staged_markov(rng, vocab);
    auto map = theory_suite_detail::random_grouping(rng, vocab);
    compare_with_naive(dist, map, 1e-9);
  }
}

TEST_CASE("bundled theory suite passes every identity") {
  auto checks = run_theory_suite(60, 99);
  for (const auto& c : checks) {
    INFO(c.name << ": " << c.detail);
    CHECK(c.ok);
  }
}

TEST_CASE("softmax collapse: identical twin rows collapse exactly") {
  Rng rng(36);
  auto base = theory_suite_detail::tiny_vocab(4);
  auto dup = build_synthetic_dup(base, 1.0, 0.5, 8);
  const std::size_t d = 16;
  std::vector<std::vector<double>> rows(base->size(), std::vector<double>(d));
  for (auto& r : rows)
    for (auto& x : r) x = rng.normal();
  std::vector<std::vector<double>> hiddens(200, std::vector<double>(d));
  for (auto& h : hiddens)
    for (auto& x : h) x = rng.normal() * 3.0;
  CHECK(softmax_collapse_check(hiddens, rows) <= 1e-12);

  // partial pairing (an unpaired symbol) genuinely breaks the identity
  std::vector<std::vector<double>> sigma_rows(dup.scheme.dup_vocab->size());
  std::vector<std::vector<std::int32_t>> groups(base->size());
  for (std::size_t i = 0; i < sigma_rows.size(); ++i) {
    auto b = dup.scheme.base_of[static_cast<std::int32_t>(i)];
    sigma_rows[i] = rows[b];
    groups[b].push_back(static_cast<std::int32_t>(i));
  }
  CHECK(softmax_collapse_check(hiddens, sigma_rows, rows, groups) > 1e-3);
}

TEST_CASE("softmax collapse: perturbed twin rows break the identity") {
  Rng rng(37);
  auto base = theory_suite_detail::tiny_vocab(3);
  auto dup = build_synthetic_dup(base, 1.0, 0.5, 9);
  const std::size_t d = 8;
  std::vector<std::vector<double>> base_rows(base->size(),
                                             std::vector<double>(d));
  for (auto& r : base_rows)
    for (auto& x : r) x = rng.normal();

  std::vector<std::vector<double>> sigma_rows(dup.scheme.dup_vocab->size());
  std::vector<std::vector<std::int32_t>> groups(base->size());
  for (std::size_t i = 0; i < sigma_rows.size(); ++i) {
    auto b = dup.scheme.base_of[static_cast<std::int32_t>(i)];
    sigma_rows[i] = base_rows[b];
    groups[b].push_back(static_cast<std::int32_t>(i));
    if (static_cast<std::int32_t>(i) != b) sigma_rows[i][0] += 1e-3;
  }
  std::vector<std::vector<double>> hiddens(50, std::vector<double>(d));
  for (auto& h : hiddens)
    for (auto& x : h) x = rng.normal();
  CHECK(softmax_collapse_check(hiddens, sigma_rows, base_rows, groups) > 0.0);
}

TEST_CASE("softmax collapse: single twin pair splits mass evenly") {
  // vocab {w, w'} with identical rows: each form gets probability 0.5
  std::vector<std::vector<double>> sigma_rows = {{1.0, -2.0}, {1.0, -2.0}};
  std::vector<std::vector<double>> dedup_rows = {{1.0, -2.0}};
  std::vector<std::vector<std::int32_t>> groups = {{0, 1}};
  std::vector<std::vector<double>> hiddens = {{0.3, 0.9}, {-4.0, 2.0}};
  CHECK(softmax_collapse_check(hiddens, sigma_rows, dedup_rows, groups) <=
        1e-15);
  auto p = softmax({1.0, 1.0});
  CHECK(p[0] == Catch::Approx(0.5));
}

TEST_CASE("dist spec json round trip") {
  Rng rng(38);
  auto vocab = theory_suite_detail::tiny_vocab(3);
  auto dist = theory_suite_detail::random_explicit(rng, vocab, 3);
  auto j = dist_spec_to_json(dist);
  auto dist2 = dist_spec_from_json(j);
  auto map = build_kappa(vocab, DedupRule::kIdentity);
  auto map2 = build_kappa(dist2.vocab, DedupRule::kIdentity);
  auto r1 = exact_quantities(dist, map);
  auto r2 = exact_quantities(dist2, map2);
  CHECK(r1.h_w == Catch::Approx(r2.h_w).margin(1e-15));

  auto markov = theory_suite_detail::random_staged_markov(rng, vocab);
  auto m2 = dist_spec_from_json(dist_spec_to_json(markov));
  CHECK(m2.transition == markov.transition);
  CHECK(m2.initial == markov.initial);
}
