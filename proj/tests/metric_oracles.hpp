#pragma once

// Test-only brute-force recounts for the evaluation metrics, written from the
// definitions with set arithmetic rather than running counters.

#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <vector>

#include "idk/eval.hpp"

namespace oracle {

enum class AbstainMode { Mixed, AllAbstain, NoAbstain };

/// Random aligned (base, tuned) outcome sets over `n` facts. Base outcomes
/// never abstain. Predictions are drawn from a small vocabulary so that
/// repeated wrong answers occur often.
inline std::pair<std::vector<idk::CompletionOutcome>, std::vector<idk::CompletionOutcome>>
random_outcome_sets(std::mt19937_64& rng, std::size_t n, AbstainMode mode) {
  std::uniform_int_distribution<idk::TokenId> tok(0, 5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double p_abstain = u(rng);
  std::vector<idk::CompletionOutcome> base, tuned;
  for (std::size_t i = 0; i < n; ++i) {
    idk::CompletionOutcome b, t;
    b.fact_id = t.fact_id = static_cast<std::uint32_t>(i);
    b.gold = t.gold = tok(rng);
    b.predicted = tok(rng);
    b.correct = *b.predicted == b.gold;
    b.max_prob = u(rng);
    const bool abstain = mode == AbstainMode::AllAbstain ||
                         (mode == AbstainMode::Mixed && u(rng) < p_abstain);
    if (abstain) {
      t.abstained = true;
    } else {
      t.predicted = u(rng) < 0.5 ? *b.predicted : tok(rng);
      t.correct = *t.predicted == t.gold;
    }
    t.max_prob = u(rng);
    base.push_back(b);
    tuned.push_back(t);
  }
  return {base, tuned};
}

/// Exact non-negative rational, enough for the harmonic mean of two ratios.
struct Fraction {
  std::uint64_t num = 0, den = 1;

  static Fraction make(std::uint64_t n, std::uint64_t d) {
    const std::uint64_t g = std::gcd(n, d);
    return g == 0 ? Fraction{0, 1} : Fraction{n / g, d / g};
  }
  Fraction operator*(Fraction o) const { return make(num * o.num, den * o.den); }
  Fraction operator+(Fraction o) const { return make(num * o.den + o.num * den, den * o.den); }
  Fraction operator/(Fraction o) const { return make(num * o.den, den * o.num); }
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
};

struct Counts {
  std::optional<double> precision;
  double recall = 0.0;
  double f1 = 0.0;
};

inline Counts metrics(const std::vector<idk::CompletionOutcome>& o) {
  std::set<std::uint32_t> all, answered, correct;
  for (const auto& x : o) {
    all.insert(x.fact_id);
    if (x.predicted) answered.insert(x.fact_id);
    if (x.predicted && *x.predicted == x.gold) correct.insert(x.fact_id);
  }
  Counts c;
  const Fraction r = Fraction::make(correct.size(), all.size());
  c.recall = r.value();
  if (!answered.empty()) {
    const Fraction p = Fraction::make(correct.size(), answered.size());
    c.precision = p.value();
    if (p.num + r.num > 0) c.f1 = (Fraction{2, 1} * p * r / (p + r)).value();
  }
  return c;
}

struct Behavior {
  std::optional<double> idk_recall;
  std::optional<double> idk_error_rate;
};

inline Behavior behavior(const std::vector<idk::CompletionOutcome>& tuned,
                         const std::vector<idk::CompletionOutcome>& base) {
  std::set<std::uint32_t> base_wrong, base_right, abstained, both_wrong, both_right;
  for (const auto& b : base) (b.correct ? base_right : base_wrong).insert(b.fact_id);
  for (const auto& t : tuned)
    if (t.abstained) abstained.insert(t.fact_id);
  std::set_intersection(abstained.begin(), abstained.end(), base_wrong.begin(), base_wrong.end(),
                        std::inserter(both_wrong, both_wrong.begin()));
  std::set_intersection(abstained.begin(), abstained.end(), base_right.begin(), base_right.end(),
                        std::inserter(both_right, both_right.begin()));
  Behavior r;
  if (!base_wrong.empty())
    r.idk_recall = static_cast<double>(both_wrong.size()) / static_cast<double>(base_wrong.size());
  if (!base_right.empty())
    r.idk_error_rate = static_cast<double>(both_right.size()) / static_cast<double>(base_right.size());
  return r;
}

/// Category by checking each definition in precedence order.
inline idk::ErrorCategory category(const idk::CompletionOutcome& base,
                                   const idk::CompletionOutcome& tuned,
                                   const std::vector<idk::TokenId>& lexicon) {
  const bool lexicon_word =
      tuned.predicted && std::set<idk::TokenId>(lexicon.begin(), lexicon.end()).count(*tuned.predicted);
  const bool base_wrong_answer = base.predicted && *base.predicted != base.gold;
  if (tuned.abstained || lexicon_word) return idk::ErrorCategory::Abstain;
  if (base_wrong_answer && *base.predicted == *tuned.predicted) return idk::ErrorCategory::NoEffect;
  if (base.predicted && *base.predicted == base.gold) return idk::ErrorCategory::Noise;
  return idk::ErrorCategory::WhiteNoise;
}

}  // namespace oracle
