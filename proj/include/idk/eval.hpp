#pragma once

// Closed-book completion evaluation with abstention: greedy single-token
// decoding, selective-prediction metrics, the confidence-threshold and
// sampling-based (exact-match clustering) baselines, and error categories.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "idk/autodiff.hpp"
#include "idk/dataset.hpp"
#include "idk/error.hpp"
#include "idk/io.hpp"
#include "idk/model.hpp"
#include "idk/objective.hpp"

namespace idk {

struct CompletionOutcome {
  std::uint32_t fact_id = 0;
  Tier tier = Tier::Rare;
  TokenId gold = 0;
  std::optional<TokenId> predicted;  // absent when abstained
  bool abstained = false;
  bool correct = false;
  double max_prob = 0.0;
  std::optional<double> p_idk;

  bool operator==(const CompletionOutcome&) const = default;
};

/// Greedy decode of one next-token distribution given as logits. If the
/// argmax is [IDK] the outcome abstains, unless `ignore_idk` is set, in which
/// case the argmax over the remaining vocabulary is taken. Probabilities come
/// from the full softmax; max_prob is the probability of the selected entry.
inline CompletionOutcome complete_from_logits(std::span<const double> logits, TokenId gold,
                                              std::optional<TokenId> idk_index, bool ignore_idk,
                                              std::uint32_t fact_id = 0, Tier tier = Tier::Rare) {
  IDK_CHECK(logits.size() >= 2, "complete: need at least two logits");
  IDK_CHECK(gold < logits.size(), "complete: gold out of range");
  if (idk_index) IDK_CHECK(*idk_index < logits.size(), "complete: idk index out of range");
  std::vector<double> p(logits.size());
  kernels::softmax_into(logits, p);
  CompletionOutcome o;
  o.fact_id = fact_id;
  o.tier = tier;
  o.gold = gold;
  if (idk_index) o.p_idk = p[*idk_index];
  std::size_t best = logits.size();
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (ignore_idk && idk_index && i == *idk_index) continue;
    if (best == logits.size() || logits[i] > logits[best]) best = i;
  }
  o.max_prob = p[best];
  if (idk_index && best == *idk_index) {
    o.abstained = true;
  } else {
    o.predicted = static_cast<TokenId>(best);
    o.correct = best == gold;
  }
  return o;
}

/// Next-token logits after each prompt, one row per prompt.
inline std::vector<std::vector<double>> prompt_logits(const Model& model,
                                                      std::span<const EvalPrompt> prompts,
                                                      std::size_t batch_size = 64) {
  ad::NoGradGuard guard;
  std::vector<std::vector<double>> out;
  std::vector<TokenSequence> batch;
  for (std::size_t start = 0; start < prompts.size(); start += batch_size) {
    batch.clear();
    const std::size_t end = std::min(prompts.size(), start + batch_size);
    for (std::size_t i = start; i < end; ++i) {
      IDK_CHECK(prompts[i].prompt.ids.size() <= model.config().context_len,
                "complete: prompt longer than the context");
      batch.push_back(prompts[i].prompt);
    }
    const ForwardResult fr = model.forward(batch);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto row = fr.row(b, fr.lengths[b] - 1);
      out.emplace_back(row.begin(), row.end());
    }
  }
  return out;
}

inline CompletionOutcome complete(const Model& model, const EvalPrompt& prompt, bool ignore_idk) {
  const auto z = prompt_logits(model, std::span<const EvalPrompt>(&prompt, 1));
  return complete_from_logits(z[0], prompt.gold, model.idk_index(), ignore_idk, prompt.fact_id,
                              prompt.tier);
}

inline std::vector<CompletionOutcome> complete_all(const Model& model,
                                                   std::span<const EvalPrompt> prompts,
                                                   bool ignore_idk) {
  const auto z = prompt_logits(model, prompts);
  std::vector<CompletionOutcome> out;
  out.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i)
    out.push_back(complete_from_logits(z[i], prompts[i].gold, model.idk_index(), ignore_idk,
                                       prompts[i].fact_id, prompts[i].tier));
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricsReport {
  std::optional<double> precision;  // undefined when nothing was answered
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t n_total = 0;
  std::size_t n_answered = 0;
  std::size_t n_correct = 0;
  std::size_t n_abstained = 0;

  bool operator==(const MetricsReport&) const = default;
};

inline MetricsReport metrics(std::span<const CompletionOutcome> outcomes) {
  IDK_CHECK(!outcomes.empty(), "metrics: empty outcome list");
  MetricsReport r;
  r.n_total = outcomes.size();
  for (const auto& o : outcomes) {
    IDK_CHECK(!(o.abstained && o.correct), "metrics: abstained outcome marked correct");
    if (o.abstained) {
      ++r.n_abstained;
    } else {
      ++r.n_answered;
      r.n_correct += o.correct;
    }
  }
  r.recall = static_cast<double>(r.n_correct) / static_cast<double>(r.n_total);
  if (r.n_answered > 0) {
    r.precision = static_cast<double>(r.n_correct) / static_cast<double>(r.n_answered);
    // harmonic mean of c/a and c/n, written as 2c / (n + a) so that it is
    // exactly the recall when nothing is abstained
    r.f1 = 2.0 * static_cast<double>(r.n_correct) / static_cast<double>(r.n_total + r.n_answered);
  }
  return r;
}

struct IdkBehaviorReport {
  std::optional<double> idk_recall;      // undefined when the base model is never wrong
  std::optional<double> idk_error_rate;  // undefined when the base model is never right
  std::size_t base_incorrect = 0;
  std::size_t base_correct = 0;
  std::size_t abstained_on_base_incorrect = 0;
  std::size_t abstained_on_base_correct = 0;

  bool operator==(const IdkBehaviorReport&) const = default;
};

/// Outcome lists must cover the same fact ids in the same order.
inline IdkBehaviorReport idk_behavior(std::span<const CompletionOutcome> tuned,
                                      std::span<const CompletionOutcome> base) {
  IDK_CHECK(tuned.size() == base.size() && !tuned.empty(),
            "idk_behavior: outcome lists differ in length or are empty");
  IdkBehaviorReport r;
  for (std::size_t i = 0; i < tuned.size(); ++i) {
    IDK_CHECK(tuned[i].fact_id == base[i].fact_id, "idk_behavior: outcome lists are misaligned");
    if (base[i].correct) {
      ++r.base_correct;
      r.abstained_on_base_correct += tuned[i].abstained;
    } else {
      ++r.base_incorrect;
      r.abstained_on_base_incorrect += tuned[i].abstained;
    }
  }
  if (r.base_incorrect > 0)
    r.idk_recall = static_cast<double>(r.abstained_on_base_incorrect) / static_cast<double>(r.base_incorrect);
  if (r.base_correct > 0)
    r.idk_error_rate = static_cast<double>(r.abstained_on_base_correct) / static_cast<double>(r.base_correct);
  return r;
}

// ---------------------------------------------------------------------------
// Confidence-threshold baseline

/// Thresholds k / 20 for k = 0..20.
inline std::vector<double> threshold_grid() {
  std::vector<double> g;
  for (int k = 0; k <= 20; ++k) g.push_back(static_cast<double>(k) / 20.0);
  return g;
}

/// Abstains wherever max_prob <= threshold; other outcomes are unchanged.
inline std::vector<CompletionOutcome> apply_threshold(std::span<const CompletionOutcome> outcomes,
                                                      double threshold) {
  std::vector<CompletionOutcome> out(outcomes.begin(), outcomes.end());
  for (auto& o : out) {
    if (!o.abstained && o.max_prob <= threshold) {
      o.abstained = true;
      o.correct = false;
      o.predicted.reset();
    }
  }
  return out;
}

/// Grid threshold with the highest dev F1; ties go to the lowest threshold.
inline double select_threshold(std::span<const CompletionOutcome> dev) {
  IDK_CHECK(!dev.empty(), "confidence_baseline: empty dev set");
  double best_t = 0.0, best_f1 = -1.0;
  for (double t : threshold_grid()) {
    const double f1 = metrics(apply_threshold(dev, t)).f1;
    if (f1 > best_f1) {
      best_f1 = f1;
      best_t = t;
    }
  }
  return best_t;
}

struct ThresholdResult {
  double threshold = 0.0;
  std::vector<CompletionOutcome> outcomes;
};

/// `dev` and `test` are greedy outcomes of a model decoded without [IDK].
inline ThresholdResult confidence_baseline(std::span<const CompletionOutcome> test,
                                           std::span<const CompletionOutcome> dev) {
  ThresholdResult r;
  r.threshold = select_threshold(dev);
  r.outcomes = apply_threshold(test, r.threshold);
  return r;
}

inline ThresholdResult confidence_baseline(const Model& model, std::span<const EvalPrompt> test,
                                           std::span<const EvalPrompt> dev) {
  IDK_CHECK(!dev.empty(), "confidence_baseline: empty dev set");
  return confidence_baseline(complete_all(model, test, true), complete_all(model, dev, true));
}

// ---------------------------------------------------------------------------
// Sampling baseline with exact-token clustering

struct SamplingConfig {
  std::size_t k = 10;
  double temperature = 1.0;
  std::uint64_t seed = 11;

  void validate() const {
    IDK_CHECK(k >= 2, "semantic_entropy: K must be at least 2");
    IDK_CHECK(temperature > 0.0 && std::isfinite(temperature),
              "semantic_entropy: temperature must be positive");
  }
};

/// Draws K tokens from softmax(logits / T) (never [IDK]); answers with the
/// largest cluster's token when that cluster holds more than K / 2 samples.
/// Largest-cluster ties go to the lowest token id.
inline CompletionOutcome semantic_entropy_from_logits(std::span<const double> logits, TokenId gold,
                                                      std::optional<TokenId> idk_index,
                                                      const SamplingConfig& cfg,
                                                      std::uint32_t fact_id = 0,
                                                      Tier tier = Tier::Rare) {
  cfg.validate();
  IDK_CHECK(gold < logits.size(), "semantic_entropy: gold out of range");
  std::vector<double> scaled(logits.begin(), logits.end());
  for (double& z : scaled) z /= cfg.temperature;
  std::vector<double> p(scaled.size());
  kernels::softmax_into(scaled, p);
  std::vector<double> weights = p;
  if (idk_index) weights[*idk_index] = 0.0;

  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                    fact_id};
  std::mt19937_64 rng(seq);
  std::discrete_distribution<std::size_t> draw(weights.begin(), weights.end());
  std::map<std::size_t, std::size_t> clusters;
  for (std::size_t i = 0; i < cfg.k; ++i) ++clusters[draw(rng)];
  auto largest = clusters.begin();
  for (auto it = clusters.begin(); it != clusters.end(); ++it)
    if (it->second > largest->second) largest = it;

  CompletionOutcome o;
  o.fact_id = fact_id;
  o.tier = tier;
  o.gold = gold;
  o.max_prob = static_cast<double>(largest->second) / static_cast<double>(cfg.k);
  if (idk_index) o.p_idk = p[*idk_index];
  if (2 * largest->second > cfg.k) {
    o.predicted = static_cast<TokenId>(largest->first);
    o.correct = largest->first == gold;
  } else {
    o.abstained = true;
  }
  return o;
}

inline std::vector<CompletionOutcome> semantic_entropy_baseline(const Model& model,
                                                                std::span<const EvalPrompt> prompts,
                                                                const SamplingConfig& cfg) {
  const auto z = prompt_logits(model, prompts);
  std::vector<CompletionOutcome> out;
  for (std::size_t i = 0; i < prompts.size(); ++i)
    out.push_back(semantic_entropy_from_logits(z[i], prompts[i].gold, model.idk_index(), cfg,
                                               prompts[i].fact_id, prompts[i].tier));
  return out;
}

// ---------------------------------------------------------------------------
// Error categories

enum class ErrorCategory { NoEffect, Noise, WhiteNoise, Abstain };

inline std::string to_string(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::NoEffect: return "no_effect";
    case ErrorCategory::Noise: return "noise";
    case ErrorCategory::WhiteNoise: return "white_noise";
    case ErrorCategory::Abstain: return "abstain";
  }
  return "?";
}

/// Precedence: Abstain > NoEffect > Noise > WhiteNoise. Only defined for an
/// incorrect tuned outcome.
inline ErrorCategory categorize(const CompletionOutcome& base, const CompletionOutcome& tuned,
                                std::span<const TokenId> abstain_lexicon) {
  IDK_CHECK(!tuned.correct, "categorize: tuned outcome is correct");
  IDK_CHECK(base.fact_id == tuned.fact_id, "categorize: outcomes refer to different facts");
  if (tuned.abstained) return ErrorCategory::Abstain;
  if (std::find(abstain_lexicon.begin(), abstain_lexicon.end(), *tuned.predicted) !=
      abstain_lexicon.end())
    return ErrorCategory::Abstain;
  if (!base.correct && !base.abstained && base.predicted == tuned.predicted)
    return ErrorCategory::NoEffect;
  if (base.correct) return ErrorCategory::Noise;
  return ErrorCategory::WhiteNoise;
}

inline std::map<std::string, std::size_t> category_histogram(
    std::span<const CompletionOutcome> base, std::span<const CompletionOutcome> tuned,
    std::span<const TokenId> lexicon) {
  IDK_CHECK(base.size() == tuned.size(), "category_histogram: size mismatch");
  std::map<std::string, std::size_t> h;
  for (auto c : {ErrorCategory::NoEffect, ErrorCategory::Noise, ErrorCategory::WhiteNoise,
                 ErrorCategory::Abstain})
    h[to_string(c)] = 0;
  for (std::size_t i = 0; i < tuned.size(); ++i)
    if (!tuned[i].correct) ++h[to_string(categorize(base[i], tuned[i], lexicon))];
  return h;
}

// ---------------------------------------------------------------------------
// Serialization

inline json outcome_to_json(const CompletionOutcome& o) {
  return {{"fact_id", o.fact_id},
          {"tier", to_string(o.tier)},
          {"gold", o.gold},
          {"predicted", o.predicted ? json(*o.predicted) : json(nullptr)},
          {"abstained", o.abstained},
          {"correct", o.correct},
          {"max_prob", o.max_prob},
          {"p_idk", o.p_idk ? json(*o.p_idk) : json(nullptr)}};
}

inline CompletionOutcome outcome_from_json(const json& j) {
  try {
    CompletionOutcome o;
    o.fact_id = j.at("fact_id").get<std::uint32_t>();
    o.tier = tier_from_string(j.at("tier").get<std::string>());
    o.gold = j.at("gold").get<TokenId>();
    if (!j.at("predicted").is_null()) o.predicted = j.at("predicted").get<TokenId>();
    o.abstained = j.at("abstained").get<bool>();
    o.correct = j.at("correct").get<bool>();
    o.max_prob = j.at("max_prob").get<double>();
    if (!j.at("p_idk").is_null()) o.p_idk = j.at("p_idk").get<double>();
    return o;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed outcome record: ") + e.what());
  }
}

inline json metrics_to_json(const MetricsReport& m) {
  return {{"precision", m.precision ? json(*m.precision) : json(nullptr)},
          {"recall", m.recall},
          {"f1", m.f1},
          {"counts",
           {{"total", m.n_total}, {"answered", m.n_answered}, {"correct", m.n_correct},
            {"abstained", m.n_abstained}}}};
}

inline json behavior_to_json(const IdkBehaviorReport& b) {
  return {{"idk_recall", b.idk_recall ? json(*b.idk_recall) : json(nullptr)},
          {"idk_error_rate", b.idk_error_rate ? json(*b.idk_error_rate) : json(nullptr)},
          {"base_incorrect", b.base_incorrect},
          {"base_correct", b.base_correct},
          {"abstained_on_base_incorrect", b.abstained_on_base_incorrect},
          {"abstained_on_base_correct", b.abstained_on_base_correct}};
}

/// Metrics for each tier present in `outcomes`.
inline json tier_breakdown(std::span<const CompletionOutcome> outcomes) {
  json out = json::object();
  for (Tier t : kTiers) {
    std::vector<CompletionOutcome> sub;
    for (const auto& o : outcomes)
      if (o.tier == t) sub.push_back(o);
    if (!sub.empty()) out[to_string(t)] = metrics_to_json(metrics(sub));
  }
  return out;
}

}  // namespace idk
