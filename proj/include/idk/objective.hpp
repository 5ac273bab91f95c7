#pragma once

// Uncertainty-aware next-token objective.
//
// A special [IDK] vocabulary entry absorbs target mass on positions where the
// model's argmax disagrees with the gold token. The amount shifted is the
// uncertainty factor
//
//   lambda = pi * (1 - p[gold] / max_i p[i])
//
// so the soft target is (1 - lambda) * onehot(gold) + lambda * onehot(idk).
// When the prediction is correct (lambda == 0) the loss is plain cross-entropy
// plus an optional penalty -log(1 - p[idk]) against false-positive [IDK] mass.
//
// Everything here is 64-bit and allocation-light; the span-based kernels in
// `kernels` are what the trainer calls per position.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "idk/error.hpp"

namespace idk {

using TokenId = std::uint32_t;

/// Raw next-token scores, one per vocabulary index.
class LogitVector {
 public:
  explicit LogitVector(std::vector<double> scores) : scores_(std::move(scores)) {
    IDK_CHECK(scores_.size() >= 2, "LogitVector: vocabulary size must be at least 2");
    for (double s : scores_) {
      IDK_CHECK(std::isfinite(s), "LogitVector: non-finite score");
    }
  }

  std::span<const double> scores() const noexcept { return scores_; }
  std::size_t size() const noexcept { return scores_.size(); }
  double operator[](std::size_t i) const { return scores_.at(i); }

 private:
  std::vector<double> scores_;
};

/// A normalized next-token distribution.
class ProbVector {
 public:
  static constexpr double kSumTolerance = 1e-9;

  explicit ProbVector(std::vector<double> probs) : probs_(std::move(probs)) {
    IDK_CHECK(!probs_.empty(), "ProbVector: empty distribution");
    double sum = 0.0;
    for (double p : probs_) {
      IDK_CHECK(p >= 0.0 && p <= 1.0, "ProbVector: entry outside [0, 1]");
      sum += p;
    }
    IDK_CHECK(std::abs(sum - 1.0) <= kSumTolerance, "ProbVector: entries do not sum to 1");
  }

  std::span<const double> probs() const noexcept { return probs_; }
  std::size_t size() const noexcept { return probs_.size(); }
  double operator[](std::size_t i) const { return probs_.at(i); }

 private:
  std::vector<double> probs_;
};

struct IdkConfig {
  double pi = 0.5;              // cap on target mass moved to [IDK]
  TokenId idk_index = 0;
  bool adaptive_lambda = true;
  double fixed_lambda = 0.5;    // used only when adaptive_lambda is false
  bool enable_fp_reg = true;
  double prob_floor = 1e-12;    // clamp for every log argument

  void validate(std::size_t vocab_size) const {
    IDK_CHECK(pi >= 0.0 && pi <= 1.0, "IdkConfig: pi must lie in [0, 1]");
    IDK_CHECK(fixed_lambda >= 0.0 && fixed_lambda <= 1.0,
              "IdkConfig: fixed_lambda must lie in [0, 1]");
    IDK_CHECK(prob_floor > 0.0 && prob_floor < 1.0, "IdkConfig: prob_floor must lie in (0, 1)");
    IDK_CHECK(idk_index < vocab_size, "IdkConfig: idk_index out of vocabulary range");
  }
};

struct UncertaintyFactor {
  double lambda = 0.0;
};

struct SoftTarget {
  std::vector<double> target;
};

enum class LossBranch { CorrectBranch, IdkBranch };

inline std::string to_string(LossBranch b) {
  return b == LossBranch::CorrectBranch ? "CorrectBranch" : "IdkBranch";
}

/// All loss terms for one position. `total` is what gets optimized; the other
/// terms are always filled in for logging regardless of branch.
struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;
  double idk = 0.0;
  double fp_reg = 0.0;
  double lambda = 0.0;
  LossBranch branch = LossBranch::CorrectBranch;
};

namespace kernels {

/// Max-subtracted softmax. `out` must have the same length as `logits`.
inline void softmax_into(std::span<const double> logits, std::span<double> out) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] /= sum;
}

inline double clamped_log(double p, double floor) { return std::log(std::max(p, floor)); }

/// -log p[gold], clamped.
inline double cross_entropy(std::span<const double> probs, TokenId gold, double floor) {
  return -clamped_log(probs[gold], floor);
}

inline double fp_regularization(std::span<const double> probs, TokenId idk, double floor) {
  return -clamped_log(1.0 - probs[idk], floor);
}

/// Ties with the maximum count as correct (lambda = 0).
inline double uncertainty_factor(std::span<const double> probs, TokenId gold,
                                 const IdkConfig& cfg) {
  const double mx = *std::max_element(probs.begin(), probs.end());
  const double pg = probs[gold];
  if (pg >= mx) return 0.0;
  if (!cfg.adaptive_lambda) return cfg.fixed_lambda;
  return cfg.pi * (1.0 - pg / mx);
}

/// -[(1 - lambda) log p[gold] + lambda log p[idk]]
inline double idk_loss(std::span<const double> probs, TokenId gold, double lambda,
                       const IdkConfig& cfg) {
  return -((1.0 - lambda) * clamped_log(probs[gold], cfg.prob_floor) +
           lambda * clamped_log(probs[cfg.idk_index], cfg.prob_floor));
}

/// Full objective for one position given its softmax output. When `grad` is
/// non-empty it receives dLoss/dlogits with lambda held constant.
inline LossBreakdown evaluate_position(std::span<const double> probs, TokenId gold,
                                       const IdkConfig& cfg, std::span<double> grad = {}) {
  LossBreakdown out;
  out.lambda = uncertainty_factor(probs, gold, cfg);
  out.ce = cross_entropy(probs, gold, cfg.prob_floor);
  out.idk = idk_loss(probs, gold, out.lambda, cfg);
  out.fp_reg = fp_regularization(probs, cfg.idk_index, cfg.prob_floor);

  if (out.lambda == 0.0) {
    out.branch = LossBranch::CorrectBranch;
    out.total = cfg.enable_fp_reg ? out.ce + out.fp_reg : out.ce;
  } else {
    out.branch = LossBranch::IdkBranch;
    out.total = out.idk;
  }

  if (!grad.empty()) {
    const std::size_t n = probs.size();
    for (std::size_t j = 0; j < n; ++j) grad[j] = probs[j];
    if (out.branch == LossBranch::CorrectBranch) {
      grad[gold] -= 1.0;
      const double p_idk = probs[cfg.idk_index];
      // Past the clamp the penalty is constant, so it contributes nothing.
      if (cfg.enable_fp_reg && 1.0 - p_idk >= cfg.prob_floor) {
        const double c = p_idk / (1.0 - p_idk);
        for (std::size_t j = 0; j < n; ++j) grad[j] -= c * probs[j];
        grad[cfg.idk_index] += c;
      }
    } else {
      grad[gold] -= 1.0 - out.lambda;
      grad[cfg.idk_index] -= out.lambda;
    }
  }
  return out;
}

/// Plain next-token cross-entropy for a vocabulary without [IDK].
inline double evaluate_ce_position(std::span<const double> probs, TokenId gold, double floor,
                                   std::span<double> grad = {}) {
  if (!grad.empty()) {
    std::copy(probs.begin(), probs.end(), grad.begin());
    grad[gold] -= 1.0;
  }
  return cross_entropy(probs, gold, floor);
}

}  // namespace kernels

inline ProbVector softmax(const LogitVector& logits) {
  std::vector<double> out(logits.size());
  kernels::softmax_into(logits.scores(), out);
  return ProbVector(std::move(out));
}

namespace detail {

inline void check_gold(std::size_t vocab, TokenId gold, const IdkConfig& cfg) {
  IDK_CHECK(gold < vocab, "gold index out of vocabulary range");
  IDK_CHECK(cfg.idk_index < vocab, "idk_index out of vocabulary range");
  IDK_CHECK(gold != cfg.idk_index, "gold index must differ from the [IDK] index");
}

}  // namespace detail

inline UncertaintyFactor uncertainty_factor(const ProbVector& probs, TokenId gold,
                                            const IdkConfig& cfg) {
  detail::check_gold(probs.size(), gold, cfg);
  return {kernels::uncertainty_factor(probs.probs(), gold, cfg)};
}

inline SoftTarget soft_target(TokenId gold, UncertaintyFactor lambda, const IdkConfig& cfg,
                              std::size_t vocab_size) {
  detail::check_gold(vocab_size, gold, cfg);
  IDK_CHECK(lambda.lambda >= 0.0 && lambda.lambda <= 1.0, "soft_target: lambda outside [0, 1]");
  SoftTarget t{std::vector<double>(vocab_size, 0.0)};
  t.target[gold] = 1.0 - lambda.lambda;
  t.target[cfg.idk_index] = lambda.lambda;
  return t;
}

inline double cross_entropy(const LogitVector& logits, TokenId gold, double prob_floor = 1e-12) {
  IDK_CHECK(gold < logits.size(), "gold index out of vocabulary range");
  const ProbVector p = softmax(logits);
  return kernels::cross_entropy(p.probs(), gold, prob_floor);
}

inline double idk_loss(const LogitVector& logits, TokenId gold, const IdkConfig& cfg) {
  detail::check_gold(logits.size(), gold, cfg);
  const ProbVector p = softmax(logits);
  const double lambda = kernels::uncertainty_factor(p.probs(), gold, cfg);
  return kernels::idk_loss(p.probs(), gold, lambda, cfg);
}

inline double fp_regularization(const ProbVector& probs, const IdkConfig& cfg) {
  IDK_CHECK(cfg.idk_index < probs.size(), "idk_index out of vocabulary range");
  return kernels::fp_regularization(probs.probs(), cfg.idk_index, cfg.prob_floor);
}

inline LossBreakdown combined_loss(const LogitVector& logits, TokenId gold, const IdkConfig& cfg) {
  detail::check_gold(logits.size(), gold, cfg);
  const ProbVector p = softmax(logits);
  return kernels::evaluate_position(p.probs(), gold, cfg);
}

/// Gradient of combined_loss with respect to the logits, lambda detached.
inline std::vector<double> loss_gradient_logits(const LogitVector& logits, TokenId gold,
                                                const IdkConfig& cfg) {
  detail::check_gold(logits.size(), gold, cfg);
  const ProbVector p = softmax(logits);
  std::vector<double> grad(logits.size());
  kernels::evaluate_position(p.probs(), gold, cfg, grad);
  return grad;
}

}  // namespace idk
