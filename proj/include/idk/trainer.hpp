#pragma once

// Two-phase training loop: plain cross-entropy pretraining, then tuning with
// the [IDK] objective at every next-token position. Includes the per-step
// collapse monitors and the metrics log.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
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
#include "idk/optim.hpp"

namespace idk {

enum class Phase { Pretrain, IdkTune };

inline std::string to_string(Phase p) { return p == Phase::Pretrain ? "pretrain" : "tune"; }

struct CollapseThresholds {
  std::size_t window = 20;
  double idk_argmax_frac = 0.5;
  double entropy_frac = 0.9;  // of ln(V)
  double underflow = 1e-38;
};

struct TrainConfig {
  Phase phase = Phase::Pretrain;
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  OptimizerConfig optimizer;
  IdkConfig idk;
  std::size_t eval_every = 50;
  std::uint64_t seed = 3;
  CollapseThresholds collapse;
  bool abort_on_collapse = false;

  void validate() const {
    IDK_CHECK(steps >= 1, "TrainConfig: steps must be at least 1");
    IDK_CHECK(batch_size >= 1, "TrainConfig: batch_size must be at least 1");
    IDK_CHECK(eval_every >= 1, "TrainConfig: eval_every must be at least 1");
    IDK_CHECK(collapse.window >= 1, "TrainConfig: collapse window must be at least 1");
    optimizer.validate();
    IDK_CHECK(optimizer.total_steps == steps, "TrainConfig: optimizer.total_steps must equal steps");
  }
};

/// Per-step monitor snapshot. The [IDK] fields are absent for a model without
/// an [IDK] row; heldout_ce is present only on evaluation steps.
struct CollapseStats {
  std::size_t step = 0;
  double mean_entropy = 0.0;
  std::optional<double> idk_argmax_frac;
  std::optional<double> min_p_idk;
  std::optional<double> heldout_ce;
};

struct CollapseFlags {
  bool idk_collapse = false;
  bool uniform_collapse = false;
  bool underflow_warning = false;

  bool any() const noexcept { return idk_collapse || uniform_collapse || underflow_warning; }
};

/// Entropy, [IDK]-argmax fraction and minimum p_idk over the given rows of a
/// [N, V] logit matrix (all rows when `rows` is empty).
inline CollapseStats monitor(std::span<const double> logits, std::size_t vocab,
                             std::optional<TokenId> idk_index,
                             std::span<const std::size_t> rows = {}) {
  IDK_CHECK(vocab >= 2 && logits.size() % vocab == 0, "monitor: logits are not [N, V]");
  if (idk_index) IDK_CHECK(*idk_index < vocab, "monitor: idk index out of range");
  const std::size_t n_rows = rows.empty() ? logits.size() / vocab : rows.size();
  IDK_CHECK(n_rows > 0, "monitor: no positions");
  std::vector<double> p(vocab);
  double ent_sum = 0.0;
  std::size_t idk_top = 0;
  double min_idk = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n_rows; ++k) {
    const std::size_t r = rows.empty() ? k : rows[k];
    const auto z = logits.subspan(r * vocab, vocab);
    kernels::softmax_into(z, p);
    double h = 0.0;
    for (double q : p)
      if (q > 0.0) h -= q * std::log(q);
    ent_sum += h;
    if (idk_index) {
      const auto top = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
      idk_top += top == *idk_index;
      min_idk = std::min(min_idk, p[*idk_index]);
    }
  }
  CollapseStats s;
  s.mean_entropy = ent_sum / static_cast<double>(n_rows);
  if (idk_index) {
    s.idk_argmax_frac = static_cast<double>(idk_top) / static_cast<double>(n_rows);
    s.min_p_idk = min_idk;
  }
  return s;
}

/// Evaluates the collapse conditions on the trailing window of `history`.
/// Firing at most once per window is the caller's job (see CollapseDetector).
inline CollapseFlags detect_collapse(std::span<const CollapseStats> history, std::size_t vocab,
                                     const CollapseThresholds& th = {}) {
  IDK_CHECK(!history.empty(), "detect_collapse: empty history");
  CollapseFlags f;
  const auto& last = history.back();
  if (last.min_p_idk && *last.min_p_idk < th.underflow) f.underflow_warning = true;
  if (history.size() < th.window) return f;
  const auto win = history.subspan(history.size() - th.window);
  f.idk_collapse = std::all_of(win.begin(), win.end(), [&](const CollapseStats& s) {
    return s.idk_argmax_frac && *s.idk_argmax_frac > th.idk_argmax_frac;
  });
  const double hot = th.entropy_frac * std::log(static_cast<double>(vocab));
  const bool flat = std::all_of(win.begin(), win.end(),
                                [&](const CollapseStats& s) { return s.mean_entropy > hot; });
  // rising: the two most recent held-out measurements anywhere in the history
  std::vector<double> ho;
  for (auto it = history.rbegin(); it != history.rend() && ho.size() < 2; ++it)
    if (it->heldout_ce) ho.push_back(*it->heldout_ce);
  f.uniform_collapse = flat && ho.size() == 2 && ho[0] > ho[1];
  return f;
}

/// Keeps the stats history and suppresses repeats of a flag until a full
/// window has passed since it last fired.
class CollapseDetector {
 public:
  CollapseDetector(std::size_t vocab, CollapseThresholds th) : vocab_(vocab), th_(th) {}

  CollapseFlags push(const CollapseStats& s) {
    history_.push_back(s);
    if (history_.size() > 4 * th_.window) history_.pop_front();
    const std::vector<CollapseStats> h(history_.begin(), history_.end());
    CollapseFlags raw = detect_collapse(h, vocab_, th_);
    CollapseFlags out;
    out.idk_collapse = gate(raw.idk_collapse, last_idk_, s.step);
    out.uniform_collapse = gate(raw.uniform_collapse, last_uniform_, s.step);
    out.underflow_warning = gate(raw.underflow_warning, last_underflow_, s.step);
    return out;
  }

 private:
  bool gate(bool raw, std::optional<std::size_t>& last, std::size_t step) const {
    if (!raw) return false;
    if (last && step < *last + th_.window) return false;
    last = step;
    return true;
  }

  std::size_t vocab_;
  CollapseThresholds th_;
  std::deque<CollapseStats> history_;
  std::optional<std::size_t> last_idk_, last_uniform_, last_underflow_;
};

struct CollapseEvent {
  std::size_t step = 0;
  std::string flag;
};

/// Averages of the per-position loss terms for one batch.
struct BatchLoss {
  double total = 0.0;
  double ce = 0.0;
  double idk = 0.0;
  double fp_reg = 0.0;
  double mean_lambda = 0.0;
  std::size_t positions = 0;
  std::vector<std::size_t> rows;  // logit rows that carry a target
};

/// Mean per-position loss over every next-token target in the batch, and its
/// gradient w.r.t. the logits when `grad` is non-empty. IdkTune uses the
/// combined objective, Pretrain plain cross-entropy.
inline BatchLoss batch_loss(const ForwardResult& fr, std::span<const TokenSequence> batch,
                            Phase phase, const IdkConfig& idk, std::span<double> grad = {}) {
  const std::size_t V = fr.logits.dim(1);
  BatchLoss out;
  for (std::size_t b = 0; b < fr.batch; ++b)
    for (std::size_t t = 0; t + 1 < fr.lengths[b]; ++t) out.rows.push_back(b * fr.seq + t);
  out.positions = out.rows.size();
  IDK_CHECK(out.positions > 0, "batch_loss: batch has no next-token targets");
  const double inv = 1.0 / static_cast<double>(out.positions);
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  std::vector<double> p(V);
  const auto logits = fr.logits.values();
  for (const std::size_t r : out.rows) {
    const std::size_t b = r / fr.seq, t = r % fr.seq;
    const TokenId gold = batch[b].ids[t + 1];
    kernels::softmax_into(logits.subspan(r * V, V), p);
    const auto g = grad.empty() ? std::span<double>{} : grad.subspan(r * V, V);
    if (phase == Phase::IdkTune) {
      const LossBreakdown lb = kernels::evaluate_position(p, gold, idk, g);
      out.total += lb.total;
      out.ce += lb.ce;
      out.idk += lb.idk;
      out.fp_reg += lb.fp_reg;
      out.mean_lambda += lb.lambda;
    } else {
      out.ce += kernels::evaluate_ce_position(p, gold, idk.prob_floor, g);
    }
    if (!g.empty())
      for (double& x : g) x *= inv;
  }
  if (phase == Phase::Pretrain) out.total = out.ce;
  out.total *= inv;
  out.ce *= inv;
  out.idk *= inv;
  out.fp_reg *= inv;
  out.mean_lambda *= inv;
  return out;
}

/// Mean next-token cross-entropy over a fixed set of sequences, no gradients.
inline double heldout_cross_entropy(const Model& model, std::span<const TokenSequence> seqs,
                                    std::size_t batch_size = 16, double floor = 1e-12) {
  IDK_CHECK(!seqs.empty(), "heldout_cross_entropy: no sequences");
  ad::NoGradGuard guard;
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t start = 0; start < seqs.size(); start += batch_size) {
    const auto chunk = seqs.subspan(start, std::min(batch_size, seqs.size() - start));
    const ForwardResult fr = model.forward(chunk);
    const BatchLoss bl = batch_loss(fr, chunk, Phase::Pretrain, IdkConfig{.prob_floor = floor});
    sum += bl.ce * static_cast<double>(bl.positions);
    n += bl.positions;
  }
  return sum / static_cast<double>(n);
}

/// Stateless batch schedule: global example g = (step - 1) * B + b is taken
/// from a seeded permutation of the windows for epoch g / N.
class BatchSampler {
 public:
  BatchSampler(std::size_t n_windows, std::size_t batch_size, std::uint64_t seed)
      : n_(n_windows), batch_(batch_size), seed_(seed) {
    IDK_CHECK(n_windows > 0, "BatchSampler: no windows");
  }

  std::vector<std::size_t> indices(std::size_t step) {
    IDK_CHECK(step >= 1, "BatchSampler: steps are 1-based");
    std::vector<std::size_t> out;
    for (std::size_t b = 0; b < batch_; ++b) {
      const std::size_t g = (step - 1) * batch_ + b;
      out.push_back(permutation(g / n_)[g % n_]);
    }
    return out;
  }

 private:
  const std::vector<std::size_t>& permutation(std::size_t epoch) {
    if (epoch != epoch_ || perm_.empty()) {
      perm_.resize(n_);
      for (std::size_t i = 0; i < n_; ++i) perm_[i] = i;
      std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                        static_cast<std::uint32_t>(epoch)};
      std::mt19937_64 rng(seq);
      std::shuffle(perm_.begin(), perm_.end(), rng);
      epoch_ = epoch;
    }
    return perm_;
  }

  std::size_t n_, batch_;
  std::uint64_t seed_;
  std::size_t epoch_ = 0;
  std::vector<std::size_t> perm_;
};

inline json nullable(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

/// One metrics-log record. Fields that do not apply to the phase are null.
struct StepRecord {
  std::size_t step = 0;
  Phase phase = Phase::Pretrain;
  BatchLoss loss;
  CollapseStats stats;
  double lr = 0.0;

  json to_json() const {
    const bool tune = phase == Phase::IdkTune;
    return {{"step", step},
            {"phase", to_string(phase)},
            {"total", loss.total},
            {"ce", loss.ce},
            {"idk", tune ? json(loss.idk) : json(nullptr)},
            {"fp_reg", tune ? json(loss.fp_reg) : json(nullptr)},
            {"mean_lambda", tune ? json(loss.mean_lambda) : json(nullptr)},
            {"mean_entropy", stats.mean_entropy},
            {"idk_argmax_frac", nullable(stats.idk_argmax_frac)},
            {"min_p_idk", nullable(stats.min_p_idk)},
            {"lr", lr},
            {"heldout_ce", nullable(stats.heldout_ce)}};
  }
};

struct TrainHooks {
  JsonlWriter* metrics = nullptr;
  std::optional<fs::path> dump_path;  // diagnostic dump on non-finite loss
  std::size_t checkpoint_every = 0;   // 0 disables periodic checkpoints
  std::function<void(std::size_t step, const Model&, const OptimizerState&)> on_checkpoint;
  std::function<void(const StepRecord&, const CollapseFlags&)> on_step;
};

struct TrainResult {
  std::vector<StepRecord> log;
  std::vector<CollapseEvent> events;
  std::optional<double> initial_heldout_ce;
  std::optional<double> final_heldout_ce;
};

namespace detail {

[[noreturn]] inline void nonfinite_abort(const TrainHooks& hooks, std::size_t step,
                                         const ForwardResult& fr, const BatchLoss& bl,
                                         std::span<const std::size_t> windows) {
  if (hooks.dump_path) {
    json d;
    d["step"] = step;
    d["windows"] = windows;
    d["total"] = std::isfinite(bl.total) ? json(bl.total) : json(std::to_string(bl.total));
    std::size_t bad = 0;
    const auto z = fr.logits.values();
    while (bad < z.size() && std::isfinite(z[bad])) ++bad;
    d["first_nonfinite_logit"] = bad < z.size() ? json(bad) : json(nullptr);
    try {
      write_json(*hooks.dump_path, d);
    } catch (const IoError&) {
      // the abort below is the primary signal
    }
  }
  throw RuntimeFailure("non-finite loss at step " + std::to_string(step));
}

}  // namespace detail

/// Runs optimizer steps opt.step + 1 .. cfg.steps. Resuming from a saved
/// (model, opt) pair continues the uninterrupted run bit for bit.
inline TrainResult train(Model& model, OptimizerState& opt, const PackedCorpus& corpus,
                         std::span<const TokenSequence> heldout, const TrainConfig& cfg,
                         const TrainHooks& hooks = {}) {
  cfg.validate();
  const std::size_t V = model.vocab_size();
  std::optional<TokenId> idk = model.idk_index();
  if (cfg.phase == Phase::IdkTune) {
    IDK_CHECK(idk.has_value(), "train: tuning requires a model extended with [IDK]");
    IDK_CHECK(cfg.idk.idk_index == *idk, "train: IdkConfig.idk_index differs from the model's");
    cfg.idk.validate(V);
  } else {
    IDK_CHECK(!idk.has_value(), "train: pretraining expects a model without [IDK]");
  }
  IDK_CHECK(!corpus.sequences.empty(), "train: empty corpus");
  for (const auto& s : corpus.sequences) {
    IDK_CHECK(s.ids.size() <= model.config().context_len, "train: window longer than context");
    for (TokenId t : s.ids)
      IDK_CHECK(t < (idk ? V - 1 : V), "train: corpus token outside the model vocabulary");
  }
  IDK_CHECK(opt.step <= cfg.steps, "train: optimizer already past the final step");

  TrainResult res;
  if (!heldout.empty()) res.initial_heldout_ce = heldout_cross_entropy(model, heldout);
  BatchSampler sampler(corpus.sequences.size(), cfg.batch_size, cfg.seed);
  CollapseDetector detector(V, cfg.collapse);
  std::vector<TokenSequence> batch;

  for (std::size_t step = opt.step + 1; step <= cfg.steps; ++step) {
    const auto windows = sampler.indices(step);
    batch.clear();
    for (auto w : windows) batch.push_back(corpus.sequences[w]);

    model.zero_grad();
    const ForwardResult fr = model.forward(batch);
    std::vector<double> grad(fr.logits.numel());
    const BatchLoss bl = batch_loss(fr, batch, cfg.phase, cfg.idk, grad);
    if (!std::isfinite(bl.total)) detail::nonfinite_abort(hooks, step, fr, bl, windows);

    StepRecord rec;
    rec.step = step;
    rec.phase = cfg.phase;
    rec.stats = monitor(fr.logits.values(), V, idk, bl.rows);
    rec.stats.step = step;

    ad::attach_loss(fr.logits, bl.total, std::move(grad)).backward();
    const StepInfo info = optimizer_step(model, opt, step, cfg.optimizer);
    if (!std::isfinite(info.grad_norm)) detail::nonfinite_abort(hooks, step, fr, bl, windows);
    rec.lr = info.lr;
    rec.loss = bl;

    if (!heldout.empty() && (step % cfg.eval_every == 0 || step == cfg.steps)) {
      rec.stats.heldout_ce = heldout_cross_entropy(model, heldout);
      res.final_heldout_ce = rec.stats.heldout_ce;
    }
    const CollapseFlags flags = detector.push(rec.stats);
    if (flags.idk_collapse) res.events.push_back({step, "idk_collapse"});
    if (flags.uniform_collapse) res.events.push_back({step, "uniform_collapse"});
    if (flags.underflow_warning) res.events.push_back({step, "underflow_warning"});

    if (hooks.metrics) hooks.metrics->write(rec.to_json());
    if (hooks.on_step) hooks.on_step(rec, flags);
    rec.loss.rows.clear();
    res.log.push_back(std::move(rec));

    if (hooks.on_checkpoint && hooks.checkpoint_every > 0 && step % hooks.checkpoint_every == 0)
      hooks.on_checkpoint(step, model, opt);
    if (cfg.abort_on_collapse && (flags.idk_collapse || flags.uniform_collapse))
      throw RuntimeFailure("collapse detected at step " + std::to_string(step) + " (" +
                           (flags.idk_collapse ? "idk_collapse" : "uniform_collapse") + ")");
  }
  model.zero_grad();
  return res;
}

}  // namespace idk
