#pragma once

// End-to-end pipelines shared by the command-line driver and the acceptance
// suite: dataset generation, pretraining, tuning, evaluation, ablation sweeps
// and consolidated reports. Every stage reads and writes a self-describing
// directory.
//
//   data dir:   config.json world.json facts.jsonl corpus.bin corpus.json
//               heldout.bin heldout.json dev.jsonl test.jsonl manifest.json
//   run dir:    config.json metrics.jsonl events.jsonl summary.json
//               checkpoints/step-N final/model.ckpt
//   eval dir:   report.json outcomes_<model>.jsonl

#include <cstdio>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "idk/checkpoint.hpp"
#include "idk/dataset.hpp"
#include "idk/eval.hpp"
#include "idk/io.hpp"
#include "idk/model.hpp"
#include "idk/trainer.hpp"

namespace idk {

struct DataSettings {
  std::uint64_t world_seed = 1;
  std::size_t n_entities = 200;
  std::size_t n_relations = 8;
  std::array<double, 3> tier_fractions{0.25, 0.25, 0.5};
  double dev_fraction = 0.2;
  double test_fraction = 0.3;
  std::array<std::size_t, 3> repetitions{64, 8, 1};
  double filler_ratio = 0.5;
  std::uint64_t corpus_seed = 2;
  std::uint64_t heldout_seed = 1002;
  std::size_t heldout_windows = 32;
  std::size_t context_len = 64;

  WorldConfig world() const {
    return {world_seed, n_entities, n_relations, tier_fractions, dev_fraction, test_fraction};
  }
  CorpusConfig corpus(std::uint64_t seed) const { return {repetitions, filler_ratio, seed}; }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DataSettings, world_seed, n_entities, n_relations,
                                                tier_fractions, dev_fraction, test_fraction,
                                                repetitions, filler_ratio, corpus_seed,
                                                heldout_seed, heldout_windows, context_len)

struct ModelSettings {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  bool tie_embeddings = false;
  std::uint64_t seed = 4;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelSettings, d_model, n_layers, n_heads,
                                                tie_embeddings, seed)

struct PhaseSettings {
  std::size_t steps = 2000;
  std::size_t batch_size = 16;
  double max_lr = 3e-3;
  double min_lr = 1.5e-4;
  double warmup_frac = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double grad_clip_norm = 1.0;
  std::size_t eval_every = 50;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
  std::uint64_t seed = 3;

  OptimizerConfig optimizer() const {
    return {max_lr, min_lr, warmup_frac, beta1, beta2, eps, weight_decay, grad_clip_norm, steps};
  }
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PhaseSettings, steps, batch_size, max_lr, min_lr,
                                                warmup_frac, beta1, beta2, eps, weight_decay,
                                                grad_clip_norm, eval_every, checkpoint_every, seed)

struct IdkSettings {
  double pi = 0.5;
  bool adaptive_lambda = true;
  double fixed_lambda = 0.5;
  bool fp_reg = true;
  double prob_floor = 1e-12;
  std::uint64_t idk_init_seed = 9;
  bool abort_on_collapse = false;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(IdkSettings, pi, adaptive_lambda, fixed_lambda,
                                                fp_reg, prob_floor, idk_init_seed, abort_on_collapse)

struct EvalSettings {
  std::size_t samples = 10;
  double temperature = 1.0;
  std::uint64_t seed = 11;
  std::vector<std::string> abstain_lexicon = default_abstain_lexicon();
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalSettings, samples, temperature, seed,
                                                abstain_lexicon)

/// Tuning defaults: a shorter run with the pretraining rate schedule.
inline PhaseSettings default_tune_phase() {
  PhaseSettings p;
  p.steps = 500;
  p.eval_every = 25;
  p.seed = 5;
  return p;
}

inline std::string config_hash(const json& cfg) { return sha256_hex(cfg.dump()); }

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
  World world;
  Tokenizer tok;
  PackedCorpus corpus;
  std::vector<TokenSequence> heldout;
  std::vector<EvalPrompt> dev;
  std::vector<EvalPrompt> test;
  std::string config_hash;
};

/// The held-out stream is the same world rendered under a different seed; its
/// first `heldout_windows` windows form the fixed held-out batch.
inline std::vector<TokenSequence> heldout_windows(const TokenStream& s, const DataSettings& d) {
  const PackedCorpus p = pack(s, d.context_len);
  const std::size_t n = std::min(d.heldout_windows, p.sequences.size());
  return {p.sequences.begin(), p.sequences.begin() + static_cast<std::ptrdiff_t>(n)};
}

inline Dataset build_dataset(const DataSettings& d) {
  Dataset ds;
  ds.world = generate_world(d.world());
  ds.tok = Tokenizer::for_world(ds.world);
  ds.corpus = pack(render_pretrain_corpus(ds.world, ds.tok, d.corpus(d.corpus_seed)), d.context_len);
  ds.heldout = heldout_windows(render_pretrain_corpus(ds.world, ds.tok, d.corpus(d.heldout_seed)), d);
  ds.dev = eval_prompts(ds.world, ds.tok, Split::Dev);
  ds.test = eval_prompts(ds.world, ds.tok, Split::Test);
  ds.config_hash = config_hash(json(d));
  return ds;
}

/// Writes every dataset artifact plus a manifest of SHA-256 hashes.
inline json gen_data(const DataSettings& d, const fs::path& dir) {
  IDK_CHECK(d.heldout_windows >= 1, "gen-data: heldout_windows must be at least 1");
  const World world = generate_world(d.world());
  const Tokenizer tok = Tokenizer::for_world(world);
  const TokenStream corpus = render_pretrain_corpus(world, tok, d.corpus(d.corpus_seed));
  const TokenStream held = render_pretrain_corpus(world, tok, d.corpus(d.heldout_seed));
  ensure_dir(dir);

  const json cfg = {{"data", d}};
  write_json(dir / "config.json", cfg);
  write_json(dir / "world.json", world_to_json(world));
  std::vector<json> facts;
  for (const auto& f : world.facts) facts.push_back(fact_to_json(world, f));
  write_jsonl(dir / "facts.jsonl", facts);
  write_token_stream(dir / "corpus.bin", dir / "corpus.json", corpus, tok, d.context_len);
  const auto hw = heldout_windows(held, d);
  TokenStream hs;
  for (const auto& w : hw) hs.tokens.insert(hs.tokens.end(), w.ids.begin(), w.ids.end());
  write_token_stream(dir / "heldout.bin", dir / "heldout.json", hs, tok, d.context_len);
  for (Split split : {Split::Dev, Split::Test}) {
    std::vector<json> rows;
    for (const auto& p : eval_prompts(world, tok, split)) rows.push_back(prompt_to_json(p));
    write_jsonl(dir / (to_string(split) + ".jsonl"), rows);
  }

  json manifest;
  manifest["config_hash"] = config_hash(cfg);
  json files = json::object();
  for (const char* name : {"config.json", "world.json", "facts.jsonl", "corpus.bin", "corpus.json",
                           "heldout.bin", "heldout.json", "dev.jsonl", "test.jsonl"})
    files[name] = sha256_file(dir / name);
  manifest["files"] = files;
  json tiers = json::object();
  for (Tier t : kTiers) tiers[to_string(t)] = 0;
  for (const auto& f : world.facts) tiers[to_string(f.tier)] = tiers[to_string(f.tier)].get<int>() + 1;
  manifest["counts"] = {{"facts", world.facts.size()},
                        {"tiers", tiers},
                        {"vocab", tok.size()},
                        {"corpus_tokens", corpus.tokens.size()},
                        {"heldout_tokens", hs.tokens.size()},
                        {"dev_prompts", eval_prompts(world, tok, Split::Dev).size()},
                        {"test_prompts", eval_prompts(world, tok, Split::Test).size()}};
  write_json(dir / "manifest.json", manifest);
  return manifest;
}

inline Dataset load_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json"))
    throw IoError("no dataset at " + dir.string() + " (run gen-data first)");
  Dataset ds;
  ds.world = world_from_json(read_json(dir / "world.json"), read_jsonl(dir / "facts.jsonl"));
  ds.tok = Tokenizer::for_world(ds.world);
  const json header = read_json(dir / "corpus.json");
  if (header.at("vocab").get<std::vector<std::string>>() != ds.tok.vocabulary())
    throw IoError("corpus vocabulary does not match the world in " + dir.string());
  const std::size_t ctx = header.at("context_len").get<std::size_t>();
  TokenStream s;
  s.tokens = read_token_stream(dir / "corpus.bin", header.at("n_tokens").get<std::size_t>(), ds.tok.size());
  ds.corpus = pack(s, ctx);
  const json hh = read_json(dir / "heldout.json");
  TokenStream h;
  h.tokens = read_token_stream(dir / "heldout.bin", hh.at("n_tokens").get<std::size_t>(), ds.tok.size());
  ds.heldout = pack(h, ctx).sequences;
  ds.dev = read_prompts(dir / "dev.jsonl");
  ds.test = read_prompts(dir / "test.jsonl");
  ds.config_hash = read_json(dir / "manifest.json").at("config_hash").get<std::string>();
  return ds;
}

// ---------------------------------------------------------------------------
// Training runs

struct RunOutcome {
  fs::path dir;
  TrainResult result;
  std::string config_hash;
};

namespace detail {

inline TrainConfig train_config(const PhaseSettings& p, Phase phase) {
  TrainConfig c;
  c.phase = phase;
  c.steps = p.steps;
  c.batch_size = p.batch_size;
  c.optimizer = p.optimizer();
  c.eval_every = p.eval_every;
  c.seed = p.seed;
  return c;
}

inline RunOutcome run_training(Model& model, OptimizerState& opt, const Dataset& data,
                               const TrainConfig& tc, const PhaseSettings& p, const json& cfg,
                               const fs::path& dir) {
  ensure_dir(dir);
  RunOutcome out{dir, {}, config_hash(cfg)};
  json stamped = cfg;
  stamped["config_hash"] = out.config_hash;
  write_json(dir / "config.json", stamped);
  JsonlWriter metrics(dir / "metrics.jsonl");
  TrainHooks hooks;
  hooks.metrics = &metrics;
  hooks.dump_path = dir / "nonfinite_dump.json";
  hooks.checkpoint_every = p.checkpoint_every;
  hooks.on_checkpoint = [&](std::size_t step, const Model& m, const OptimizerState& o) {
    checkpoint_save(dir / "checkpoints" / ("step-" + std::to_string(step)), m, o,
                    {{"config_hash", out.config_hash}});
  };
  try {
    out.result = train(model, opt, data.corpus, data.heldout, tc, hooks);
  } catch (const RuntimeFailure&) {
    checkpoint_save(dir / "aborted.ckpt", model, opt, {{"config_hash", out.config_hash}});
    throw;
  }
  checkpoint_save(dir / "final" / "model.ckpt", model, opt, {{"config_hash", out.config_hash}});
  std::vector<json> events;
  for (const auto& e : out.result.events) events.push_back({{"step", e.step}, {"flag", e.flag}});
  write_jsonl(dir / "events.jsonl", events);
  const auto& last = out.result.log.back();
  write_json(dir / "summary.json",
             {{"config_hash", out.config_hash},
              {"steps", last.step},
              {"final", last.to_json()},
              {"initial_heldout_ce", nullable(out.result.initial_heldout_ce)},
              {"final_heldout_ce", nullable(out.result.final_heldout_ce)},
              {"collapse_events", events.size()}});
  return out;
}

}  // namespace detail

inline ModelConfig model_config(const ModelSettings& m, std::size_t vocab, std::size_t context_len) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.context_len = context_len;
  c.d_model = m.d_model;
  c.n_layers = m.n_layers;
  c.n_heads = m.n_heads;
  c.tie_embeddings = m.tie_embeddings;
  c.seed = m.seed;
  return c;
}

inline RunOutcome pretrain(const Dataset& data, const ModelSettings& ms, const PhaseSettings& ps,
                           const fs::path& dir) {
  Model model(model_config(ms, data.tok.size(), data.corpus.context_len));
  auto opt = OptimizerState::for_model(model);
  const json cfg = {{"stage", "pretrain"}, {"data_hash", data.config_hash}, {"model", ms}, {"train", ps}};
  return detail::run_training(model, opt, data, detail::train_config(ps, Phase::Pretrain), ps, cfg, dir);
}

inline fs::path final_checkpoint(const fs::path& run_dir) { return run_dir / "final" / "model.ckpt"; }

/// Loads the pretrained model, appends the [IDK] row and tunes with a fresh
/// optimizer state.
inline RunOutcome tune(const Dataset& data, const fs::path& pretrain_dir, const IdkSettings& is,
                       const PhaseSettings& ps, const fs::path& dir) {
  const fs::path ck_path = final_checkpoint(pretrain_dir);
  if (!fs::exists(ck_path)) throw IoError("no pretrain checkpoint at " + ck_path.string());
  Checkpoint ck = checkpoint_load(ck_path, data.tok.size());
  IDK_CHECK(!ck.model.idk_index(), "tune: the input checkpoint already has an [IDK] row");
  const TokenId idk = ck.model.extend_vocab_with_idk(is.idk_init_seed);
  auto opt = OptimizerState::for_model(ck.model);
  TrainConfig tc = detail::train_config(ps, Phase::IdkTune);
  tc.idk = {is.pi, idk, is.adaptive_lambda, is.fixed_lambda, is.fp_reg, is.prob_floor};
  tc.abort_on_collapse = is.abort_on_collapse;
  const json cfg = {{"stage", "tune"},
                    {"data_hash", data.config_hash},
                    {"pretrain_checkpoint", sha256_file(ck_path)},
                    {"idk", is},
                    {"train", ps}};
  return detail::run_training(ck.model, opt, data, tc, ps, cfg, dir);
}

// ---------------------------------------------------------------------------
// Evaluation

struct ModelEval {
  std::string name;
  std::vector<CompletionOutcome> outcomes;
  MetricsReport metrics;
  std::optional<IdkBehaviorReport> behavior;  // relative to the base model
  std::optional<double> threshold;
};

struct EvalReport {
  ModelEval tuned, base, threshold, sampling;
  std::map<std::string, std::size_t> categories;
  std::string config_hash;
  std::string prompts_hash;

  json to_json() const;
};

namespace detail {

inline json model_eval_json(const ModelEval& m) {
  json j = metrics_to_json(m.metrics);
  j["tiers"] = tier_breakdown(m.outcomes);
  if (m.behavior) {
    const json b = behavior_to_json(*m.behavior);
    j["idk_recall"] = b["idk_recall"];
    j["idk_error_rate"] = b["idk_error_rate"];
    j["idk_counts"] = b;
  }
  if (m.threshold) j["threshold"] = *m.threshold;
  return j;
}

}  // namespace detail

inline json EvalReport::to_json() const {
  json j = detail::model_eval_json(tuned);
  j["config_hash"] = config_hash;
  j["prompts_hash"] = prompts_hash;
  j["split"] = "test";
  j["models"] = {{"tuned", detail::model_eval_json(tuned)},
                 {"base", detail::model_eval_json(base)},
                 {"confidence_threshold", detail::model_eval_json(threshold)},
                 {"semantic_entropy", detail::model_eval_json(sampling)}};
  j["error_categories"] = categories;
  return j;
}

inline std::string prompts_hash(std::span<const EvalPrompt> prompts) {
  std::string s;
  for (const auto& p : prompts) s += prompt_to_json(p).dump() + "\n";
  return sha256_hex(s);
}

/// Evaluates a tuned model against its frozen base on the test prompts, plus
/// the threshold and sampling baselines built on the base model.
inline EvalReport evaluate_models(const Dataset& data, const Model& tuned, const Model& base,
                                  const EvalSettings& es) {
  IDK_CHECK(base.vocab_size() == data.tok.size() && !base.idk_index(),
            "evaluate: base model vocabulary does not match the dataset");
  IDK_CHECK(tuned.idk_index() && tuned.vocab_size() == data.tok.size() + 1,
            "evaluate: tuned model vocabulary does not match the dataset plus [IDK]");
  EvalReport r;
  auto finish = [&](ModelEval& m, std::string name) {
    m.name = std::move(name);
    m.metrics = metrics(m.outcomes);
  };
  r.base.outcomes = complete_all(base, data.test, false);
  finish(r.base, "base");
  r.tuned.outcomes = complete_all(tuned, data.test, false);
  finish(r.tuned, "tuned");
  r.tuned.behavior = idk_behavior(r.tuned.outcomes, r.base.outcomes);

  const auto th = confidence_baseline(base, data.test, data.dev);
  r.threshold.outcomes = th.outcomes;
  r.threshold.threshold = th.threshold;
  finish(r.threshold, "confidence_threshold");
  r.threshold.behavior = idk_behavior(r.threshold.outcomes, r.base.outcomes);

  r.sampling.outcomes = semantic_entropy_baseline(base, data.test, {es.samples, es.temperature, es.seed});
  finish(r.sampling, "semantic_entropy");
  r.sampling.behavior = idk_behavior(r.sampling.outcomes, r.base.outcomes);

  std::vector<TokenId> lexicon;
  for (const auto& w : es.abstain_lexicon)
    if (data.tok.contains(w)) lexicon.push_back(data.tok.id(w));
  r.categories = category_histogram(r.base.outcomes, r.tuned.outcomes, lexicon);
  r.prompts_hash = prompts_hash(data.test);
  return r;
}

inline EvalReport evaluate(const Dataset& data, const fs::path& tuned_dir, const fs::path& base_dir,
                           const EvalSettings& es, const fs::path& out_dir) {
  for (const auto& d : {tuned_dir, base_dir})
    if (!fs::exists(final_checkpoint(d))) throw IoError("no final checkpoint in " + d.string());
  const Checkpoint tuned = checkpoint_load(final_checkpoint(tuned_dir));
  const Checkpoint base = checkpoint_load(final_checkpoint(base_dir));
  EvalReport r = evaluate_models(data, tuned.model, base.model, es);
  const json cfg = {{"stage", "evaluate"},
                    {"data_hash", data.config_hash},
                    {"tuned_checkpoint", sha256_file(final_checkpoint(tuned_dir))},
                    {"base_checkpoint", sha256_file(final_checkpoint(base_dir))},
                    {"eval", es}};
  r.config_hash = config_hash(cfg);
  ensure_dir(out_dir);
  json stamped = cfg;
  stamped["config_hash"] = r.config_hash;
  write_json(out_dir / "config.json", stamped);
  for (const ModelEval* m : {&r.tuned, &r.base, &r.threshold, &r.sampling}) {
    std::vector<json> rows;
    for (const auto& o : m->outcomes) rows.push_back(outcome_to_json(o));
    write_jsonl(out_dir / ("outcomes_" + m->name + ".jsonl"), rows);
  }
  write_json(out_dir / "report.json", r.to_json());
  return r;
}

// ---------------------------------------------------------------------------
// Ablation sweep and reports

struct AblationCell {
  double pi = 0.5;
  bool adaptive = true;
  bool fp_reg = true;

  std::string name() const {
    std::ostringstream s;
    s << "pi" << pi << (adaptive ? "-adaptive" : "-fixed") << (fp_reg ? "-reg" : "-noreg");
    return s.str();
  }
};

/// Cross product in the order pi, then adaptive/fixed, then reg on/off. Fixed
/// cells use lambda = pi.
inline std::vector<AblationCell> ablation_cells(const std::vector<double>& pis,
                                                const std::vector<bool>& adaptive,
                                                const std::vector<bool>& fp_reg) {
  IDK_CHECK(!pis.empty() && !adaptive.empty() && !fp_reg.empty(), "ablate: empty sweep");
  std::vector<AblationCell> out;
  for (double pi : pis)
    for (bool a : adaptive)
      for (bool r : fp_reg) out.push_back({pi, a, r});
  return out;
}

inline IdkSettings cell_settings(const AblationCell& c, IdkSettings base) {
  base.pi = c.pi;
  base.adaptive_lambda = c.adaptive;
  base.fixed_lambda = c.pi;
  base.fp_reg = c.fp_reg;
  return base;
}

inline std::string csv_number(std::optional<double> v) {
  if (!v) return "";
  std::ostringstream s;
  s << std::setprecision(17) << *v;
  return s.str();
}

inline constexpr const char* kAblationHeader = "pi,adaptive,fp_reg,idk_recall,idk_error_rate,precision,recall,f1";

inline std::string ablation_row(const AblationCell& c, const EvalReport& r) {
  const auto& b = *r.tuned.behavior;
  return csv_number(c.pi) + "," + (c.adaptive ? "1" : "0") + "," + (c.fp_reg ? "1" : "0") + "," +
         csv_number(b.idk_recall) + "," + csv_number(b.idk_error_rate) + "," +
         csv_number(r.tuned.metrics.precision) + "," + csv_number(r.tuned.metrics.recall) + "," +
         csv_number(r.tuned.metrics.f1);
}

/// Tunes and evaluates every cell from one shared pretrain run.
inline std::vector<std::pair<AblationCell, EvalReport>> ablate(
    const Dataset& data, const fs::path& pretrain_dir, const std::vector<AblationCell>& cells,
    const IdkSettings& is, const PhaseSettings& ps, const EvalSettings& es, const fs::path& dir) {
  if (!fs::exists(final_checkpoint(pretrain_dir)))
    throw IoError("no pretrain checkpoint in " + pretrain_dir.string());
  ensure_dir(dir);
  std::vector<std::pair<AblationCell, EvalReport>> out;
  std::string csv = std::string(kAblationHeader) + "\n";
  for (const auto& c : cells) {
    const fs::path cell_dir = dir / c.name();
    tune(data, pretrain_dir, cell_settings(c, is), ps, cell_dir);
    out.emplace_back(c, evaluate(data, cell_dir, pretrain_dir, es, cell_dir / "eval"));
    csv += ablation_row(c, out.back().second) + "\n";
    write_file(dir / "ablation.csv", csv);
  }
  return out;
}

/// Consolidates evaluation reports (eval directories or report.json paths)
/// into comparison tables. All reports must share one prompt set.
inline json report(const std::vector<fs::path>& inputs, const fs::path& out_dir) {
  IDK_CHECK(!inputs.empty(), "report: no inputs");
  struct Entry {
    std::string label;
    json report, idk;
  };
  std::vector<Entry> entries;
  std::optional<std::string> prompts;
  for (const auto& in : inputs) {
    const fs::path path = fs::is_directory(in) ? in / "report.json" : in;
    const json r = read_json(path);
    const std::string ph = r.value("prompts_hash", "");
    if (prompts && *prompts != ph)
      throw ConfigError("report: " + path.string() + " was evaluated on a different prompt set");
    prompts = ph;
    json idk = json::object();
    const fs::path tune_cfg = path.parent_path().parent_path() / "config.json";
    if (fs::exists(tune_cfg)) {
      const json c = read_json(tune_cfg);
      if (c.value("stage", "") == "tune") idk = c.at("idk");
    }
    entries.push_back({path.parent_path().string(), r, idk});
  }

  std::string table = "run,model,precision,recall,f1,idk_recall,idk_error_rate,answered,correct,abstained,total\n";
  std::string pi_curve = "pi,adaptive,fp_reg,idk_recall\n";
  std::string tradeoff = "run,idk_error_rate,idk_recall\n";
  auto num = [](const json& v) { return v.is_null() ? std::string() : csv_number(v.get<double>()); };
  for (const auto& e : entries) {
    for (const char* model : {"tuned", "base", "confidence_threshold", "semantic_entropy"}) {
      const json& m = e.report.at("models").at(model);
      const json& c = m.at("counts");
      table += e.label + "," + model + "," + num(m.at("precision")) + "," + num(m.at("recall")) + "," +
               num(m.at("f1")) + "," + num(m.value("idk_recall", json())) + "," +
               num(m.value("idk_error_rate", json())) + "," + std::to_string(c.at("answered").get<std::size_t>()) +
               "," + std::to_string(c.at("correct").get<std::size_t>()) + "," +
               std::to_string(c.at("abstained").get<std::size_t>()) + "," +
               std::to_string(c.at("total").get<std::size_t>()) + "\n";
    }
    const json& t = e.report.at("models").at("tuned");
    if (!e.idk.empty())
      pi_curve += csv_number(e.idk.at("pi").get<double>()) + "," +
                  (e.idk.at("adaptive_lambda").get<bool>() ? "1" : "0") + "," +
                  (e.idk.at("fp_reg").get<bool>() ? "1" : "0") + "," + num(t.value("idk_recall", json())) + "\n";
    tradeoff += e.label + "," + num(t.value("idk_error_rate", json())) + "," + num(t.value("idk_recall", json())) + "\n";
  }
  ensure_dir(out_dir);
  write_file(out_dir / "comparison.csv", table);
  write_file(out_dir / "pi_vs_idk_recall.csv", pi_curve);
  write_file(out_dir / "idk_recall_vs_error_rate.csv", tradeoff);
  return {{"runs", entries.size()}, {"prompts_hash", *prompts}};
}

}  // namespace idk
