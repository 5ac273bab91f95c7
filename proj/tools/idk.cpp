// idk: command-line driver for data generation, training, evaluation,
// ablation sweeps and reports.
//
// Exit codes: 0 success, 1 usage/config error, 2 runtime failure, 3 I/O error.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "idk/experiment.hpp"

namespace {

using idk::fs::path;

path output_root() {
  const char* env = std::getenv("IDK_OUTPUT_ROOT");
  return env && *env ? path(env) : path("runs");
}

void add_data_options(CLI::App* app, idk::DataSettings& d) {
  app->add_option("--world-seed", d.world_seed, "World generation seed")->capture_default_str();
  app->add_option("--entities", d.n_entities, "Number of entities")->capture_default_str();
  app->add_option("--relations", d.n_relations, "Number of relations (1-12)")->capture_default_str();
  app->add_option("--tier-fractions", d.tier_fractions, "Frequent, medium, rare fact fractions")->capture_default_str();
  app->add_option("--repetitions", d.repetitions, "Corpus repetitions per tier")->capture_default_str();
  app->add_option("--dev-fraction", d.dev_fraction, "Dev fraction per tier")->capture_default_str();
  app->add_option("--test-fraction", d.test_fraction, "Test fraction per tier")->capture_default_str();
  app->add_option("--filler-ratio", d.filler_ratio, "Fraction of filler sentences")->capture_default_str();
  app->add_option("--corpus-seed", d.corpus_seed, "Corpus shuffle seed")->capture_default_str();
  app->add_option("--heldout-seed", d.heldout_seed, "Held-out stream seed")->capture_default_str();
  app->add_option("--heldout-windows", d.heldout_windows, "Held-out windows")->capture_default_str();
  app->add_option("--context-len", d.context_len, "Window length")->capture_default_str();
}

void add_phase_options(CLI::App* app, idk::PhaseSettings& p) {
  app->add_option("--steps", p.steps, "Optimizer steps")->capture_default_str();
  app->add_option("--batch-size", p.batch_size, "Windows per step")->capture_default_str();
  app->add_option("--max-lr", p.max_lr, "Peak learning rate")->capture_default_str();
  app->add_option("--min-lr", p.min_lr, "Final learning rate")->capture_default_str();
  app->add_option("--warmup-frac", p.warmup_frac, "Warmup fraction")->capture_default_str();
  app->add_option("--beta1", p.beta1)->capture_default_str();
  app->add_option("--beta2", p.beta2)->capture_default_str();
  app->add_option("--weight-decay", p.weight_decay)->capture_default_str();
  app->add_option("--grad-clip", p.grad_clip_norm, "Global gradient norm clip")->capture_default_str();
  app->add_option("--eval-every", p.eval_every, "Held-out CE interval")->capture_default_str();
  app->add_option("--checkpoint-every", p.checkpoint_every, "Checkpoint interval (0: final only)")
      ->capture_default_str();
  app->add_option("--seed", p.seed, "Batch order seed")->capture_default_str();
}

void add_idk_options(CLI::App* app, idk::IdkSettings& s) {
  app->add_option("--pi", s.pi, "Cap on target mass moved to [IDK]")->capture_default_str();
  app->add_option("--adaptive", s.adaptive_lambda, "Adaptive lambda (on/off)")->capture_default_str();
  app->add_option("--fixed-lambda", s.fixed_lambda, "Lambda when --adaptive off")->capture_default_str();
  app->add_option("--fp-reg", s.fp_reg, "False-positive regularizer (on/off)")->capture_default_str();
  app->add_option("--idk-init-seed", s.idk_init_seed, "Seed for the new [IDK] rows")->capture_default_str();
  app->add_flag("--abort-on-collapse", s.abort_on_collapse, "Exit with code 2 on a collapse flag");
}

void add_eval_options(CLI::App* app, idk::EvalSettings& e) {
  app->add_option("--samples", e.samples, "Samples per prompt for the sampling baseline")->capture_default_str();
  app->add_option("--temperature", e.temperature, "Sampling temperature")->capture_default_str();
  app->add_option("--eval-seed", e.seed, "Sampling seed")->capture_default_str();
  app->add_option("--abstain-words", e.abstain_lexicon, "Words counted as abstaining")->capture_default_str();
}

void print_report(const idk::EvalReport& r) {
  auto show = [](const idk::ModelEval& m) {
    std::cout << "  " << m.name << ": precision="
              << (m.metrics.precision ? idk::csv_number(m.metrics.precision) : "undefined")
              << " recall=" << m.metrics.recall << " f1=" << m.metrics.f1;
    if (m.behavior)
      std::cout << " idk_recall=" << idk::csv_number(m.behavior->idk_recall)
                << " idk_error_rate=" << idk::csv_number(m.behavior->idk_error_rate);
    std::cout << "\n";
  };
  for (const auto* m : {&r.tuned, &r.base, &r.threshold, &r.sampling}) show(*m);
}

void print_training(const idk::RunOutcome& run) {
  const auto& last = run.result.log.back();
  std::cout << "wrote " << run.dir.string() << " (" << last.step << " steps, final loss "
            << last.loss.total;
  if (run.result.final_heldout_ce) std::cout << ", held-out CE " << *run.result.final_heldout_ce;
  std::cout << ", " << run.result.events.size() << " collapse events)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train and evaluate language models with an [IDK] abstention token"};
  app.set_config("--config", "", "TOML/INI file with option values; command-line flags win");
  app.require_subcommand(1);
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  const path root = output_root();

  idk::DataSettings data;
  idk::ModelSettings model;
  idk::PhaseSettings pre_phase;
  idk::PhaseSettings tune_phase = idk::default_tune_phase();
  idk::IdkSettings idk_s;
  idk::EvalSettings eval_s;
  path data_dir = root / "data", out, pretrain_dir = root / "pretrain", model_dir = root / "tune";
  std::vector<double> pis{0.1, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::string> lambda_modes{"adaptive", "fixed"}, reg_modes{"on", "off"};
  std::vector<path> inputs;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic world, corpus and prompt sets");
  add_data_options(gen, data);
  gen->add_option("--out", out, "Output directory (default $IDK_OUTPUT_ROOT/data)");

  auto* pre = app.add_subcommand("pretrain", "Pretrain a model with plain cross-entropy");
  pre->add_option("--data", data_dir, "Dataset directory")->capture_default_str();
  pre->add_option("--out", out, "Run directory (default $IDK_OUTPUT_ROOT/pretrain)");
  pre->add_option("--d-model", model.d_model)->capture_default_str();
  pre->add_option("--layers", model.n_layers)->capture_default_str();
  pre->add_option("--heads", model.n_heads)->capture_default_str();
  pre->add_flag("--tie-embeddings", model.tie_embeddings);
  pre->add_option("--model-seed", model.seed)->capture_default_str();
  add_phase_options(pre, pre_phase);

  auto* tun = app.add_subcommand("tune", "Extend a pretrained model with [IDK] and tune it");
  tun->add_option("--data", data_dir, "Dataset directory")->capture_default_str();
  tun->add_option("--pretrain", pretrain_dir, "Pretrain run directory")->capture_default_str();
  tun->add_option("--out", out, "Run directory (default $IDK_OUTPUT_ROOT/tune)");
  add_idk_options(tun, idk_s);
  add_phase_options(tun, tune_phase);

  auto* ev = app.add_subcommand("evaluate", "Evaluate a tuned model, its base model and the baselines");
  ev->add_option("--data", data_dir, "Dataset directory")->capture_default_str();
  ev->add_option("--model", model_dir, "Tuned run directory")->capture_default_str();
  ev->add_option("--base", pretrain_dir, "Base (pretrain) run directory")->capture_default_str();
  ev->add_option("--out", out, "Report directory (default <model>/eval)");
  add_eval_options(ev, eval_s);

  auto* abl = app.add_subcommand("ablate", "Sweep pi x lambda mode x regularizer from one pretrain run");
  abl->add_option("--data", data_dir, "Dataset directory")->capture_default_str();
  abl->add_option("--pretrain", pretrain_dir, "Pretrain run directory")->capture_default_str();
  abl->add_option("--out", out, "Sweep directory (default $IDK_OUTPUT_ROOT/ablate)");
  abl->add_option("--pis", pis, "Pi values")->capture_default_str();
  abl->add_option("--lambda-modes", lambda_modes, "Subset of {adaptive, fixed}")
      ->check(CLI::IsMember({"adaptive", "fixed"}))->capture_default_str();
  abl->add_option("--fp-reg-modes", reg_modes, "Subset of {on, off}")
      ->check(CLI::IsMember({"on", "off"}))->capture_default_str();
  abl->add_option("--idk-init-seed", idk_s.idk_init_seed)->capture_default_str();
  add_phase_options(abl, tune_phase);
  add_eval_options(abl, eval_s);

  auto* rep = app.add_subcommand("report", "Consolidate evaluation reports into CSV tables");
  rep->add_option("inputs", inputs, "Evaluation directories or report.json files")->required();
  rep->add_option("--out", out, "Output directory (default $IDK_OUTPUT_ROOT/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      const path dir = out.empty() ? root / "data" : out;
      const auto manifest = idk::gen_data(data, dir);
      std::cout << "wrote " << dir.string() << " (" << manifest["counts"]["facts"] << " facts, "
                << manifest["counts"]["corpus_tokens"] << " corpus tokens)\n";
    } else if (pre->parsed()) {
      const auto ds = idk::load_dataset(data_dir);
      print_training(idk::pretrain(ds, model, pre_phase, out.empty() ? root / "pretrain" : out));
    } else if (tun->parsed()) {
      const auto ds = idk::load_dataset(data_dir);
      print_training(idk::tune(ds, pretrain_dir, idk_s, tune_phase, out.empty() ? root / "tune" : out));
    } else if (ev->parsed()) {
      const auto ds = idk::load_dataset(data_dir);
      const path dir = out.empty() ? model_dir / "eval" : out;
      const auto r = idk::evaluate(ds, model_dir, pretrain_dir, eval_s, dir);
      std::cout << "wrote " << dir.string() << "\n";
      print_report(r);
    } else if (abl->parsed()) {
      const auto ds = idk::load_dataset(data_dir);
      std::vector<bool> adaptive, reg;
      for (const auto& m : lambda_modes) adaptive.push_back(m == "adaptive");
      for (const auto& m : reg_modes) reg.push_back(m == "on");
      const path dir = out.empty() ? root / "ablate" : out;
      const auto cells = idk::ablation_cells(pis, adaptive, reg);
      const auto results = idk::ablate(ds, pretrain_dir, cells, idk_s, tune_phase, eval_s, dir);
      std::cout << "wrote " << (dir / "ablation.csv").string() << " (" << results.size() << " cells)\n";
    } else if (rep->parsed()) {
      const path dir = out.empty() ? root / "report" : out;
      const auto summary = idk::report(inputs, dir);
      std::cout << "wrote " << dir.string() << " (" << summary["runs"] << " runs)\n";
    }
  } catch (const idk::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const idk::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const idk::RuntimeFailure& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
