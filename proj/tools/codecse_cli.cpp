#include <malloc.h>

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "codecse/error.hpp"
#include "codecse/harness.hpp"

using namespace codecse;

namespace {

struct InferenceFlags {
  std::optional<double> T;
  std::optional<std::size_t> N;
  std::optional<std::string> init;
  std::optional<std::string> remask;
  bool critic_confidence = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--T", T, "Diffusion time of the initial mask, in (0, 1]");
    cmd->add_option("--N", N, "Number of reverse iterations");
    cmd->add_option("--init", init, "Initial mask: quant_error, random or full");
    cmd->add_option("--remask", remask, "Remask candidates: restricted or all");
    cmd->add_flag("--critic-confidence", critic_confidence,
                  "Use critic probabilities as remasking confidence");
  }

  InferenceConfig apply(InferenceConfig c) const {
    if (init) c.init = parse_init_strategy(*init);
    if (c.init == InitStrategy::kFull && !T) c.T = 1.0;
    if (T) c.T = *T;
    if (N) c.N = *N;
    if (remask) c.remask = parse_remask_policy(*remask);
    if (critic_confidence) c.critic_confidence = true;
    c.validate();
    return c;
  }
};

std::string inference_label(const InferenceConfig& c) {
  return to_string(c.init) + "_T" + format_double(c.T) + "_N" + std::to_string(c.N);
}

void print_summary(const EvalReport& report) {
  for (const auto& s : report.systems()) {
    std::cout << s;
    for (const auto& [m, d] : eval_metrics()) {
      if (report.has(s, m)) std::cout << ' ' << m << '=' << format_double(report.mean(s, m));
    }
    std::cout << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  // Training churns through many short-lived tensors just above the default
  // mmap threshold; keeping them on the heap avoids a page-fault storm.
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  CLI::App app{"Masked-token diffusion speech enhancement on RVQ token streams"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::size_t> threads;
  bool force = false;
  std::optional<std::size_t> steps;
  app.add_option("--config", config_path, "Run configuration file (key = value)");
  app.add_option("--seed", seed, "Run seed");
  app.add_option("--out", out, "Run directory");
  app.add_option("--threads", threads, "Worker threads for per-utterance stages");
  app.add_flag("--force", force, "Overwrite existing outputs");
  app.add_option("--steps", steps, "Override train.steps");

  auto* show = app.add_subcommand("show-config", "Print the effective configuration");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic clean/noisy corpus");
  std::optional<std::size_t> train_count, val_count;
  gen->add_option("--train-count", train_count, "Training utterances");
  gen->add_option("--val-count", val_count, "Validation utterances");

  auto* rvq = app.add_subcommand("train-rvq", "Fit the RVQ codebooks on clean training frames");

  auto* train = app.add_subcommand("train", "Train the enhancement model");
  bool no_semantic = false, no_continuous = false, continuous_only = false, no_critic = false;
  train->add_flag("--no-semantic", no_semantic, "Train without the semantic module");
  train->add_flag("--no-continuous", no_continuous, "Train without the continuous module");
  train->add_flag("--continuous-only", continuous_only, "Train only the continuous module");
  train->add_flag("--no-critic", no_critic, "Train without the critic head");

  auto* enh = app.add_subcommand("enhance", "Enhance a corpus split and write traces");
  std::string enh_checkpoint, enh_input, enh_label;
  bool enh_cont = false;
  InferenceFlags enh_flags;
  enh->add_option("--checkpoint", enh_checkpoint, "Model checkpoint (default: <out>/checkpoints/full)");
  enh->add_option("--input", enh_input, "Corpus split directory (default: validation split)");
  enh->add_option("--label", enh_label, "Output label under <out>/enhanced");
  enh->add_flag("--continuous-only", enh_cont, "Decode the continuous module tokens directly");
  enh_flags.add_to(enh);

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint against the noisy baseline");
  std::string ev_checkpoint, ev_label;
  bool ev_cont = false;
  InferenceFlags ev_flags;
  ev->add_option("--checkpoint", ev_checkpoint, "Model checkpoint (default: <out>/checkpoints/full)");
  ev->add_option("--label", ev_label, "Output label under <out>/eval");
  ev->add_flag("--continuous-only", ev_cont, "Evaluate the continuous-only path");
  ev_flags.add_to(ev);

  auto* sweep = app.add_subcommand("sweep-t", "Single-step evaluation over a list of T values");
  std::string sweep_checkpoint;
  std::vector<double> sweep_list;
  sweep->add_option("--checkpoint", sweep_checkpoint, "Model checkpoint (default: <out>/checkpoints/full)");
  sweep->add_option("--T-list", sweep_list, "Comma-separated T values (default: sweep.T)")->delimiter(',');

  auto* abl = app.add_subcommand("ablate", "Evaluate the inference and training ablation matrix");
  bool train_if_absent = false;
  abl->add_flag("--train-if-absent", train_if_absent, "Train missing variant checkpoints");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    std::vector<std::string> warnings;
    RunConfig cfg = config_path.empty() ? RunConfig::from_text({}) : RunConfig::load(config_path, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    if (seed) cfg.seed = *seed;
    if (out) cfg.out = *out;
    if (threads) cfg.threads = *threads;
    if (train_count) cfg.corpus.train_count = *train_count;
    if (val_count) cfg.corpus.val_count = *val_count;
    if (steps) cfg.train.steps = *steps;
    cfg = RunConfig::from_text(cfg.to_text());
    cfg.validate();

    if (show->parsed()) {
      std::cout << cfg.to_text().serialize();
      return 0;
    }

    Harness harness(cfg, force);
    const auto paths = harness.paths();
    auto checkpoint_or_default = [&](const std::string& given) {
      return given.empty() ? paths.checkpoint("full") : std::filesystem::path(given);
    };

    if (gen->parsed()) {
      harness.gen_data();
      std::cout << "corpus written to " << paths.corpus().string() << '\n';
    } else if (rvq->parsed()) {
      const auto cb = harness.train_rvq();
      std::cout << "codebooks " << cb.num_stages() << "x" << cb.codebook_size() << "x" << cb.dim()
                << " written to " << paths.rvq().string() << '\n';
    } else if (train->parsed()) {
      const int chosen = int{no_semantic} + int{no_continuous} + int{continuous_only} + int{no_critic};
      require(chosen <= 1, ErrorKind::kConfig, "choose at most one ablation flag");
      Variant v = Variant::kFull;
      if (no_semantic) v = Variant::kNoSemantic;
      if (no_continuous) v = Variant::kNoContinuous;
      if (continuous_only) v = Variant::kContinuousOnly;
      if (no_critic) v = Variant::kNoCritic;
      const auto summary = harness.train(v);
      const auto& last = summary.log.back();
      std::cout << "variant " << to_string(v) << " checkpoint " << summary.checkpoint_id << '\n'
                << "step " << last.step << " total=" << format_double(last.loss.total)
                << " ce=" << format_double(last.loss.cross_entropy)
                << " critic=" << format_double(last.loss.critic_bce)
                << " cont_mae=" << format_double(last.loss.continuous_mae)
                << " sem_mae=" << format_double(last.loss.semantic_mae) << '\n';
    } else if (enh->parsed()) {
      const auto inf = enh_flags.apply(cfg.inference);
      const std::string label =
          enh_label.empty() ? (enh_cont ? std::string("continuous_only") : inference_label(inf)) : enh_label;
      const auto dir = harness.enhance(checkpoint_or_default(enh_checkpoint), inf, enh_cont,
                                       enh_input.empty() ? paths.split(true) : std::filesystem::path(enh_input),
                                       label);
      std::cout << "enhanced outputs written to " << dir.string() << '\n';
    } else if (ev->parsed()) {
      const auto inf = ev_flags.apply(cfg.inference);
      const std::string label =
          ev_label.empty() ? (ev_cont ? std::string("continuous_only") : inference_label(inf)) : ev_label;
      const auto report = harness.eval(checkpoint_or_default(ev_checkpoint), inf, ev_cont, label);
      print_summary(report);
    } else if (sweep->parsed()) {
      std::cout << harness.sweep_t(checkpoint_or_default(sweep_checkpoint),
                                   sweep_list.empty() ? cfg.sweep_T : sweep_list);
    } else if (abl->parsed()) {
      const auto result = harness.ablate(train_if_absent);
      result.ranks.write_csv(std::cout);
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: " << kind_name(e.kind()) << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
}
