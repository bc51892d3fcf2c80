#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "codecse/inference.hpp"
#include "codecse/kv_text.hpp"
#include "codecse/metrics.hpp"
#include "codecse/model.hpp"
#include "codecse/optimizer.hpp"
#include "codecse/rvq.hpp"
#include "codecse/signal.hpp"

namespace codecse {

struct CorpusConfig {
  std::size_t train_count = 2000;
  std::size_t val_count = 200;
};

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 16;
  AdamConfig adam;
  std::size_t log_interval = 1;
  // Random crop length in frames per example, 0 trains on whole utterances.
  std::size_t crop_frames = 0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::filesystem::path out = "run";
  std::size_t threads = 1;

  FrameConfig frames;
  GeneratorConfig generator;
  DegradationConfig degradation;
  CorpusConfig corpus;
  RvqTrainConfig rvq;  // seed is derived from the run seed
  ModelConfig model;   // module flags and seed are set per variant
  TrainConfig train;
  InferenceConfig inference;  // seed is derived from the run seed
  std::vector<double> sweep_T = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  // Clean training utterances used to fit the phone classifier.
  std::size_t classifier_utterances = 200;

  void validate() const;
  KeyValueText to_text() const;
  // Unknown keys are reported through warnings and otherwise ignored.
  static RunConfig from_text(const KeyValueText& text, std::vector<std::string>* warnings = nullptr);
  static RunConfig load(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);
  bool operator==(const RunConfig& other) const;
};

// Stage seeds derived from the run seed.
std::uint64_t derive_seed(std::uint64_t seed, const std::string& stage, std::uint64_t index = 0);
// Train seeds have bit 31 clear, validation seeds have it set.
std::uint64_t utterance_seed(std::uint64_t seed, bool validation, std::size_t index);

struct CorpusItem {
  std::string name;
  Waveform clean;
  Waveform noisy;
  UtteranceSpec spec;
  DegradationSpec degradation;
};

CorpusItem make_corpus_item(const RunConfig& cfg, bool validation, std::size_t index);

// Layout under the run directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path corpus() const { return root / "corpus"; }
  std::filesystem::path split(bool validation) const {
    return corpus() / (validation ? "val" : "train");
  }
  std::filesystem::path rvq() const { return root / "rvq"; }
  std::filesystem::path checkpoint(const std::string& variant) const {
    return root / "checkpoints" / variant;
  }
  std::filesystem::path enhanced(const std::string& label) const { return root / "enhanced" / label; }
  std::filesystem::path eval(const std::string& label) const { return root / "eval" / label; }
  std::filesystem::path sweep() const { return root / "sweep"; }
  std::filesystem::path ablate() const { return root / "ablate"; }
};

// Refuses to write into an existing non-empty directory unless force is set,
// in which case the directory is cleared first.
void prepare_output_dir(const std::filesystem::path& dir, bool force);

void write_corpus_item(const std::filesystem::path& dir, const CorpusItem& item);
std::vector<CorpusItem> load_corpus_split(const std::filesystem::path& dir,
                                          std::size_t limit = static_cast<std::size_t>(-1),
                                          std::size_t threads = 1);

// Training ablations.
enum class Variant { kFull, kNoSemantic, kNoContinuous, kContinuousOnly, kNoCritic };
std::string to_string(Variant v);
Variant parse_variant(const std::string& text);
ModelConfig variant_model_config(const RunConfig& cfg, Variant v);

struct TrainLogRow {
  std::size_t step = 0;
  double learning_rate = 0.0;
  LossBreakdown loss;
};

struct TrainSummary {
  std::vector<TrainLogRow> log;
  std::string checkpoint_id;
};

void write_train_log(std::ostream& out, const std::vector<TrainLogRow>& log);
std::vector<TrainLogRow> read_train_log(const std::filesystem::path& path);

// Differences between the structural fields of a run config and a checkpoint,
// one "key: config=... checkpoint=..." line each.
std::vector<std::string> checkpoint_config_diff(const RunConfig& cfg, const KeyValueText& meta);

struct SystemSpec {
  std::string name;
  enum class Kind { kNoisy, kEnhance, kContinuousOnly } kind = Kind::kEnhance;
  std::filesystem::path checkpoint;
  InferenceConfig inference;
};

struct UtteranceOutput {
  TokenGrid tokens;
  Waveform wave;
  ReverseTrace trace;
};

UtteranceOutput run_system(const SystemSpec& system, const Model* model, const Codebooks& codebooks,
                           const CorpusItem& item, const FrameConfig& frames);

// Per-metric direction of the evaluation battery.
const std::vector<std::pair<std::string, MetricDirection>>& eval_metrics();

// Runs parallel work over [0, n) with results written by index.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

class Harness {
 public:
  explicit Harness(RunConfig cfg, bool force = false);

  const RunConfig& config() const { return cfg_; }
  RunPaths paths() const { return {cfg_.out}; }

  void gen_data();
  Codebooks train_rvq();
  TrainSummary train(Variant variant);
  // Writes waveforms, tokens and traces for every utterance of the input split.
  std::filesystem::path enhance(const std::filesystem::path& checkpoint,
                                const InferenceConfig& inference, bool continuous_only,
                                const std::filesystem::path& input, const std::string& label);
  EvalReport evaluate(const std::vector<SystemSpec>& systems);
  EvalReport eval(const std::filesystem::path& checkpoint, const InferenceConfig& inference,
                  bool continuous_only, const std::string& label);
  // One CSV row per T with N forced to 1.
  std::string sweep_t(const std::filesystem::path& checkpoint, const std::vector<double>& Ts);
  struct AblationResult {
    EvalReport report;
    RankTable ranks;
  };
  AblationResult ablate(bool train_if_absent);

  // Default inference config of ablation rows.
  static std::vector<SystemSpec> ablation_systems(const RunPaths& paths, const InferenceConfig& base);

 private:
  const PhoneClassifier& classifier();
  const std::vector<CorpusItem>& validation_set();

  RunConfig cfg_;
  bool force_ = false;
  PhoneClassifier classifier_;
  std::vector<CorpusItem> val_;
  bool val_loaded_ = false;
};

}  // namespace codecse
