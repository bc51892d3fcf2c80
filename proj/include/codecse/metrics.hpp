#pragma once

#include <cstddef>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "codecse/grid.hpp"
#include "codecse/kv_text.hpp"
#include "codecse/signal.hpp"
#include "codecse/tensor.hpp"

namespace codecse {

// Fraction of equal cells. Grids containing mask_token (when >= 0) are rejected.
double token_accuracy(const TokenGrid& predicted, const TokenGrid& reference, int mask_token = -1);

double frame_mae(const Tensor& estimate, const Tensor& reference);
double frame_mse(const Tensor& estimate, const Tensor& reference);

// si_sdr(clean, enhanced) - si_sdr(clean, noisy)
double si_sdr_improvement(const Waveform& clean, const Waveform& noisy, const Waveform& enhanced);

struct PhoneClassifierConfig {
  std::size_t window = 512;
  std::size_t fft_size = 2048;
  double max_hz = 500.0;
};

// Nearest-template matcher on normalized low-band magnitude spectra. The
// analysis window of frame l is centred on the hop block that defines its label.
class PhoneClassifier {
 public:
  explicit PhoneClassifier(PhoneClassifierConfig config = {}) : config_(config) {}

  void fit(const std::vector<std::pair<Waveform, UtteranceSpec>>& corpus, const FrameConfig& frames);
  bool fitted() const { return !templates_.empty(); }
  std::size_t num_classes() const { return templates_.size(); }

  std::vector<int> classify(const Waveform& wave, const FrameConfig& frames) const;
  // Unit-norm feature of frame l.
  std::vector<double> features(const Waveform& wave, std::size_t frame, const FrameConfig& frames) const;

 private:
  PhoneClassifierConfig config_;
  std::vector<std::vector<double>> templates_;
};

double phone_accuracy(const Waveform& wave, const UtteranceSpec& spec,
                      const PhoneClassifier& classifier, const FrameConfig& frames);

enum class MetricDirection { kHigherIsBetter, kLowerIsBetter };

struct EvalRow {
  std::string system;
  std::string utterance;
  std::string metric;
  double value = 0.0;
  bool operator==(const EvalRow&) const = default;
};

// Per-utterance metric values for several systems. CSV columns, in order:
// system,utterance,metric,value.
class EvalReport {
 public:
  void add(const std::string& system, const std::string& utterance, const std::string& metric,
           double value);

  const std::vector<EvalRow>& rows() const { return rows_; }
  // First-seen order.
  std::vector<std::string> systems() const;
  std::vector<std::string> metrics() const;
  bool has(const std::string& system, const std::string& metric) const;
  double mean(const std::string& system, const std::string& metric) const;
  std::size_t count(const std::string& system, const std::string& metric) const;

  // Every system must report every metric over the same utterances.
  void check_aligned() const;

  KeyValueText& metadata() { return metadata_; }
  const KeyValueText& metadata() const { return metadata_; }

  void write_csv(std::ostream& out) const;
  // meta.*, then mean.<system>.<metric> and count.<system>.<metric>.
  KeyValueText summary() const;

 private:
  std::vector<EvalRow> rows_;
  KeyValueText metadata_;
};

struct RankTable {
  std::vector<std::string> systems;
  std::vector<std::string> metrics;
  // ranks[s][m]; 1 is best, ties share the mean rank.
  std::vector<std::vector<double>> ranks;
  std::vector<double> average;

  void write_csv(std::ostream& out) const;
};

// Ranks of one metric's scores.
std::vector<double> rank_scores(const std::vector<double>& scores, MetricDirection direction);

RankTable rank_aggregate(const EvalReport& report,
                         const std::vector<std::pair<std::string, MetricDirection>>& metrics);

}  // namespace codecse
