#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "codecse/grid.hpp"
#include "codecse/kv_text.hpp"
#include "codecse/masking.hpp"
#include "codecse/model.hpp"
#include "codecse/signal.hpp"

namespace codecse {

enum class InitStrategy { kQuantError, kRandom, kFull };
enum class RemaskPolicy { kRestricted, kAll };

std::string to_string(InitStrategy s);
InitStrategy parse_init_strategy(const std::string& text);
std::string to_string(RemaskPolicy p);
RemaskPolicy parse_remask_policy(const std::string& text);

struct InferenceConfig {
  double T = 0.1;
  std::size_t N = 1;
  InitStrategy init = InitStrategy::kQuantError;
  RemaskPolicy remask = RemaskPolicy::kRestricted;
  // Use 1 - sigmoid(critic logit) of the predicted grid as confidence instead
  // of the maximum token probability.
  bool critic_confidence = false;
  std::uint64_t seed = 0;

  void validate() const;
  // Diffusion time of iteration i: T (N - i) / N.
  double time_at(std::size_t iteration) const;
};

struct TraceStep {
  double t = 0.0;
  std::size_t masked_count = 0;  // masked cells fed to the predictor
  std::size_t masked_after = 0;  // masked cells after remasking (0 at the end)
  double mean_confidence = 0.0;
  TokenGrid tokens;              // estimate after this iteration
};

struct ReverseTrace {
  std::vector<TraceStep> steps;

  KeyValueText to_text() const;
  static ReverseTrace from_text(const KeyValueText& text);
};

struct ScheduleEntry {
  double t = 0.0;
  std::size_t masked_after = 0;
  bool operator==(const ScheduleEntry&) const = default;
};

// Iteration times T, T - dt, ..., dt with dt = T / N and the masked count left
// after each iteration's remask.
std::vector<ScheduleEntry> reverse_schedule(double T, std::size_t N, const ScheduleParams& sched);

// Anything that maps a partly masked grid to P0. The critic callback is only
// needed for critic confidence.
struct TokenPredictor {
  std::function<Tensor(const TokenGrid&)> probabilities;  // L x (C * D)
  std::function<Tensor(const TokenGrid&)> critic_logits;  // L x C
};

MaskGrid initial_mask(const InferenceConfig& cfg, const ScheduleParams& sched,
                      const QuantErrorGrid* quant_error);

struct ReverseResult {
  TokenGrid tokens;
  ReverseTrace trace;
};

// The iterative reverse process starting from estimated tokens (no mask
// tokens) and, for quantization-error initialization, their error grid.
ReverseResult run_reverse_process(const TokenGrid& estimated_tokens,
                                  const QuantErrorGrid* quant_error, std::size_t codebook_size,
                                  const TokenPredictor& predictor, const InferenceConfig& cfg);

struct EnhanceResult {
  Waveform wave;
  TokenGrid tokens;
  TokenGrid continuous_tokens;
  ReverseTrace trace;
};

EnhanceResult enhance(const Waveform& noisy, const Model& model, const FrameConfig& frames,
                      const InferenceConfig& cfg);

struct ContinuousOnlyResult {
  Waveform wave;
  TokenGrid tokens;
};

// Decodes the continuous module's tokens directly, skipping the discrete module.
ContinuousOnlyResult continuous_only_enhance(const Waveform& noisy, const Model& model,
                                             const FrameConfig& frames);

// Decoded waveform of a token grid, zero padded or cut to `length` samples.
Waveform decode_tokens(const TokenGrid& tokens, const Codebooks& codebooks,
                       const FrameConfig& frames, std::size_t length, int sample_rate);

}  // namespace codecse
