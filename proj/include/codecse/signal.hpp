#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

#include "codecse/kv_text.hpp"
#include "codecse/tensor.hpp"

namespace codecse {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
  bool operator==(const Waveform& other) const = default;
};

// Frame geometry of the frozen analysis/synthesis transform: sine window of
// frame_length samples, hop of frame_length/2, orthonormal DCT-II truncated to
// `coefficients` outputs per frame.
struct FrameConfig {
  std::size_t frame_length = 256;
  std::size_t hop = 128;
  std::size_t coefficients = 16;

  void validate() const;
  std::size_t num_frames(std::size_t num_samples) const;
  std::size_t num_samples(std::size_t num_frames) const;
};

struct PhoneClass {
  double f0_hz = 0.0;
  std::vector<double> harmonic_amplitudes;
  bool operator==(const PhoneClass& other) const = default;
};

struct GeneratorConfig {
  int sample_rate = 16000;
  double duration_s = 1.0;
  std::size_t num_phones = 8;
  std::size_t num_harmonics = 2;
  double f0_min_hz = 100.0;
  double f0_max_hz = 235.0;
  std::size_t min_segment_hops = 8;
  std::size_t max_segment_hops = 20;
  double gain_db_min = -36.0;
  double gain_db_max = -16.0;
  // Seeds the phone inventory shared by every utterance of a corpus.
  std::uint64_t inventory_seed = 7;

  void validate(const FrameConfig& frames) const;
  std::size_t num_samples() const;
};

struct UtteranceSpec {
  // One latent class per hop-sized block of samples.
  std::vector<int> phone_states;
  std::vector<PhoneClass> classes;
  double gain_db = 0.0;
  std::uint64_t seed = 0;

  // Ground-truth class of analysis frame `frame` (the block holding its centre).
  int frame_label(std::size_t frame, const FrameConfig& frames) const;

  KeyValueText to_text() const;
  static UtteranceSpec from_text(const KeyValueText& text);
  bool operator==(const UtteranceSpec& other) const = default;
};

std::vector<PhoneClass> make_phone_inventory(const GeneratorConfig& config);

// Harmonic source with per-class f0 and harmonic weights, phase continuous
// across class changes, peak gain drawn uniformly from the configured dB range.
std::pair<Waveform, UtteranceSpec> generate_utterance(std::uint64_t seed,
                                                      const GeneratorConfig& config,
                                                      const FrameConfig& frames);

struct DegradationSpec {
  double snr_db = 0.0;
  // Clamp at +-threshold * max|y| after mixing; absent means no clipping.
  std::optional<double> clipping_threshold;
  std::uint64_t noise_seed = 0;
  // AR(1) coefficient of the noise; 0 is white, close to 1 is low-pass.
  double noise_color = 0.0;
};

struct DegradationConfig {
  double snr_db_min = -5.0;
  double snr_db_max = 20.0;
  double clipping_probability = 0.5;
  double clipping_min = 0.3;
  double clipping_max = 0.9;
  double noise_color_min = 0.0;
  double noise_color_max = 0.95;

  void validate() const;
};

DegradationSpec draw_degradation(std::uint64_t seed, const DegradationConfig& config);

// Mixes seeded noise at the requested SNR, then applies optional clipping.
Waveform degrade(const Waveform& clean, const DegradationSpec& spec);
// The noise that degrade() adds before clipping.
std::vector<double> scaled_noise(const Waveform& clean, const DegradationSpec& spec);

// L x coefficients, L = floor((len - W) / hop) + 1.
Tensor analyze(const Waveform& wave, const FrameConfig& config);
// Inverse transform per frame, overlap-add normalized by the summed squared
// window. Output length is (L - 1) * hop + W.
Waveform synthesize(const Tensor& frames, const FrameConfig& config, int sample_rate = 16000);

// Value reported when the estimate has no distortion component.
inline constexpr double kSiSdrCeilingDb = 200.0;
double si_sdr(const Waveform& reference, const Waveform& estimate);
double signal_power(const std::vector<double>& samples);

void write_wav(const std::filesystem::path& path, const Waveform& wave);
Waveform read_wav(const std::filesystem::path& path);
// Raw float64 little-endian sample dump; sample rate is not stored.
void write_samples_f64(const std::filesystem::path& path, const Waveform& wave);
Waveform read_samples_f64(const std::filesystem::path& path, int sample_rate = 16000);

}  // namespace codecse
