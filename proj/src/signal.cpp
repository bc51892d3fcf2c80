#include "codecse/signal.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "codecse/error.hpp"
#include "codecse/params.hpp"

namespace codecse {
namespace {

constexpr double kPi = std::numbers::pi;

double db_to_amplitude(double db) { return std::pow(10.0, db / 20.0); }

struct Transform {
  std::vector<double> window;
  // coefficients x frame_length orthonormal DCT-II rows
  std::vector<double> basis;
};

Transform make_transform(const FrameConfig& cfg) {
  const std::size_t w = cfg.frame_length;
  Transform t;
  t.window.resize(w);
  for (std::size_t n = 0; n < w; ++n) {
    t.window[n] = std::sin(kPi * (static_cast<double>(n) + 0.5) / static_cast<double>(w));
  }
  t.basis.resize(cfg.coefficients * w);
  const double norm = std::sqrt(2.0 / static_cast<double>(w));
  for (std::size_t k = 0; k < cfg.coefficients; ++k) {
    const double ck = k == 0 ? std::sqrt(0.5) : 1.0;
    for (std::size_t n = 0; n < w; ++n) {
      t.basis[k * w + n] = norm * ck *
                           std::cos(kPi * (static_cast<double>(n) + 0.5) *
                                    static_cast<double>(k) / static_cast<double>(w));
    }
  }
  return t;
}

}  // namespace

void FrameConfig::validate() const {
  require(frame_length >= 2 && frame_length % 2 == 0, ErrorKind::kConfig,
          "frame length must be even, got " + std::to_string(frame_length));
  require(hop * 2 == frame_length, ErrorKind::kConfig,
          "hop must be half the frame length for the sine-window overlap-add");
  require(coefficients >= 1 && coefficients <= frame_length, ErrorKind::kConfig,
          "coefficient count " + std::to_string(coefficients) + " must be in [1, " +
              std::to_string(frame_length) + "]");
}

std::size_t FrameConfig::num_frames(std::size_t num_samples) const {
  require(num_samples >= frame_length, ErrorKind::kDomain,
          "signal of " + std::to_string(num_samples) + " samples is shorter than one frame");
  return (num_samples - frame_length) / hop + 1;
}

std::size_t FrameConfig::num_samples(std::size_t num_frames) const {
  return num_frames == 0 ? 0 : (num_frames - 1) * hop + frame_length;
}

void GeneratorConfig::validate(const FrameConfig& frames) const {
  require(num_phones >= 1, ErrorKind::kConfig, "need at least one phone class");
  require(num_harmonics >= 1, ErrorKind::kConfig, "need at least one harmonic");
  require(sample_rate > 0 && duration_s > 0.0, ErrorKind::kConfig, "bad duration/sample rate");
  require(num_samples() >= frames.frame_length, ErrorKind::kDomain,
          "duration shorter than one frame");
  require(f0_min_hz > 0.0 && f0_max_hz >= f0_min_hz, ErrorKind::kConfig, "bad f0 range");
  require(min_segment_hops >= 1 && max_segment_hops >= min_segment_hops, ErrorKind::kConfig,
          "bad segment length range");
  require(gain_db_max >= gain_db_min, ErrorKind::kConfig, "bad gain range");
}

std::size_t GeneratorConfig::num_samples() const {
  return static_cast<std::size_t>(std::llround(duration_s * sample_rate));
}

int UtteranceSpec::frame_label(std::size_t frame, const FrameConfig& frames) const {
  const std::size_t centre = frame * frames.hop + frames.frame_length / 2;
  const std::size_t block = std::min(centre / frames.hop, phone_states.size() - 1);
  return phone_states.at(block);
}

KeyValueText UtteranceSpec::to_text() const {
  KeyValueText kv;
  kv.set("seed", std::to_string(seed));
  kv.set("gain_db", format_double(gain_db));
  std::string states;
  for (std::size_t i = 0; i < phone_states.size(); ++i) {
    if (i) states += ' ';
    states += std::to_string(phone_states[i]);
  }
  kv.set("phone_states", states);
  kv.set("num_classes", std::to_string(classes.size()));
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const std::string p = "class." + std::to_string(k);
    kv.set(p + ".f0_hz", format_double(classes[k].f0_hz));
    std::string amps;
    for (std::size_t h = 0; h < classes[k].harmonic_amplitudes.size(); ++h) {
      if (h) amps += ' ';
      amps += format_double(classes[k].harmonic_amplitudes[h]);
    }
    kv.set(p + ".amplitudes", amps);
  }
  return kv;
}

UtteranceSpec UtteranceSpec::from_text(const KeyValueText& kv) {
  UtteranceSpec spec;
  spec.seed = static_cast<std::uint64_t>(std::stoull(kv.at("seed")));
  spec.gain_db = parse_double(kv.at("gain_db"), "gain_db");
  std::istringstream states(kv.at("phone_states"));
  for (std::string tok; states >> tok;) {
    spec.phone_states.push_back(static_cast<int>(parse_int(tok, "phone_states")));
  }
  const auto n = static_cast<std::size_t>(parse_int(kv.at("num_classes"), "num_classes"));
  for (std::size_t k = 0; k < n; ++k) {
    const std::string p = "class." + std::to_string(k);
    PhoneClass c;
    c.f0_hz = parse_double(kv.at(p + ".f0_hz"), p);
    std::istringstream amps(kv.at(p + ".amplitudes"));
    for (std::string tok; amps >> tok;) c.harmonic_amplitudes.push_back(parse_double(tok, p));
    spec.classes.push_back(std::move(c));
  }
  return spec;
}

std::vector<PhoneClass> make_phone_inventory(const GeneratorConfig& config) {
  std::mt19937_64 rng(config.inventory_seed);
  std::uniform_real_distribution<double> amp(0.2, 1.0);
  std::vector<PhoneClass> classes(config.num_phones);
  for (std::size_t k = 0; k < config.num_phones; ++k) {
    auto& c = classes[k];
    c.f0_hz = config.num_phones == 1
                  ? 0.5 * (config.f0_min_hz + config.f0_max_hz)
                  : config.f0_min_hz + (config.f0_max_hz - config.f0_min_hz) *
                                           static_cast<double>(k) /
                                           static_cast<double>(config.num_phones - 1);
    c.harmonic_amplitudes.resize(config.num_harmonics);
    c.harmonic_amplitudes[0] = 1.0;
    for (std::size_t h = 1; h < config.num_harmonics; ++h) c.harmonic_amplitudes[h] = amp(rng);
  }
  return classes;
}

std::pair<Waveform, UtteranceSpec> generate_utterance(std::uint64_t seed,
                                                      const GeneratorConfig& config,
                                                      const FrameConfig& frames) {
  frames.validate();
  config.validate(frames);
  std::mt19937_64 rng(seed);
  UtteranceSpec spec;
  spec.seed = seed;
  spec.classes = make_phone_inventory(config);
  spec.gain_db = std::uniform_real_distribution<double>(config.gain_db_min, config.gain_db_max)(rng);

  const std::size_t samples = config.num_samples();
  const std::size_t blocks = (samples + frames.hop - 1) / frames.hop;
  std::uniform_int_distribution<std::size_t> seg_len(config.min_segment_hops,
                                                     config.max_segment_hops);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(config.num_phones) - 1);
  int prev = -1;
  while (spec.phone_states.size() < blocks) {
    int cls = pick(rng);
    if (config.num_phones > 1) {
      while (cls == prev) cls = pick(rng);
    }
    prev = cls;
    const std::size_t len = std::min(seg_len(rng), blocks - spec.phone_states.size());
    spec.phone_states.insert(spec.phone_states.end(), len, cls);
  }

  Waveform wave;
  wave.sample_rate = config.sample_rate;
  wave.samples.resize(samples);
  const double peak = db_to_amplitude(spec.gain_db);
  std::vector<double> phase(config.num_harmonics, 0.0);
  const double fs = static_cast<double>(config.sample_rate);
  for (std::size_t n = 0; n < samples; ++n) {
    const auto& cls = spec.classes[static_cast<std::size_t>(spec.phone_states[n / frames.hop])];
    double acc = 0.0;
    double weight = 0.0;
    for (std::size_t h = 0; h < config.num_harmonics; ++h) {
      acc += cls.harmonic_amplitudes[h] * std::sin(phase[h]);
      weight += cls.harmonic_amplitudes[h];
      phase[h] = std::fmod(phase[h] + 2.0 * kPi * static_cast<double>(h + 1) * cls.f0_hz / fs,
                           2.0 * kPi);
    }
    wave.samples[n] = std::clamp(peak * acc / weight, -1.0, 1.0);
  }
  return {std::move(wave), std::move(spec)};
}

void DegradationConfig::validate() const {
  require(snr_db_max >= snr_db_min, ErrorKind::kConfig, "bad SNR range");
  require(clipping_probability >= 0.0 && clipping_probability <= 1.0, ErrorKind::kConfig,
          "clipping probability must lie in [0, 1]");
  require(clipping_min > 0.0 && clipping_max <= 1.0 && clipping_min <= clipping_max,
          ErrorKind::kConfig, "clipping thresholds must lie in (0, 1]");
  require(noise_color_min >= 0.0 && noise_color_max < 1.0 && noise_color_min <= noise_color_max,
          ErrorKind::kConfig, "noise colour must lie in [0, 1)");
}

DegradationSpec draw_degradation(std::uint64_t seed, const DegradationConfig& config) {
  config.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  DegradationSpec spec;
  spec.snr_db = config.snr_db_min + (config.snr_db_max - config.snr_db_min) * unit(rng);
  if (unit(rng) < config.clipping_probability) {
    spec.clipping_threshold =
        config.clipping_min + (config.clipping_max - config.clipping_min) * unit(rng);
  }
  spec.noise_color =
      config.noise_color_min + (config.noise_color_max - config.noise_color_min) * unit(rng);
  spec.noise_seed = rng();
  return spec;
}

double signal_power(const std::vector<double>& samples) {
  if (samples.empty()) return 0.0;
  double p = 0.0;
  for (double v : samples) p += v * v;
  return p / static_cast<double>(samples.size());
}

std::vector<double> scaled_noise(const Waveform& clean, const DegradationSpec& spec) {
  const double ps = signal_power(clean.samples);
  require(ps > 0.0, ErrorKind::kDomain, "cannot set SNR on a silent signal");
  require(std::isfinite(spec.snr_db), ErrorKind::kDomain, "SNR must be finite");
  std::mt19937_64 rng(spec.noise_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> noise(clean.size());
  double prev = 0.0;
  for (auto& v : noise) {
    prev = spec.noise_color * prev + gauss(rng);
    v = prev;
  }
  const double pn = signal_power(noise);
  require(pn > 0.0, ErrorKind::kNumeric, "generated noise is silent");
  const double gain = std::sqrt(ps / (pn * std::pow(10.0, spec.snr_db / 10.0)));
  for (auto& v : noise) v *= gain;
  return noise;
}

Waveform degrade(const Waveform& clean, const DegradationSpec& spec) {
  const auto noise = scaled_noise(clean, spec);
  Waveform out = clean;
  for (std::size_t i = 0; i < out.size(); ++i) out.samples[i] += noise[i];
  if (spec.clipping_threshold) {
    const double thr = *spec.clipping_threshold;
    require(thr > 0.0 && thr <= 1.0, ErrorKind::kDomain, "clipping threshold must lie in (0, 1]");
    double peak = 0.0;
    for (double v : out.samples) peak = std::max(peak, std::abs(v));
    const double level = thr * peak;
    for (auto& v : out.samples) v = std::clamp(v, -level, level);
  }
  for (auto& v : out.samples) v = std::clamp(v, -1.0, 1.0);
  return out;
}

Tensor analyze(const Waveform& wave, const FrameConfig& config) {
  config.validate();
  const std::size_t frames = config.num_frames(wave.size());
  const std::size_t w = config.frame_length;
  const Transform tf = make_transform(config);
  Tensor out = Tensor::matrix(frames, config.coefficients);
  std::vector<double> buf(w);
  for (std::size_t l = 0; l < frames; ++l) {
    const double* src = wave.samples.data() + l * config.hop;
    for (std::size_t n = 0; n < w; ++n) buf[n] = src[n] * tf.window[n];
    for (std::size_t k = 0; k < config.coefficients; ++k) {
      const double* b = tf.basis.data() + k * w;
      double acc = 0.0;
      for (std::size_t n = 0; n < w; ++n) acc += b[n] * buf[n];
      out(l, k) = acc;
    }
  }
  return out;
}

Waveform synthesize(const Tensor& frames, const FrameConfig& config, int sample_rate) {
  config.validate();
  require(frames.rank() == 2 && frames.cols() == config.coefficients, ErrorKind::kShape,
          "synthesize: frames " + shape_string(frames.shape()) + " vs " +
              std::to_string(config.coefficients) + " coefficients");
  const std::size_t w = config.frame_length;
  const Transform tf = make_transform(config);
  Waveform out;
  out.sample_rate = sample_rate;
  out.samples.assign(config.num_samples(frames.rows()), 0.0);
  std::vector<double> norm(out.size(), 0.0);
  std::vector<double> buf(w);
  for (std::size_t l = 0; l < frames.rows(); ++l) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (std::size_t k = 0; k < config.coefficients; ++k) {
      const double c = frames(l, k);
      if (c == 0.0) continue;
      const double* b = tf.basis.data() + k * w;
      for (std::size_t n = 0; n < w; ++n) buf[n] += c * b[n];
    }
    double* dst = out.samples.data() + l * config.hop;
    double* nrm = norm.data() + l * config.hop;
    for (std::size_t n = 0; n < w; ++n) {
      dst[n] += tf.window[n] * buf[n];
      nrm[n] += tf.window[n] * tf.window[n];
    }
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.samples[i] = norm[i] > 1e-12 ? out.samples[i] / norm[i] : 0.0;
  }
  return out;
}

double si_sdr(const Waveform& reference, const Waveform& estimate) {
  require(reference.size() == estimate.size(), ErrorKind::kShape,
          "si_sdr: lengths " + std::to_string(reference.size()) + " vs " +
              std::to_string(estimate.size()));
  double rr = 0.0;
  double re = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    rr += reference.samples[i] * reference.samples[i];
    re += reference.samples[i] * estimate.samples[i];
  }
  require(rr > 0.0, ErrorKind::kDomain, "si_sdr: reference is silent");
  const double alpha = re / rr;
  double target = 0.0;
  double distortion = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = alpha * reference.samples[i];
    const double e = estimate.samples[i] - t;
    target += t * t;
    distortion += e * e;
  }
  if (distortion == 0.0) return kSiSdrCeilingDb;
  if (target == 0.0) return -kSiSdrCeilingDb;
  return std::clamp(10.0 * std::log10(target / distortion), -kSiSdrCeilingDb, kSiSdrCeilingDb);
}

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}
void put_u16(std::ofstream& out, std::uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  out.write(reinterpret_cast<const char*>(b), 2);
}
std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 |
         std::uint32_t{p[3]} << 24;
}
std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | p[1] << 8);
}

}  // namespace

void write_wav(const std::filesystem::path& path, const Waveform& wave) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write " + path.string());
  const auto data_bytes = static_cast<std::uint32_t>(wave.size() * 2);
  out.write("RIFF", 4);
  put_u32(out, 36 + data_bytes);
  out.write("WAVEfmt ", 8);
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out.write("data", 4);
  put_u32(out, data_bytes);
  for (double v : wave.samples) {
    const auto s = static_cast<std::int16_t>(std::lround(std::clamp(v, -1.0, 1.0) * 32767.0));
    put_u16(out, static_cast<std::uint16_t>(s));
  }
  require(out.good(), ErrorKind::kIo, "write failed for " + path.string());
}

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  std::vector<unsigned char> raw((std::istreambuf_iterator<char>(in)),
                                 std::istreambuf_iterator<char>());
  require(raw.size() >= 12 && std::memcmp(raw.data(), "RIFF", 4) == 0 &&
              std::memcmp(raw.data() + 8, "WAVE", 4) == 0,
          ErrorKind::kIo, path.string() + ": not a RIFF/WAVE file");
  Waveform wave;
  std::size_t pos = 12;
  bool have_fmt = false;
  while (pos + 8 <= raw.size()) {
    const std::uint32_t len = get_u32(raw.data() + pos + 4);
    const unsigned char* body = raw.data() + pos + 8;
    require(pos + 8 + len <= raw.size(), ErrorKind::kIo, path.string() + ": truncated chunk");
    if (std::memcmp(raw.data() + pos, "fmt ", 4) == 0) {
      require(get_u16(body) == 1 && get_u16(body + 2) == 1 && get_u16(body + 14) == 16,
              ErrorKind::kIo, path.string() + ": only 16-bit mono PCM is supported");
      wave.sample_rate = static_cast<int>(get_u32(body + 4));
      have_fmt = true;
    } else if (std::memcmp(raw.data() + pos, "data", 4) == 0) {
      require(have_fmt, ErrorKind::kIo, path.string() + ": data chunk before fmt chunk");
      wave.samples.resize(len / 2);
      for (std::size_t i = 0; i < wave.samples.size(); ++i) {
        wave.samples[i] = static_cast<std::int16_t>(get_u16(body + 2 * i)) / 32767.0;
      }
      return wave;
    }
    pos += 8 + len + (len & 1);
  }
  fail(ErrorKind::kIo, path.string() + ": no data chunk");
}

void write_samples_f64(const std::filesystem::path& path, const Waveform& wave) {
  write_f64_file(path, wave.samples);
}

Waveform read_samples_f64(const std::filesystem::path& path, int sample_rate) {
  return Waveform{read_f64_file(path), sample_rate};
}

}  // namespace codecse
