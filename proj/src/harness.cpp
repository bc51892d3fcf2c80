#include "codecse/harness.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "codecse/error.hpp"
#include "codecse/params.hpp"

namespace fs = std::filesystem;

namespace codecse {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string size_text(std::size_t v) { return std::to_string(v); }
std::size_t to_size(const std::string& v, const std::string& key) {
  const auto n = parse_int(v, key);
  require(n >= 0, ErrorKind::kConfig, key + " must be non-negative");
  return static_cast<std::size_t>(n);
}
std::string bool_text(bool v) { return v ? "true" : "false"; }

std::string join_doubles(const std::vector<double>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_double(values[i]);
  }
  return out;
}

std::vector<double> split_doubles(const std::string& text, const std::string& key) {
  std::vector<double> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(parse_double(item, key));
  }
  return out;
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CODECSE_SIZE_FIELD(key, member)                                               \
  Field {                                                                             \
    key, [](const RunConfig& c) { return size_text(c.member); },                      \
        [](RunConfig& c, const std::string& v) { c.member = to_size(v, key); }        \
  }
#define CODECSE_DOUBLE_FIELD(key, member)                                             \
  Field {                                                                             \
    key, [](const RunConfig& c) { return format_double(c.member); },                  \
        [](RunConfig& c, const std::string& v) { c.member = parse_double(v, key); }   \
  }
#define CODECSE_BOOL_FIELD(key, member)                                               \
  Field {                                                                             \
    key, [](const RunConfig& c) { return bool_text(c.member); },                      \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(v, key); }     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) { c.seed = static_cast<std::uint64_t>(to_size(v, "seed")); }},
      Field{"out", [](const RunConfig& c) { return c.out.string(); },
            [](RunConfig& c, const std::string& v) { c.out = v; }},
      CODECSE_SIZE_FIELD("threads", threads),
      CODECSE_SIZE_FIELD("frame.length", frames.frame_length),
      CODECSE_SIZE_FIELD("frame.hop", frames.hop),
      CODECSE_SIZE_FIELD("frame.coefficients", frames.coefficients),
      Field{"gen.sample_rate", [](const RunConfig& c) { return std::to_string(c.generator.sample_rate); },
            [](RunConfig& c, const std::string& v) {
              c.generator.sample_rate = static_cast<int>(parse_int(v, "gen.sample_rate"));
            }},
      CODECSE_DOUBLE_FIELD("gen.duration_s", generator.duration_s),
      CODECSE_SIZE_FIELD("gen.num_phones", generator.num_phones),
      CODECSE_SIZE_FIELD("gen.num_harmonics", generator.num_harmonics),
      CODECSE_DOUBLE_FIELD("gen.f0_min_hz", generator.f0_min_hz),
      CODECSE_DOUBLE_FIELD("gen.f0_max_hz", generator.f0_max_hz),
      CODECSE_SIZE_FIELD("gen.min_segment_hops", generator.min_segment_hops),
      CODECSE_SIZE_FIELD("gen.max_segment_hops", generator.max_segment_hops),
      CODECSE_DOUBLE_FIELD("gen.gain_db_min", generator.gain_db_min),
      CODECSE_DOUBLE_FIELD("gen.gain_db_max", generator.gain_db_max),
      Field{"gen.inventory_seed", [](const RunConfig& c) { return std::to_string(c.generator.inventory_seed); },
            [](RunConfig& c, const std::string& v) {
              c.generator.inventory_seed = static_cast<std::uint64_t>(to_size(v, "gen.inventory_seed"));
            }},
      CODECSE_DOUBLE_FIELD("noise.snr_db_min", degradation.snr_db_min),
      CODECSE_DOUBLE_FIELD("noise.snr_db_max", degradation.snr_db_max),
      CODECSE_DOUBLE_FIELD("noise.clipping_probability", degradation.clipping_probability),
      CODECSE_DOUBLE_FIELD("noise.clipping_min", degradation.clipping_min),
      CODECSE_DOUBLE_FIELD("noise.clipping_max", degradation.clipping_max),
      CODECSE_DOUBLE_FIELD("noise.color_min", degradation.noise_color_min),
      CODECSE_DOUBLE_FIELD("noise.color_max", degradation.noise_color_max),
      CODECSE_SIZE_FIELD("corpus.train_count", corpus.train_count),
      CODECSE_SIZE_FIELD("corpus.val_count", corpus.val_count),
      CODECSE_SIZE_FIELD("rvq.num_stages", rvq.num_stages),
      CODECSE_SIZE_FIELD("rvq.codebook_size", rvq.codebook_size),
      CODECSE_SIZE_FIELD("rvq.iterations", rvq.iterations),
      CODECSE_SIZE_FIELD("model.frames", model.frames),
      CODECSE_SIZE_FIELD("model.num_stages", model.num_stages),
      CODECSE_SIZE_FIELD("model.codebook_size", model.codebook_size),
      CODECSE_SIZE_FIELD("model.dim", model.dim),
      CODECSE_SIZE_FIELD("model.semantic_dim", model.semantic_dim),
      CODECSE_SIZE_FIELD("model.frame_dim", model.frame_dim),
      CODECSE_SIZE_FIELD("model.masked_blocks", model.masked_blocks),
      CODECSE_SIZE_FIELD("model.continuous_blocks", model.continuous_blocks),
      CODECSE_SIZE_FIELD("model.semantic_blocks", model.semantic_blocks),
      CODECSE_SIZE_FIELD("model.num_heads", model.num_heads),
      CODECSE_SIZE_FIELD("model.ffn_mult", model.ffn_mult),
      CODECSE_BOOL_FIELD("model.positional", model.positional),
      CODECSE_BOOL_FIELD("model.critic_on_predictions", model.critic_on_predictions),
      CODECSE_BOOL_FIELD("model.critic_all_positions", model.critic_all_positions),
      CODECSE_SIZE_FIELD("train.steps", train.steps),
      CODECSE_SIZE_FIELD("train.batch", train.batch),
      CODECSE_DOUBLE_FIELD("train.learning_rate", train.adam.learning_rate),
      CODECSE_DOUBLE_FIELD("train.beta1", train.adam.beta1),
      CODECSE_DOUBLE_FIELD("train.beta2", train.adam.beta2),
      CODECSE_DOUBLE_FIELD("train.epsilon", train.adam.epsilon),
      CODECSE_DOUBLE_FIELD("train.weight_decay", train.adam.weight_decay),
      Field{"train.warmup_steps", [](const RunConfig& c) { return std::to_string(c.train.adam.warmup_steps); },
            [](RunConfig& c, const std::string& v) {
              c.train.adam.warmup_steps = static_cast<std::uint64_t>(to_size(v, "train.warmup_steps"));
            }},
      CODECSE_SIZE_FIELD("train.log_interval", train.log_interval),
      CODECSE_SIZE_FIELD("train.crop_frames", train.crop_frames),
      CODECSE_DOUBLE_FIELD("infer.T", inference.T),
      CODECSE_SIZE_FIELD("infer.N", inference.N),
      Field{"infer.init", [](const RunConfig& c) { return to_string(c.inference.init); },
            [](RunConfig& c, const std::string& v) { c.inference.init = parse_init_strategy(v); }},
      Field{"infer.remask", [](const RunConfig& c) { return to_string(c.inference.remask); },
            [](RunConfig& c, const std::string& v) { c.inference.remask = parse_remask_policy(v); }},
      CODECSE_BOOL_FIELD("infer.critic_confidence", inference.critic_confidence),
      Field{"sweep.T", [](const RunConfig& c) { return join_doubles(c.sweep_T); },
            [](RunConfig& c, const std::string& v) { c.sweep_T = split_doubles(v, "sweep.T"); }},
      CODECSE_SIZE_FIELD("eval.classifier_utterances", classifier_utterances),
  };
  return table;
}

#undef CODECSE_SIZE_FIELD
#undef CODECSE_DOUBLE_FIELD
#undef CODECSE_BOOL_FIELD

// Seeds of stochastic stages are derived from the run seed.
RunConfig with_derived_seeds(RunConfig c) {
  c.rvq.seed = derive_seed(c.seed, "rvq");
  c.inference.seed = derive_seed(c.seed, "inference");
  return c;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorKind::kIo, "write failed for " + path.string());
}

std::string tokens_text(const TokenGrid& tokens) {
  std::ostringstream out;
  out << "# " << grid_shape(tokens.rows(), tokens.cols()) << '\n';
  for (std::size_t r = 0; r < tokens.rows(); ++r) {
    for (std::size_t c = 0; c < tokens.cols(); ++c) out << (c ? " " : "") << tokens(r, c);
    out << '\n';
  }
  return out.str();
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t seed, const std::string& stage, std::uint64_t index) {
  return splitmix64(splitmix64(seed ^ fnv1a(stage)) ^ splitmix64(index + 0x5851f42d4c957f2dULL));
}

std::uint64_t utterance_seed(std::uint64_t seed, bool validation, std::size_t index) {
  require(index < (std::size_t{1} << 31), ErrorKind::kConfig, "utterance index out of range");
  return (seed << 32) | (validation ? (std::uint64_t{1} << 31) : 0) | static_cast<std::uint64_t>(index);
}

void RunConfig::validate() const {
  frames.validate();
  generator.validate(frames);
  degradation.validate();
  model.validate();
  inference.validate();
  require(threads >= 1, ErrorKind::kConfig, "threads must be at least 1");
  require(rvq.num_stages == model.num_stages, ErrorKind::kConfig,
          "rvq.num_stages (" + std::to_string(rvq.num_stages) + ") must equal model.num_stages (" +
              std::to_string(model.num_stages) + ")");
  require(rvq.codebook_size == model.codebook_size, ErrorKind::kConfig,
          "rvq.codebook_size (" + std::to_string(rvq.codebook_size) +
              ") must equal model.codebook_size (" + std::to_string(model.codebook_size) + ")");
  require(rvq.iterations >= 1, ErrorKind::kConfig, "rvq.iterations must be at least 1");
  require(frames.coefficients == model.frame_dim, ErrorKind::kConfig,
          "frame.coefficients (" + std::to_string(frames.coefficients) +
              ") must equal model.frame_dim (" + std::to_string(model.frame_dim) + ")");
  const std::size_t l = frames.num_frames(generator.num_samples());
  require(!model.positional || l <= model.frames, ErrorKind::kConfig,
          "utterances have " + std::to_string(l) + " frames but model.frames is " +
              std::to_string(model.frames));
  require(train.batch >= 1, ErrorKind::kConfig, "train.batch must be at least 1");
  require(train.log_interval >= 1, ErrorKind::kConfig, "train.log_interval must be at least 1");
  require(train.crop_frames <= l, ErrorKind::kConfig, "train.crop_frames exceeds the utterance length");
  for (double t : sweep_T) {
    require(t > 0.0 && t <= 1.0, ErrorKind::kConfig, "sweep.T values must lie in (0, 1]");
  }
}

KeyValueText RunConfig::to_text() const {
  KeyValueText kv;
  for (const auto& f : fields()) kv.set(f.key, f.get(*this));
  return kv;
}

RunConfig RunConfig::from_text(const KeyValueText& text, std::vector<std::string>* warnings) {
  RunConfig c;
  for (const auto& [key, value] : text.entries()) {
    auto it = std::find_if(fields().begin(), fields().end(),
                           [&](const Field& f) { return f.key == key; });
    if (it == fields().end()) {
      if (warnings) warnings->push_back("unknown config key '" + key + "' ignored");
      continue;
    }
    it->set(c, value);
  }
  return with_derived_seeds(c);
}

RunConfig RunConfig::load(const fs::path& path, std::vector<std::string>* warnings) {
  return from_text(KeyValueText::read(path), warnings);
}

bool RunConfig::operator==(const RunConfig& other) const {
  return to_text() == other.to_text();
}

CorpusItem make_corpus_item(const RunConfig& cfg, bool validation, std::size_t index) {
  const std::uint64_t seed = utterance_seed(cfg.seed, validation, index);
  auto [clean, spec] = generate_utterance(seed, cfg.generator, cfg.frames);
  CorpusItem item;
  std::ostringstream name;
  name << "utt" << std::setw(5) << std::setfill('0') << index;
  item.name = name.str();
  item.degradation = draw_degradation(derive_seed(seed, "degradation"), cfg.degradation);
  item.noisy = degrade(clean, item.degradation);
  item.clean = std::move(clean);
  item.spec = std::move(spec);
  return item;
}

void prepare_output_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir)) {
    require(fs::is_directory(dir), ErrorKind::kIo, dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir)) {
      require(force, ErrorKind::kIo,
              dir.string() + " is not empty; pass --force to overwrite");
      fs::remove_all(dir);
    }
  }
  fs::create_directories(dir);
}

void write_corpus_item(const fs::path& dir, const CorpusItem& item) {
  write_wav(dir / (item.name + ".clean.wav"), item.clean);
  write_wav(dir / (item.name + ".noisy.wav"), item.noisy);
  write_samples_f64(dir / (item.name + ".clean.f64"), item.clean);
  write_samples_f64(dir / (item.name + ".noisy.f64"), item.noisy);
  KeyValueText kv = item.spec.to_text();
  kv.set("sample_rate", std::to_string(item.clean.sample_rate));
  kv.set("degradation.snr_db", format_double(item.degradation.snr_db));
  kv.set("degradation.clipping_threshold",
         item.degradation.clipping_threshold ? format_double(*item.degradation.clipping_threshold)
                                             : "none");
  kv.set("degradation.noise_seed", std::to_string(item.degradation.noise_seed));
  kv.set("degradation.noise_color", format_double(item.degradation.noise_color));
  kv.write(dir / (item.name + ".spec.txt"));
}

std::vector<CorpusItem> load_corpus_split(const fs::path& dir, std::size_t limit,
                                          std::size_t threads) {
  require(fs::is_directory(dir), ErrorKind::kIo, dir.string() + " is not a corpus directory");
  std::vector<std::string> names;
  const std::string suffix = ".spec.txt";
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string f = entry.path().filename().string();
    if (f.size() > suffix.size() && f.ends_with(suffix)) {
      names.push_back(f.substr(0, f.size() - suffix.size()));
    }
  }
  std::sort(names.begin(), names.end());
  if (names.size() > limit) names.resize(limit);
  std::vector<CorpusItem> items(names.size());
  parallel_for(names.size(), threads, [&](std::size_t i) {
    CorpusItem& item = items[i];
    item.name = names[i];
    const auto kv = KeyValueText::read(dir / (item.name + suffix));
    item.spec = UtteranceSpec::from_text(kv);
    const int rate = static_cast<int>(parse_int(kv.at("sample_rate"), "sample_rate"));
    item.clean = read_samples_f64(dir / (item.name + ".clean.f64"), rate);
    item.noisy = read_samples_f64(dir / (item.name + ".noisy.f64"), rate);
    item.degradation.snr_db = parse_double(kv.at("degradation.snr_db"), "degradation.snr_db");
    const auto clip = kv.at("degradation.clipping_threshold");
    if (clip != "none") item.degradation.clipping_threshold = parse_double(clip, "clipping");
    item.degradation.noise_seed = std::stoull(kv.at("degradation.noise_seed"));
    item.degradation.noise_color = parse_double(kv.at("degradation.noise_color"), "noise_color");
  });
  return items;
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoSemantic: return "no_semantic";
    case Variant::kNoContinuous: return "no_continuous";
    case Variant::kContinuousOnly: return "continuous_only";
    case Variant::kNoCritic: return "no_critic";
  }
  return "?";
}

Variant parse_variant(const std::string& text) {
  for (auto v : {Variant::kFull, Variant::kNoSemantic, Variant::kNoContinuous,
                 Variant::kContinuousOnly, Variant::kNoCritic}) {
    if (to_string(v) == text) return v;
  }
  fail(ErrorKind::kConfig, "unknown training variant '" + text + "'");
}

ModelConfig variant_model_config(const RunConfig& cfg, Variant v) {
  ModelConfig m = cfg.model;
  m.seed = derive_seed(cfg.seed, "model");
  m.discrete_enabled = true;
  m.continuous_enabled = true;
  m.semantic_enabled = true;
  m.critic_enabled = true;
  switch (v) {
    case Variant::kFull: break;
    case Variant::kNoSemantic: m.semantic_enabled = false; break;
    case Variant::kNoContinuous: m.continuous_enabled = false; break;
    case Variant::kContinuousOnly:
      m.discrete_enabled = false;
      m.semantic_enabled = false;
      m.critic_enabled = false;
      break;
    case Variant::kNoCritic: m.critic_enabled = false; break;
  }
  return m;
}

void write_train_log(std::ostream& out, const std::vector<TrainLogRow>& log) {
  out << "step,learning_rate,total,cross_entropy,critic_bce,continuous_mae,semantic_mae\n";
  for (const auto& r : log) {
    out << r.step << ',' << format_double(r.learning_rate) << ',' << format_double(r.loss.total)
        << ',' << format_double(r.loss.cross_entropy) << ',' << format_double(r.loss.critic_bce)
        << ',' << format_double(r.loss.continuous_mae) << ',' << format_double(r.loss.semantic_mae)
        << '\n';
  }
}

std::vector<TrainLogRow> read_train_log(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot read " + path.string());
  std::vector<TrainLogRow> rows;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    require(cells.size() == 7, ErrorKind::kIo, path.string() + ": malformed row '" + line + "'");
    TrainLogRow r;
    r.step = to_size(cells[0], "step");
    r.learning_rate = parse_double(cells[1], "learning_rate");
    r.loss.total = parse_double(cells[2], "total");
    r.loss.cross_entropy = parse_double(cells[3], "cross_entropy");
    r.loss.critic_bce = parse_double(cells[4], "critic_bce");
    r.loss.continuous_mae = parse_double(cells[5], "continuous_mae");
    r.loss.semantic_mae = parse_double(cells[6], "semantic_mae");
    rows.push_back(r);
  }
  return rows;
}

std::vector<std::string> checkpoint_config_diff(const RunConfig& cfg, const KeyValueText& meta) {
  std::vector<std::string> diff;
  KeyValueText expected;
  cfg.model.write(expected, "config.");
  for (const char* key : {"frames", "num_stages", "codebook_size", "dim", "semantic_dim",
                          "frame_dim", "masked_blocks", "continuous_blocks", "semantic_blocks",
                          "num_heads", "ffn_mult", "positional"}) {
    const std::string k = std::string("config.") + key;
    const auto want = expected.at(k);
    const auto have = meta.get(k).value_or("<missing>");
    if (want != have) diff.push_back("model." + std::string(key) + ": config=" + want + " checkpoint=" + have);
  }
  const std::pair<const char*, std::size_t> frame_fields[] = {
      {"frame.length", cfg.frames.frame_length},
      {"frame.hop", cfg.frames.hop},
      {"frame.coefficients", cfg.frames.coefficients}};
  for (const auto& [key, value] : frame_fields) {
    const auto have = meta.get(key).value_or("<missing>");
    if (have != std::to_string(value)) {
      diff.push_back(std::string(key) + ": config=" + std::to_string(value) + " checkpoint=" + have);
    }
  }
  return diff;
}

UtteranceOutput run_system(const SystemSpec& system, const Model* model, const Codebooks& codebooks,
                           const CorpusItem& item, const FrameConfig& frames) {
  UtteranceOutput out;
  switch (system.kind) {
    case SystemSpec::Kind::kNoisy:
      out.tokens = rvq_encode(analyze(item.noisy, frames), codebooks).tokens;
      out.wave = item.noisy;
      break;
    case SystemSpec::Kind::kContinuousOnly: {
      auto r = continuous_only_enhance(item.noisy, *model, frames);
      out.tokens = std::move(r.tokens);
      out.wave = std::move(r.wave);
      break;
    }
    case SystemSpec::Kind::kEnhance: {
      auto r = enhance(item.noisy, *model, frames, system.inference);
      out.tokens = std::move(r.tokens);
      out.wave = std::move(r.wave);
      out.trace = std::move(r.trace);
      break;
    }
  }
  return out;
}

const std::vector<std::pair<std::string, MetricDirection>>& eval_metrics() {
  static const std::vector<std::pair<std::string, MetricDirection>> metrics = {
      {"token_accuracy", MetricDirection::kHigherIsBetter},
      {"si_sdr_improvement", MetricDirection::kHigherIsBetter},
      {"frame_mae", MetricDirection::kLowerIsBetter},
      {"phone_accuracy", MetricDirection::kHigherIsBetter},
  };
  return metrics;
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

Harness::Harness(RunConfig cfg, bool force) : cfg_(with_derived_seeds(std::move(cfg))), force_(force) {
  cfg_.validate();
}

void Harness::gen_data() {
  const auto p = paths();
  prepare_output_dir(p.corpus(), force_);
  KeyValueText manifest;
  manifest.set("kind", "corpus");
  manifest.set("seed", std::to_string(cfg_.seed));
  manifest.set("train_count", std::to_string(cfg_.corpus.train_count));
  manifest.set("val_count", std::to_string(cfg_.corpus.val_count));
  for (const auto& [k, v] : cfg_.to_text().entries()) {
    if (k.starts_with("frame.") || k.starts_with("gen.") || k.starts_with("noise.")) manifest.set(k, v);
  }
  for (bool validation : {false, true}) {
    const auto dir = p.split(validation);
    fs::create_directories(dir);
    const std::size_t count = validation ? cfg_.corpus.val_count : cfg_.corpus.train_count;
    parallel_for(count, cfg_.threads, [&](std::size_t i) {
      write_corpus_item(dir, make_corpus_item(cfg_, validation, i));
    });
  }
  manifest.write(p.corpus() / "manifest.txt");
}

Codebooks Harness::train_rvq() {
  const auto p = paths();
  const auto train = load_corpus_split(p.split(false), static_cast<std::size_t>(-1), cfg_.threads);
  require(!train.empty(), ErrorKind::kIo, "training corpus is empty; run gen-data first");
  std::vector<Tensor> per_item(train.size());
  parallel_for(train.size(), cfg_.threads,
               [&](std::size_t i) { per_item[i] = analyze(train[i].clean, cfg_.frames); });
  std::vector<double> data;
  std::size_t rows = 0;
  for (const auto& f : per_item) {
    data.insert(data.end(), f.storage().begin(), f.storage().end());
    rows += f.rows();
  }
  const Codebooks cb = codecse::train_rvq(Tensor({rows, cfg_.frames.coefficients}, std::move(data)), cfg_.rvq);
  prepare_output_dir(p.rvq(), force_);
  save_codebooks(p.rvq(), cb);
  return cb;
}

TrainSummary Harness::train(Variant variant) {
  const auto p = paths();
  require(fs::exists(p.rvq() / "manifest.txt"), ErrorKind::kIo,
          "no RVQ codebooks at " + p.rvq().string() + "; run train-rvq first");
  Codebooks cb = load_codebooks(p.rvq());
  const ModelConfig mc = variant_model_config(cfg_, variant);
  require(cb.num_stages() == mc.num_stages && cb.codebook_size() == mc.codebook_size &&
              cb.dim() == mc.frame_dim,
          ErrorKind::kConfig,
          "RVQ codebooks " + std::to_string(cb.num_stages()) + "x" + std::to_string(cb.codebook_size()) +
              "x" + std::to_string(cb.dim()) + " do not match the model configuration");
  const auto dir = p.checkpoint(to_string(variant));
  prepare_output_dir(dir, force_);

  Model model(mc, std::move(cb));
  const auto corpus = load_corpus_split(p.split(false), static_cast<std::size_t>(-1), cfg_.threads);
  require(!corpus.empty(), ErrorKind::kIo, "training corpus is empty; run gen-data first");
  std::vector<TrainingExample> examples(corpus.size());
  parallel_for(corpus.size(), cfg_.threads, [&](std::size_t i) {
    examples[i] = model.make_example(corpus[i].clean, corpus[i].noisy, cfg_.frames);
  });
  for (const auto& ex : examples) {
    require(!mc.positional || ex.frames() <= mc.frames, ErrorKind::kShape,
            "corpus utterance has " + std::to_string(ex.frames()) + " frames, model.frames is " +
                std::to_string(mc.frames));
    require(cfg_.train.crop_frames <= ex.frames(), ErrorKind::kShape,
            "train.crop_frames exceeds a corpus utterance");
  }

  Trainer trainer(model, cfg_.train.adam);
  std::mt19937_64 rng(derive_seed(cfg_.seed, "train"));
  std::uniform_int_distribution<std::size_t> pick(0, examples.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TrainSummary summary;
  std::vector<TrainingExample> crops(cfg_.train.batch);
  std::vector<TrainBatchItem> batch(cfg_.train.batch);
  for (std::size_t step = 1; step <= cfg_.train.steps; ++step) {
    for (std::size_t b = 0; b < cfg_.train.batch; ++b) {
      const TrainingExample& ex = examples[pick(rng)];
      TrainBatchItem& item = batch[b];
      item.t = 1.0 - unit(rng);
      item.mask_seed = derive_seed(cfg_.seed, "mask", (step - 1) * cfg_.train.batch + b);
      if (cfg_.train.crop_frames > 0) {
        std::uniform_int_distribution<std::size_t> off(0, ex.frames() - cfg_.train.crop_frames);
        item.pos_offset = off(rng);
        crops[b] = ex.crop(item.pos_offset, cfg_.train.crop_frames);
        item.example = &crops[b];
      } else {
        item.pos_offset = 0;
        item.example = &ex;
      }
    }
    const double lr = [&] {
      OptimizerState probe;
      probe.config = cfg_.train.adam;
      probe.step = trainer.state().step + 1;
      return probe.current_learning_rate();
    }();
    const LossBreakdown loss = trainer.train_step(batch);
    require(std::isfinite(loss.total), ErrorKind::kNumeric,
            "non-finite training loss at step " + std::to_string(step));
    if (step % cfg_.train.log_interval == 0 || step == cfg_.train.steps) {
      summary.log.push_back({step, lr, loss});
    }
  }

  KeyValueText meta;
  meta.set("variant", to_string(variant));
  meta.set("run.seed", std::to_string(cfg_.seed));
  meta.set("frame.length", std::to_string(cfg_.frames.frame_length));
  meta.set("frame.hop", std::to_string(cfg_.frames.hop));
  meta.set("frame.coefficients", std::to_string(cfg_.frames.coefficients));
  meta.set("train.steps", std::to_string(cfg_.train.steps));
  meta.set("train.batch", std::to_string(cfg_.train.batch));
  meta.set("train.crop_frames", std::to_string(cfg_.train.crop_frames));
  meta.set("train.examples", std::to_string(examples.size()));
  model.save(dir, meta);
  std::ofstream log(dir / "train_log.csv", std::ios::binary);
  write_train_log(log, summary.log);
  summary.checkpoint_id = model.fingerprint();
  return summary;
}

namespace {

Model load_compatible(const RunConfig& cfg, const fs::path& checkpoint) {
  require(fs::exists(checkpoint / "manifest.txt"), ErrorKind::kIo,
          "no checkpoint at " + checkpoint.string());
  const auto diff = checkpoint_config_diff(cfg, read_checkpoint_meta(checkpoint));
  if (!diff.empty()) {
    std::string msg = "config/checkpoint mismatch:";
    for (const auto& d : diff) msg += " [" + d + "]";
    fail(ErrorKind::kConfig, msg);
  }
  return Model::load(checkpoint);
}

}  // namespace

fs::path Harness::enhance(const fs::path& checkpoint, const InferenceConfig& inference,
                          bool continuous_only, const fs::path& input, const std::string& label) {
  inference.validate();
  const Model model = load_compatible(cfg_, checkpoint);
  const auto items = load_corpus_split(input, static_cast<std::size_t>(-1), cfg_.threads);
  const auto dir = paths().enhanced(label);
  prepare_output_dir(dir, force_);
  SystemSpec system;
  system.name = label;
  system.kind = continuous_only ? SystemSpec::Kind::kContinuousOnly : SystemSpec::Kind::kEnhance;
  system.inference = inference;
  parallel_for(items.size(), cfg_.threads, [&](std::size_t i) {
    const auto out = run_system(system, &model, model.codebooks(), items[i], cfg_.frames);
    write_wav(dir / (items[i].name + ".wav"), out.wave);
    write_samples_f64(dir / (items[i].name + ".f64"), out.wave);
    write_text_file(dir / (items[i].name + ".tokens.txt"), tokens_text(out.tokens));
    if (!continuous_only) out.trace.to_text().write(dir / (items[i].name + ".trace.txt"));
  });
  KeyValueText manifest;
  manifest.set("kind", "enhanced");
  // Relative to the run root when inside it, so relocated runs compare equal.
  const auto rel = checkpoint.lexically_normal().lexically_relative(cfg_.out.lexically_normal());
  const bool inside = !rel.empty() && *rel.begin() != "..";
  manifest.set("checkpoint", inside ? rel.generic_string() : checkpoint.string());
  manifest.set("checkpoint_id", read_checkpoint_meta(checkpoint).at("checkpoint_id"));
  manifest.set("continuous_only", bool_text(continuous_only));
  manifest.set("infer.T", format_double(inference.T));
  manifest.set("infer.N", std::to_string(inference.N));
  manifest.set("infer.init", to_string(inference.init));
  manifest.set("infer.remask", to_string(inference.remask));
  manifest.set("utterances", std::to_string(items.size()));
  manifest.write(dir / "manifest.txt");
  return dir;
}

const std::vector<CorpusItem>& Harness::validation_set() {
  if (!val_loaded_) {
    val_ = load_corpus_split(paths().split(true), static_cast<std::size_t>(-1), cfg_.threads);
    require(!val_.empty(), ErrorKind::kIo, "validation corpus is empty; run gen-data first");
    val_loaded_ = true;
  }
  return val_;
}

const PhoneClassifier& Harness::classifier() {
  if (!classifier_.fitted()) {
    const auto train = load_corpus_split(paths().split(false), cfg_.classifier_utterances, cfg_.threads);
    require(!train.empty(), ErrorKind::kIo, "training corpus is empty; run gen-data first");
    std::vector<std::pair<Waveform, UtteranceSpec>> corpus;
    for (const auto& item : train) corpus.emplace_back(item.clean, item.spec);
    classifier_.fit(corpus, cfg_.frames);
  }
  return classifier_;
}

EvalReport Harness::evaluate(const std::vector<SystemSpec>& systems) {
  const auto& val = validation_set();
  const auto& phone = classifier();
  const Codebooks cb = load_codebooks(paths().rvq());
  std::vector<Tensor> clean_frames(val.size());
  std::vector<TokenGrid> clean_tokens(val.size());
  parallel_for(val.size(), cfg_.threads, [&](std::size_t i) {
    clean_frames[i] = analyze(val[i].clean, cfg_.frames);
    clean_tokens[i] = rvq_encode(clean_frames[i], cb).tokens;
  });

  EvalReport report;
  report.metadata().set("seed", std::to_string(cfg_.seed));
  report.metadata().set("utterances", std::to_string(val.size()));
  for (const auto& system : systems) {
    std::optional<Model> model;
    if (system.kind != SystemSpec::Kind::kNoisy) {
      model.emplace(load_compatible(cfg_, system.checkpoint));
      report.metadata().set("checkpoint." + system.name, model->fingerprint());
      if (system.kind == SystemSpec::Kind::kEnhance) {
        report.metadata().set("inference." + system.name,
                              "init=" + to_string(system.inference.init) +
                                  " T=" + format_double(system.inference.T) +
                                  " N=" + std::to_string(system.inference.N) +
                                  " remask=" + to_string(system.inference.remask));
      }
    }
    std::vector<std::array<double, 4>> values(val.size());
    parallel_for(val.size(), cfg_.threads, [&](std::size_t i) {
      const auto out = run_system(system, model ? &*model : nullptr, cb, val[i], cfg_.frames);
      const Tensor decoded = system.kind == SystemSpec::Kind::kNoisy
                                 ? analyze(val[i].noisy, cfg_.frames)
                                 : rvq_decode(out.tokens, cb);
      values[i] = {token_accuracy(out.tokens, clean_tokens[i]),
                   si_sdr_improvement(val[i].clean, val[i].noisy, out.wave),
                   frame_mae(decoded, clean_frames[i]),
                   phone_accuracy(out.wave, val[i].spec, phone, cfg_.frames)};
    });
    for (std::size_t i = 0; i < val.size(); ++i) {
      for (std::size_t m = 0; m < eval_metrics().size(); ++m) {
        report.add(system.name, val[i].name, eval_metrics()[m].first, values[i][m]);
      }
    }
  }
  report.check_aligned();
  return report;
}

EvalReport Harness::eval(const fs::path& checkpoint, const InferenceConfig& inference,
                         bool continuous_only, const std::string& label) {
  inference.validate();
  const auto dir = paths().eval(label);
  prepare_output_dir(dir, force_);
  SystemSpec noisy{"noisy", SystemSpec::Kind::kNoisy, {}, inference};
  SystemSpec system{label,
                    continuous_only ? SystemSpec::Kind::kContinuousOnly : SystemSpec::Kind::kEnhance,
                    checkpoint, inference};
  EvalReport report = evaluate({noisy, system});
  std::ofstream csv(dir / "report.csv", std::ios::binary);
  report.write_csv(csv);
  report.summary().write(dir / "summary.txt");
  return report;
}

std::string Harness::sweep_t(const fs::path& checkpoint, const std::vector<double>& Ts) {
  require(!Ts.empty(), ErrorKind::kConfig, "empty T list");
  const auto dir = paths().sweep();
  prepare_output_dir(dir, force_);
  const auto& val = validation_set();
  const ScheduleParams sched{cfg_.frames.num_frames(val.front().noisy.size()), cfg_.model.num_stages};
  std::vector<SystemSpec> systems;
  for (double t : Ts) {
    InferenceConfig inf = cfg_.inference;
    inf.T = t;
    inf.N = 1;
    inf.init = inf.init == InitStrategy::kFull ? InitStrategy::kQuantError : inf.init;
    systems.push_back({"T=" + format_double(t), SystemSpec::Kind::kEnhance, checkpoint, inf});
  }
  const EvalReport report = evaluate(systems);
  std::ostringstream out;
  out << "T,N,mask_count";
  for (const auto& [m, d] : eval_metrics()) out << ',' << m;
  out << '\n';
  for (std::size_t i = 0; i < Ts.size(); ++i) {
    out << format_double(Ts[i]) << ",1," << mask_count(Ts[i], sched);
    for (const auto& [m, d] : eval_metrics()) out << ',' << format_double(report.mean(systems[i].name, m));
    out << '\n';
  }
  write_text_file(dir / "sweep.csv", out.str());
  std::ofstream csv(dir / "report.csv", std::ios::binary);
  report.write_csv(csv);
  return out.str();
}

std::vector<SystemSpec> Harness::ablation_systems(const RunPaths& p, const InferenceConfig& base) {
  auto inf = [&](InitStrategy init, double T, std::size_t N) {
    InferenceConfig c = base;
    c.init = init;
    c.T = T;
    c.N = N;
    return c;
  };
  const auto full = p.checkpoint(to_string(Variant::kFull));
  using K = SystemSpec::Kind;
  return {
      {"1_quant_error_init", K::kEnhance, full, inf(InitStrategy::kQuantError, 0.1, 1)},
      {"2_random_init", K::kEnhance, full, inf(InitStrategy::kRandom, 0.1, 1)},
      {"3_full_mask_N1", K::kEnhance, full, inf(InitStrategy::kFull, 1.0, 1)},
      {"4_full_mask_N5", K::kEnhance, full, inf(InitStrategy::kFull, 1.0, 5)},
      {"5_full_mask_N10", K::kEnhance, full, inf(InitStrategy::kFull, 1.0, 10)},
      {"6_no_semantic", K::kEnhance, p.checkpoint(to_string(Variant::kNoSemantic)),
       inf(InitStrategy::kQuantError, 0.1, 1)},
      {"7_no_continuous", K::kEnhance, p.checkpoint(to_string(Variant::kNoContinuous)),
       inf(InitStrategy::kFull, 1.0, 1)},
      {"8_continuous_only", K::kContinuousOnly, p.checkpoint(to_string(Variant::kContinuousOnly)),
       base},
      {"9_no_critic", K::kEnhance, p.checkpoint(to_string(Variant::kNoCritic)),
       inf(InitStrategy::kQuantError, 0.1, 1)},
  };
}

Harness::AblationResult Harness::ablate(bool train_if_absent) {
  const auto p = paths();
  const auto dir = p.ablate();
  prepare_output_dir(dir, force_);
  for (auto v : {Variant::kFull, Variant::kNoSemantic, Variant::kNoContinuous,
                 Variant::kContinuousOnly, Variant::kNoCritic}) {
    if (fs::exists(p.checkpoint(to_string(v)) / "manifest.txt")) continue;
    require(train_if_absent, ErrorKind::kState,
            "missing checkpoint for variant '" + to_string(v) + "' at " +
                p.checkpoint(to_string(v)).string() + "; pass --train-if-absent");
    const bool saved_force = force_;
    force_ = true;
    train(v);
    force_ = saved_force;
  }
  std::vector<SystemSpec> systems = {{"noisy", SystemSpec::Kind::kNoisy, {}, cfg_.inference}};
  for (auto& s : ablation_systems(p, cfg_.inference)) systems.push_back(std::move(s));
  AblationResult result;
  result.report = evaluate(systems);
  result.ranks = rank_aggregate(result.report, eval_metrics());
  std::ofstream csv(dir / "report.csv", std::ios::binary);
  result.report.write_csv(csv);
  result.report.summary().write(dir / "summary.txt");
  std::ofstream ranks(dir / "ranks.csv", std::ios::binary);
  result.ranks.write_csv(ranks);
  return result;
}

}  // namespace codecse
