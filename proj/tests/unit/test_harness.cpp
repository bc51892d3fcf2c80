#include <array>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "codecse/error.hpp"
#include "codecse/harness.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace codecse;
namespace fs = std::filesystem;

namespace {

RunConfig small_config(const fs::path& out, std::uint64_t seed = 3) {
  auto kv = KeyValueText::parse(R"(
corpus.train_count = 12
corpus.val_count = 4
rvq.num_stages = 2
rvq.codebook_size = 16
rvq.iterations = 4
model.num_stages = 2
model.codebook_size = 16
model.dim = 8
model.semantic_dim = 8
model.masked_blocks = 1
model.continuous_blocks = 1
train.steps = 3
train.batch = 2
train.learning_rate = 0.001
eval.classifier_utterances = 12
sweep.T = 0.1,0.5,1
)");
  auto cfg = RunConfig::from_text(kv);
  cfg.seed = seed;
  cfg.out = out;
  return RunConfig::from_text(cfg.to_text());
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Relative path -> bytes for every regular file under dir.
std::map<std::string, std::string> tree(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return out;
}

std::size_t count_suffix(const fs::path& dir, const std::string& suffix) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    n += name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  }
  return n;
}

struct Prepared {
  fs::path root;
  RunConfig cfg;
};

// One shared run with data, codebooks and a full checkpoint.
const Prepared& prepared() {
  static const Prepared p = [] {
    Prepared out;
    out.root = testing::temp_dir("harness_shared");
    out.cfg = small_config(out.root / "run");
    Harness h(out.cfg);
    h.gen_data();
    h.train_rvq();
    h.train(Variant::kFull);
    return out;
  }();
  return p;
}

struct CliResult {
  int code = 0;
  std::string output;
};

CliResult run_cli(const std::string& args) {
  const std::string cmd = std::string(CODECSE_CLI_PATH) + " " + args + " 2>&1";
  CliResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 512> buf{};
  while (fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

}  // namespace

TEST_CASE("config round trip is the identity") {
  const auto cfg = small_config("x");
  const auto text = cfg.to_text().serialize();
  const auto back = RunConfig::from_text(KeyValueText::parse(text));
  CHECK(back == cfg);
  CHECK(back.to_text().serialize() == text);
  CHECK(RunConfig::from_text({}) == RunConfig::from_text(RunConfig::from_text({}).to_text()));
}

TEST_CASE("unknown config keys are reported, bad values rejected") {
  std::vector<std::string> warnings;
  auto kv = KeyValueText::parse("seed = 4\nmodel.colour = blue\n");
  const auto cfg = RunConfig::from_text(kv, &warnings);
  CHECK(cfg.seed == 4);
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("model.colour") != std::string::npos);
  CHECK_THROWS_AS(RunConfig::from_text(KeyValueText::parse("train.steps = many\n")), Error);
  CHECK_THROWS_AS(RunConfig::from_text(KeyValueText::parse("model.num_heads = 3\n")).validate(), Error);
  CHECK_THROWS_AS(RunConfig::from_text(KeyValueText::parse("sweep.T = 0,0.5\n")).validate(), Error);
  CHECK(RunConfig::from_text(KeyValueText::parse("sweep.T = \n")).sweep_T.empty());
}

TEST_CASE("seed derivation") {
  CHECK(derive_seed(1, "rvq") == derive_seed(1, "rvq"));
  CHECK(derive_seed(1, "rvq") != derive_seed(2, "rvq"));
  CHECK(derive_seed(1, "rvq") != derive_seed(1, "model"));
  CHECK(derive_seed(1, "mask", 0) != derive_seed(1, "mask", 1));
  std::set<std::uint64_t> seen;
  for (std::size_t i = 0; i < 100; ++i) {
    seen.insert(utterance_seed(5, false, i));
    seen.insert(utterance_seed(5, true, i));
    CHECK((utterance_seed(5, true, i) >> 31 & 1u) == 1u);
    CHECK((utterance_seed(5, false, i) >> 31 & 1u) == 0u);
  }
  CHECK(seen.size() == 200);
}

TEST_CASE("gen-data writes the requested pairs and sidecars") {
  const auto root = testing::temp_dir("harness_gen");
  auto cfg = small_config(root / "a");
  cfg.corpus.train_count = 10;
  cfg.corpus.val_count = 3;
  Harness(cfg).gen_data();
  const RunPaths paths{cfg.out};
  CHECK(count_suffix(paths.split(false), ".clean.wav") == 10);
  CHECK(count_suffix(paths.split(false), ".noisy.wav") == 10);
  CHECK(count_suffix(paths.split(false), ".spec.txt") == 10);
  CHECK(count_suffix(paths.split(true), ".spec.txt") == 3);
  const auto items = load_corpus_split(paths.split(false));
  REQUIRE(items.size() == 10);
  const auto fresh = make_corpus_item(cfg, false, 4);
  CHECK(items[4].clean == fresh.clean);
  CHECK(items[4].noisy == fresh.noisy);
  CHECK(items[4].spec == fresh.spec);

  SUBCASE("same config and seed gives a byte-identical corpus") {
    auto other = cfg;
    other.out = root / "b";
    Harness(other).gen_data();
    CHECK(tree(paths.corpus()) == tree(RunPaths{other.out}.corpus()));
  }
  SUBCASE("existing output needs force") {
    try {
      Harness(cfg).gen_data();
      FAIL("expected an io error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kIo);
    }
    CHECK_NOTHROW(Harness(cfg, true).gen_data());
  }
}

TEST_CASE("train and validation seeds are disjoint") {
  const auto cfg = small_config("unused");
  std::set<std::uint64_t> train;
  for (std::size_t i = 0; i < 50; ++i) train.insert(make_corpus_item(cfg, false, i).spec.seed);
  for (std::size_t i = 0; i < 50; ++i) CHECK(train.count(make_corpus_item(cfg, true, i).spec.seed) == 0);
}

TEST_CASE("SNR draws of a 1000-utterance corpus span the configured range") {
  const auto cfg = small_config("unused");
  double lo = 1e9, hi = -1e9;
  for (std::size_t i = 0; i < 1000; ++i) {
    const auto d = draw_degradation(derive_seed(cfg.seed, "noise", i), cfg.degradation);
    lo = std::min(lo, d.snr_db);
    hi = std::max(hi, d.snr_db);
  }
  CHECK(lo >= -5.0);
  CHECK(hi <= 20.0);
  CHECK(lo < -4.5);
  CHECK(hi > 19.5);
  // The corpus path itself stays in range and reports the drawn spec.
  for (std::size_t i = 0; i < 20; ++i) {
    const auto item = make_corpus_item(cfg, i % 2 == 0, i);
    CHECK(item.degradation.snr_db >= -5.0);
    CHECK(item.degradation.snr_db <= 20.0);
  }
}

TEST_CASE("prepare_output_dir semantics") {
  const auto root = testing::temp_dir("harness_prepare");
  CHECK_NOTHROW(prepare_output_dir(root / "new", false));
  CHECK_NOTHROW(prepare_output_dir(root / "new", false));  // empty is fine
  std::ofstream(root / "new" / "f.txt") << "x";
  CHECK_THROWS_AS(prepare_output_dir(root / "new", false), Error);
  prepare_output_dir(root / "new", true);
  CHECK(fs::is_empty(root / "new"));
}

TEST_CASE("training writes a checkpoint and a consistent log") {
  const auto& p = prepared();
  const RunPaths paths{p.cfg.out};
  const auto log = read_train_log(paths.checkpoint("full") / "train_log.csv");
  REQUIRE(log.size() == 3);
  for (const auto& row : log) {
    const auto& l = row.loss;
    CHECK(std::abs(l.total - (l.cross_entropy + l.critic_bce + l.continuous_mae + l.semantic_mae)) <= 1e-9);
  }
  const auto meta = read_checkpoint_meta(paths.checkpoint("full"));
  CHECK(meta.at("variant") == "full");
  CHECK(checkpoint_config_diff(p.cfg, meta).empty());

  // Loading and saving again reproduces every parameter file byte for byte.
  const Model m = Model::load(paths.checkpoint("full"));
  const auto copy = testing::temp_dir("harness_ckpt_copy");
  m.save(copy, meta);
  for (const auto& e : fs::directory_iterator(paths.checkpoint("full"))) {
    if (e.path().extension() == ".bin") CHECK(slurp(e.path()) == slurp(copy / e.path().filename()));
  }
}

TEST_CASE("continuous-only training marks the discrete and semantic modules absent") {
  const auto root = testing::temp_dir("harness_contonly");
  auto cfg = prepared().cfg;
  cfg.out = root / "run";
  fs::create_directories(cfg.out);
  fs::copy(RunPaths{prepared().cfg.out}.corpus(), RunPaths{cfg.out}.corpus(), fs::copy_options::recursive);
  fs::copy(RunPaths{prepared().cfg.out}.rvq(), RunPaths{cfg.out}.rvq(), fs::copy_options::recursive);
  Harness(cfg).train(Variant::kContinuousOnly);
  const auto meta = read_checkpoint_meta(RunPaths{cfg.out}.checkpoint("continuous_only"));
  CHECK(meta.at("module.discrete") == "absent");
  CHECK(meta.at("module.semantic") == "absent");
  CHECK(meta.at("module.continuous") == "present");
  const auto model = ModelConfig::read(meta, "config.");
  CHECK_FALSE(model.discrete_enabled);
  CHECK_FALSE(model.semantic_enabled);
  CHECK_FALSE(model.critic_enabled);
  CHECK(model.continuous_enabled);
}

TEST_CASE("enhance traces follow the schedule and are reproducible") {
  const auto& p = prepared();
  const RunPaths paths{p.cfg.out};
  Harness h(p.cfg, true);
  InferenceConfig one = p.cfg.inference;
  const auto dir1 = h.enhance(paths.checkpoint("full"), one, false, paths.split(true), "one");
  InferenceConfig five = one;
  five.init = InitStrategy::kFull;
  five.T = 1.0;
  five.N = 5;
  const auto dir5 = h.enhance(paths.checkpoint("full"), five, false, paths.split(true), "five");
  const auto sched = reverse_schedule(1.0, 5, {124, 2});
  for (const auto& e : fs::directory_iterator(dir1)) {
    const auto name = e.path().filename().string();
    if (name.find(".trace.txt") == std::string::npos) continue;
    const auto t1 = ReverseTrace::from_text(KeyValueText::read(e.path()));
    REQUIRE(t1.steps.size() == 1);
    CHECK(t1.steps[0].masked_count == mask_count(0.1, {124, 2}));
    const auto t5 = ReverseTrace::from_text(KeyValueText::read(dir5 / name));
    REQUIRE(t5.steps.size() == 5);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(t5.steps[i].masked_count == mask_count(sched[i].t, {124, 2}));
      CHECK(t5.steps[i].masked_after == sched[i].masked_after);
    }
  }
  const auto before = tree(dir5);
  h.enhance(paths.checkpoint("full"), five, false, paths.split(true), "five");
  CHECK(tree(dir5) == before);
  CHECK(count_suffix(dir5, ".trace.txt") == 4);
}

TEST_CASE("mismatched configuration is refused with a field diff") {
  const auto& p = prepared();
  auto cfg = p.cfg;
  cfg.model.dim = 16;
  Harness h(cfg, true);
  try {
    h.eval(RunPaths{cfg.out}.checkpoint("full"), cfg.inference, false, "bad");
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConfig);
    CHECK(std::string(e.what()).find("model.dim: config=16 checkpoint=8") != std::string::npos);
  }
}

TEST_CASE("sweep emits one row per T with the schedule count") {
  const auto& p = prepared();
  Harness h(p.cfg, true);
  const auto csv = h.sweep_t(RunPaths{p.cfg.out}.checkpoint("full"), {0.1, 0.4, 1.0});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line.rfind("T,N,mask_count,", 0) == 0);
  std::vector<std::string> rows;
  while (std::getline(in, line)) rows.push_back(line);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].rfind("0.1,1," + std::to_string(mask_count(0.1, {124, 2})) + ",", 0) == 0);
  CHECK(rows[2].rfind("1,1," + std::to_string(mask_count(1.0, {124, 2})) + ",", 0) == 0);
  CHECK(fs::exists(RunPaths{p.cfg.out}.sweep() / "sweep.csv"));
  CHECK_THROWS_AS(h.sweep_t(RunPaths{p.cfg.out}.checkpoint("full"), {}), Error);
}

TEST_CASE("ablation report structure and consistency") {
  const auto& p = prepared();
  Harness strict(p.cfg, true);
  const auto* missing = "missing checkpoint";
  if (!fs::exists(RunPaths{p.cfg.out}.checkpoint("no_critic"))) {
    try {
      strict.ablate(false);
      FAIL("expected a state error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kState);
      CHECK(std::string(e.what()).find(missing) != std::string::npos);
    }
  }
  Harness h(p.cfg, true);
  const auto result = h.ablate(true);
  const auto systems = result.report.systems();
  REQUIRE(systems.size() == 10);
  CHECK(systems[0] == "noisy");
  CHECK(result.ranks.systems.size() == 10);
  const auto& meta = result.report.metadata();
  CHECK(meta.at("checkpoint.1_quant_error_init") == meta.at("checkpoint.2_random_init"));
  CHECK(meta.at("checkpoint.1_quant_error_init") != meta.at("checkpoint.6_no_semantic"));

  // Row 8 equals the continuous-only evaluation path.
  Harness e(p.cfg, true);
  const auto cont = e.eval(RunPaths{p.cfg.out}.checkpoint("continuous_only"), p.cfg.inference, true, "cont");
  for (const auto& [metric, dir] : eval_metrics()) {
    CHECK(result.report.mean("8_continuous_only", metric) == cont.mean("cont", metric));
  }
  CHECK(fs::exists(RunPaths{p.cfg.out}.ablate() / "ranks.csv"));
}

TEST_CASE("parallel_for covers every index and rethrows") {
  std::vector<int> hits(100, 0);
  parallel_for(100, 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) CHECK(h == 1);
  CHECK_THROWS_AS(parallel_for(10, 3, [](std::size_t i) {
                    if (i == 7) fail(ErrorKind::kState, "boom");
                  }),
                  Error);
}

TEST_CASE("cli reports errors on one line with the category first") {
  const auto root = testing::temp_dir("harness_cli");
  std::ofstream(root / "bad.cfg") << "model.num_heads = 3\n";
  const auto bad = run_cli("--config " + (root / "bad.cfg").string() + " show-config");
  CHECK(bad.code == 1);
  CHECK(bad.output.rfind("error: config: ", 0) == 0);
  CHECK(std::count(bad.output.begin(), bad.output.end(), '\n') == 1);

  const auto missing = run_cli("--out " + (root / "none").string() + " train-rvq");
  CHECK(missing.code == 1);
  CHECK(missing.output.rfind("error: io: ", 0) == 0);

  const auto ok = run_cli("--seed 9 show-config");
  CHECK(ok.code == 0);
  CHECK(ok.output.find("seed = 9\n") != std::string::npos);

  CHECK(run_cli("no-such-command").code != 0);
}
