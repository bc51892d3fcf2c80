#include <cmath>
#include <cstring>
#include <random>

#include "codecse/error.hpp"
#include "codecse/masking.hpp"
#include "codecse/model.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace codecse;

namespace {

Codebooks random_codebooks(std::size_t stages, std::size_t size, std::size_t dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Codebooks cb;
  for (std::size_t c = 0; c < stages; ++c) cb.stages.push_back(testing::random_tensor({size, dim}, rng, 0.5 / (c + 1)));
  return cb;
}

ModelConfig small_config(std::size_t frames = 4) {
  ModelConfig cfg;
  cfg.frames = frames;
  cfg.num_stages = 3;
  cfg.codebook_size = 8;
  cfg.dim = 16;
  cfg.semantic_dim = 8;
  cfg.frame_dim = 6;
  cfg.seed = 5;
  return cfg;
}

TrainingExample random_example(const Model& model, std::size_t frames, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TrainingExample ex;
  ex.clean_frames = testing::random_tensor({frames, model.config().frame_dim}, rng, 0.5);
  ex.noisy_frames = ex.clean_frames;
  for (auto& v : ex.noisy_frames.values()) v += std::normal_distribution<double>(0.0, 0.2)(rng);
  ex.clean_tokens = rvq_encode(ex.clean_frames, model.codebooks()).tokens;
  ex.clean_semantic = model.semantic_features(ex.clean_frames);
  return ex;
}

void zero_param(Model& m, const std::string& name) {
  const auto id = m.params().find(name);
  REQUIRE(id.has_value());
  m.params()[*id].value.fill(0.0);
}

std::vector<Tensor> frozen_snapshot(const Model& m) {
  std::vector<Tensor> out;
  for (const auto& p : m.params())
    if (!p.trainable) out.push_back(p.value);
  return out;
}

std::pair<Waveform, Waveform> utterance_pair(std::uint64_t seed) {
  auto [clean, spec] = generate_utterance(seed, GeneratorConfig{}, FrameConfig{});
  Waveform noisy = degrade(clean, DegradationSpec{5.0, std::nullopt, seed + 1, 0.5});
  return {clean, noisy};
}

Codebooks codebooks_for(const Waveform& clean) {
  return train_rvq(analyze(clean, FrameConfig{}), RvqTrainConfig{4, 64, 10, 1});
}

}  // namespace

TEST_CASE("P0 slices sum to one") {
  Model model(small_config(), random_codebooks(3, 8, 6, 1));
  std::mt19937_64 rng(2);
  testing::randomize(model.params(), rng, 0.5);
  const auto ex = random_example(model, 4, 3);
  Tape tape(&model.params(), false);
  auto co = model.continuous_forward(tape, ex.noisy_frames);
  auto so = model.semantic_forward(tape, ex.noisy_frames);
  const TokenGrid masked = apply_mask(ex.clean_tokens, random_mask(0.6, {4, 3}, 1), model.mask_token());
  auto d = model.discrete_forward(tape, masked, co.conditioning, so.conditioning);
  const Tensor p = grouped_softmax(tape.value(d.logits), 8);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < 8; ++k) s += p(r, c * 8 + k);
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  CHECK(tape.value(d.critic_logits).shape() == Shape{4, 3});
  CHECK(tape.value(co.conditioning).shape() == Shape{4, 16});
  CHECK(tape.value(so.conditioning).shape() == Shape{4, 16});
  for (int tok : co.tokens.values()) CHECK(tok < model.mask_token());
}

TEST_CASE("zeroed token head gives uniform P0 and CE = ln D") {
  Model model(small_config(), random_codebooks(3, 8, 6, 1));
  zero_param(model, "masked_lm.token_head.weight");
  zero_param(model, "masked_lm.token_head.bias");
  const auto ex = random_example(model, 4, 3);
  Tape tape(&model.params(), false);
  const auto z = model.zero_conditioning(tape, 4);
  auto d = model.discrete_forward(tape, TokenGrid(4, 3, model.mask_token()), z, z);
  const Tensor p0 = grouped_softmax(tape.value(d.logits), 8);
  for (double v : p0.values()) CHECK(v == doctest::Approx(1.0 / 8.0).epsilon(1e-15));
  const auto loss = model.example_loss(ex, 0.5, 7, 0, nullptr);
  CHECK(loss.cross_entropy == doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("loss term examples") {
  Tape tape;
  SUBCASE("uniform D=4 cross-entropy") {
    Var logits = tape.constant(Tensor({2, 8}));
    const auto targets = TokenGrid::from_rows({{0, 3}, {2, 1}});
    Var ce = tape.masked_cross_entropy(logits, targets, MaskGrid::from_rows({{1, 1}, {0, 1}}), 4);
    CHECK(tape.value(ce)[0] == doctest::Approx(1.386294).epsilon(1e-6));
    CHECK(std::abs(tape.value(ce)[0] - std::log(4.0)) < 1e-15);
  }
  SUBCASE("one-hot cross-entropy is zero, empty mask is zero with zero gradient") {
    Tensor l({1, 8}, -1e3);
    l(0, 1) = 1e3;
    l(0, 6) = 1e3;
    const auto targets = TokenGrid::from_rows({{1, 2}});
    CHECK(tape.value(tape.masked_cross_entropy(tape.constant(l), targets, MaskGrid(1, 2, 1), 4))[0] < 1e-12);
    Var leaf = tape.leaf(Tensor({1, 8}, 0.3));
    Var empty = tape.masked_cross_entropy(leaf, targets, MaskGrid(1, 2, 0), 4);
    CHECK(tape.value(empty)[0] == 0.0);
    tape.backward(empty);
    const Tensor& g = tape.grad(leaf);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
  }
  SUBCASE("binary cross-entropy") {
    const auto mask = MaskGrid::from_rows({{1, 0}, {0, 1}});
    CHECK(tape.value(tape.bce_with_logits(tape.constant(Tensor({2, 2})), mask))[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));
    const Tensor good = Tensor::from_rows({{20, -20}, {-20, 20}});
    CHECK(tape.value(tape.bce_with_logits(tape.constant(good), mask))[0] < 1e-6);
    const Tensor bad = Tensor::from_rows({{-20, 20}, {20, -20}});
    CHECK(tape.value(tape.bce_with_logits(tape.constant(bad), mask))[0] > 10.0);
  }
  SUBCASE("mean absolute error") {
    const Tensor target = Tensor::from_rows({{0, 2}, {3, 0}});
    CHECK(tape.value(tape.mae(tape.constant(Tensor::from_rows({{1, 2}, {3, 4}})), target))[0] == 1.25);
    CHECK(tape.value(tape.mae(tape.constant(target), target))[0] == 0.0);
    Tensor shifted = target;
    for (auto& v : shifted.values()) v += 0.375;
    CHECK(tape.value(tape.mae(tape.constant(shifted), target))[0] == doctest::Approx(0.375).epsilon(1e-15));
    CHECK_THROWS_AS(tape.mae(tape.constant(Tensor({2, 3})), target), Error);
  }
}

TEST_CASE("shared embedding bank reaches both the token input and the continuous conditioning") {
  Model model(small_config(), random_codebooks(3, 8, 6, 1));
  std::mt19937_64 rng(4);
  testing::randomize(model.params(), rng, 0.3);
  const auto ex = random_example(model, 4, 5);

  // One table per stage, and no other parameter holds token embeddings.
  std::size_t tables = 0;
  for (const auto& p : model.params()) tables += p.name.rfind("bank.", 0) == 0 ? 1 : 0;
  CHECK(tables == 3);
  CHECK(model.embedding_bank().size() == 3);

  Tape t0(&model.params(), false);
  auto co0 = model.continuous_forward(t0, ex.noisy_frames);
  const int tok = co0.tokens(0, 0);
  const TokenGrid input(4, 3, tok);
  const auto z0 = model.zero_conditioning(t0, 4);
  const Tensor cond0 = t0.value(co0.conditioning);
  const Tensor logits0 = t0.value(model.discrete_forward(t0, input, z0, z0).logits);

  auto& table = model.params()[model.embedding_bank()[0].table].value;
  for (std::size_t j = 0; j < table.cols(); ++j) table(static_cast<std::size_t>(tok), j) += 1e-3;

  Tape t1(&model.params(), false);
  auto co1 = model.continuous_forward(t1, ex.noisy_frames);
  const auto z1 = model.zero_conditioning(t1, 4);
  const Tensor cond1 = t1.value(co1.conditioning);
  const Tensor logits1 = t1.value(model.discrete_forward(t1, input, z1, z1).logits);
  double dc = 0.0, dl = 0.0;
  for (std::size_t i = 0; i < cond0.size(); ++i) dc = std::max(dc, std::abs(cond1[i] - cond0[i]));
  for (std::size_t i = 0; i < logits0.size(); ++i) dl = std::max(dl, std::abs(logits1[i] - logits0[i]));
  CHECK(dc > 0.0);
  CHECK(dl > 0.0);
}

TEST_CASE("semantic encoder is frozen and deterministic") {
  Model a(small_config(), random_codebooks(3, 8, 6, 1));
  Model b(small_config(), random_codebooks(3, 8, 6, 1));
  const auto ex = random_example(a, 4, 6);
  CHECK(a.semantic_features(ex.clean_frames) == a.semantic_features(ex.clean_frames));
  CHECK(a.semantic_features(ex.clean_frames) == b.semantic_features(ex.clean_frames));
  const auto id = a.params().find("frozen.semantic_projection");
  REQUIRE(id.has_value());
  CHECK_FALSE(a.params()[*id].trainable);
}

TEST_CASE("cross-entropy gradient is zero at unmasked cells") {
  Model model(small_config(), random_codebooks(3, 8, 6, 1));
  std::mt19937_64 rng(7);
  testing::randomize(model.params(), rng, 0.3);
  const auto ex = random_example(model, 4, 8);
  const auto mask = MaskGrid::from_rows({{1, 0, 0}, {0, 1, 1}, {0, 0, 0}, {1, 1, 1}});
  const Tensor g = model.cross_entropy_logit_gradient(ex, mask);
  REQUIRE(g.shape() == Shape{4, 24});
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 3; ++c) {
      double mag = 0.0;
      for (std::size_t k = 0; k < 8; ++k) mag += std::abs(g(r, c * 8 + k));
      if (mask(r, c)) CHECK(mag > 0.0);
      else CHECK(mag == 0.0);
    }
  }
}

TEST_CASE("full training loss gradients match central differences within 1e-4") {
  ModelConfig cfg = small_config();
  cfg.dim = 32;
  cfg.codebook_size = 16;
  cfg.frame_dim = 16;
  cfg.semantic_dim = 32;
  Model model(cfg, random_codebooks(3, 16, 16, 2));
  std::mt19937_64 rng(9);
  testing::randomize(model.params(), rng, 0.2);
  const auto ex = random_example(model, 4, 10);
  auto loss = [&](GradientSet* g) { return model.example_loss(ex, 0.7, 11, 0, g).total; };
  const auto r = testing::finite_difference_check(model.params(), loss, 1e-5, 24);
  INFO(r.worst);
  CHECK(r.checked > 500);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("returned total is the exact sum of the components") {
  Model model(small_config(), random_codebooks(3, 8, 6, 1));
  const auto ex = random_example(model, 4, 12);
  Trainer trainer(model, AdamConfig{});
  for (double t : {0.1, 0.5, 1.0}) {
    const TrainBatchItem item{&ex, t, 3, 0};
    const auto l = trainer.train_step(std::span<const TrainBatchItem>(&item, 1));
    CHECK(std::abs(l.total - (l.cross_entropy + l.critic_bce + l.continuous_mae + l.semantic_mae)) <= 1e-12);
    CHECK(l.critic_bce > 0.0);
    CHECK(l.continuous_mae > 0.0);
    CHECK(l.semantic_mae > 0.0);
  }
}

TEST_CASE("frozen components are bit-identical after training steps") {
  Model model(small_config(), random_codebooks(3, 8, 6, 1));
  const auto before = frozen_snapshot(model);
  const Codebooks cb = model.codebooks();
  const auto ex = random_example(model, 4, 13);
  Trainer trainer(model, AdamConfig{1e-2});
  for (std::uint64_t s = 0; s < 5; ++s) {
    const TrainBatchItem item{&ex, 0.5, s, 0};
    trainer.train_step(std::span<const TrainBatchItem>(&item, 1));
  }
  const auto after = frozen_snapshot(model);
  REQUIRE(after.size() == before.size());
  for (std::size_t i = 0; i < after.size(); ++i)
    CHECK(std::memcmp(after[i].data(), before[i].data(), after[i].size() * sizeof(double)) == 0);
  CHECK(model.codebooks() == cb);
}

TEST_CASE("disabled modules contribute zero and receive no gradient") {
  SUBCASE("critic") {
    ModelConfig cfg = small_config();
    cfg.critic_enabled = false;
    Model model(cfg, random_codebooks(3, 8, 6, 1));
    CHECK_FALSE(model.params().find("masked_lm.critic_head.weight").has_value());
    const auto ex = random_example(model, 4, 14);
    const auto l = model.example_loss(ex, 0.5, 1, 0, nullptr);
    CHECK(l.critic_bce == 0.0);
  }
  SUBCASE("semantic and continuous") {
    ModelConfig cfg = small_config();
    cfg.semantic_enabled = false;
    cfg.continuous_enabled = false;
    Model model(cfg, random_codebooks(3, 8, 6, 1));
    for (const auto& p : model.params()) {
      CHECK(p.name.rfind("semantic.", 0) != 0);
      CHECK(p.name.rfind("continuous.", 0) != 0);
    }
    const auto ex = random_example(model, 4, 15);
    GradientSet g = model.params().zero_gradients();
    const auto l = model.example_loss(ex, 0.5, 1, 0, &g);
    CHECK(l.semantic_mae == 0.0);
    CHECK(l.continuous_mae == 0.0);
    CHECK(l.cross_entropy > 0.0);
  }
  SUBCASE("continuous only") {
    ModelConfig cfg = small_config();
    cfg.discrete_enabled = false;
    cfg.semantic_enabled = false;
    cfg.critic_enabled = false;
    Model model(cfg, random_codebooks(3, 8, 6, 1));
    const auto ex = random_example(model, 4, 16);
    GradientSet g = model.params().zero_gradients();
    const auto l = model.example_loss(ex, 0.5, 1, 0, &g);
    CHECK(l.cross_entropy == 0.0);
    CHECK(l.critic_bce == 0.0);
    CHECK(l.total == l.continuous_mae);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (model.params()[i].name.rfind("bank.", 0) == 0) {
        for (double v : g[i].values()) CHECK(v == 0.0);
      }
    }
  }
}

TEST_CASE("model checkpoint round trip") {
  Model model(small_config(), random_codebooks(3, 8, 6, 1));
  std::mt19937_64 rng(17);
  testing::randomize(model.params(), rng, 0.1);
  const auto dir = testing::temp_dir("model_ckpt");
  model.save(dir);
  const Model back = Model::load(dir);
  CHECK(back.config() == model.config());
  CHECK(back.fingerprint() == model.fingerprint());
  const auto ex = random_example(model, 4, 18);
  CHECK(back.example_loss(ex, 0.5, 2, 0, nullptr).total == model.example_loss(ex, 0.5, 2, 0, nullptr).total);
}

TEST_CASE("shape errors") {
  Model model(small_config(), random_codebooks(3, 8, 6, 1));
  Tape tape(&model.params(), false);
  CHECK_THROWS_AS(model.continuous_forward(tape, Tensor({4, 5})), Error);
  const auto z = model.zero_conditioning(tape, 4);
  CHECK_THROWS_AS(model.discrete_forward(tape, TokenGrid(4, 2, 0), z, z), Error);
  CHECK_THROWS_AS(model.discrete_forward(tape, TokenGrid(3, 3, 0), z, z), Error);
  ModelConfig bad = small_config();
  bad.num_heads = 3;
  CHECK_THROWS_AS(Model(bad, random_codebooks(3, 8, 6, 1)), Error);
}

TEST_CASE("overfitting one pair drives the masked cross-entropy below 0.1") {
  const auto [clean, noisy] = utterance_pair(21);
  ModelConfig cfg;
  cfg.seed = 3;
  Model model(cfg, codebooks_for(clean));
  zero_param(model, "masked_lm.token_head.weight");
  zero_param(model, "masked_lm.token_head.bias");
  AdamConfig adam;
  adam.learning_rate = 3e-3;
  Trainer trainer(model, adam);
  const auto ex = model.make_example(clean, noisy, FrameConfig{});
  const TrainBatchItem item{&ex, 0.5, 77, 0};
  const auto first = trainer.train_step(std::span<const TrainBatchItem>(&item, 1));
  CHECK(first.cross_entropy == doctest::Approx(std::log(64.0)).epsilon(1e-9));
  LossBreakdown last;
  for (int i = 1; i < 300; ++i) last = trainer.train_step(std::span<const TrainBatchItem>(&item, 1));
  MESSAGE("cross-entropy after 300 steps: " << last.cross_entropy);
  CHECK(last.cross_entropy < 0.1);
}

TEST_CASE("overfitting one pair drives both MAE terms below 0.05") {
  const auto [clean, noisy] = utterance_pair(22);
  ModelConfig cfg;
  cfg.seed = 4;
  Model model(cfg, codebooks_for(clean));
  AdamConfig adam;
  adam.learning_rate = 3e-3;
  Trainer trainer(model, adam);
  const auto ex = model.make_example(clean, noisy, FrameConfig{});
  const TrainBatchItem item{&ex, 0.5, 1, 0};
  const auto first = trainer.train_step(std::span<const TrainBatchItem>(&item, 1));
  LossBreakdown last;
  for (int i = 1; i < 500; ++i) last = trainer.train_step(std::span<const TrainBatchItem>(&item, 1));
  MESSAGE("continuous MAE " << first.continuous_mae << " -> " << last.continuous_mae
          << ", semantic MAE " << first.semantic_mae << " -> " << last.semantic_mae);
  CHECK(last.continuous_mae < 0.05);
  CHECK(last.semantic_mae < 0.05);
  CHECK(last.continuous_mae < first.continuous_mae);
  CHECK(last.semantic_mae < first.semantic_mae);
}
