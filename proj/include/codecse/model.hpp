#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "codecse/autograd.hpp"
#include "codecse/layers.hpp"
#include "codecse/optimizer.hpp"
#include "codecse/rvq.hpp"
#include "codecse/signal.hpp"

namespace codecse {

struct ModelConfig {
  std::size_t frames = 124;        // L, rows of the positional tables
  std::size_t num_stages = 4;      // C
  std::size_t codebook_size = 64;  // D; token D is the mask token
  std::size_t dim = 32;            // H
  std::size_t semantic_dim = 32;   // S
  std::size_t frame_dim = 16;      // D_emb
  std::size_t masked_blocks = 2;
  std::size_t continuous_blocks = 2;
  std::size_t semantic_blocks = 1;
  std::size_t num_heads = 2;
  std::size_t ffn_mult = 4;
  bool positional = true;

  bool discrete_enabled = true;
  bool continuous_enabled = true;
  bool semantic_enabled = true;
  bool critic_enabled = true;
  // Critic pass input: argmax-filled predictions (true) or the masked grid.
  bool critic_on_predictions = true;
  // Critic loss over every cell (true) or only masked cells.
  bool critic_all_positions = true;

  std::uint64_t seed = 0;

  void validate() const;
  void write(KeyValueText& kv, const std::string& prefix) const;
  static ModelConfig read(const KeyValueText& kv, const std::string& prefix);
  bool operator==(const ModelConfig& other) const = default;
};

struct LossBreakdown {
  double total = 0.0;
  double cross_entropy = 0.0;
  double critic_bce = 0.0;
  double continuous_mae = 0.0;
  double semantic_mae = 0.0;
};

// Frontend outputs for one (clean, noisy) pair; everything here comes from
// frozen components.
struct TrainingExample {
  Tensor clean_frames;
  Tensor noisy_frames;
  TokenGrid clean_tokens;
  Tensor clean_semantic;

  std::size_t frames() const { return clean_frames.rows(); }
  TrainingExample crop(std::size_t offset, std::size_t length) const;
};

class Model {
 public:
  Model(const ModelConfig& config, Codebooks codebooks);

  const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }
  const Codebooks& codebooks() const { return codebooks_; }
  int mask_token() const { return static_cast<int>(config_.codebook_size); }

  // C tables of (D + 1) x H, read by both the masked-token input and the
  // continuous-token conditioning path.
  const std::vector<EmbeddingTable>& embedding_bank() const { return bank_; }

  // Frozen stand-in semantic encoder: tanh(frames . P) with P fixed at creation.
  Tensor semantic_features(const Tensor& frames) const;

  struct ContinuousOutput {
    Var frames;  // X^cont estimate, L x D_emb
    TokenGrid tokens;
    QuantErrorGrid quant_error;
    Var conditioning;  // E^cont, L x H (zeros without a discrete module)
  };
  ContinuousOutput continuous_forward(Tape& tape, const Tensor& noisy_frames,
                                      std::size_t pos_offset = 0) const;

  struct SemanticOutput {
    Var features;      // L x S
    Var conditioning;  // E^sem, L x H
  };
  SemanticOutput semantic_forward(Tape& tape, const Tensor& noisy_frames,
                                  std::size_t pos_offset = 0) const;

  struct DiscreteOutput {
    Var logits;         // L x (C * D), softmax per group of D gives P0
    Var critic_logits;  // L x C, only when the critic is enabled
  };
  DiscreteOutput discrete_forward(Tape& tape, const TokenGrid& masked_tokens, Var e_cont,
                                  Var e_sem, std::size_t pos_offset = 0, bool with_logits = true,
                                  bool with_critic = true) const;

  Var zero_conditioning(Tape& tape, std::size_t rows) const;

  // Builds a training example from a waveform pair through the frozen frontend.
  TrainingExample make_example(const Waveform& clean, const Waveform& noisy,
                               const FrameConfig& frames) const;

  // Sum of the enabled loss terms for one example. Gradients are
  // accumulated into grads when non-null.
  LossBreakdown example_loss(const TrainingExample& example, double t, std::uint64_t mask_seed,
                             std::size_t pos_offset, GradientSet* grads) const;

  // Gradient of the masked cross-entropy with respect to the head logits.
  Tensor cross_entropy_logit_gradient(const TrainingExample& example, const MaskGrid& mask) const;

  void save(const std::filesystem::path& dir, const KeyValueText& extra_meta = {}) const;
  static Model load(const std::filesystem::path& dir);
  // Stable hash of configuration and parameter bytes.
  std::string fingerprint() const;

 private:
  Var discrete_trunk(Tape& tape, const TokenGrid& tokens, Var e_cont, Var e_sem,
                     std::size_t pos_offset) const;
  Var sum_embeddings(Tape& tape, const TokenGrid& tokens) const;

  ModelConfig config_;
  ParameterStore params_;
  Codebooks codebooks_;
  ParamId semantic_projection_ = 0;

  std::vector<EmbeddingTable> bank_;
  std::optional<TransformerStackParams> masked_lm_;
  AffineLayer token_head_;
  AffineLayer critic_head_;

  AffineLayer cont_in_;
  std::optional<TransformerStackParams> continuous_lm_;
  AffineLayer cont_out_;

  AffineLayer sem_in_;
  std::optional<TransformerStackParams> semantic_lm_;
  AffineLayer sem_out_;
  AffineLayer sem_embed_;
};

struct TrainBatchItem {
  const TrainingExample* example = nullptr;
  double t = 0.5;
  std::uint64_t mask_seed = 0;
  std::size_t pos_offset = 0;
};

class Trainer {
 public:
  Trainer(Model& model, const AdamConfig& adam);

  // One optimizer step on the mean loss of the batch. The returned total is the
  // sum of the four mean components.
  LossBreakdown train_step(std::span<const TrainBatchItem> batch);
  LossBreakdown train_step(const Waveform& clean, const Waveform& noisy, double t,
                           std::uint64_t mask_seed, const FrameConfig& frames);

  const OptimizerState& state() const { return state_; }
  Model& model() { return model_; }

 private:
  Model& model_;
  OptimizerState state_;
};

}  // namespace codecse
