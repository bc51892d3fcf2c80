#include "codecse/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>

#include "codecse/error.hpp"
#include "codecse/masking.hpp"

namespace codecse {
namespace {

constexpr std::uint64_t kSemanticStream = 0x5e3a1c0ddULL;

std::string bool_text(bool b) { return b ? "true" : "false"; }

}  // namespace

void ModelConfig::validate() const {
  require(frames > 0 && num_stages > 0 && dim > 0 && semantic_dim > 0 && frame_dim > 0,
          ErrorKind::kConfig, "model sizes must be positive");
  require(codebook_size >= 2, ErrorKind::kConfig, "codebook size must be at least 2");
  require(num_heads > 0 && dim % num_heads == 0, ErrorKind::kConfig,
          std::to_string(num_heads) + " heads do not divide width " + std::to_string(dim));
  require(masked_blocks > 0 && continuous_blocks > 0 && semantic_blocks > 0, ErrorKind::kConfig,
          "block counts must be positive");
  require(discrete_enabled || continuous_enabled, ErrorKind::kConfig,
          "at least one of the discrete and continuous modules is required");
  if (!discrete_enabled) {
    require(!semantic_enabled && !critic_enabled, ErrorKind::kConfig,
            "without the discrete module the semantic module and critic must be disabled");
  }
}

void ModelConfig::write(KeyValueText& kv, const std::string& p) const {
  kv.set(p + "frames", std::to_string(frames));
  kv.set(p + "num_stages", std::to_string(num_stages));
  kv.set(p + "codebook_size", std::to_string(codebook_size));
  kv.set(p + "dim", std::to_string(dim));
  kv.set(p + "semantic_dim", std::to_string(semantic_dim));
  kv.set(p + "frame_dim", std::to_string(frame_dim));
  kv.set(p + "masked_blocks", std::to_string(masked_blocks));
  kv.set(p + "continuous_blocks", std::to_string(continuous_blocks));
  kv.set(p + "semantic_blocks", std::to_string(semantic_blocks));
  kv.set(p + "num_heads", std::to_string(num_heads));
  kv.set(p + "ffn_mult", std::to_string(ffn_mult));
  kv.set(p + "positional", bool_text(positional));
  kv.set(p + "discrete_enabled", bool_text(discrete_enabled));
  kv.set(p + "continuous_enabled", bool_text(continuous_enabled));
  kv.set(p + "semantic_enabled", bool_text(semantic_enabled));
  kv.set(p + "critic_enabled", bool_text(critic_enabled));
  kv.set(p + "critic_on_predictions", bool_text(critic_on_predictions));
  kv.set(p + "critic_all_positions", bool_text(critic_all_positions));
  kv.set(p + "seed", std::to_string(seed));
}

ModelConfig ModelConfig::read(const KeyValueText& kv, const std::string& p) {
  ModelConfig c;
  auto size = [&](const char* key, std::size_t& out) {
    if (auto v = kv.get(p + key)) out = static_cast<std::size_t>(parse_int(*v, p + key));
  };
  auto flag = [&](const char* key, bool& out) {
    if (auto v = kv.get(p + key)) out = parse_bool(*v, p + key);
  };
  size("frames", c.frames);
  size("num_stages", c.num_stages);
  size("codebook_size", c.codebook_size);
  size("dim", c.dim);
  size("semantic_dim", c.semantic_dim);
  size("frame_dim", c.frame_dim);
  size("masked_blocks", c.masked_blocks);
  size("continuous_blocks", c.continuous_blocks);
  size("semantic_blocks", c.semantic_blocks);
  size("num_heads", c.num_heads);
  size("ffn_mult", c.ffn_mult);
  flag("positional", c.positional);
  flag("discrete_enabled", c.discrete_enabled);
  flag("continuous_enabled", c.continuous_enabled);
  flag("semantic_enabled", c.semantic_enabled);
  flag("critic_enabled", c.critic_enabled);
  flag("critic_on_predictions", c.critic_on_predictions);
  flag("critic_all_positions", c.critic_all_positions);
  if (auto v = kv.get(p + "seed")) c.seed = std::stoull(*v);
  return c;
}

TrainingExample TrainingExample::crop(std::size_t offset, std::size_t length) const {
  require(offset + length <= frames(), ErrorKind::kShape, "crop outside example");
  TrainingExample out;
  out.clean_frames = clean_frames.slice_rows(offset, length);
  out.noisy_frames = noisy_frames.slice_rows(offset, length);
  out.clean_semantic = clean_semantic.slice_rows(offset, length);
  out.clean_tokens = TokenGrid(length, clean_tokens.cols());
  std::copy_n(clean_tokens.values().begin() + static_cast<std::ptrdiff_t>(offset * clean_tokens.cols()),
              length * clean_tokens.cols(), out.clean_tokens.values().begin());
  return out;
}

Model::Model(const ModelConfig& config, Codebooks codebooks)
    : config_(config), codebooks_(std::move(codebooks)) {
  config_.validate();
  codebooks_.validate();
  require(codebooks_.num_stages() == config_.num_stages &&
              codebooks_.codebook_size() == config_.codebook_size &&
              codebooks_.dim() == config_.frame_dim,
          ErrorKind::kConfig,
          "codebooks (" + std::to_string(codebooks_.num_stages()) + " stages of " +
              std::to_string(codebooks_.codebook_size()) + "x" + std::to_string(codebooks_.dim()) +
              ") do not match the model configuration");

  for (std::size_t c = 0; c < codebooks_.num_stages(); ++c) {
    params_.add("frozen.rvq.stage" + std::to_string(c), codebooks_.stages[c], false);
  }
  Rng sem_rng(config_.seed ^ kSemanticStream);
  semantic_projection_ = params_.add(
      "frozen.semantic_projection",
      gaussian_tensor({config_.frame_dim, config_.semantic_dim},
                      1.0 / std::sqrt(static_cast<double>(config_.frame_dim)), sem_rng),
      false);

  Rng rng(config_.seed);
  const std::size_t h = config_.dim;
  auto stack_cfg = [&](std::size_t blocks) {
    TransformerConfig tc;
    tc.num_blocks = blocks;
    tc.dim = h;
    tc.num_heads = config_.num_heads;
    tc.ffn_mult = config_.ffn_mult;
    tc.max_len = config_.positional ? config_.frames : 0;
    return tc;
  };
  if (config_.discrete_enabled) {
    for (std::size_t c = 0; c < config_.num_stages; ++c) {
      bank_.push_back(EmbeddingTable::create(params_, "bank.stage" + std::to_string(c),
                                             config_.codebook_size + 1, h, rng));
    }
    masked_lm_ = TransformerStackParams::create(params_, "masked_lm", stack_cfg(config_.masked_blocks), rng);
    token_head_ = AffineLayer::create(params_, "masked_lm.token_head", h,
                                      config_.num_stages * config_.codebook_size, rng);
    if (config_.critic_enabled) {
      critic_head_ = AffineLayer::create(params_, "masked_lm.critic_head", h, config_.num_stages, rng);
    }
  }
  if (config_.continuous_enabled) {
    cont_in_ = AffineLayer::create(params_, "continuous.in", config_.frame_dim, h, rng);
    continuous_lm_ = TransformerStackParams::create(params_, "continuous.lm",
                                                    stack_cfg(config_.continuous_blocks), rng);
    cont_out_ = AffineLayer::create(params_, "continuous.out", h, config_.frame_dim, rng);
  }
  if (config_.semantic_enabled) {
    sem_in_ = AffineLayer::create(params_, "semantic.in", config_.semantic_dim, h, rng);
    semantic_lm_ = TransformerStackParams::create(params_, "semantic.lm",
                                                  stack_cfg(config_.semantic_blocks), rng);
    sem_out_ = AffineLayer::create(params_, "semantic.out", h, config_.semantic_dim, rng);
    sem_embed_ = AffineLayer::create(params_, "semantic.embed", config_.semantic_dim, h, rng);
  }
}

Tensor Model::semantic_features(const Tensor& frames) const {
  const Tensor& proj = params_[semantic_projection_].value;
  require(frames.cols() == proj.rows(), ErrorKind::kShape,
          "semantic encoder: frames " + shape_string(frames.shape()) + " vs width " +
              std::to_string(proj.rows()));
  Tensor out = Tensor::matrix(frames.rows(), proj.cols());
  for (std::size_t r = 0; r < frames.rows(); ++r) {
    for (std::size_t c = 0; c < proj.cols(); ++c) {
      double acc = 0.0;
      for (std::size_t k = 0; k < proj.rows(); ++k) acc += frames(r, k) * proj(k, c);
      out(r, c) = std::tanh(acc);
    }
  }
  return out;
}

Var Model::zero_conditioning(Tape& tape, std::size_t rows) const {
  return tape.constant(Tensor::matrix(rows, config_.dim));
}

Var Model::sum_embeddings(Tape& tape, const TokenGrid& tokens) const {
  require(tokens.cols() == config_.num_stages, ErrorKind::kShape,
          "token grid has " + std::to_string(tokens.cols()) + " stages, model expects " +
              std::to_string(config_.num_stages));
  std::vector<int> column(tokens.rows());
  std::optional<Var> acc;
  for (std::size_t c = 0; c < tokens.cols(); ++c) {
    for (std::size_t l = 0; l < tokens.rows(); ++l) column[l] = tokens(l, c);
    Var e = embedding_lookup(tape, column, bank_[c]);
    acc = acc ? tape.add(*acc, e) : e;
  }
  return *acc;
}

Model::ContinuousOutput Model::continuous_forward(Tape& tape, const Tensor& noisy_frames,
                                                  std::size_t pos_offset) const {
  require(config_.continuous_enabled, ErrorKind::kState, "continuous module is disabled");
  require(noisy_frames.rank() == 2 && noisy_frames.cols() == config_.frame_dim, ErrorKind::kShape,
          "continuous_forward: frames " + shape_string(noisy_frames.shape()) + " vs width " +
              std::to_string(config_.frame_dim));
  ContinuousOutput out;
  Var x = cont_in_.forward(tape, tape.constant(noisy_frames));
  x = forward_transformer_stack(tape, x, *continuous_lm_, pos_offset);
  out.frames = cont_out_.forward(tape, x);
  auto enc = rvq_encode(tape.value(out.frames), codebooks_);
  out.tokens = std::move(enc.tokens);
  out.quant_error = std::move(enc.quant_error);
  out.conditioning = config_.discrete_enabled ? sum_embeddings(tape, out.tokens)
                                              : zero_conditioning(tape, noisy_frames.rows());
  return out;
}

Model::SemanticOutput Model::semantic_forward(Tape& tape, const Tensor& noisy_frames,
                                              std::size_t pos_offset) const {
  require(config_.semantic_enabled, ErrorKind::kState, "semantic module is disabled");
  SemanticOutput out;
  Var x = sem_in_.forward(tape, tape.constant(semantic_features(noisy_frames)));
  x = forward_transformer_stack(tape, x, *semantic_lm_, pos_offset);
  out.features = sem_out_.forward(tape, x);
  out.conditioning = sem_embed_.forward(tape, out.features);
  return out;
}

Var Model::discrete_trunk(Tape& tape, const TokenGrid& tokens, Var e_cont, Var e_sem,
                          std::size_t pos_offset) const {
  const std::size_t l = tokens.rows();
  for (Var v : {e_cont, e_sem}) {
    const Tensor& t = tape.value(v);
    require(t.rows() == l && t.cols() == config_.dim, ErrorKind::kShape,
            "conditioning " + shape_string(t.shape()) + " vs expected " +
                grid_shape(l, config_.dim));
  }
  Var x = tape.add(tape.add(sum_embeddings(tape, tokens), e_cont), e_sem);
  return forward_transformer_stack(tape, x, *masked_lm_, pos_offset);
}

Model::DiscreteOutput Model::discrete_forward(Tape& tape, const TokenGrid& masked_tokens,
                                              Var e_cont, Var e_sem, std::size_t pos_offset,
                                              bool with_logits, bool with_critic) const {
  require(config_.discrete_enabled, ErrorKind::kState, "discrete module is disabled");
  Var trunk = discrete_trunk(tape, masked_tokens, e_cont, e_sem, pos_offset);
  DiscreteOutput out;
  if (with_logits) out.logits = token_head_.forward(tape, trunk);
  if (with_critic && config_.critic_enabled) out.critic_logits = critic_head_.forward(tape, trunk);
  return out;
}

TrainingExample Model::make_example(const Waveform& clean, const Waveform& noisy,
                                    const FrameConfig& frames) const {
  require(clean.size() == noisy.size(), ErrorKind::kShape, "clean/noisy length mismatch");
  require(frames.coefficients == config_.frame_dim, ErrorKind::kConfig,
          "frame coefficients " + std::to_string(frames.coefficients) + " vs model frame width " +
              std::to_string(config_.frame_dim));
  TrainingExample ex;
  ex.clean_frames = analyze(clean, frames);
  ex.noisy_frames = analyze(noisy, frames);
  ex.clean_tokens = rvq_encode(ex.clean_frames, codebooks_).tokens;
  ex.clean_semantic = semantic_features(ex.clean_frames);
  return ex;
}

LossBreakdown Model::example_loss(const TrainingExample& ex, double t, std::uint64_t mask_seed,
                                  std::size_t pos_offset, GradientSet* grads) const {
  const std::size_t l = ex.frames();
  require(pos_offset + l <= config_.frames || !config_.positional, ErrorKind::kShape,
          "example of " + std::to_string(l) + " frames at offset " + std::to_string(pos_offset) +
              " exceeds the positional table of " + std::to_string(config_.frames));
  Tape tape(&params_, grads != nullptr);
  LossBreakdown out;
  std::vector<Var> terms;
  Var e_cont = zero_conditioning(tape, l);
  Var e_sem = e_cont;

  if (config_.continuous_enabled) {
    auto co = continuous_forward(tape, ex.noisy_frames, pos_offset);
    Var loss = tape.mae(co.frames, ex.clean_frames);
    out.continuous_mae = tape.value(loss)[0];
    terms.push_back(loss);
    e_cont = co.conditioning;
  }
  if (config_.semantic_enabled) {
    auto so = semantic_forward(tape, ex.noisy_frames, pos_offset);
    Var loss = tape.mae(so.features, ex.clean_semantic);
    out.semantic_mae = tape.value(loss)[0];
    terms.push_back(loss);
    e_sem = so.conditioning;
  }
  if (config_.discrete_enabled) {
    const ScheduleParams sched{l, config_.num_stages};
    const MaskGrid mask = random_mask(t, sched, mask_seed);
    const TokenGrid masked = apply_mask(ex.clean_tokens, mask, mask_token());
    auto dout = discrete_forward(tape, masked, e_cont, e_sem, pos_offset, true, false);
    Var ce = tape.masked_cross_entropy(dout.logits, ex.clean_tokens, mask, config_.codebook_size);
    out.cross_entropy = tape.value(ce)[0];
    terms.push_back(ce);
    if (config_.critic_enabled) {
      TokenGrid critic_input = masked;
      if (config_.critic_on_predictions) {
        const Tensor& logits = tape.value(dout.logits);
        const std::size_t d = config_.codebook_size;
        for (std::size_t i = 0; i < critic_input.size(); ++i) {
          if (!mask[i]) continue;
          const double* row = logits.data() + i * d;
          critic_input[i] = static_cast<int>(std::max_element(row, row + d) - row);
        }
      }
      auto cout = discrete_forward(tape, critic_input, e_cont, e_sem, pos_offset, false, true);
      Var bce = config_.critic_all_positions ? tape.bce_with_logits(cout.critic_logits, mask)
                                             : tape.bce_with_logits(cout.critic_logits, mask, mask);
      out.critic_bce = tape.value(bce)[0];
      terms.push_back(bce);
    }
  }
  Var total = tape.add_scalars(terms);
  out.total = out.cross_entropy + out.critic_bce + out.continuous_mae + out.semantic_mae;
  require(std::isfinite(out.total), ErrorKind::kNumeric, "non-finite training loss");
  if (grads) tape.backward(total, grads);
  return out;
}

Tensor Model::cross_entropy_logit_gradient(const TrainingExample& ex, const MaskGrid& mask) const {
  require(config_.discrete_enabled, ErrorKind::kState, "discrete module is disabled");
  Tape tape(&params_);
  const std::size_t l = ex.frames();
  Var e_cont = zero_conditioning(tape, l);
  Var e_sem = e_cont;
  if (config_.continuous_enabled) e_cont = continuous_forward(tape, ex.noisy_frames).conditioning;
  if (config_.semantic_enabled) e_sem = semantic_forward(tape, ex.noisy_frames).conditioning;
  const TokenGrid masked = apply_mask(ex.clean_tokens, mask, mask_token());
  auto dout = discrete_forward(tape, masked, e_cont, e_sem, 0, true, false);
  Var ce = tape.masked_cross_entropy(dout.logits, ex.clean_tokens, mask, config_.codebook_size);
  GradientSet grads = params_.zero_gradients();
  tape.backward(ce, &grads);
  Tensor g = tape.grad(dout.logits);
  if (g.empty()) g = Tensor(tape.value(dout.logits).shape());
  return g;
}

std::string Model::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  KeyValueText kv;
  config_.write(kv, "");
  const std::string cfg = kv.serialize();
  mix(cfg.data(), cfg.size());
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data(), p.value.size() * sizeof(double));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void Model::save(const std::filesystem::path& dir, const KeyValueText& extra_meta) const {
  KeyValueText meta;
  meta.set("kind", "enhancement-model");
  meta.set("checkpoint_id", fingerprint());
  config_.write(meta, "config.");
  meta.set("module.discrete", config_.discrete_enabled ? "present" : "absent");
  meta.set("module.continuous", config_.continuous_enabled ? "present" : "absent");
  meta.set("module.semantic", config_.semantic_enabled ? "present" : "absent");
  meta.set("module.critic", config_.critic_enabled ? "present" : "absent");
  for (const auto& [k, v] : extra_meta.entries()) meta.set(k, v);
  save_checkpoint(dir, params_, meta);
}

Model Model::load(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  require(meta.get("kind") == std::string("enhancement-model"), ErrorKind::kIo,
          dir.string() + ": not an enhancement model checkpoint");
  const ModelConfig config = ModelConfig::read(meta, "config.");
  Codebooks cb;
  auto tensors = read_checkpoint_tensors(dir);
  for (std::size_t c = 0; c < config.num_stages; ++c) {
    const std::string name = "frozen.rvq.stage" + std::to_string(c);
    auto it = std::find_if(tensors.begin(), tensors.end(),
                           [&](const NamedTensor& t) { return t.name == name; });
    require(it != tensors.end(), ErrorKind::kIo, dir.string() + ": missing " + name);
    cb.stages.push_back(it->value);
  }
  Model model(config, std::move(cb));
  load_checkpoint(dir, model.params_);
  return model;
}

Trainer::Trainer(Model& model, const AdamConfig& adam)
    : model_(model), state_(OptimizerState::create(model.params(), adam)) {}

LossBreakdown Trainer::train_step(std::span<const TrainBatchItem> batch) {
  require(!batch.empty(), ErrorKind::kDomain, "empty training batch");
  GradientSet grads = model_.params().zero_gradients();
  LossBreakdown mean;
  for (const auto& item : batch) {
    const auto l = model_.example_loss(*item.example, item.t, item.mask_seed, item.pos_offset, &grads);
    mean.cross_entropy += l.cross_entropy;
    mean.critic_bce += l.critic_bce;
    mean.continuous_mae += l.continuous_mae;
    mean.semantic_mae += l.semantic_mae;
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  mean.cross_entropy *= inv;
  mean.critic_bce *= inv;
  mean.continuous_mae *= inv;
  mean.semantic_mae *= inv;
  mean.total = mean.cross_entropy + mean.critic_bce + mean.continuous_mae + mean.semantic_mae;
  scale(grads, inv);
  adam_update(model_.params(), grads, state_);
  return mean;
}

LossBreakdown Trainer::train_step(const Waveform& clean, const Waveform& noisy, double t,
                                  std::uint64_t mask_seed, const FrameConfig& frames) {
  const TrainingExample ex = model_.make_example(clean, noisy, frames);
  const TrainBatchItem item{&ex, t, mask_seed, 0};
  return train_step(std::span<const TrainBatchItem>(&item, 1));
}

}  // namespace codecse
