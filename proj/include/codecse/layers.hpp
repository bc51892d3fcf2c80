#pragma once

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "codecse/autograd.hpp"
#include "codecse/params.hpp"

namespace codecse {

using Rng = std::mt19937_64;

inline constexpr double kInitStd = 0.02;

Tensor gaussian_tensor(Shape shape, double stddev, Rng& rng);

// Fully connected layer y = x W + b.
struct AffineLayer {
  ParamId weight = 0;
  ParamId bias = 0;
  std::size_t in = 0;
  std::size_t out = 0;

  static AffineLayer create(ParameterStore& store, const std::string& name, std::size_t in,
                            std::size_t out, Rng& rng);
  Var forward(Tape& tape, Var x) const;
};

struct LayerNormLayer {
  ParamId gain = 0;
  ParamId bias = 0;

  static LayerNormLayer create(ParameterStore& store, const std::string& name, std::size_t dim);
  Var forward(Tape& tape, Var x) const;
};

struct TransformerBlock {
  LayerNormLayer attn_norm;
  AffineLayer qkv;
  AffineLayer attn_out;
  LayerNormLayer ffn_norm;
  AffineLayer ffn_in;
  AffineLayer ffn_out;
};

struct TransformerConfig {
  std::size_t num_blocks = 2;
  std::size_t dim = 32;
  std::size_t num_heads = 2;
  std::size_t ffn_mult = 4;
  // Rows in the learned positional table; zero disables positions.
  std::size_t max_len = 0;

  void validate() const;
};

// Pre-norm transformer stack: learned absolute positions added to the input,
// then blocks of x += attn(ln(x)); x += ffn(ln(x)), then a final layer norm.
struct TransformerStackParams {
  TransformerConfig config;
  std::vector<TransformerBlock> blocks;
  LayerNormLayer final_norm;
  ParamId positions = 0;

  static TransformerStackParams create(ParameterStore& store, const std::string& prefix,
                                       const TransformerConfig& config, Rng& rng);
};

// Table of (vocab x dim) rows.
struct EmbeddingTable {
  ParamId table = 0;
  std::size_t vocab = 0;
  std::size_t dim = 0;

  static EmbeddingTable create(ParameterStore& store, const std::string& name,
                               std::size_t vocab, std::size_t dim, Rng& rng);
};

Var forward_affine(Tape& tape, Var input, const AffineLayer& layer);
// pos_offset selects the positional rows used for input row 0.
Var forward_transformer_stack(Tape& tape, Var input, const TransformerStackParams& params,
                              std::size_t pos_offset = 0);
Var embedding_lookup(Tape& tape, std::span<const int> tokens, const EmbeddingTable& table);

}  // namespace codecse
