#include "codecse/layers.hpp"

#include "codecse/error.hpp"

namespace codecse {

Tensor gaussian_tensor(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

AffineLayer AffineLayer::create(ParameterStore& store, const std::string& name, std::size_t in,
                                std::size_t out, Rng& rng) {
  AffineLayer layer;
  layer.in = in;
  layer.out = out;
  layer.weight = store.add(name + ".weight", gaussian_tensor({in, out}, kInitStd, rng));
  layer.bias = store.add(name + ".bias", Tensor({1, out}));
  return layer;
}

Var AffineLayer::forward(Tape& tape, Var x) const {
  return tape.affine(x, tape.param(weight), tape.param(bias));
}

LayerNormLayer LayerNormLayer::create(ParameterStore& store, const std::string& name,
                                      std::size_t dim) {
  LayerNormLayer ln;
  ln.gain = store.add(name + ".gain", Tensor({1, dim}, 1.0));
  ln.bias = store.add(name + ".bias", Tensor({1, dim}));
  return ln;
}

Var LayerNormLayer::forward(Tape& tape, Var x) const {
  return tape.layer_norm(x, tape.param(gain), tape.param(bias));
}

void TransformerConfig::validate() const {
  require(num_blocks > 0 && dim > 0 && num_heads > 0 && ffn_mult > 0, ErrorKind::kConfig,
          "transformer sizes must be positive");
  require(dim % num_heads == 0, ErrorKind::kConfig,
          std::to_string(num_heads) + " heads do not divide width " + std::to_string(dim));
}

TransformerStackParams TransformerStackParams::create(ParameterStore& store,
                                                      const std::string& prefix,
                                                      const TransformerConfig& config, Rng& rng) {
  config.validate();
  TransformerStackParams p;
  p.config = config;
  const std::size_t h = config.dim;
  if (config.max_len > 0) {
    p.positions = store.add(prefix + ".positions", gaussian_tensor({config.max_len, h}, kInitStd, rng));
  }
  for (std::size_t b = 0; b < config.num_blocks; ++b) {
    const std::string bp = prefix + ".block" + std::to_string(b);
    TransformerBlock block;
    block.attn_norm = LayerNormLayer::create(store, bp + ".attn_norm", h);
    block.qkv = AffineLayer::create(store, bp + ".qkv", h, 3 * h, rng);
    block.attn_out = AffineLayer::create(store, bp + ".attn_out", h, h, rng);
    block.ffn_norm = LayerNormLayer::create(store, bp + ".ffn_norm", h);
    block.ffn_in = AffineLayer::create(store, bp + ".ffn_in", h, config.ffn_mult * h, rng);
    block.ffn_out = AffineLayer::create(store, bp + ".ffn_out", config.ffn_mult * h, h, rng);
    p.blocks.push_back(block);
  }
  p.final_norm = LayerNormLayer::create(store, prefix + ".final_norm", h);
  return p;
}

EmbeddingTable EmbeddingTable::create(ParameterStore& store, const std::string& name,
                                      std::size_t vocab, std::size_t dim, Rng& rng) {
  EmbeddingTable e;
  e.vocab = vocab;
  e.dim = dim;
  e.table = store.add(name, gaussian_tensor({vocab, dim}, kInitStd, rng));
  return e;
}

Var forward_affine(Tape& tape, Var input, const AffineLayer& layer) {
  return layer.forward(tape, input);
}

Var forward_transformer_stack(Tape& tape, Var input, const TransformerStackParams& params,
                              std::size_t pos_offset) {
  const auto& cfg = params.config;
  cfg.validate();
  const Tensor& in = tape.value(input);
  require(in.cols() == cfg.dim, ErrorKind::kShape,
          "transformer input " + shape_string(in.shape()) + " vs width " + std::to_string(cfg.dim));
  Var x = input;
  if (cfg.max_len > 0) x = tape.add_rows(x, tape.param(params.positions), pos_offset);
  for (const auto& block : params.blocks) {
    Var h = block.attn_norm.forward(tape, x);
    h = tape.self_attention(block.qkv.forward(tape, h), cfg.num_heads);
    x = tape.add(x, block.attn_out.forward(tape, h));
    h = block.ffn_norm.forward(tape, x);
    h = block.ffn_out.forward(tape, tape.gelu(block.ffn_in.forward(tape, h)));
    x = tape.add(x, h);
  }
  return params.final_norm.forward(tape, x);
}

Var embedding_lookup(Tape& tape, std::span<const int> tokens, const EmbeddingTable& table) {
  for (int tok : tokens) {
    require(tok >= 0 && static_cast<std::size_t>(tok) < table.vocab, ErrorKind::kDomain,
            "token " + std::to_string(tok) + " is out of vocabulary (max " +
                std::to_string(table.vocab - 1) + ")");
  }
  return tape.embedding(tape.param(table.table), tokens);
}

}  // namespace codecse
