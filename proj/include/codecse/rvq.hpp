#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "codecse/grid.hpp"
#include "codecse/tensor.hpp"

namespace codecse {

// C stages of D codewords each, every codeword of width D_emb.
struct Codebooks {
  std::vector<Tensor> stages;

  std::size_t num_stages() const { return stages.size(); }
  std::size_t codebook_size() const { return stages.empty() ? 0 : stages[0].rows(); }
  std::size_t dim() const { return stages.empty() ? 0 : stages[0].cols(); }
  // Index of the mask token, one past the last codeword.
  int mask_token() const { return static_cast<int>(codebook_size()); }
  void validate() const;

  bool operator==(const Codebooks& other) const = default;
};

struct RvqTrainConfig {
  std::size_t num_stages = 4;
  std::size_t codebook_size = 64;
  std::size_t iterations = 25;
  std::uint64_t seed = 0;
};

// Stage c is fitted with k-means++ seeded Lloyd iterations on the residuals
// left by stages < c. Clusters that go empty are re-seeded from the points
// farthest from their current centroid.
Codebooks train_rvq(const Tensor& frames, const RvqTrainConfig& config);

struct RvqEncoding {
  TokenGrid tokens;
  QuantErrorGrid quant_error;
};

// Greedy residual encoding; ties go to the lowest codeword index.
RvqEncoding rvq_encode(const Tensor& frames, const Codebooks& codebooks);
// Sum of the selected codeword of every stage. Mask tokens are rejected.
Tensor rvq_decode(const TokenGrid& tokens, const Codebooks& codebooks);

void save_codebooks(const std::filesystem::path& dir, const Codebooks& codebooks);
Codebooks load_codebooks(const std::filesystem::path& dir);

}  // namespace codecse
