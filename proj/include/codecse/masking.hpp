#pragma once

#include <cstddef>
#include <cstdint>

#include "codecse/grid.hpp"

namespace codecse {

struct ScheduleParams {
  std::size_t rows = 0;  // L
  std::size_t cols = 0;  // C

  std::size_t cells() const { return rows * cols; }
};

// floor(sin(pi t / 2) * L * C) for t in [0, 1].
std::size_t mask_count(double t, const ScheduleParams& sched);

// Exactly mask_count(t) ones at positions drawn uniformly without replacement.
MaskGrid random_mask(double t, const ScheduleParams& sched, std::uint64_t seed);

// Masked cells become mask_token, others keep their token. The input must not
// already contain mask_token.
TokenGrid apply_mask(const TokenGrid& tokens, const MaskGrid& mask, int mask_token);

// Ones at the mask_count(T) largest quantization errors; ties go to the
// earlier cell in row-major order.
MaskGrid quant_error_init(const QuantErrorGrid& quant_error, double T);

// Ones at the k_next smallest confidences among candidate cells; ties go to
// the earlier cell in row-major order.
MaskGrid remask_low_confidence(const ConfidenceGrid& confidence, const MaskGrid& candidates,
                               std::size_t k_next);

}  // namespace codecse
