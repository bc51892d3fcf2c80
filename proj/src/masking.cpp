#include "codecse/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <vector>

#include "codecse/error.hpp"

namespace codecse {

std::size_t mask_count(double t, const ScheduleParams& sched) {
  require(t >= 0.0 && t <= 1.0, ErrorKind::kDomain,
          "diffusion time " + std::to_string(t) + " outside [0, 1]");
  const std::size_t cells = sched.cells();
  if (t == 0.0) return 0;
  if (t == 1.0) return cells;
  // Extended precision keeps the floor exact except within ~1e-16 of an integer.
  const long double pi = std::numbers::pi_v<long double>;
  const long double v = std::sin(pi * static_cast<long double>(t) / 2.0L) *
                        static_cast<long double>(cells);
  return std::min(cells, static_cast<std::size_t>(std::floor(v)));
}

MaskGrid random_mask(double t, const ScheduleParams& sched, std::uint64_t seed) {
  const std::size_t k = mask_count(t, sched);
  const std::size_t n = sched.cells();
  std::vector<std::size_t> cells(n);
  std::iota(cells.begin(), cells.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    std::swap(cells[i], cells[j]);
  }
  MaskGrid mask(sched.rows, sched.cols, 0);
  for (std::size_t i = 0; i < k; ++i) mask[cells[i]] = 1;
  return mask;
}

TokenGrid apply_mask(const TokenGrid& tokens, const MaskGrid& mask, int mask_token) {
  require(mask.same_shape(tokens), ErrorKind::kShape,
          "apply_mask: mask " + grid_shape(mask.rows(), mask.cols()) + " vs tokens " +
              grid_shape(tokens.rows(), tokens.cols()));
  TokenGrid out = tokens;
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(tokens[i] != mask_token, ErrorKind::kDomain,
            "apply_mask: input already holds the mask token (double masking)");
    require(tokens[i] >= 0 && tokens[i] < mask_token, ErrorKind::kDomain,
            "apply_mask: token " + std::to_string(tokens[i]) + " outside codebook");
    if (mask[i]) out[i] = mask_token;
  }
  return out;
}

MaskGrid quant_error_init(const QuantErrorGrid& quant_error, double T) {
  const ScheduleParams sched{quant_error.rows(), quant_error.cols()};
  const std::size_t k = mask_count(T, sched);
  std::vector<std::size_t> order(quant_error.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return quant_error[a] > quant_error[b];
  });
  MaskGrid mask(sched.rows, sched.cols, 0);
  for (std::size_t i = 0; i < k; ++i) mask[order[i]] = 1;
  return mask;
}

MaskGrid remask_low_confidence(const ConfidenceGrid& confidence, const MaskGrid& candidates,
                               std::size_t k_next) {
  require(candidates.same_shape(confidence), ErrorKind::kShape,
          "remask: confidence " + grid_shape(confidence.rows(), confidence.cols()) +
              " vs candidates " + grid_shape(candidates.rows(), candidates.cols()));
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i]) order.push_back(i);
  }
  require(k_next <= order.size(), ErrorKind::kDomain,
          "remask: " + std::to_string(k_next) + " positions requested from " +
              std::to_string(order.size()) + " candidates");
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return confidence[a] < confidence[b]; });
  MaskGrid mask(confidence.rows(), confidence.cols(), 0);
  for (std::size_t i = 0; i < k_next; ++i) mask[order[i]] = 1;
  return mask;
}

}  // namespace codecse
