#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "codecse/autograd.hpp"
#include "codecse/params.hpp"
#include "codecse/tensor.hpp"

namespace testing {

inline codecse::Tensor random_tensor(codecse::Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  codecse::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = n(rng);
  return t;
}

inline void randomize(codecse::ParameterStore& store, std::mt19937_64& rng, double scale) {
  for (auto& p : store) {
    if (!p.trainable) continue;
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : p.value.values()) v += n(rng);
  }
}

struct FdResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

// Central differences against analytic gradients. `loss` evaluates the scalar
// and, when grads is non-null, accumulates analytic gradients.
inline FdResult finite_difference_check(
    codecse::ParameterStore& store,
    const std::function<double(codecse::GradientSet*)>& loss, double h = 1e-5,
    std::size_t max_entries = 0, std::uint64_t seed = 3, double floor = 1e-6) {
  codecse::GradientSet grads = store.zero_gradients();
  loss(&grads);
  FdResult out;
  std::mt19937_64 rng(seed);
  for (std::size_t id = 0; id < store.size(); ++id) {
    auto& p = store[id];
    if (!p.trainable) continue;
    std::vector<std::size_t> entries(p.value.size());
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    if (max_entries && entries.size() > max_entries) {
      std::shuffle(entries.begin(), entries.end(), rng);
      entries.resize(max_entries);
    }
    for (std::size_t i : entries) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = loss(nullptr);
      p.value[i] = saved - h;
      const double down = loss(nullptr);
      p.value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = grads[id][i];
      const double rel = std::abs(analytic - numeric) /
                         std::max({std::abs(analytic), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel_error) {
        out.max_rel_error = rel;
        out.worst = p.name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
                    " numeric=" + std::to_string(numeric) + " rel=" + std::to_string(rel);
      }
    }
  }
  return out;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("codecse_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
