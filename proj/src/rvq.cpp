#include "codecse/rvq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "codecse/error.hpp"
#include "codecse/params.hpp"

namespace codecse {
namespace {

double squared_distance(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

// Nearest codeword, lowest index on ties.
std::size_t nearest(const double* x, const Tensor& codewords, double* best_dist) {
  const std::size_t dim = codewords.cols();
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < codewords.rows(); ++k) {
    const double d = squared_distance(x, codewords.data() + k * dim, dim);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  if (best_dist) *best_dist = best_d;
  return best;
}

Tensor kmeans_plus_plus(const Tensor& points, std::size_t k, std::mt19937_64& rng) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  Tensor centers = Tensor::matrix(k, dim);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy_n(points.data() + pick * dim, dim, centers.data() + c * dim);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      dist[i] = std::min(dist[i], squared_distance(points.data() + i * dim,
                                                   centers.data() + c * dim, dim));
      total += dist[i];
    }
    if (c + 1 == k) break;
    if (total <= 0.0) {
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      continue;
    }
    double target = unit(rng) * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      target -= dist[i];
      if (target < 0.0 && dist[i] > 0.0) {
        pick = i;
        break;
      }
    }
  }
  return centers;
}

Tensor fit_stage(const Tensor& points, std::size_t k, std::size_t iterations,
                 std::mt19937_64& rng) {
  const std::size_t n = points.rows();
  const std::size_t dim = points.cols();
  Tensor centers = kmeans_plus_plus(points, k, rng);
  std::vector<std::size_t> assign(n);
  std::vector<double> dist(n);
  std::vector<std::size_t> counts(k);
  Tensor sums = Tensor::matrix(k, dim);
  for (std::size_t it = 0; it < iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) assign[i] = nearest(points.data() + i * dim, centers, &dist[i]);
    sums.fill(0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      const double* p = points.data() + i * dim;
      double* s = sums.data() + assign[i] * dim;
      for (std::size_t d = 0; d < dim; ++d) s[d] += p[d];
    }
    // farthest points first, lowest index on ties
    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) {
        for (std::size_t d = 0; d < dim; ++d) {
          centers(c, d) = sums(c, d) / static_cast<double>(counts[c]);
        }
        continue;
      }
      if (order.empty()) {
        order.resize(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return dist[a] > dist[b]; });
      }
      const std::size_t donor = order.front();
      order.erase(order.begin());
      std::copy_n(points.data() + donor * dim, dim, centers.data() + c * dim);
      dist[donor] = 0.0;
    }
  }
  return centers;
}

}  // namespace

void Codebooks::validate() const {
  require(!stages.empty(), ErrorKind::kConfig, "codebooks need at least one stage");
  require(codebook_size() >= 2, ErrorKind::kConfig, "codebook size must be at least 2");
  for (const auto& s : stages) {
    require(s.rows() == codebook_size() && s.cols() == dim(), ErrorKind::kShape,
            "codebook stages disagree in shape");
    require(s.all_finite(), ErrorKind::kNumeric, "codebook holds non-finite values");
  }
}

Codebooks train_rvq(const Tensor& frames, const RvqTrainConfig& config) {
  require(config.num_stages >= 1, ErrorKind::kConfig, "need at least one RVQ stage");
  require(config.codebook_size >= 2, ErrorKind::kConfig, "codebook size must be at least 2");
  require(frames.rows() >= config.codebook_size, ErrorKind::kDomain,
          "corpus of " + std::to_string(frames.rows()) + " frames is smaller than codebook size " +
              std::to_string(config.codebook_size));
  require(frames.all_finite(), ErrorKind::kNumeric, "training frames hold non-finite values");
  std::mt19937_64 rng(config.seed);
  Codebooks cb;
  Tensor residual = frames;
  const std::size_t dim = frames.cols();
  for (std::size_t c = 0; c < config.num_stages; ++c) {
    Tensor centers = fit_stage(residual, config.codebook_size, config.iterations, rng);
    for (std::size_t i = 0; i < residual.rows(); ++i) {
      double* r = residual.data() + i * dim;
      const std::size_t k = nearest(r, centers, nullptr);
      for (std::size_t d = 0; d < dim; ++d) r[d] -= centers(k, d);
    }
    cb.stages.push_back(std::move(centers));
  }
  return cb;
}

RvqEncoding rvq_encode(const Tensor& frames, const Codebooks& codebooks) {
  codebooks.validate();
  const std::size_t dim = codebooks.dim();
  require(frames.rank() == 2 && frames.cols() == dim, ErrorKind::kShape,
          "rvq_encode: frames " + shape_string(frames.shape()) + " vs codeword width " +
              std::to_string(dim));
  const std::size_t l = frames.rows();
  const std::size_t c = codebooks.num_stages();
  RvqEncoding enc{TokenGrid(l, c), QuantErrorGrid(l, c)};
  std::vector<double> r(dim);
  for (std::size_t f = 0; f < l; ++f) {
    std::copy_n(frames.data() + f * dim, dim, r.begin());
    for (std::size_t s = 0; s < c; ++s) {
      const Tensor& cw = codebooks.stages[s];
      const std::size_t k = nearest(r.data(), cw, nullptr);
      double err = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        r[d] -= cw(k, d);
        err += r[d] * r[d];
      }
      enc.tokens(f, s) = static_cast<int>(k);
      enc.quant_error(f, s) = err / static_cast<double>(dim);
    }
  }
  return enc;
}

Tensor rvq_decode(const TokenGrid& tokens, const Codebooks& codebooks) {
  codebooks.validate();
  require(tokens.cols() == codebooks.num_stages(), ErrorKind::kShape,
          "rvq_decode: token grid has " + std::to_string(tokens.cols()) + " stages, codebooks " +
              std::to_string(codebooks.num_stages()));
  const std::size_t dim = codebooks.dim();
  Tensor out = Tensor::matrix(tokens.rows(), dim);
  for (std::size_t f = 0; f < tokens.rows(); ++f) {
    for (std::size_t s = 0; s < tokens.cols(); ++s) {
      const int tok = tokens(f, s);
      require(tok != codebooks.mask_token(), ErrorKind::kDomain, "cannot decode masked token");
      require(tok >= 0 && tok < codebooks.mask_token(), ErrorKind::kDomain,
              "token " + std::to_string(tok) + " is not a codeword index");
      const double* cw = codebooks.stages[s].data() + static_cast<std::size_t>(tok) * dim;
      for (std::size_t d = 0; d < dim; ++d) out(f, d) += cw[d];
    }
  }
  return out;
}

void save_codebooks(const std::filesystem::path& dir, const Codebooks& codebooks) {
  codebooks.validate();
  ParameterStore store;
  for (std::size_t s = 0; s < codebooks.num_stages(); ++s) {
    store.add("rvq.stage" + std::to_string(s), codebooks.stages[s], false);
  }
  KeyValueText meta;
  meta.set("kind", "rvq-codebooks");
  meta.set("num_stages", std::to_string(codebooks.num_stages()));
  meta.set("codebook_size", std::to_string(codebooks.codebook_size()));
  meta.set("dim", std::to_string(codebooks.dim()));
  save_checkpoint(dir, store, meta);
}

Codebooks load_codebooks(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_meta(dir);
  require(meta.get("kind") == std::string("rvq-codebooks"), ErrorKind::kIo,
          dir.string() + ": not an RVQ codebook checkpoint");
  const auto n = static_cast<std::size_t>(parse_int(meta.at("num_stages"), "num_stages"));
  auto tensors = read_checkpoint_tensors(dir);
  Codebooks cb;
  for (std::size_t s = 0; s < n; ++s) {
    const std::string name = "rvq.stage" + std::to_string(s);
    auto it = std::find_if(tensors.begin(), tensors.end(),
                           [&](const NamedTensor& t) { return t.name == name; });
    require(it != tensors.end(), ErrorKind::kIo, dir.string() + ": missing " + name);
    cb.stages.push_back(std::move(it->value));
  }
  cb.validate();
  return cb;
}

}  // namespace codecse
