#include <cmath>
#include <random>

#include "codecse/error.hpp"
#include "codecse/rvq.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace codecse;

namespace {

Codebooks hand_codebooks() {
  Codebooks cb;
  cb.stages.push_back(Tensor::from_rows({{0, 0}, {1, 0}}));
  cb.stages.push_back(Tensor::from_rows({{0, 0}, {0, 0.5}}));
  return cb;
}

double reconstruction_mse(const Tensor& frames, const Codebooks& cb) {
  const Tensor rec = rvq_decode(rvq_encode(frames, cb).tokens, cb);
  double e = 0.0;
  for (std::size_t i = 0; i < frames.size(); ++i) e += (frames[i] - rec[i]) * (frames[i] - rec[i]);
  return e / static_cast<double>(frames.size());
}

// Brute-force nearest codeword, lowest index on ties.
int nearest(std::span<const double> x, const Tensor& book) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < book.rows(); ++k) {
    double d = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) d += (x[j] - book(k, j)) * (x[j] - book(k, j));
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

}  // namespace

TEST_CASE("hand-computed two-stage example") {
  const auto cb = hand_codebooks();
  const auto enc = rvq_encode(Tensor::from_rows({{1, 0.4}}), cb);
  CHECK(enc.tokens == TokenGrid::from_rows({{1, 1}}));
  CHECK(enc.quant_error(0, 0) == doctest::Approx(0.08).epsilon(1e-12));
  CHECK(enc.quant_error(0, 1) == doctest::Approx(0.005).epsilon(1e-12));
  const Tensor dec = rvq_decode(enc.tokens, cb);
  CHECK(dec(0, 0) == 1.0);
  CHECK(dec(0, 1) == 0.5);
  const double mse = ((1.0 - dec(0, 0)) * (1.0 - dec(0, 0)) + (0.4 - dec(0, 1)) * (0.4 - dec(0, 1))) / 2.0;
  CHECK(mse == doctest::Approx(0.005).epsilon(1e-12));
}

TEST_CASE("exact stage-1 codeword with zero later stages has zero error") {
  const auto cb = hand_codebooks();
  const auto enc = rvq_encode(Tensor::from_rows({{1, 0}, {0, 0}}), cb);
  for (double d : enc.quant_error.values()) CHECK(d == 0.0);
}

TEST_CASE("all-zero codewords decode to zero frames") {
  const auto cb = hand_codebooks();
  const Tensor dec = rvq_decode(TokenGrid(5, 2, 0), cb);
  for (double v : dec.values()) CHECK(v == 0.0);
}

TEST_CASE("decode rejects the mask token and bad shapes") {
  const auto cb = hand_codebooks();
  try {
    rvq_decode(TokenGrid::from_rows({{0, 2}}), cb);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("cannot decode masked token") != std::string::npos);
  }
  CHECK_THROWS_AS(rvq_decode(TokenGrid(1, 3, 0), cb), Error);
  CHECK_THROWS_AS(rvq_encode(Tensor({2, 3}), cb), Error);
}

TEST_CASE("k-means reaches the fixed point on D distinct repeated vectors") {
  std::mt19937_64 rng(1);
  const std::size_t d = 8;
  const Tensor distinct = testing::random_tensor({d, 3}, rng);
  Tensor corpus({d * 20, 3});
  for (std::size_t r = 0; r < corpus.rows(); ++r)
    for (std::size_t c = 0; c < 3; ++c) corpus(r, c) = distinct(r % d, c);
  const auto cb = train_rvq(corpus, RvqTrainConfig{1, d, 25, 4});
  const auto enc = rvq_encode(corpus, cb);
  double mean = 0.0;
  for (double v : enc.quant_error.values()) mean += v;
  mean /= static_cast<double>(enc.quant_error.size());
  CHECK(mean < 1e-10);
}

TEST_CASE("single stage is plain vector quantization") {
  std::mt19937_64 rng(2);
  const Tensor corpus = testing::random_tensor({300, 4}, rng);
  const auto cb = train_rvq(corpus, RvqTrainConfig{1, 16, 10, 1});
  const auto enc = rvq_encode(corpus, cb);
  for (std::size_t r = 0; r < corpus.rows(); ++r) CHECK(enc.tokens(r, 0) == nearest(corpus.row(r), cb.stages[0]));
}

TEST_CASE("adding a stage never increases training reconstruction error") {
  std::mt19937_64 rng(3);
  const Tensor corpus = testing::random_tensor({500, 6}, rng);
  const auto full = train_rvq(corpus, RvqTrainConfig{5, 16, 15, 9});
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t c = 1; c <= 5; ++c) {
    Codebooks partial;
    partial.stages.assign(full.stages.begin(), full.stages.begin() + static_cast<long>(c));
    const double e = reconstruction_mse(corpus, partial);
    CHECK(e <= prev);
    prev = e;
  }
}

TEST_CASE("final-stage error equals reconstruction MSE") {
  std::mt19937_64 rng(4);
  const Tensor corpus = testing::random_tensor({200, 5}, rng);
  const auto cb = train_rvq(corpus, RvqTrainConfig{3, 8, 10, 2});
  const auto enc = rvq_encode(corpus, cb);
  const Tensor rec = rvq_decode(enc.tokens, cb);
  for (std::size_t r = 0; r < corpus.rows(); ++r) {
    double e = 0.0;
    for (std::size_t j = 0; j < 5; ++j) e += (corpus(r, j) - rec(r, j)) * (corpus(r, j) - rec(r, j));
    CHECK(e / 5.0 == doctest::Approx(enc.quant_error(r, 2)).epsilon(1e-9));
  }
}

TEST_CASE("errors are non-increasing across stages when every stage holds zero") {
  std::mt19937_64 rng(5);
  Codebooks cb;
  for (int c = 0; c < 4; ++c) {
    Tensor s = testing::random_tensor({6, 3}, rng, 1.0 / (c + 1));
    for (std::size_t j = 0; j < 3; ++j) s(2, j) = 0.0;
    cb.stages.push_back(s);
  }
  const auto enc = rvq_encode(testing::random_tensor({100, 3}, rng), cb);
  for (std::size_t r = 0; r < 100; ++r) {
    for (std::size_t c = 0; c + 1 < 4; ++c) CHECK(enc.quant_error(r, c + 1) <= enc.quant_error(r, c));
  }
}

TEST_CASE("representable frames round trip exactly") {
  Codebooks cb;
  cb.stages.push_back(Tensor::from_rows({{0, 0}, {4, 0}, {0, 4}}));
  cb.stages.push_back(Tensor::from_rows({{0, 0}, {0.5, 0}, {0, 0.5}}));
  Tensor frames = Tensor::from_rows({{4.5, 0}, {0, 4.5}, {4, 0.5}, {0.5, 0}});
  const auto enc = rvq_encode(frames, cb);
  CHECK(rvq_decode(enc.tokens, cb) == frames);
}

TEST_CASE("ties resolve to the lowest codeword index") {
  Codebooks cb;
  cb.stages.push_back(Tensor::from_rows({{1, 0}, {-1, 0}, {1, 0}}));
  const auto enc = rvq_encode(Tensor::from_rows({{0, 0}, {1, 0}}), cb);
  CHECK(enc.tokens(0, 0) == 0);
  CHECK(enc.tokens(1, 0) == 0);
}

TEST_CASE("training is seed-deterministic and validates its inputs") {
  std::mt19937_64 rng(6);
  const Tensor corpus = testing::random_tensor({100, 4}, rng);
  CHECK(train_rvq(corpus, RvqTrainConfig{2, 8, 5, 3}) == train_rvq(corpus, RvqTrainConfig{2, 8, 5, 3}));
  CHECK_THROWS_AS(train_rvq(corpus.slice_rows(0, 7), RvqTrainConfig{2, 8, 5, 3}), Error);
  CHECK_THROWS_AS(train_rvq(corpus, RvqTrainConfig{0, 8, 5, 3}), Error);
  CHECK_THROWS_AS(train_rvq(corpus, RvqTrainConfig{1, 1, 5, 3}), Error);
}

TEST_CASE("codebooks persist bit-exactly") {
  std::mt19937_64 rng(7);
  const auto cb = train_rvq(testing::random_tensor({100, 4}, rng), RvqTrainConfig{2, 8, 5, 3});
  const auto dir = testing::temp_dir("rvq_io");
  save_codebooks(dir, cb);
  CHECK(load_codebooks(dir) == cb);
}
