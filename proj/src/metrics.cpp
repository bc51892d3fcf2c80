#include "codecse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "codecse/error.hpp"

namespace codecse {

double token_accuracy(const TokenGrid& predicted, const TokenGrid& reference, int mask_token) {
  require(predicted.same_shape(reference), ErrorKind::kShape,
          "token grids " + grid_shape(predicted.rows(), predicted.cols()) + " vs " +
              grid_shape(reference.rows(), reference.cols()));
  require(predicted.size() > 0, ErrorKind::kShape, "empty token grid");
  std::size_t equal = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    require(mask_token < 0 || (predicted[i] != mask_token && reference[i] != mask_token),
            ErrorKind::kDomain, "token grid contains the mask token");
    equal += predicted[i] == reference[i] ? 1 : 0;
  }
  return static_cast<double>(equal) / static_cast<double>(predicted.size());
}

namespace {

void check_frames(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorKind::kShape,
          "frames " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  require(a.size() > 0, ErrorKind::kShape, "empty frames");
}

}  // namespace

double frame_mae(const Tensor& estimate, const Tensor& reference) {
  check_frames(estimate, reference);
  double s = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) s += std::abs(estimate[i] - reference[i]);
  return s / static_cast<double>(estimate.size());
}

double frame_mse(const Tensor& estimate, const Tensor& reference) {
  check_frames(estimate, reference);
  double s = 0.0;
  for (std::size_t i = 0; i < estimate.size(); ++i) {
    const double d = estimate[i] - reference[i];
    s += d * d;
  }
  return s / static_cast<double>(estimate.size());
}

double si_sdr_improvement(const Waveform& clean, const Waveform& noisy, const Waveform& enhanced) {
  return si_sdr(clean, enhanced) - si_sdr(clean, noisy);
}

std::vector<double> PhoneClassifier::features(const Waveform& wave, std::size_t frame,
                                              const FrameConfig& frames) const {
  const double rate = static_cast<double>(wave.sample_rate);
  const auto bins = static_cast<std::size_t>(
      std::floor(config_.max_hz * static_cast<double>(config_.fft_size) / rate));
  // Centre of the hop block that holds the frame centre.
  const auto centre = static_cast<std::ptrdiff_t>(frame * frames.hop + frames.frame_length / 2 +
                                                  frames.hop / 2);
  const auto half = static_cast<std::ptrdiff_t>(config_.window / 2);
  std::vector<double> segment(config_.window, 0.0);
  for (std::size_t n = 0; n < config_.window; ++n) {
    const std::ptrdiff_t idx = centre - half + static_cast<std::ptrdiff_t>(n);
    if (idx < 0 || idx >= static_cast<std::ptrdiff_t>(wave.size())) continue;
    const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (static_cast<double>(n) + 0.5) /
                                          static_cast<double>(config_.window));
    segment[n] = w * wave.samples[static_cast<std::size_t>(idx)];
  }
  std::vector<double> mag(bins + 1, 0.0);
  double norm = 0.0;
  for (std::size_t k = 1; k <= bins; ++k) {
    double re = 0.0;
    double im = 0.0;
    const double omega = 2.0 * std::numbers::pi * static_cast<double>(k) /
                         static_cast<double>(config_.fft_size);
    for (std::size_t n = 0; n < config_.window; ++n) {
      re += segment[n] * std::cos(omega * static_cast<double>(n));
      im -= segment[n] * std::sin(omega * static_cast<double>(n));
    }
    mag[k] = std::sqrt(re * re + im * im);
    norm += mag[k] * mag[k];
  }
  norm = std::sqrt(norm);
  if (norm > 0.0) {
    for (auto& m : mag) m /= norm;
  }
  return mag;
}

void PhoneClassifier::fit(const std::vector<std::pair<Waveform, UtteranceSpec>>& corpus,
                          const FrameConfig& frames) {
  require(!corpus.empty(), ErrorKind::kDomain, "cannot fit a phone classifier on an empty corpus");
  std::size_t num_classes = 0;
  for (const auto& [wave, spec] : corpus) num_classes = std::max(num_classes, spec.classes.size());
  std::vector<std::vector<double>> sums(num_classes);
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& [wave, spec] : corpus) {
    const std::size_t l = frames.num_frames(wave.size());
    for (std::size_t f = 0; f < l; ++f) {
      const auto label = static_cast<std::size_t>(spec.frame_label(f, frames));
      auto feat = features(wave, f, frames);
      if (sums[label].empty()) sums[label].assign(feat.size(), 0.0);
      for (std::size_t i = 0; i < feat.size(); ++i) sums[label][i] += feat[i];
      ++counts[label];
    }
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    require(counts[c] > 0, ErrorKind::kDomain,
            "phone class " + std::to_string(c) + " never occurs in the fitting corpus");
    double norm = 0.0;
    for (double v : sums[c]) norm += v * v;
    norm = std::sqrt(norm);
    for (auto& v : sums[c]) v /= norm;
  }
  templates_ = std::move(sums);
}

std::vector<int> PhoneClassifier::classify(const Waveform& wave, const FrameConfig& frames) const {
  require(fitted(), ErrorKind::kState, "phone classifier is not fitted");
  const std::size_t l = frames.num_frames(wave.size());
  std::vector<int> out(l, 0);
  for (std::size_t f = 0; f < l; ++f) {
    const auto feat = features(wave, f, frames);
    double best = -1.0;
    for (std::size_t c = 0; c < templates_.size(); ++c) {
      double dot = 0.0;
      for (std::size_t i = 0; i < feat.size(); ++i) dot += feat[i] * templates_[c][i];
      if (dot > best) {
        best = dot;
        out[f] = static_cast<int>(c);
      }
    }
  }
  return out;
}

double phone_accuracy(const Waveform& wave, const UtteranceSpec& spec,
                      const PhoneClassifier& classifier, const FrameConfig& frames) {
  const auto predicted = classifier.classify(wave, frames);
  require(!predicted.empty(), ErrorKind::kShape, "waveform shorter than one frame");
  std::size_t hits = 0;
  for (std::size_t f = 0; f < predicted.size(); ++f) {
    hits += predicted[f] == spec.frame_label(f, frames) ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

void EvalReport::add(const std::string& system, const std::string& utterance,
                     const std::string& metric, double value) {
  rows_.push_back({system, utterance, metric, value});
}

namespace {

template <typename Get>
std::vector<std::string> first_seen(const std::vector<EvalRow>& rows, Get get) {
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (const auto& r : rows) {
    if (seen.insert(get(r)).second) out.push_back(get(r));
  }
  return out;
}

}  // namespace

std::vector<std::string> EvalReport::systems() const {
  return first_seen(rows_, [](const EvalRow& r) { return r.system; });
}

std::vector<std::string> EvalReport::metrics() const {
  return first_seen(rows_, [](const EvalRow& r) { return r.metric; });
}

bool EvalReport::has(const std::string& system, const std::string& metric) const {
  return count(system, metric) > 0;
}

std::size_t EvalReport::count(const std::string& system, const std::string& metric) const {
  return static_cast<std::size_t>(std::count_if(rows_.begin(), rows_.end(), [&](const EvalRow& r) {
    return r.system == system && r.metric == metric;
  }));
}

double EvalReport::mean(const std::string& system, const std::string& metric) const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows_) {
    if (r.system == system && r.metric == metric) {
      s += r.value;
      ++n;
    }
  }
  require(n > 0, ErrorKind::kDomain, "system '" + system + "' has no metric '" + metric + "'");
  return s / static_cast<double>(n);
}

void EvalReport::check_aligned() const {
  std::map<std::pair<std::string, std::string>, std::set<std::string>> utts;
  for (const auto& r : rows_) utts[{r.system, r.metric}].insert(r.utterance);
  const auto systems_list = systems();
  const auto metrics_list = metrics();
  if (systems_list.empty()) return;
  for (const auto& m : metrics_list) {
    const auto& ref = utts[{systems_list.front(), m}];
    for (const auto& s : systems_list) {
      require(utts[{s, m}] == ref, ErrorKind::kDomain,
              "system '" + s + "' was evaluated on a different utterance set for '" + m + "'");
    }
  }
}

void EvalReport::write_csv(std::ostream& out) const {
  out << "system,utterance,metric,value\n";
  for (const auto& r : rows_) {
    out << r.system << ',' << r.utterance << ',' << r.metric << ',' << format_double(r.value) << '\n';
  }
}

KeyValueText EvalReport::summary() const {
  KeyValueText kv;
  for (const auto& [k, v] : metadata_.entries()) kv.set("meta." + k, v);
  for (const auto& s : systems()) {
    for (const auto& m : metrics()) {
      if (!has(s, m)) continue;
      kv.set("mean." + s + "." + m, format_double(mean(s, m)));
      kv.set("count." + s + "." + m, std::to_string(count(s, m)));
    }
  }
  return kv;
}

std::vector<double> rank_scores(const std::vector<double>& scores, MetricDirection direction) {
  const std::size_t n = scores.size();
  for (double s : scores) require(std::isfinite(s), ErrorKind::kNumeric, "non-finite score in ranking");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  const bool higher = direction == MetricDirection::kHigherIsBetter;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return higher ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  std::vector<double> ranks(n, 0.0);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double shared = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

RankTable rank_aggregate(const EvalReport& report,
                         const std::vector<std::pair<std::string, MetricDirection>>& metrics) {
  RankTable table;
  table.systems = report.systems();
  require(table.systems.size() >= 2, ErrorKind::kDomain, "ranking needs at least two systems");
  require(!metrics.empty(), ErrorKind::kDomain, "ranking needs at least one metric");
  table.ranks.assign(table.systems.size(), std::vector<double>(metrics.size(), 0.0));
  table.average.assign(table.systems.size(), 0.0);
  for (std::size_t m = 0; m < metrics.size(); ++m) {
    const auto& [name, direction] = metrics[m];
    table.metrics.push_back(name);
    std::vector<double> scores;
    for (const auto& s : table.systems) {
      require(report.has(s, name), ErrorKind::kDomain,
              "system '" + s + "' is missing metric '" + name + "'");
      scores.push_back(report.mean(s, name));
    }
    const auto ranks = rank_scores(scores, direction);
    for (std::size_t s = 0; s < ranks.size(); ++s) {
      table.ranks[s][m] = ranks[s];
      table.average[s] += ranks[s];
    }
  }
  for (auto& a : table.average) a /= static_cast<double>(metrics.size());
  return table;
}

void RankTable::write_csv(std::ostream& out) const {
  out << "system";
  for (const auto& m : metrics) out << ",rank_" << m;
  out << ",average_rank\n";
  for (std::size_t s = 0; s < systems.size(); ++s) {
    out << systems[s];
    for (double r : ranks[s]) out << ',' << format_double(r);
    out << ',' << format_double(average[s]) << '\n';
  }
}

}  // namespace codecse
