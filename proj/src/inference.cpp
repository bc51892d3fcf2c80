#include "codecse/inference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "codecse/error.hpp"

namespace codecse {

std::string to_string(InitStrategy s) {
  switch (s) {
    case InitStrategy::kQuantError: return "quant_error";
    case InitStrategy::kRandom: return "random";
    case InitStrategy::kFull: return "full";
  }
  return "?";
}

InitStrategy parse_init_strategy(const std::string& text) {
  if (text == "quant_error") return InitStrategy::kQuantError;
  if (text == "random") return InitStrategy::kRandom;
  if (text == "full") return InitStrategy::kFull;
  fail(ErrorKind::kConfig, "unknown init strategy '" + text + "'");
}

std::string to_string(RemaskPolicy p) {
  return p == RemaskPolicy::kRestricted ? "restricted" : "all";
}

RemaskPolicy parse_remask_policy(const std::string& text) {
  if (text == "restricted") return RemaskPolicy::kRestricted;
  if (text == "all") return RemaskPolicy::kAll;
  fail(ErrorKind::kConfig, "unknown remask policy '" + text + "'");
}

void InferenceConfig::validate() const {
  require(T > 0.0 && T <= 1.0, ErrorKind::kConfig, "T must lie in (0, 1]");
  require(N >= 1, ErrorKind::kConfig, "N must be at least 1");
  require(init != InitStrategy::kFull || T == 1.0, ErrorKind::kConfig,
          "fully masked initialization requires T = 1.0");
}

double InferenceConfig::time_at(std::size_t iteration) const {
  return T * static_cast<double>(N - iteration) / static_cast<double>(N);
}

KeyValueText ReverseTrace::to_text() const {
  KeyValueText kv;
  kv.set("steps", std::to_string(steps.size()));
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& s = steps[i];
    const std::string p = "step." + std::to_string(i) + ".";
    kv.set(p + "t", format_double(s.t));
    kv.set(p + "masked_count", std::to_string(s.masked_count));
    kv.set(p + "masked_after", std::to_string(s.masked_after));
    kv.set(p + "mean_confidence", format_double(s.mean_confidence));
    kv.set(p + "shape", grid_shape(s.tokens.rows(), s.tokens.cols()));
    std::string toks;
    for (std::size_t j = 0; j < s.tokens.size(); ++j) {
      if (j) toks += ' ';
      toks += std::to_string(s.tokens[j]);
    }
    kv.set(p + "tokens", toks);
  }
  return kv;
}

ReverseTrace ReverseTrace::from_text(const KeyValueText& kv) {
  ReverseTrace trace;
  const auto n = static_cast<std::size_t>(parse_int(kv.at("steps"), "steps"));
  for (std::size_t i = 0; i < n; ++i) {
    const std::string p = "step." + std::to_string(i) + ".";
    TraceStep s;
    s.t = parse_double(kv.at(p + "t"), p + "t");
    s.masked_count = static_cast<std::size_t>(parse_int(kv.at(p + "masked_count"), p));
    s.masked_after = static_cast<std::size_t>(parse_int(kv.at(p + "masked_after"), p));
    s.mean_confidence = parse_double(kv.at(p + "mean_confidence"), p);
    const std::string shape = kv.at(p + "shape");
    const auto x = shape.find('x');
    const auto rows = static_cast<std::size_t>(parse_int(shape.substr(0, x), p));
    const auto cols = static_cast<std::size_t>(parse_int(shape.substr(x + 1), p));
    std::vector<int> values;
    std::istringstream ss(kv.at(p + "tokens"));
    for (std::string tok; ss >> tok;) values.push_back(static_cast<int>(parse_int(tok, p)));
    s.tokens = TokenGrid(rows, cols, std::move(values));
    trace.steps.push_back(std::move(s));
  }
  return trace;
}

std::vector<ScheduleEntry> reverse_schedule(double T, std::size_t N, const ScheduleParams& sched) {
  InferenceConfig cfg;
  cfg.T = T;
  cfg.N = N;
  cfg.init = InitStrategy::kRandom;
  cfg.validate();
  std::vector<ScheduleEntry> out;
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t after = i + 1 == N ? 0 : mask_count(cfg.time_at(i + 1), sched);
    out.push_back({cfg.time_at(i), after});
  }
  return out;
}

MaskGrid initial_mask(const InferenceConfig& cfg, const ScheduleParams& sched,
                      const QuantErrorGrid* quant_error) {
  switch (cfg.init) {
    case InitStrategy::kFull:
      return MaskGrid(sched.rows, sched.cols, 1);
    case InitStrategy::kRandom:
      return random_mask(cfg.T, sched, cfg.seed);
    case InitStrategy::kQuantError:
      require(quant_error != nullptr, ErrorKind::kState,
              "quantization-error initialization needs the continuous module's error grid");
      require(quant_error->same_shape_as(sched.rows, sched.cols), ErrorKind::kShape,
              "quantization error grid " + grid_shape(quant_error->rows(), quant_error->cols()) +
                  " vs tokens " + grid_shape(sched.rows, sched.cols));
      return quant_error_init(*quant_error, cfg.T);
  }
  fail(ErrorKind::kConfig, "unknown init strategy");
}

ReverseResult run_reverse_process(const TokenGrid& estimated_tokens,
                                  const QuantErrorGrid* quant_error, std::size_t codebook_size,
                                  const TokenPredictor& predictor, const InferenceConfig& cfg) {
  cfg.validate();
  require(static_cast<bool>(predictor.probabilities), ErrorKind::kState, "predictor missing");
  require(!cfg.critic_confidence || static_cast<bool>(predictor.critic_logits), ErrorKind::kState,
          "critic confidence requested but the predictor has no critic");
  const ScheduleParams sched{estimated_tokens.rows(), estimated_tokens.cols()};
  const int mask_token = static_cast<int>(codebook_size);
  MaskGrid mask = initial_mask(cfg, sched, quant_error);
  TokenGrid current = apply_mask(estimated_tokens, mask, mask_token);

  ReverseResult result;
  for (std::size_t i = 0; i < cfg.N; ++i) {
    const Tensor probs = predictor.probabilities(current);
    require(probs.rows() == sched.rows && probs.cols() == sched.cols * codebook_size,
            ErrorKind::kShape, "predictor returned " + shape_string(probs.shape()));
    require(probs.all_finite(), ErrorKind::kNumeric,
            "non-finite probabilities at iteration " + std::to_string(i));

    TokenGrid estimate = current;
    ConfidenceGrid confidence(sched.rows, sched.cols);
    double conf_sum = 0.0;
    for (std::size_t cell = 0; cell < estimate.size(); ++cell) {
      const double* p = probs.data() + cell * codebook_size;
      const auto best = static_cast<std::size_t>(std::max_element(p, p + codebook_size) - p);
      if (mask[cell]) estimate[cell] = static_cast<int>(best);
      confidence[cell] = p[best];
    }
    if (cfg.critic_confidence) {
      const Tensor critic = predictor.critic_logits(estimate);
      require(critic.size() == confidence.size(), ErrorKind::kShape,
              "critic returned " + shape_string(critic.shape()));
      for (std::size_t cell = 0; cell < confidence.size(); ++cell) {
        confidence[cell] = 1.0 - sigmoid(critic[cell]);
      }
    }
    for (double c : confidence.values()) conf_sum += c;

    TraceStep step;
    step.t = cfg.time_at(i);
    step.masked_count = popcount(mask);
    step.mean_confidence = conf_sum / static_cast<double>(std::max<std::size_t>(confidence.size(), 1));

    if (i + 1 == cfg.N) {
      step.tokens = estimate;
      result.trace.steps.push_back(std::move(step));
      result.tokens = std::move(estimate);
      break;
    }
    const std::size_t k_next = mask_count(cfg.time_at(i + 1), sched);
    MaskGrid candidates = mask;
    if (cfg.remask == RemaskPolicy::kAll) {
      candidates = MaskGrid(sched.rows, sched.cols, 1);
      for (std::size_t cell = 0; cell < mask.size(); ++cell) {
        if (!mask[cell]) confidence[cell] = std::numeric_limits<double>::infinity();
      }
    }
    mask = remask_low_confidence(confidence, candidates, k_next);
    current = apply_mask(estimate, mask, mask_token);
    step.masked_after = k_next;
    step.tokens = std::move(estimate);
    result.trace.steps.push_back(std::move(step));
  }
  return result;
}

Waveform decode_tokens(const TokenGrid& tokens, const Codebooks& codebooks,
                       const FrameConfig& frames, std::size_t length, int sample_rate) {
  Waveform wave = synthesize(rvq_decode(tokens, codebooks), frames, sample_rate);
  wave.samples.resize(length, 0.0);
  for (auto& v : wave.samples) v = std::clamp(v, -1.0, 1.0);
  return wave;
}

namespace {

Tensor analyze_for(const Waveform& noisy, const Model& model, const FrameConfig& frames) {
  require(frames.coefficients == model.config().frame_dim, ErrorKind::kConfig,
          "frame coefficients " + std::to_string(frames.coefficients) +
              " do not match model frame width " + std::to_string(model.config().frame_dim));
  Tensor x = analyze(noisy, frames);
  require(!model.config().positional || x.rows() <= model.config().frames, ErrorKind::kShape,
          "utterance has " + std::to_string(x.rows()) + " frames, model supports " +
              std::to_string(model.config().frames));
  require(x.all_finite(), ErrorKind::kNumeric, "non-finite input frames");
  return x;
}

}  // namespace

EnhanceResult enhance(const Waveform& noisy, const Model& model, const FrameConfig& frames,
                      const InferenceConfig& cfg) {
  cfg.validate();
  const auto& mc = model.config();
  require(mc.discrete_enabled, ErrorKind::kState,
          "model has no discrete module; use continuous-only enhancement");
  const Tensor x = analyze_for(noisy, model, frames);
  const std::size_t l = x.rows();

  Tape tape(&model.params(), false);
  EnhanceResult out;
  QuantErrorGrid quant_error;
  Tensor e_cont = Tensor::matrix(l, mc.dim);
  Tensor e_sem = Tensor::matrix(l, mc.dim);
  if (mc.continuous_enabled) {
    auto co = model.continuous_forward(tape, x);
    out.continuous_tokens = co.tokens;
    quant_error = co.quant_error;
    e_cont = tape.value(co.conditioning);
  } else {
    require(cfg.init == InitStrategy::kFull, ErrorKind::kConfig,
            "without the continuous module only fully masked initialization is possible");
    out.continuous_tokens = TokenGrid(l, mc.num_stages, 0);
  }
  if (mc.semantic_enabled) e_sem = tape.value(model.semantic_forward(tape, x).conditioning);
  require(e_cont.all_finite() && e_sem.all_finite(), ErrorKind::kNumeric,
          "non-finite conditioning before iteration 0");

  TokenPredictor predictor;
  predictor.probabilities = [&](const TokenGrid& masked) {
    Tape t(&model.params(), false);
    auto d = model.discrete_forward(t, masked, t.constant(e_cont), t.constant(e_sem), 0, true, false);
    return grouped_softmax(t.value(d.logits), mc.codebook_size);
  };
  if (mc.critic_enabled) {
    predictor.critic_logits = [&](const TokenGrid& tokens) {
      Tape t(&model.params(), false);
      auto d = model.discrete_forward(t, tokens, t.constant(e_cont), t.constant(e_sem), 0, false, true);
      return t.value(d.critic_logits);
    };
  }
  auto rev = run_reverse_process(out.continuous_tokens,
                                 mc.continuous_enabled ? &quant_error : nullptr, mc.codebook_size,
                                 predictor, cfg);
  out.tokens = std::move(rev.tokens);
  out.trace = std::move(rev.trace);
  out.wave = decode_tokens(out.tokens, model.codebooks(), frames, noisy.size(), noisy.sample_rate);
  return out;
}

ContinuousOnlyResult continuous_only_enhance(const Waveform& noisy, const Model& model,
                                             const FrameConfig& frames) {
  require(model.config().continuous_enabled, ErrorKind::kState, "continuous module is disabled");
  const Tensor x = analyze_for(noisy, model, frames);
  Tape tape(&model.params(), false);
  auto co = model.continuous_forward(tape, x);
  ContinuousOnlyResult out;
  out.tokens = std::move(co.tokens);
  out.wave = decode_tokens(out.tokens, model.codebooks(), frames, noisy.size(), noisy.sample_rate);
  return out;
}

}  // namespace codecse
