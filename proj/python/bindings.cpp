#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "codecse/error.hpp"
#include "codecse/harness.hpp"
#include "codecse/inference.hpp"
#include "codecse/masking.hpp"
#include "codecse/metrics.hpp"
#include "codecse/rvq.hpp"
#include "codecse/signal.hpp"

namespace py = pybind11;
using namespace codecse;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;
using ByteArray = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  require(a.ndim() == 2, ErrorKind::kShape, "expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0));
  const auto c = static_cast<std::size_t>(a.shape(1));
  return Tensor({r, c}, std::vector<double>(a.data(), a.data() + r * c));
}

DoubleArray from_tensor(const Tensor& t) {
  DoubleArray a(std::vector<py::ssize_t>{static_cast<py::ssize_t>(t.rows()), static_cast<py::ssize_t>(t.cols())});
  std::copy(t.data(), t.data() + t.size(), a.mutable_data());
  return a;
}

template <typename T, typename A>
Grid<T> to_grid(const A& a) {
  require(a.ndim() == 2, ErrorKind::kShape, "expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0));
  const auto c = static_cast<std::size_t>(a.shape(1));
  return Grid<T>(r, c, std::vector<T>(a.data(), a.data() + r * c));
}

template <typename T>
py::array_t<T> from_grid(const Grid<T>& g) {
  py::array_t<T> a(std::vector<py::ssize_t>{static_cast<py::ssize_t>(g.rows()), static_cast<py::ssize_t>(g.cols())});
  std::copy(g.values().begin(), g.values().end(), a.mutable_data());
  return a;
}

Waveform to_wave(const DoubleArray& a, int sample_rate) {
  require(a.ndim() == 1, ErrorKind::kShape, "expected a 1-D sample array");
  return Waveform{std::vector<double>(a.data(), a.data() + a.shape(0)), sample_rate};
}

DoubleArray from_wave(const Waveform& w) {
  DoubleArray a(std::vector<py::ssize_t>{static_cast<py::ssize_t>(w.size())});
  std::copy(w.samples.begin(), w.samples.end(), a.mutable_data());
  return a;
}

Codebooks to_codebooks(const std::vector<DoubleArray>& stages) {
  Codebooks cb;
  for (const auto& s : stages) cb.stages.push_back(to_tensor(s));
  cb.validate();
  return cb;
}

FrameConfig frame_config(std::size_t frame_length, std::size_t hop, std::size_t coefficients) {
  FrameConfig f{frame_length, hop, coefficients};
  f.validate();
  return f;
}

InferenceConfig inference_config(double T, std::size_t N, const std::string& init,
                                 const std::string& remask, std::uint64_t seed) {
  InferenceConfig c;
  c.T = T;
  c.N = N;
  c.init = parse_init_strategy(init);
  c.remask = parse_remask_policy(remask);
  c.seed = seed;
  c.validate();
  return c;
}

}  // namespace

PYBIND11_MODULE(_codecse, m) {
  m.doc() = "Masked-token diffusion speech enhancement over RVQ token streams";

  static py::exception<Error> error(m, "CodecseError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      error((std::string(kind_name(e.kind())) + ": " + e.what()).c_str());
    }
  });

  m.def("mask_count", [](double t, std::size_t rows, std::size_t cols) {
    return mask_count(t, ScheduleParams{rows, cols});
  }, py::arg("t"), py::arg("rows"), py::arg("cols"));

  m.def("random_mask", [](double t, std::size_t rows, std::size_t cols, std::uint64_t seed) {
    return from_grid(random_mask(t, ScheduleParams{rows, cols}, seed));
  }, py::arg("t"), py::arg("rows"), py::arg("cols"), py::arg("seed"));

  m.def("apply_mask", [](const IntArray& tokens, const ByteArray& mask, int mask_token) {
    return from_grid(apply_mask(to_grid<int>(tokens), to_grid<std::uint8_t>(mask), mask_token));
  }, py::arg("tokens"), py::arg("mask"), py::arg("mask_token"));

  m.def("quant_error_init", [](const DoubleArray& delta, double T) {
    return from_grid(quant_error_init(to_grid<double>(delta), T));
  }, py::arg("quant_error"), py::arg("T"));

  m.def("reverse_schedule", [](double T, std::size_t N, std::size_t rows, std::size_t cols) {
    std::vector<std::pair<double, std::size_t>> out;
    for (const auto& e : reverse_schedule(T, N, ScheduleParams{rows, cols})) out.emplace_back(e.t, e.masked_after);
    return out;
  }, py::arg("T"), py::arg("N"), py::arg("rows"), py::arg("cols"));

  m.def("analyze", [](const DoubleArray& samples, std::size_t frame_length, std::size_t hop,
                      std::size_t coefficients) {
    return from_tensor(analyze(to_wave(samples, 16000), frame_config(frame_length, hop, coefficients)));
  }, py::arg("samples"), py::arg("frame_length") = 256, py::arg("hop") = 128,
        py::arg("coefficients") = 16);

  m.def("synthesize", [](const DoubleArray& frames, std::size_t frame_length, std::size_t hop) {
    const Tensor f = to_tensor(frames);
    return from_wave(synthesize(f, frame_config(frame_length, hop, f.cols())));
  }, py::arg("frames"), py::arg("frame_length") = 256, py::arg("hop") = 128);

  m.def("si_sdr", [](const DoubleArray& reference, const DoubleArray& estimate) {
    return si_sdr(to_wave(reference, 16000), to_wave(estimate, 16000));
  }, py::arg("reference"), py::arg("estimate"));

  m.def("generate_utterance", [](std::uint64_t seed) {
    const auto [wave, spec] = generate_utterance(seed, GeneratorConfig{}, FrameConfig{});
    return py::make_tuple(from_wave(wave), spec.phone_states, spec.gain_db);
  }, py::arg("seed"));

  m.def("degrade", [](const DoubleArray& clean, double snr_db, std::optional<double> clipping,
                      std::uint64_t noise_seed, double noise_color) {
    DegradationSpec spec{snr_db, clipping, noise_seed, noise_color};
    return from_wave(degrade(to_wave(clean, 16000), spec));
  }, py::arg("clean"), py::arg("snr_db"), py::arg("clipping_threshold") = py::none(),
        py::arg("noise_seed") = 0, py::arg("noise_color") = 0.0);

  m.def("train_rvq", [](const DoubleArray& frames, std::size_t num_stages, std::size_t codebook_size,
                        std::size_t iterations, std::uint64_t seed) {
    const Codebooks cb = train_rvq(to_tensor(frames), RvqTrainConfig{num_stages, codebook_size, iterations, seed});
    std::vector<DoubleArray> out;
    for (const auto& s : cb.stages) out.push_back(from_tensor(s));
    return out;
  }, py::arg("frames"), py::arg("num_stages") = 4, py::arg("codebook_size") = 64,
        py::arg("iterations") = 25, py::arg("seed") = 0);

  m.def("rvq_encode", [](const DoubleArray& frames, const std::vector<DoubleArray>& codebooks) {
    const auto enc = rvq_encode(to_tensor(frames), to_codebooks(codebooks));
    return py::make_tuple(from_grid(enc.tokens), from_grid(enc.quant_error));
  }, py::arg("frames"), py::arg("codebooks"));

  m.def("rvq_decode", [](const IntArray& tokens, const std::vector<DoubleArray>& codebooks) {
    return from_tensor(rvq_decode(to_grid<int>(tokens), to_codebooks(codebooks)));
  }, py::arg("tokens"), py::arg("codebooks"));

  m.def("token_accuracy", [](const IntArray& predicted, const IntArray& reference) {
    return token_accuracy(to_grid<int>(predicted), to_grid<int>(reference));
  }, py::arg("predicted"), py::arg("reference"));

  m.def("rank_scores", [](const std::vector<double>& scores, bool higher_is_better) {
    return rank_scores(scores, higher_is_better ? MetricDirection::kHigherIsBetter
                                                : MetricDirection::kLowerIsBetter);
  }, py::arg("scores"), py::arg("higher_is_better") = true);

  m.def("enhance", [](const DoubleArray& noisy, const std::string& checkpoint, double T,
                      std::size_t N, const std::string& init, const std::string& remask,
                      std::uint64_t seed) {
    const Model model = Model::load(checkpoint);
    const auto result = enhance(to_wave(noisy, 16000), model, FrameConfig{},
                                inference_config(T, N, init, remask, seed));
    std::vector<std::size_t> masked;
    for (const auto& s : result.trace.steps) masked.push_back(s.masked_count);
    return py::make_tuple(from_wave(result.wave), from_grid(result.tokens), masked);
  }, py::arg("noisy"), py::arg("checkpoint"), py::arg("T") = 0.1, py::arg("N") = 1,
        py::arg("init") = "quant_error", py::arg("remask") = "restricted", py::arg("seed") = 0);

  m.def("default_config", [] { return RunConfig::from_text({}).to_text().serialize(); });
}
