#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "codecse/kv_text.hpp"
#include "codecse/tensor.hpp"

namespace codecse {

using ParamId = std::size_t;

struct Parameter {
  std::string name;
  Tensor value;
  // Frozen parameters are never handed a gradient by the tape.
  bool trainable = true;
};

// One gradient accumulator per parameter, indexed by ParamId.
using GradientSet = std::vector<Tensor>;

class ParameterStore {
 public:
  ParamId add(std::string name, Tensor value, bool trainable = true);

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](ParamId id) { return params_[id]; }
  const Parameter& operator[](ParamId id) const { return params_[id]; }
  std::optional<ParamId> find(const std::string& name) const;

  std::vector<Parameter>::iterator begin() { return params_.begin(); }
  std::vector<Parameter>::iterator end() { return params_.end(); }
  std::vector<Parameter>::const_iterator begin() const { return params_.begin(); }
  std::vector<Parameter>::const_iterator end() const { return params_.end(); }

  GradientSet zero_gradients() const;
  std::size_t trainable_scalars() const;

 private:
  std::vector<Parameter> params_;
};

void accumulate(GradientSet& dst, const GradientSet& src);
void scale(GradientSet& grads, double factor);

// Checkpoint directory: manifest.txt (key = value lines) plus one raw
// little-endian float64 file per parameter.
//
//   format = codecse-checkpoint/1
//   meta.<key> = <value>
//   param.<name> = f64 <d0>x<d1> <file>
inline constexpr const char* kCheckpointFormat = "codecse-checkpoint/1";

void save_checkpoint(const std::filesystem::path& dir, const ParameterStore& params,
                     const KeyValueText& meta);
// Fills every parameter of `params` from the checkpoint. Names and shapes must
// match exactly. Returns the meta block (without the "meta." prefix).
KeyValueText load_checkpoint(const std::filesystem::path& dir, ParameterStore& params);
KeyValueText read_checkpoint_meta(const std::filesystem::path& dir);

struct NamedTensor {
  std::string name;
  Tensor value;
};
std::vector<NamedTensor> read_checkpoint_tensors(const std::filesystem::path& dir);

void write_f64_file(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64_file(const std::filesystem::path& path);

}  // namespace codecse
