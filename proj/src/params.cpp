#include "codecse/params.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "codecse/error.hpp"

namespace codecse {
namespace fs = std::filesystem;

ParamId ParameterStore::add(std::string name, Tensor value, bool trainable) {
  require(!find(name).has_value(), ErrorKind::kState,
          "duplicate parameter name '" + name + "'");
  params_.push_back({std::move(name), std::move(value), trainable});
  return params_.size() - 1;
}

std::optional<ParamId> ParameterStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

GradientSet ParameterStore::zero_gradients() const {
  GradientSet grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.emplace_back(p.value.shape());
  return grads;
}

std::size_t ParameterStore::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.trainable ? p.value.size() : 0;
  return n;
}

void accumulate(GradientSet& dst, const GradientSet& src) {
  require(dst.size() == src.size(), ErrorKind::kShape, "gradient set size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i].values();
    auto s = src[i].values();
    for (std::size_t j = 0; j < d.size(); ++j) d[j] += s[j];
  }
}

void scale(GradientSet& grads, double factor) {
  for (auto& g : grads)
    for (auto& v : g.values()) v *= factor;
}

void write_f64_file(const fs::path& path, std::span<const double> values) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write " + path.string());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
  } else {
    for (double v : values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      unsigned char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
      out.write(reinterpret_cast<const char*>(bytes), 8);
    }
  }
  require(out.good(), ErrorKind::kIo, "write failed for " + path.string());
}

std::vector<double> read_f64_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  require(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  const auto bytes = static_cast<std::size_t>(in.tellg());
  require(bytes % 8 == 0, ErrorKind::kIo, path.string() + ": size not a multiple of 8");
  in.seekg(0);
  std::vector<unsigned char> raw(bytes);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(bytes));
  std::vector<double> values(bytes / 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= std::uint64_t{raw[i * 8 + b]} << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

namespace {

std::string file_name_for(const std::string& param) { return param + ".bin"; }

Shape parse_shape(const std::string& text) {
  Shape shape;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto x = text.find('x', pos);
    if (x == std::string::npos) x = text.size();
    shape.push_back(static_cast<std::size_t>(parse_int(text.substr(pos, x - pos), "shape")));
    pos = x + 1;
  }
  return shape;
}

std::string shape_token(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s;
}

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::string file;
};

std::vector<ManifestEntry> manifest_entries(const KeyValueText& manifest) {
  std::vector<ManifestEntry> out;
  for (const auto& [name, spec] : manifest.with_prefix("param.")) {
    std::istringstream ss(spec);
    std::string dtype, shape, file;
    ss >> dtype >> shape >> file;
    require(dtype == "f64", ErrorKind::kIo, "unsupported dtype '" + dtype + "' for " + name);
    require(!file.empty(), ErrorKind::kIo, "malformed manifest entry for " + name);
    out.push_back({name, parse_shape(shape), file});
  }
  return out;
}

KeyValueText read_manifest(const fs::path& dir) {
  auto manifest = KeyValueText::read(dir / "manifest.txt");
  require(manifest.get("format") == std::string(kCheckpointFormat), ErrorKind::kIo,
          dir.string() + ": not a checkpoint (format key missing or unknown)");
  return manifest;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const ParameterStore& params,
                     const KeyValueText& meta) {
  fs::create_directories(dir);
  KeyValueText manifest;
  manifest.set("format", kCheckpointFormat);
  for (const auto& [k, v] : meta.entries()) manifest.set("meta." + k, v);
  for (const auto& p : params) {
    const auto file = file_name_for(p.name);
    manifest.set("param." + p.name, "f64 " + shape_token(p.value.shape()) + " " + file);
    write_f64_file(dir / file, p.value.values());
  }
  manifest.write(dir / "manifest.txt");
}

KeyValueText read_checkpoint_meta(const fs::path& dir) {
  KeyValueText meta;
  for (const auto& [k, v] : read_manifest(dir).with_prefix("meta.")) meta.set(k, v);
  return meta;
}

std::vector<NamedTensor> read_checkpoint_tensors(const fs::path& dir) {
  std::vector<NamedTensor> out;
  for (auto& e : manifest_entries(read_manifest(dir))) {
    auto values = read_f64_file(dir / e.file);
    require(values.size() == shape_size(e.shape), ErrorKind::kIo,
            e.file + ": size does not match manifest shape " + shape_string(e.shape));
    out.push_back({e.name, Tensor(e.shape, std::move(values))});
  }
  return out;
}

KeyValueText load_checkpoint(const fs::path& dir, ParameterStore& params) {
  auto tensors = read_checkpoint_tensors(dir);
  require(tensors.size() == params.size(), ErrorKind::kState,
          dir.string() + ": checkpoint holds " + std::to_string(tensors.size()) +
              " parameters, model expects " + std::to_string(params.size()));
  for (auto& t : tensors) {
    auto id = params.find(t.name);
    require(id.has_value(), ErrorKind::kState,
            dir.string() + ": unexpected parameter '" + t.name + "'");
    auto& p = params[*id];
    require(p.value.shape() == t.value.shape(), ErrorKind::kShape,
            "parameter '" + t.name + "' has shape " + shape_string(t.value.shape()) +
                " in checkpoint, model expects " + shape_string(p.value.shape()));
    p.value = std::move(t.value);
  }
  return read_checkpoint_meta(dir);
}

}  // namespace codecse
