#include "codecse/kv_text.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "codecse/error.hpp"

namespace codecse {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

KeyValueText KeyValueText::parse(std::string_view text) {
  KeyValueText out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    require(eq != std::string_view::npos, ErrorKind::kConfig,
            "line " + std::to_string(line_no) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    require(!key.empty(), ErrorKind::kConfig,
            "line " + std::to_string(line_no) + ": empty key");
    out.set(std::string(key), std::string(trim(line.substr(eq + 1))));
  }
  return out;
}

KeyValueText KeyValueText::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KeyValueText::serialize() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

void KeyValueText::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::kIo, "cannot write " + path.string());
  out << serialize();
}

void KeyValueText::set(const std::string& key, const std::string& value) {
  if (auto it = index_.find(key); it != index_.end()) {
    entries_[it->second].second = value;
    return;
  }
  index_[key] = entries_.size();
  entries_.emplace_back(key, value);
}

std::optional<std::string> KeyValueText::get(const std::string& key) const {
  if (auto it = index_.find(key); it != index_.end()) return entries_[it->second].second;
  return std::nullopt;
}

std::string KeyValueText::at(const std::string& key) const {
  auto v = get(key);
  require(v.has_value(), ErrorKind::kConfig, "missing key '" + key + "'");
  return *v;
}

std::vector<std::pair<std::string, std::string>> KeyValueText::with_prefix(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : entries_) {
    if (k.starts_with(prefix)) out.emplace_back(k.substr(prefix.size()), v);
  }
  return out;
}

std::string format_double(double value) {
  if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
  if (std::isnan(value)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text, const std::string& what) {
  if (text == "inf") return INFINITY;
  if (text == "-inf") return -INFINITY;
  double value = 0.0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  require(res.ec == std::errc() && res.ptr == text.data() + text.size(),
          ErrorKind::kConfig, what + ": not a number: '" + text + "'");
  return value;
}

long long parse_int(const std::string& text, const std::string& what) {
  long long value = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), value);
  require(res.ec == std::errc() && res.ptr == text.data() + text.size(),
          ErrorKind::kConfig, what + ": not an integer: '" + text + "'");
  return value;
}

bool parse_bool(const std::string& text, const std::string& what) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  fail(ErrorKind::kConfig, what + ": not a boolean: '" + text + "'");
}

}  // namespace codecse
