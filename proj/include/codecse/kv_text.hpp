#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace codecse {

// Ordered "key = value" text, one entry per line, '#' starts a comment.
// Used for configs, checkpoint manifests, sidecars and report summaries.
class KeyValueText {
 public:
  static KeyValueText parse(std::string_view text);
  static KeyValueText read(const std::filesystem::path& path);

  std::string serialize() const;
  void write(const std::filesystem::path& path) const;

  // Replaces an existing key in place, appends otherwise.
  void set(const std::string& key, const std::string& value);
  std::optional<std::string> get(const std::string& key) const;
  std::string at(const std::string& key) const;
  bool contains(const std::string& key) const { return get(key).has_value(); }

  const std::vector<std::pair<std::string, std::string>>& entries() const {
    return entries_;
  }
  // Entries whose key starts with prefix, with the prefix stripped.
  std::vector<std::pair<std::string, std::string>> with_prefix(
      const std::string& prefix) const;

  bool operator==(const KeyValueText& other) const = default;

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Round-trippable number formatting.
std::string format_double(double value);
double parse_double(const std::string& text, const std::string& what);
long long parse_int(const std::string& text, const std::string& what);
bool parse_bool(const std::string& text, const std::string& what);

}  // namespace codecse
