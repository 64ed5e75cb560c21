#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <string>
#include <vector>

namespace sfm {

/// Line-based `key = value` text. `#` starts a comment; blank lines are ignored. Keys are
/// unique; a repeated key is a ConfigError, as is a line without `=`.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& source = "<input>");
  /// IoError when the file cannot be read.
  static KeyValues load(const std::filesystem::path& path);

  [[nodiscard]] bool has(const std::string& key) const { return entries_.count(key) != 0; }
  [[nodiscard]] const std::string& raw(const std::string& key) const;
  [[nodiscard]] const std::map<std::string, std::string>& entries() const { return entries_; }

  void set(const std::string& key, std::string value) { entries_[key] = std::move(value); }

  /// Typed accessors; ConfigError on a missing key or an unparsable value.
  [[nodiscard]] double get_double(const std::string& key) const;
  [[nodiscard]] std::uint64_t get_u64(const std::string& key) const;
  [[nodiscard]] std::vector<double> get_doubles(const std::string& key) const;
  [[nodiscard]] double get_double(const std::string& key, double fallback) const;
  [[nodiscard]] std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  [[nodiscard]] std::string get_string(const std::string& key, const std::string& fallback) const;

  /// Sorted by key, one `key = value` per line.
  void write(std::ostream& out) const;

 private:
  std::string source_;
  std::map<std::string, std::string> entries_;
};

/// Shortest text that reads back to the same double.
std::string format_double(double v);
std::string format_doubles(const std::vector<double>& v);

}  // namespace sfm
