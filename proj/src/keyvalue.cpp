#include "sfmamba/keyvalue.hpp"

#include <charconv>
#include <fstream>

#include "sfmamba/tensor.hpp"
#include "sfmamba/tensor_io.hpp"

namespace sfm {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

double parse_double(const std::string& text, const std::string& what) {
  double v = 0.0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(what + ": expected a number, got '" + text + "'");
  return v;
}

}  // namespace

KeyValues KeyValues::parse(std::istream& in, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = source + ":" + std::to_string(lineno);
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(where + ": empty key");
    if (kv.entries_.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
    kv.entries_[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open for reading");
  return parse(in, path.string());
}

const std::string& KeyValues::raw(const std::string& key) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) throw ConfigError(source_ + ": missing key '" + key + "'");
  return it->second;
}

double KeyValues::get_double(const std::string& key) const { return parse_double(raw(key), source_ + ": " + key); }

std::uint64_t KeyValues::get_u64(const std::string& key) const {
  const auto& text = raw(key);
  std::uint64_t v = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError(source_ + ": " + key + ": expected a non-negative integer, got '" + text + "'");
  return v;
}

std::vector<double> KeyValues::get_doubles(const std::string& key) const {
  std::vector<double> out;
  const auto& text = raw(key);
  std::size_t start = 0;
  while (start <= text.size()) {
    auto comma = text.find(',', start);
    if (comma == std::string::npos) comma = text.size();
    out.push_back(parse_double(trim(text.substr(start, comma - start)), source_ + ": " + key));
    start = comma + 1;
  }
  return out;
}

double KeyValues::get_double(const std::string& key, double fallback) const { return has(key) ? get_double(key) : fallback; }

std::uint64_t KeyValues::get_u64(const std::string& key, std::uint64_t fallback) const { return has(key) ? get_u64(key) : fallback; }

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) const { return has(key) ? raw(key) : fallback; }

void KeyValues::write(std::ostream& out) const {
  for (const auto& [k, v] : entries_) out << k << " = " << v << '\n';
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::string format_doubles(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    s += format_double(v[i]);
  }
  return s;
}

}  // namespace sfm
