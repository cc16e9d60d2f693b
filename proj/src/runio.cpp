#include "advlab/runio.hpp"

#include <algorithm>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <sstream>

#include "advlab/common.hpp"

namespace advlab {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

KvConfig KvConfig::parse_text(const std::string& text) {
  KvConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(lineno) +
                       ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw UsageError("config line " + std::to_string(lineno) + ": empty key");
    if (!cfg.values.emplace(key, value).second)
      throw UsageError("duplicate config key: " + key);
  }
  return cfg;
}

KvConfig KvConfig::parse_file(const std::string& path) {
  return parse_text(read_text_file(path));
}

bool KvConfig::has(const std::string& key) const {
  return values.find(key) != values.end();
}

std::string KvConfig::require(const std::string& key) const {
  auto it = values.find(key);
  if (it == values.end())
    throw UsageError("missing required config field: " + key);
  touched.push_back(key);
  return it->second;
}

std::string KvConfig::get(const std::string& key,
                          const std::string& dflt) const {
  touched.push_back(key);
  auto it = values.find(key);
  return it == values.end() ? dflt : it->second;
}

long long KvConfig::get_int(const std::string& key, long long dflt) const {
  const std::string v = get(key, "");
  if (v.empty()) return dflt;
  try {
    std::size_t pos = 0;
    const long long out = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw UsageError("config field " + key + " expects an integer, got '" +
                     v + "'");
  }
}

double KvConfig::get_double(const std::string& key, double dflt) const {
  const std::string v = get(key, "");
  if (v.empty()) return dflt;
  try {
    std::size_t pos = 0;
    const double out = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw UsageError("config field " + key + " expects a number, got '" + v +
                     "'");
  }
}

void KvConfig::reject_unknown_keys() const {
  for (const auto& [key, value] : values) {
    if (std::find(touched.begin(), touched.end(), key) == touched.end())
      throw UsageError("unknown config field: " + key);
  }
}

std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex_u64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string format_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string now_iso8601() {
  std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(content.data(), std::streamsize(content.size()));
  if (!out) throw IoError("short write: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace advlab
