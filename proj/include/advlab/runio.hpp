#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace advlab {

// Flat key = value configuration file. '#' starts a comment; values run to
// the end of the line so text fields may contain spaces. The schema is
// versioned through the required `config_version` key.
struct KvConfig {
  std::map<std::string, std::string> values;

  static KvConfig parse_text(const std::string& text);
  static KvConfig parse_file(const std::string& path);

  bool has(const std::string& key) const;
  std::string require(const std::string& key) const;  // names missing field
  std::string get(const std::string& key, const std::string& dflt) const;
  long long get_int(const std::string& key, long long dflt) const;
  double get_double(const std::string& key, double dflt) const;

  // Keys consumed so far; used to reject unknown keys (typo safety).
  mutable std::vector<std::string> touched;
  void reject_unknown_keys() const;
};

std::uint64_t fnv1a64(const std::string& s);
std::string hex_u64(std::uint64_t v);

std::string format_g(double v);  // canonical %.10g used by every CSV/JSON log

std::string now_iso8601();

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace advlab
