#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace fddm {

// Flat `key = value` run configuration (UTF-8, '#' comments). Consumers read
// typed values; anything left unread when require_consumed() runs is an
// error, so typos never pass silently.
class RunConfig {
 public:
  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_text(const std::string& text, const std::string& origin = "<text>");

  [[nodiscard]] bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback);
  int get_int(const std::string& key, int fallback);
  std::int64_t get_i64(const std::string& key, std::int64_t fallback);
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback);
  double get_double(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback);

  // Throws ConfigError naming every key that no getter consumed.
  void require_consumed() const;

 private:
  std::string raw(const std::string& key);
  std::string origin_;
  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
};

}  // namespace fddm
