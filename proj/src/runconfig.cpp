#include "fddm/runconfig.hpp"

#include <sstream>

#include "fddm/binio.hpp"
#include "fddm/errors.hpp"

namespace fddm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig RunConfig::parse_file(const std::string& path) {
  return parse_text(read_file_text(path), path);
}

RunConfig RunConfig::parse_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  cfg.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string stripped = trim(line);
    if (stripped.empty()) continue;
    const auto eq = stripped.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = trim(stripped.substr(0, eq));
    const std::string value = trim(stripped.substr(eq + 1));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (cfg.values_.count(key) > 0)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    cfg.values_[key] = value;
  }
  return cfg;
}

std::string RunConfig::raw(const std::string& key) {
  consumed_.insert(key);
  return values_.at(key);
}

std::string RunConfig::get_str(const std::string& key, const std::string& fallback) {
  return has(key) ? raw(key) : fallback;
}

int RunConfig::get_int(const std::string& key, int fallback) {
  return static_cast<int>(get_i64(key, fallback));
}

std::int64_t RunConfig::get_i64(const std::string& key, std::int64_t fallback) {
  if (!has(key)) return fallback;
  const std::string v = raw(key);
  try {
    std::size_t pos = 0;
    const std::int64_t r = std::stoll(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": key '" + key + "': '" + v + "' is not an integer");
  }
}

std::uint64_t RunConfig::get_u64(const std::string& key, std::uint64_t fallback) {
  if (!has(key)) return fallback;
  const std::string v = raw(key);
  try {
    // stoull wraps negatives silently; reject them up front.
    if (v.find('-') != std::string::npos) throw std::invalid_argument(v);
    std::size_t pos = 0;
    const std::uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": key '" + key + "': '" + v + "' is not an unsigned integer");
  }
}

double RunConfig::get_double(const std::string& key, double fallback) {
  if (!has(key)) return fallback;
  const std::string v = raw(key);
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError(origin_ + ": key '" + key + "': '" + v + "' is not a number");
  }
}

bool RunConfig::get_bool(const std::string& key, bool fallback) {
  if (!has(key)) return fallback;
  const std::string v = raw(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(origin_ + ": key '" + key + "': '" + v + "' is not a boolean");
}

std::vector<int> RunConfig::get_int_list(const std::string& key, std::vector<int> fallback) {
  if (!has(key)) return fallback;
  const std::string v = raw(key);
  std::vector<int> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    const std::string t = trim(item);
    try {
      std::size_t pos = 0;
      out.push_back(std::stoi(t, &pos));
      if (pos != t.size()) throw std::invalid_argument(t);
    } catch (const std::exception&) {
      throw ConfigError(origin_ + ": key '" + key + "': '" + t + "' is not an integer");
    }
  }
  if (out.empty()) throw ConfigError(origin_ + ": key '" + key + "': empty list");
  return out;
}

void RunConfig::require_consumed() const {
  std::string unknown;
  for (const auto& [key, value] : values_)
    if (consumed_.count(key) == 0) unknown += (unknown.empty() ? "" : ", ") + key;
  if (!unknown.empty()) throw ConfigError(origin_ + ": unknown keys: " + unknown);
}

}  // namespace fddm
