#include "retseg/config.hpp"

#include <zlib.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "retseg/errors.hpp"

namespace fs = std::filesystem;

namespace retseg {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

ConfigFile ConfigFile::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str(), path);
}

ConfigFile ConfigFile::parse(const std::string& text, const std::string& origin) {
  ConfigFile cfg;
  cfg.origin_ = origin;
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
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" +
                        line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    if (cfg.values_.count(key))
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    cfg.values_[key] = value;
  }
  return cfg;
}

std::string ConfigFile::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(origin_ + ": missing required key '" + key + "'");
  consumed_.insert(key);
  return it->second;
}

std::string ConfigFile::get_or(const std::string& key, const std::string& fallback) const {
  consumed_.insert(key);
  auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

void ConfigFile::check_all_consumed() const {
  std::string unknown;
  for (const auto& [k, v] : values_)
    if (!consumed_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  if (!unknown.empty())
    throw ConfigError(origin_ + ": unknown configuration keys: " + unknown);
}

std::string config_hash(const std::map<std::string, std::string>& resolved) {
  std::ostringstream os;
  for (const auto& [k, v] : resolved) os << k << "=" << v << "\n";
  const std::string s = os.str();
  const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(s.data()),
                         static_cast<uInt>(s.size()));
  std::ostringstream hex;
  hex << std::hex;
  hex.width(8);
  hex.fill('0');
  hex << crc;
  return hex.str();
}

std::string make_run_dir(const std::string& base,
                         const std::map<std::string, std::string>& resolved,
                         const std::string& override_dir) {
  std::string dir = override_dir;
  if (dir.empty()) {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%SZ", std::gmtime(&tt));
    dir = (fs::path(base) / (config_hash(resolved) + "-" + stamp)).string();
  }
  fs::create_directories(dir);
  return dir;
}

void write_resolved_config(const std::string& dir,
                           const std::map<std::string, std::string>& resolved) {
  const std::string path = (fs::path(dir) / "config.resolved").string();
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& [k, v] : resolved) out << k << "=" << v << "\n";
}

}  // namespace retseg
