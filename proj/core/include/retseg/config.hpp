#pragma once

#include <map>
#include <set>
#include <string>

namespace retseg {

// Flat key=value configuration text: one pair per line, '#' comments, blank
// lines ignored. Keys read through get()/get_or() are marked consumed;
// check_all_consumed() rejects anything left over, so typos fail loudly.
class ConfigFile {
 public:
  static ConfigFile load(const std::string& path);
  static ConfigFile parse(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;

  void check_all_consumed() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> consumed_;
  std::string origin_;
};

// Stable short hash of the resolved key=value map, for run-directory names.
std::string config_hash(const std::map<std::string, std::string>& resolved);

// <base>/<hash>-<UTC timestamp>; created on disk. An explicit non-empty
// `override_dir` wins and is created as given.
std::string make_run_dir(const std::string& base, const std::map<std::string, std::string>& resolved,
                         const std::string& override_dir = "");

// Writes the resolved configuration as config.resolved next to the outputs.
void write_resolved_config(const std::string& dir,
                           const std::map<std::string, std::string>& resolved);

}  // namespace retseg
