#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "retseg/config.hpp"
#include "retseg/errors.hpp"

using namespace retseg;
namespace fs = std::filesystem;

TEST_SUITE("config") {

TEST_CASE("parses key=value lines with comments and blanks") {
  ConfigFile cfg = ConfigFile::parse(
      "# a comment\n"
      "epochs = 50\n"
      "\n"
      "lr=0.01\n"
      "name = run one\n");
  CHECK(cfg.get("epochs") == "50");
  CHECK(cfg.get("lr") == "0.01");
  CHECK(cfg.get("name") == "run one");
  CHECK(cfg.get_or("missing", "fallback") == "fallback");
  CHECK_THROWS_AS(cfg.get("nope"), ConfigError);
}

TEST_CASE("rejects malformed and duplicate lines") {
  CHECK_THROWS_AS(ConfigFile::parse("no_equals_sign\n"), ConfigError);
  CHECK_THROWS_AS(ConfigFile::parse("=value\n"), ConfigError);
  CHECK_THROWS_AS(ConfigFile::parse("a=1\na=2\n"), ConfigError);
}

TEST_CASE("unknown keys fail loudly after consumption check") {
  ConfigFile cfg = ConfigFile::parse("epochs=10\ntypo_key=5\n");
  cfg.get("epochs");
  CHECK_THROWS_WITH_AS(cfg.check_all_consumed(),
                       doctest::Contains("typo_key"), ConfigError);

  ConfigFile ok = ConfigFile::parse("epochs=10\n");
  ok.get("epochs");
  CHECK_NOTHROW(ok.check_all_consumed());
}

TEST_CASE("load reads from disk and reports the file in errors") {
  const fs::path path = fs::temp_directory_path() / "retseg_config_test.cfg";
  {
    std::ofstream out(path);
    out << "alpha=0.999\n";
  }
  ConfigFile cfg = ConfigFile::load(path.string());
  CHECK(cfg.get("alpha") == "0.999");
  CHECK_THROWS_AS(ConfigFile::load((fs::temp_directory_path() / "missing.cfg").string()), IoError);
  fs::remove(path);
}

TEST_CASE("config hash is stable, order independent and value sensitive") {
  const std::map<std::string, std::string> a{{"x", "1"}, {"y", "2"}};
  const std::map<std::string, std::string> b{{"y", "2"}, {"x", "1"}};
  const std::map<std::string, std::string> c{{"x", "1"}, {"y", "3"}};
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a) != config_hash(c));
  CHECK(config_hash(a).size() == 8);  // crc32 hex
  for (char ch : config_hash(a)) CHECK(std::isxdigit(static_cast<unsigned char>(ch)));
}

TEST_CASE("run directories embed the config hash and are created") {
  const fs::path base = fs::temp_directory_path() / "retseg_runs_test";
  fs::remove_all(base);
  const std::map<std::string, std::string> cfg{{"cmd", "test"}};
  const std::string dir = make_run_dir(base.string(), cfg);
  CHECK(fs::exists(dir));
  CHECK(fs::path(dir).filename().string().rfind(config_hash(cfg) + "-", 0) == 0);

  const std::string forced = (base / "explicit").string();
  CHECK(make_run_dir(base.string(), cfg, forced) == forced);
  CHECK(fs::exists(forced));

  write_resolved_config(forced, cfg);
  std::ifstream in(fs::path(forced) / "config.resolved");
  std::string line;
  std::getline(in, line);
  CHECK(line == "cmd=test");
  fs::remove_all(base);
}

}  // TEST_SUITE
