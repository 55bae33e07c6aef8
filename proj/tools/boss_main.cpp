#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "boss/config.hpp"
#include "boss/pipeline.hpp"

namespace {

using nlohmann::json;

int fail(const std::string& kind, const std::string& message, const std::string& path, int status) {
  json line = {{"error", kind}, {"message", message}};
  if (!path.empty()) line["path"] = path;
  std::cerr << line.dump() << std::endl;
  return status;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-wise self-supervised NAS: train, search, oracle, correlate, track, report"};
  std::string command;
  std::string config_path;
  std::vector<std::string> overrides;
  bool print_config = false;
  app.add_option("command", command, "train | search | oracle | correlate | track | report")
      ->required()
      ->check(CLI::IsMember({"train", "search", "oracle", "correlate", "track", "report"}));
  app.add_option("--config", config_path, "JSON config document; omitted keys take defaults");
  app.add_option("--set", overrides, "dotted.key=value override, repeatable");
  app.add_flag("--print-config", print_config, "print the resolved config and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", e.what(), "", 2);
  }

  boss::RunConfig config;
  try {
    std::string text;
    if (!config_path.empty()) {
      std::ifstream in(config_path, std::ios::binary);
      if (!in) return fail("missing_artifact", "cannot open config " + config_path, config_path, 1);
      std::ostringstream ss;
      ss << in.rdbuf();
      text = ss.str();
    }
    config = boss::parse_config_text(text, overrides);
  } catch (const boss::ConfigError& e) {
    return fail("config", e.what(), e.path(), 1);
  }

  if (print_config) {
    std::cout << boss::serialize_config(config);
    return 0;
  }

  try {
    const auto artifacts = boss::dispatch(command, config, std::clog);
    json done = {{"command", command}, {"digest", boss::config_digest(config)}, {"artifacts", json::array()}};
    for (const auto& p : artifacts) done["artifacts"].push_back(p.string());
    std::cout << done.dump() << std::endl;
  } catch (const boss::MissingArtifact& e) {
    return fail("missing_artifact", e.what(), e.path().string(), 1);
  } catch (const boss::ConfigError& e) {
    return fail("config", e.what(), e.path(), 1);
  } catch (const std::exception& e) {
    return fail("runtime", e.what(), "", 1);
  }
  return 0;
}
