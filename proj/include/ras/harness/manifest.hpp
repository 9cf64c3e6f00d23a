#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ras/harness/experiment.hpp"
#include "ras/util/hash.hpp"

namespace ras::harness {

/// What a command read and wrote. Carries no timestamps or host details, so
/// rerunning a command reproduces its manifest byte for byte.
struct RunManifest {
  std::string command;
  std::string config_hash;
  nlohmann::json config;
  std::vector<std::uint64_t> seeds;
  std::map<std::string, std::string> inputs;   // path -> git blob hash
  std::map<std::string, std::string> outputs;  // path -> git blob hash

  void add_input(const std::string& path) { inputs[path] = util::file_hash(path); }
  void add_output(const std::string& path) { outputs[path] = util::file_hash(path); }

  [[nodiscard]] nlohmann::json to_json() const {
    return {{"command", command}, {"config_hash", config_hash}, {"config", config},
            {"seeds", seeds},     {"inputs", inputs},           {"outputs", outputs}};
  }

  void save(const std::string& path) const {
    if (const auto dir = std::filesystem::path(path).parent_path(); !dir.empty()) std::filesystem::create_directories(dir);
    std::ofstream os(path, std::ios::trunc);
    os << to_json().dump(2) << '\n';
    if (!os) throw std::runtime_error("cannot write manifest " + path);
  }
};

inline RunManifest make_manifest(const std::string& command, const ExperimentConfig& c) {
  RunManifest m;
  m.command = command;
  m.config_hash = c.hash();
  m.config = harness::to_json(c);
  m.seeds = c.seeds;
  return m;
}

inline RunManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read manifest " + path);
  const auto j = nlohmann::json::parse(is);
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.config = j.at("config");
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
  m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  return m;
}

}  // namespace ras::harness
