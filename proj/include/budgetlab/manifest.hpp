#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

namespace budgetlab {

constexpr const char* kToolVersion = "budgetlab 0.1.0";

// One manifest per CLI run: command, resolved configuration, seed, and
// checksums of every input and output artifact. Contains nothing derived
// from the environment or the clock, so identical runs write identical
// manifests.
struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  nlohmann::json config;  // resolved option values, flat keys
  std::vector<std::pair<std::string, std::string>> inputs;   // path, checksum
  std::vector<std::pair<std::string, std::string>> outputs;  // path, checksum

  void add_input(const std::string& path);
  void add_output(const std::string& path);
  void write(const std::string& path) const;
};

// FNV-1a 64 checksum of the file bytes, as 16 hex digits.
std::string file_checksum(const std::string& path);

}  // namespace budgetlab
