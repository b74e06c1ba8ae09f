#include "budgetlab/manifest.hpp"

#include <fstream>
#include <stdexcept>

#include "budgetlab/errors.hpp"
#include "budgetlab/util.hpp"

namespace budgetlab {

std::string file_checksum(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingDataError("cannot open for checksum: " + path);
  std::uint64_t h = kFnvOffset;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0)
    h = fnv1a64(buf, static_cast<std::size_t>(in.gcount()), h);
  return hex64(h);
}

void RunManifest::add_input(const std::string& path) {
  inputs.emplace_back(path, file_checksum(path));
}

void RunManifest::add_output(const std::string& path) {
  outputs.emplace_back(path, file_checksum(path));
}

void RunManifest::write(const std::string& path) const {
  nlohmann::json j;
  j["command"] = command;
  j["tool_version"] = kToolVersion;
  j["seed"] = seed;
  j["config"] = config;
  j["inputs"] = nlohmann::json::object();
  for (const auto& [p, sum] : inputs) j["inputs"][p] = sum;
  j["outputs"] = nlohmann::json::object();
  for (const auto& [p, sum] : outputs) j["outputs"][p] = sum;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace budgetlab
