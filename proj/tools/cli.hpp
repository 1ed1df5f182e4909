// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace renofeat::cli {

/// Entry point of the `renofeat` tool. Returns the process exit code; all
/// output goes to `out` and diagnostics to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// A file recorded in a manifest with its CRC32.
struct Artifact {
  std::string path;  // absolute for inputs, relative to the run directory for outputs
  std::string crc32;
};

/// Everything needed to re-run a command: the phase, its arguments, the full
/// configuration snapshot, and checksums of what went in and came out.
struct Manifest {
  std::string run_id;
  std::string phase;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> args;
  std::string config;  // serialized Config text
  std::vector<Artifact> inputs;
  std::vector<Artifact> outputs;
  double wall_seconds = 0.0;

  std::string to_json() const;
  static Manifest from_json(const std::string& text);
  static Manifest load(const std::filesystem::path& path);
};

std::string file_crc32(const std::filesystem::path& path);

}  // namespace renofeat::cli
