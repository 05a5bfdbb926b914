#pragma once

#include <string>
#include <vector>

#include "json.hpp"

namespace irfusion::cli {

inline constexpr const char* kToolName = "irfusion";
inline constexpr const char* kToolVersion = "0.1.0";

struct FileHash {
  std::string path;     // as recorded (relative paths stay relative)
  std::string fnv1a64;  // 16 lowercase hex digits
};

/// Record of one CLI run: what ran, with which effective configuration, on
/// which inputs, producing which outputs. Replaying the manifest re-runs the
/// subcommand from `config` alone; for non-measurement runs the outputs must
/// come back byte-identical (hashes are compared).
struct RunManifest {
  std::string tool = kToolName;
  std::string version = kToolVersion;
  std::string subcommand;
  nlohmann::ordered_json config;  // flat key -> value, effective (post-override)
  std::vector<FileHash> inputs;
  std::vector<FileHash> outputs;
  double wall_seconds = 0.0;
  // true when outputs embed wall-clock measurements (bench reports); replay
  // then re-measures instead of demanding byte-identity
  bool measurement = false;
};

/// FNV-1a 64-bit over the file's bytes, as 16 hex digits.
/// Throws std::runtime_error naming the path when the file cannot be read.
std::string fnv1a_file_hex(const std::string& path);

/// Serializes the manifest and writes it atomically (temp file + rename), so
/// a crash can never leave a half-written manifest behind.
void write_manifest_atomic(const std::string& path, const RunManifest& m);

/// Parses a manifest written by write_manifest_atomic.
/// Throws std::runtime_error on unreadable files or missing fields.
RunManifest load_manifest(const std::string& path);

}  // namespace irfusion::cli
