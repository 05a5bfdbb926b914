#include "irfusion/manifest.hpp"

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

namespace irfusion::cli {

std::string fnv1a_file_hex(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("hash: cannot read " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  unsigned char buf[1 << 16];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) {
    for (size_t i = 0; i < n; ++i) {
      h ^= buf[i];
      h *= 0x100000001b3ULL;
    }
  }
  const bool failed = std::ferror(f) != 0;
  std::fclose(f);
  if (failed) throw std::runtime_error("hash: read error on " + path);
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

namespace {

nlohmann::ordered_json hashes_to_json(const std::vector<FileHash>& v) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const FileHash& fh : v) arr.push_back({{"path", fh.path}, {"fnv1a64", fh.fnv1a64}});
  return arr;
}

std::vector<FileHash> hashes_from_json(const nlohmann::json& arr) {
  std::vector<FileHash> out;
  for (const auto& e : arr) {
    out.push_back({e.at("path").get<std::string>(), e.at("fnv1a64").get<std::string>()});
  }
  return out;
}

}  // namespace

void write_manifest_atomic(const std::string& path, const RunManifest& m) {
  nlohmann::ordered_json j;
  j["tool"] = m.tool;
  j["version"] = m.version;
  j["subcommand"] = m.subcommand;
  j["config"] = m.config;
  j["inputs"] = hashes_to_json(m.inputs);
  j["outputs"] = hashes_to_json(m.outputs);
  j["wall_seconds"] = m.wall_seconds;
  j["measurement"] = m.measurement;
  const std::string text = j.dump(2);

  const std::string tmp = path + ".tmp";
  std::FILE* f = std::fopen(tmp.c_str(), "wb");
  if (!f) throw std::runtime_error("manifest: cannot write " + tmp);
  const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size() &&
                  std::fputc('\n', f) != EOF && std::fflush(f) == 0;
  std::fclose(f);
  if (!ok) {
    std::remove(tmp.c_str());
    throw std::runtime_error("manifest: write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw std::runtime_error("manifest: cannot move " + tmp + " to " + path + ": " +
                             ec.message());
  }
}

RunManifest load_manifest(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("manifest: cannot read " + path);
  std::string text;
  char buf[1 << 16];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) text.append(buf, n);
  std::fclose(f);

  RunManifest m;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    m.tool = j.at("tool").get<std::string>();
    m.version = j.at("version").get<std::string>();
    m.subcommand = j.at("subcommand").get<std::string>();
    m.config = j.at("config");
    m.inputs = hashes_from_json(j.at("inputs"));
    m.outputs = hashes_from_json(j.at("outputs"));
    m.wall_seconds = j.at("wall_seconds").get<double>();
    m.measurement = j.at("measurement").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("manifest: invalid " + path + ": " + e.what());
  }
  return m;
}

}  // namespace irfusion::cli
