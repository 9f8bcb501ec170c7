#pragma once

// Run manifests: what was run, on which bytes, producing which files.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "protgo/checkpoint.hpp"
#include "protgo/error.hpp"

#ifndef PROTGO_VERSION
#define PROTGO_VERSION "0.0.0"
#endif

namespace protgo {

inline constexpr const char* kVersion = PROTGO_VERSION;

inline std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  if (in.bad()) throw IoError("failed reading " + path.string());
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct FileDigest {
  std::string path;
  std::string sha256;

  bool operator==(const FileDigest&) const = default;
};

struct RunManifest {
  std::string command;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  std::vector<FileDigest> inputs;
  std::vector<FileDigest> outputs;
  std::string version = kVersion;
  std::string started;
  std::string finished;
  nlohmann::json results = nlohmann::json::object();  // command-specific summary

  void add_input(const std::filesystem::path& p) { inputs.push_back({p.string(), sha256_file(p)}); }
  void add_output(const std::filesystem::path& p) { outputs.push_back({p.string(), sha256_file(p)}); }
};

inline void to_json(nlohmann::json& j, const FileDigest& d) { j = {{"path", d.path}, {"sha256", d.sha256}}; }
inline void from_json(const nlohmann::json& j, FileDigest& d) {
  d.path = j.at("path").get<std::string>();
  d.sha256 = j.at("sha256").get<std::string>();
}

inline void to_json(nlohmann::json& j, const RunManifest& m) {
  j = {{"command", m.command}, {"version", m.version}, {"seed", m.seed},         {"config", m.config},
       {"inputs", m.inputs},   {"outputs", m.outputs}, {"results", m.results},  {"started", m.started},
       {"finished", m.finished}};
}

inline void from_json(const nlohmann::json& j, RunManifest& m) {
  m.command = j.at("command").get<std::string>();
  m.version = j.at("version").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config = j.at("config");
  m.inputs = j.at("inputs").get<std::vector<FileDigest>>();
  m.outputs = j.at("outputs").get<std::vector<FileDigest>>();
  m.results = j.value("results", nlohmann::json::object());
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
}

inline void write_manifest(RunManifest m, const std::filesystem::path& path) {
  m.finished = utc_timestamp();
  const auto text = nlohmann::json(m).dump(2) + "\n";
  detail::write_file_atomically(path, text);
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in).get<RunManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed manifest " + path.string() + ": " + e.what());
  }
}

// Inputs whose current bytes no longer match the recorded digest (missing files included).
inline std::vector<std::string> verify_manifest(const RunManifest& m) {
  std::vector<std::string> drifted;
  for (const auto& in : m.inputs) {
    if (!std::filesystem::exists(in.path) || sha256_file(in.path) != in.sha256) drifted.push_back(in.path);
  }
  return drifted;
}

}  // namespace protgo
