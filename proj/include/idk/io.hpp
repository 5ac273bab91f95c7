#pragma once

// File helpers shared by the dataset, trainer and CLI layers: SHA-256 digests,
// whole-file reads and writes, and JSON-Lines streams.

#include <openssl/evp.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <json.hpp>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "idk/error.hpp"

namespace idk {

using json = nlohmann::json;
namespace fs = std::filesystem;

/// Raw 32-byte SHA-256 digest.
inline std::string sha256_bytes(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1)
    throw RuntimeFailure("sha256: digest failed");
  return std::string(reinterpret_cast<const char*>(digest.data()), len);
}

inline std::string sha256_hex(std::string_view bytes) {
  constexpr char kDigits[] = "0123456789abcdef";
  std::string hex;
  for (unsigned char c : sha256_bytes(bytes)) {
    hex.push_back(kDigits[c >> 4]);
    hex.push_back(kDigits[c & 0xF]);
  }
  return hex;
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

inline std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

inline std::vector<json> read_jsonl(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const fs::path& path, const std::vector<json>& rows) {
  std::string s;
  for (const auto& r : rows) s += r.dump() + "\n";
  write_file(path, s);
}

/// Append-only JSON-Lines writer; each record is flushed as it is written.
class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& path) : path_(path) {
    if (path.has_parent_path()) ensure_dir(path.parent_path());
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw IoError("cannot write " + path.string());
  }

  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

}  // namespace idk
