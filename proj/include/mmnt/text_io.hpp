#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mmnt/binary_io.hpp"
#include "mmnt/error.hpp"

namespace mmnt {

// Key order is preserved so emitted documents diff cleanly.
using Json = nlohmann::ordered_json;

inline Json parse_json(std::string_view text, std::string_view context) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw FormatError(std::string(context) + ": " + e.what());
  }
}

// Rejects any key not in `allowed`, naming every offender.
inline void expect_keys(const Json& obj, std::initializer_list<std::string_view> allowed,
                        std::string_view context) {
  if (!obj.is_object()) {
    throw FormatError(std::string(context) + ": expected an object");
  }
  std::string unknown;
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) unknown += (unknown.empty() ? "" : ", ") + key;
  }
  if (!unknown.empty()) {
    throw FormatError(std::string(context) + ": unknown key(s): " + unknown);
  }
}

template <typename T>
T field(const Json& obj, std::string_view key, std::string_view context) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw FormatError(std::string(context) + ": missing field '" + std::string(key) + "'");
  }
  try {
    return it->template get<T>();
  } catch (const Json::exception& e) {
    throw FormatError(std::string(context) + ": field '" + std::string(key) +
                      "' has wrong type: " + e.what());
  }
}

inline const Json& array_field(const Json& obj, std::string_view key, std::string_view context) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw FormatError(std::string(context) + ": missing field '" + std::string(key) + "'");
  }
  if (!it->is_array()) {
    throw FormatError(std::string(context) + ": field '" + std::string(key) + "' must be an array");
  }
  return *it;
}

// Structured-text header preceding a binary payload: u32 byte length + UTF-8 JSON.
inline void write_text_header(ByteWriter& w, const Json& header) {
  std::string text = header.dump();
  w.put(static_cast<std::uint32_t>(text.size()));
  w.put_string(text);
}

inline Json read_text_header(ByteReader& r, std::string_view context) {
  constexpr std::uint32_t kMaxHeader = 16u << 20;
  auto len = r.get<std::uint32_t>("header length");
  if (len > kMaxHeader) {
    throw FormatError(std::string(context) + ": header length " + std::to_string(len) +
                          " exceeds limit",
                      r.offset() - 4);
  }
  return parse_json(r.get_string(len, "header"), context);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to a sibling temp file and renames it into place.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write file: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace mmnt
