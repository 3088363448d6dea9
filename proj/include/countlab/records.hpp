#pragma once

// Line-delimited dataset record files, atomic file output and small CSV
// helpers shared by every command.
//
// Record file layout: a first line "# countlab-records v1", then one JSON
// object per line:
//   {"caption":..., "flags":{...}, "id":..., "scene":{...}, "split":...}
// Keys are emitted in sorted order so output bytes are a pure function of
// the record contents.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "countlab/errors.hpp"
#include "countlab/synthetic_scenes.hpp"

namespace countlab {

inline constexpr std::string_view kRecordHeader = "# countlab-records v1";

struct DatasetRecord {
  std::string id;
  std::string split;
  std::string caption;
  SceneSpec scene;
  std::map<std::string, std::string> flags;

  bool operator==(const DatasetRecord&) const = default;
};

inline nlohmann::json scene_to_json(const SceneSpec& s) {
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [cls, n] : s.counts) counts[std::to_string(cls)] = n;
  nlohmann::json placements = nlohmann::json::array();
  for (const auto& p : s.placements) placements.push_back({p.class_id, p.cx, p.cy, p.size});
  return {{"id", s.id},         {"counts", counts},         {"layout", to_string(s.layout)}, {"height", s.height},
          {"width", s.width},   {"placements", placements}, {"seed", s.seed}};
}

inline SceneSpec scene_from_json(const nlohmann::json& j) {
  SceneSpec s;
  s.id = j.at("id").get<std::string>();
  for (const auto& [key, value] : j.at("counts").items()) {
    int cls = 0;
    const auto res = std::from_chars(key.data(), key.data() + key.size(), cls);
    if (res.ec != std::errc() || res.ptr != key.data() + key.size()) throw DataError("bad class id: " + key);
    s.counts[cls] = value.get<int>();
  }
  s.layout = layout_from_string(j.at("layout").get<std::string>());
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  for (const auto& p : j.at("placements")) {
    if (!p.is_array() || p.size() != 4) throw DataError("placement must be [class, cx, cy, size]");
    s.placements.push_back({p[0].get<int>(), p[1].get<int>(), p[2].get<int>(), p[3].get<int>()});
  }
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

inline std::string record_to_line(const DatasetRecord& r) {
  nlohmann::json j = {{"id", r.id},
                      {"split", r.split},
                      {"caption", r.caption},
                      {"scene", scene_to_json(r.scene)},
                      {"flags", nlohmann::json(r.flags)}};
  return j.dump();
}

inline DatasetRecord record_from_line(std::string_view line) {
  const auto j = nlohmann::json::parse(line);
  DatasetRecord r;
  r.id = j.at("id").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.caption = j.at("caption").get<std::string>();
  r.scene = scene_from_json(j.at("scene"));
  if (j.contains("flags")) r.flags = j.at("flags").get<std::map<std::string, std::string>>();
  return r;
}

/// Writes `content` to `path` through a sibling temporary file and rename.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw DataError("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::string format_records(const std::vector<DatasetRecord>& records) {
  std::string out(kRecordHeader);
  out += '\n';
  for (const auto& r : records) {
    out += record_to_line(r);
    out += '\n';
  }
  return out;
}

inline void write_records(const std::filesystem::path& path, const std::vector<DatasetRecord>& records) {
  write_file_atomic(path, format_records(records));
}

struct NumberedRecord {
  std::size_t line = 0;
  DatasetRecord record;
};

/// Parses a record file keeping 1-based line numbers. Lines starting with
/// '#' and blank lines are skipped; errors cite "path:line". Duplicate ids
/// are rejected.
inline std::vector<NumberedRecord> read_numbered_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open record file: " + path.string());
  std::vector<NumberedRecord> out;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.front() == '#') continue;
    try {
      out.push_back({lineno, record_from_line(line)});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen.insert(out.back().record.id).second) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": duplicate id " + out.back().record.id);
    }
  }
  return out;
}

inline std::vector<DatasetRecord> read_records(const std::filesystem::path& path) {
  std::vector<DatasetRecord> out;
  for (auto& n : read_numbered_records(path)) out.push_back(std::move(n.record));
  return out;
}

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// Fixed-point decimal with `digits` fractional digits.
inline std::string format_fixed(double v, int digits) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, digits);
  return std::string(buf, res.ptr);
}

/// Reads newline-separated ids; blank lines and '#' comments are ignored.
inline std::unordered_set<std::string> read_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open id list: " + path.string());
  std::unordered_set<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    ids.insert(line);
  }
  return ids;
}

}  // namespace countlab
