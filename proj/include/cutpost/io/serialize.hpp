#pragma once

// SampleSet <-> CSV with a JSON sidecar, and small JSON helpers.

#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "cutpost/io/csv.hpp"
#include "cutpost/types.hpp"

namespace cutpost::io {

/// samples.csv -> samples.meta.json
inline std::string sidecar_path(const std::string& csv_path) {
  std::filesystem::path p(csv_path);
  p.replace_extension(".meta.json");
  return p.string();
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("'" + path + "' is not valid JSON: " + e.what());
  }
}

/// Draws to `csv_path` (header = names) and source plus meta to the sidecar.
inline void write_sample_set(const std::string& csv_path, const SampleSet& s) {
  s.validate();
  write_numeric_csv(csv_path, s.names, s.draws);
  nlohmann::json side;
  side["source"] = std::string(to_string(s.source));
  side["rows"] = s.rows();
  side["columns"] = s.names;
  side["meta"] = s.meta;
  write_json(sidecar_path(csv_path), side);
}

/// Reads the CSV and, when present, its sidecar.
inline SampleSet read_sample_set(const std::string& csv_path) {
  const CsvTable t = read_csv(csv_path);
  SampleSet s;
  s.names = t.header;
  s.draws = numeric_columns(t, t.header);
  const std::string side = sidecar_path(csv_path);
  if (std::filesystem::exists(side)) {
    const auto j = read_json(side);
    if (j.contains("source")) s.source = sample_source_from_string(j["source"].get<std::string>());
    if (j.contains("meta")) s.meta = j["meta"];
  }
  s.validate();
  return s;
}

}  // namespace cutpost::io
