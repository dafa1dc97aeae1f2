#pragma once

// RFC 4180 style CSV: comma separated, fields quoted when they contain a
// comma, quote or line break, embedded quotes doubled. '.' decimal point.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "cutpost/error.hpp"
#include "cutpost/types.hpp"

namespace cutpost::io {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    throw IoError("csv: missing column '" + std::string(name) + "'");
  }
};

inline std::vector<std::vector<std::string>> parse_csv_records(std::string_view text) {
  std::vector<std::vector<std::string>> out;
  std::vector<std::string> rec;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t i = 0;
  auto end_field = [&] {
    rec.push_back(std::move(field));
    field.clear();
    field_started = false;
  };
  auto end_record = [&] {
    end_field();
    if (!(rec.size() == 1 && rec[0].empty())) out.push_back(std::move(rec));
    rec.clear();
  };
  if (text.substr(0, 3) == "\xEF\xBB\xBF") i = 3;
  for (; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (c == ',') {
      end_field();
    } else if (c == '\r') {
      if (i + 1 < text.size() && text[i + 1] == '\n') ++i;
      end_record();
    } else if (c == '\n') {
      end_record();
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  if (quoted) throw IoError("csv: unterminated quoted field");
  if (field_started || !field.empty() || !rec.empty()) end_record();
  return out;
}

inline CsvTable read_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  auto recs = parse_csv_records(ss.str());
  if (recs.empty()) throw IoError("csv: '" + path + "' has no header row");
  CsvTable t;
  t.header = std::move(recs.front());
  for (std::size_t r = 1; r < recs.size(); ++r) {
    if (recs[r].size() != t.header.size())
      throw IoError("csv: '" + path + "' row " + std::to_string(r) + " has " +
                    std::to_string(recs[r].size()) + " fields, header has " +
                    std::to_string(t.header.size()));
    t.rows.push_back(std::move(recs[r]));
  }
  return t;
}

inline std::string quote_field(std::string_view f) {
  if (f.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(f);
  std::string q = "\"";
  for (char c : f) {
    if (c == '"') q.push_back('"');
    q.push_back(c);
  }
  q.push_back('"');
  return q;
}

/// %.17g round-trips every double.
inline std::string format_double(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline double parse_double(std::string_view s, std::string_view where = "csv") {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw IoError(std::string(where) + ": cannot parse '" + std::string(s) + "' as a number");
  return v;
}

inline void write_csv(std::ostream& out, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) out << ',';
      out << quote_field(r[i]);
    }
    out << "\r\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
}

inline void write_numeric_csv(const std::string& path, const std::vector<std::string>& header,
                              const Matrix& m) {
  if (static_cast<std::size_t>(m.cols()) != header.size())
    throw ConfigError("csv: header and matrix width differ");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  std::vector<std::vector<std::string>> rows(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) rows[static_cast<std::size_t>(i)].push_back(format_double(m(i, j)));
  write_csv(out, header, rows);
  if (!out) throw IoError("write to '" + path + "' failed");
}

inline Matrix numeric_columns(const CsvTable& t, const std::vector<std::string>& names) {
  Matrix m(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(names.size()));
  for (std::size_t j = 0; j < names.size(); ++j) {
    const std::size_t c = t.column(names[j]);
    for (std::size_t i = 0; i < t.rows.size(); ++i)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          parse_double(t.rows[i][c], "csv column '" + names[j] + "'");
  }
  return m;
}

}  // namespace cutpost::io
