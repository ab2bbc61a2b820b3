#include "targprof/csv.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "targprof/errors.hpp"

namespace targprof {

int CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (header[i] == name) return static_cast<int>(i);
  }
  return -1;
}

CsvTable parse_csv(const std::string& text) {
  CsvTable table;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool record_started = false;

  auto end_field = [&]() {
    record.push_back(field);
    field.clear();
  };
  auto end_record = [&]() {
    end_field();
    if (table.header.empty()) {
      table.header = record;
    } else {
      table.rows.push_back(record);
    }
    record.clear();
    record_started = false;
  };

  std::size_t i = 0;
  // drop a UTF-8 BOM if present
  if (text.size() >= 3 && text.compare(0, 3, "\xef\xbb\xbf") == 0) i = 3;

  for (; i < text.size(); ++i) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        in_quotes = true;
        record_started = true;
        break;
      case ',':
        end_field();
        record_started = true;
        break;
      case '\r':
        break;
      case '\n':
        if (record_started || !field.empty() || !record.empty()) end_record();
        break;
      default:
        field.push_back(c);
        record_started = true;
        break;
    }
  }
  if (in_quotes) throw ValidationError("csv: unterminated quoted field");
  if (record_started || !field.empty() || !record.empty()) end_record();
  return table;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

std::string csv_quote(const std::string& field) {
  bool needs = field.find_first_of(",\"\n\r") != std::string::npos;
  if (!needs) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return buf;
}

void write_csv_file(const std::string& path, const CsvTable& table) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot open file for writing: " + path);
  auto write_record = [&out](const std::vector<std::string>& rec) {
    for (std::size_t i = 0; i < rec.size(); ++i) {
      if (i) out << ',';
      out << csv_quote(rec[i]);
    }
    out << '\n';
  };
  write_record(table.header);
  for (const auto& row : table.rows) write_record(row);
  if (!out) throw ValidationError("write failed: " + path);
}

}  // namespace targprof
