#pragma once

#include <string>
#include <vector>

namespace targprof {

// Minimal RFC-4180 table: first record is the header. Quoted fields may
// contain commas, doubled quotes and embedded line breaks.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // column index by name, -1 when absent
  int column(const std::string& name) const;
};

CsvTable read_csv_file(const std::string& path);
CsvTable parse_csv(const std::string& text);

std::string csv_quote(const std::string& field);

// floats are serialized with 9 significant digits everywhere
std::string format_double(double x);

void write_csv_file(const std::string& path, const CsvTable& table);

}  // namespace targprof
