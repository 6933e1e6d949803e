#pragma once

#include <cstddef>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace levit {

class CsvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A header row plus data rows, all rows the width of the header.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Throws CsvError for an unknown column.
  std::size_t column(const std::string& name) const;
  const std::string& at(std::size_t row, const std::string& name) const;
  double number(std::size_t row, const std::string& name) const;
  // Every data row read as numbers, for headerless-looking grids.
  std::vector<std::vector<double>> numbers() const;
};

// Comma separated, optional double-quoted fields ("" escapes a quote).
CsvTable read_csv(std::istream& in);
CsvTable read_csv_file(const std::string& path);

void write_csv_row(std::ostream& out, const std::vector<std::string>& fields);

}  // namespace levit
