#include "levit/csv.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <istream>
#include <ostream>

namespace levit {

namespace {

std::vector<std::string> split(const std::string& line, std::size_t line_no) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  if (quoted) throw CsvError("line " + std::to_string(line_no) + ": unterminated quote");
  return out;
}

double parse_number(const std::string& s, const std::string& where) {
  double v = 0;
  const auto* end = s.data() + s.size();
  const auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) {
    throw CsvError(where + ": '" + s + "' is not a number");
  }
  return v;
}

}  // namespace

std::size_t CsvTable::column(const std::string& name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw CsvError("no column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

const std::string& CsvTable::at(std::size_t row, const std::string& name) const {
  if (row >= rows.size()) throw CsvError("row " + std::to_string(row) + " out of range");
  return rows[row][column(name)];
}

double CsvTable::number(std::size_t row, const std::string& name) const {
  return parse_number(at(row, name), "row " + std::to_string(row) + " column " + name);
}

std::vector<std::vector<double>> CsvTable::numbers() const {
  std::vector<std::vector<double>> out;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto& dst = out.emplace_back();
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      dst.push_back(parse_number(rows[r][c], "row " + std::to_string(r) + " column " + header[c]));
    }
  }
  return out;
}

CsvTable read_csv(std::istream& in) {
  CsvTable t;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split(line, line_no);
    if (!have_header) {
      t.header = std::move(fields);
      have_header = true;
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw CsvError("line " + std::to_string(line_no) + ": " + std::to_string(fields.size()) +
                     " fields, header has " + std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(fields));
  }
  if (!have_header) throw CsvError("empty CSV");
  return t;
}

CsvTable read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CsvError("cannot open " + path);
  return read_csv(in);
}

void write_csv_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out << ',';
    const auto& f = fields[i];
    if (f.find_first_of(",\"\n") == std::string::npos) {
      out << f;
      continue;
    }
    out << '"';
    for (char c : f) out << (c == '"' ? "\"\"" : std::string(1, c));
    out << '"';
  }
  out << '\n';
}

}  // namespace levit
