#pragma once

#include <string>
#include <vector>

namespace ebg::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  bool empty() const { return header.empty() && rows.empty(); }
  // Column index by name, -1 if absent.
  int column(const std::string& name) const;
};

// Reads a whole comma-separated file. Fields are plain tokens (no quoting);
// whitespace around fields is trimmed. A zero-byte or header-only file yields
// an empty/rows-less table. Throws DataError if the file cannot be opened.
Table read_file(const std::string& path);

void write_file(const std::string& path, const std::vector<std::string>& header,
                const std::vector<std::vector<std::string>>& rows);

// Strict double parse; throws DataError naming the offending row/column.
double parse_double(const std::string& field, const std::string& context);

// Shortest decimal form that round-trips the exact double (%.17g with a
// shorter form preferred when it parses back bit-equal).
std::string format_double(double v);

}  // namespace ebg::csv
