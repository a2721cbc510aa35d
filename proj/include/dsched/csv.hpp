#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dsched/common.hpp"

namespace dsched::io {

/// RFC-4180 CSV writer: header row, '.' decimal separator, fields quoted
/// only when needed.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& fields);
  static std::string num(double v);
  static std::string num(int v);

 private:
  std::ofstream out_;
};

/// Debug dump of a dense matrix: one header line "rows,cols", then
/// row-major values.
void write_matrix_csv(const std::filesystem::path& path, const Mat& m);

}  // namespace dsched::io
