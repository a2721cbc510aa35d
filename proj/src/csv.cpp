#include "dsched/csv.hpp"

#include <cstdio>

namespace dsched::io {

namespace {

bool needs_quotes(const std::string& f) {
  return f.find_first_of(",\"\r\n") != std::string::npos;
}

std::string escape(const std::string& f) {
  if (!needs_quotes(f)) return f;
  std::string out = "\"";
  for (char c : f) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

}  // namespace

CsvWriter::CsvWriter(const std::filesystem::path& path,
                     const std::vector<std::string>& header) {
  out_.open(path);
  if (!out_) throw InvalidInput("cannot open CSV for writing: " + path.string());
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out_ << ',';
    out_ << escape(fields[i]);
  }
  out_ << "\r\n";
  out_.flush();
}

std::string CsvWriter::num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string CsvWriter::num(int v) { return std::to_string(v); }

void write_matrix_csv(const std::filesystem::path& path, const Mat& m) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open matrix CSV for writing: " + path.string());
  out << m.rows() << "," << m.cols() << "\n";
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      out << buf;
    }
    out << "\n";
  }
}

}  // namespace dsched::io
