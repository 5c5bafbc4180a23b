#pragma once

// Plain-text system description files: labeled dense blocks with dimension
// headers. The format is line oriented and diffable:
//
//   # free-form comment
//   format sysmat 1
//   matrix A 2 2
//   0.9 0.1
//   0.0 0.5
//   vector ku 2
//   1 1
//   scalar phi_max
//   0.03
//
// Block labels are arbitrary identifiers; readers look up what they need and
// reject files with malformed headers or short rows.

#include <cctype>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "smpc/version.hpp"

namespace smpc {

class LabeledBlocks {
 public:
  void set(const std::string& name, const Eigen::MatrixXd& value) {
    if (!blocks_.count(name)) order_.push_back(name);
    blocks_[name] = value;
  }
  void set_scalar(const std::string& name, double value) {
    Eigen::MatrixXd m(1, 1);
    m(0, 0) = value;
    set(name, m);
  }

  bool has(const std::string& name) const { return blocks_.count(name) > 0; }

  const Eigen::MatrixXd& matrix(const std::string& name) const {
    auto it = blocks_.find(name);
    if (it == blocks_.end()) throw std::runtime_error("missing block '" + name + "'");
    return it->second;
  }
  Eigen::VectorXd vector(const std::string& name) const {
    const Eigen::MatrixXd& m = matrix(name);
    if (m.cols() != 1) throw std::runtime_error("block '" + name + "' is not a vector");
    return m.col(0);
  }
  double scalar(const std::string& name) const {
    const Eigen::MatrixXd& m = matrix(name);
    if (m.size() != 1) throw std::runtime_error("block '" + name + "' is not a scalar");
    return m(0, 0);
  }

  const std::vector<std::string>& names() const { return order_; }

  // ------------------------------------------------------------- parsing
  static LabeledBlocks read(std::istream& in, const std::string& origin = "<stream>") {
    LabeledBlocks out;
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& what) -> std::runtime_error {
      return std::runtime_error(origin + ":" + std::to_string(lineno) + ": " + what);
    };
    auto next_content_line = [&](std::string& s) -> bool {
      while (std::getline(in, s)) {
        ++lineno;
        const auto h = s.find('#');
        if (h != std::string::npos) s.erase(h);
        bool blank = true;
        for (char c : s)
          if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
        if (!blank) return true;
      }
      return false;
    };

    while (next_content_line(line)) {
      std::istringstream ls(line);
      std::string kind, name;
      ls >> kind >> name;
      if (kind == "format") {
        int ver = -1;
        ls >> ver;
        if (name != "sysmat" || ver != kSystemMatrixFormatVersion)
          throw fail("unsupported format header '" + line + "'");
        continue;
      }
      long rows = 0, cols = 0;
      if (kind == "matrix") {
        if (!(ls >> rows >> cols) || rows <= 0 || cols <= 0)
          throw fail("matrix header needs positive dimensions");
      } else if (kind == "vector") {
        if (!(ls >> rows) || rows <= 0) throw fail("vector header needs a positive length");
        cols = 1;
      } else if (kind == "scalar") {
        rows = cols = 1;
      } else {
        throw fail("unknown block kind '" + kind + "'");
      }
      if (name.empty()) throw fail("block is missing a label");

      Eigen::MatrixXd m(rows, cols);
      for (long r = 0; r < rows; ++r) {
        std::string row;
        if (!next_content_line(row)) throw fail("unexpected end of file inside block '" + name + "'");
        std::istringstream rs(row);
        for (long c = 0; c < cols; ++c)
          if (!(rs >> m(r, c)))
            throw fail("row " + std::to_string(r) + " of block '" + name + "' is short or non-numeric");
        double extra;
        if (rs >> extra) throw fail("row " + std::to_string(r) + " of block '" + name + "' has extra entries");
      }
      out.set(name, m);
    }
    return out;
  }

  static LabeledBlocks read_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open '" + path + "'");
    return read(in, path);
  }

  // ------------------------------------------------------------ emission
  void write(std::ostream& out) const {
    out << "format sysmat " << kSystemMatrixFormatVersion << "\n";
    char buf[64];
    for (const std::string& name : order_) {
      const Eigen::MatrixXd& m = blocks_.at(name);
      if (m.size() == 1)
        out << "scalar " << name << "\n";
      else if (m.cols() == 1)
        out << "vector " << name << " " << m.rows() << "\n";
      else
        out << "matrix " << name << " " << m.rows() << " " << m.cols() << "\n";
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
          std::snprintf(buf, sizeof buf, "%.17g", m(r, c));
          out << (c ? " " : "") << buf;
        }
        out << "\n";
      }
    }
  }

  void write_file(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write '" + path + "'");
    write(out);
  }

 private:
  std::map<std::string, Eigen::MatrixXd> blocks_;
  std::vector<std::string> order_;
};

}  // namespace smpc
