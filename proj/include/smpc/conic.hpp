#pragma once

// Second-order cone program container in standard conic form
//
//   minimize    c' x + d
//   subject to  A x = b
//               h - G x in K,  K = R+^{lp} x SOC(q_1) x ... x SOC(q_p)
//
// where a second-order cone block of dimension q pairs a scalar bound with a
// vector: (t, v) in SOC(q)  <=>  ||v||_2 <= t.  LP rows always precede the
// cone blocks inside G.  A versioned plain-text serialization supports
// offline inspection and cross-solver checks.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include "smpc/version.hpp"

namespace smpc {

struct ConicProgram {
  Eigen::Index num_vars = 0;
  Eigen::VectorXd c;
  double objective_constant = 0.0;

  Eigen::SparseMatrix<double> A;  // equality rows
  Eigen::VectorXd b;

  Eigen::SparseMatrix<double> G;  // LP rows followed by SOC rows
  Eigen::VectorXd h;
  Eigen::Index num_lp = 0;
  std::vector<Eigen::Index> soc_dims;

  Eigen::Index num_ineq_rows() const { return G.rows(); }
  Eigen::Index num_soc_rows() const { return G.rows() - num_lp; }

  void validate() const {
    if (c.size() != num_vars) throw std::runtime_error("conic program: objective size mismatch");
    if (A.cols() != num_vars || G.cols() != num_vars)
      throw std::runtime_error("conic program: constraint column mismatch");
    if (A.rows() != b.size() || G.rows() != h.size())
      throw std::runtime_error("conic program: right-hand side size mismatch");
    Eigen::Index soc_total = 0;
    for (Eigen::Index q : soc_dims) {
      if (q < 1) throw std::runtime_error("conic program: cone dimension must be positive");
      soc_total += q;
    }
    if (num_lp + soc_total != G.rows())
      throw std::runtime_error("conic program: cone dimensions do not tile the inequality rows");
  }
};

// Incremental builder used by the program assembler.
class ConicBuilder {
 public:
  explicit ConicBuilder(Eigen::Index num_vars) : num_vars_(num_vars) {
    c_ = Eigen::VectorXd::Zero(num_vars);
  }

  Eigen::Index num_vars() const { return num_vars_; }

  void add_objective(Eigen::Index var, double coeff) { c_[var] += coeff; }
  void set_objective_constant(double d) { constant_ = d; }

  // h - Gx: each call contributes one row; terms are (variable, coefficient).
  Eigen::Index add_eq_row(const std::vector<std::pair<Eigen::Index, double>>& terms, double rhs) {
    const Eigen::Index r = static_cast<Eigen::Index>(b_.size());
    for (const auto& [j, v] : terms) eq_trip_.emplace_back(static_cast<int>(r), static_cast<int>(j), v);
    b_.push_back(rhs);
    return r;
  }

  Eigen::Index add_lp_row(const std::vector<std::pair<Eigen::Index, double>>& terms, double rhs) {
    if (!soc_dims_.empty())
      throw std::runtime_error("conic builder: LP rows must precede cone blocks");
    const Eigen::Index r = static_cast<Eigen::Index>(h_.size());
    for (const auto& [j, v] : terms) in_trip_.emplace_back(static_cast<int>(r), static_cast<int>(j), v);
    h_.push_back(rhs);
    return r;
  }

  // Rows ordered (bound row, vector rows); returns the index of the bound row.
  Eigen::Index add_soc_block(const std::vector<std::vector<std::pair<Eigen::Index, double>>>& rows,
                             const std::vector<double>& rhs) {
    if (rows.size() != rhs.size() || rows.empty())
      throw std::runtime_error("conic builder: malformed cone block");
    const Eigen::Index r0 = static_cast<Eigen::Index>(h_.size());
    for (size_t i = 0; i < rows.size(); ++i) {
      for (const auto& [j, v] : rows[i])
        in_trip_.emplace_back(static_cast<int>(r0 + static_cast<Eigen::Index>(i)),
                              static_cast<int>(j), v);
      h_.push_back(rhs[i]);
    }
    soc_dims_.push_back(static_cast<Eigen::Index>(rows.size()));
    if (num_lp_ < 0) num_lp_ = r0;
    return r0;
  }

  ConicProgram finish() {
    ConicProgram p;
    p.num_vars = num_vars_;
    p.c = c_;
    p.objective_constant = constant_;
    p.A.resize(static_cast<Eigen::Index>(b_.size()), num_vars_);
    p.A.setFromTriplets(eq_trip_.begin(), eq_trip_.end());
    p.b = Eigen::Map<const Eigen::VectorXd>(b_.data(), static_cast<Eigen::Index>(b_.size()));
    p.G.resize(static_cast<Eigen::Index>(h_.size()), num_vars_);
    p.G.setFromTriplets(in_trip_.begin(), in_trip_.end());
    p.h = Eigen::Map<const Eigen::VectorXd>(h_.data(), static_cast<Eigen::Index>(h_.size()));
    p.num_lp = num_lp_ < 0 ? static_cast<Eigen::Index>(h_.size()) : num_lp_;
    p.soc_dims = soc_dims_;
    p.validate();
    return p;
  }

 private:
  Eigen::Index num_vars_;
  Eigen::VectorXd c_;
  double constant_ = 0.0;
  std::vector<Eigen::Triplet<double>> eq_trip_, in_trip_;
  std::vector<double> b_, h_;
  std::vector<Eigen::Index> soc_dims_;
  Eigen::Index num_lp_ = -1;  // set when the first cone block arrives
};

// ------------------------------------------------------------- serialization
namespace detail {

inline void write_sparse(std::ostream& os, const char* tag, const Eigen::SparseMatrix<double>& m) {
  os << tag << "-nnz " << m.nonZeros() << "\n";
  char buf[96];
  for (int k = 0; k < m.outerSize(); ++k)
    for (Eigen::SparseMatrix<double>::InnerIterator it(m, k); it; ++it) {
      std::snprintf(buf, sizeof(buf), "%ld %ld %.17g\n", static_cast<long>(it.row()),
                    static_cast<long>(it.col()), it.value());
      os << buf;
    }
}

inline void write_dense(std::ostream& os, const char* tag, const Eigen::VectorXd& v) {
  os << tag << " " << v.size() << "\n";
  char buf[48];
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g\n", v[i]);
    os << buf;
  }
}

}  // namespace detail

inline void write_conic(std::ostream& os, const ConicProgram& p) {
  p.validate();
  os << "format conic " << kConicTextFormatVersion << "\n";
  os << "variables " << p.num_vars << "\n";
  os << "lp-rows " << p.num_lp << "\n";
  os << "soc-blocks " << p.soc_dims.size();
  for (Eigen::Index q : p.soc_dims) os << " " << q;
  os << "\n";
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", p.objective_constant);
  os << "objective-constant " << buf << "\n";
  Eigen::Index c_nnz = 0;
  for (Eigen::Index i = 0; i < p.c.size(); ++i)
    if (p.c[i] != 0.0) ++c_nnz;
  os << "objective-nnz " << c_nnz << "\n";
  for (Eigen::Index i = 0; i < p.c.size(); ++i)
    if (p.c[i] != 0.0) {
      std::snprintf(buf, sizeof(buf), "%ld %.17g", static_cast<long>(i), p.c[i]);
      os << buf << "\n";
    }
  detail::write_sparse(os, "A", p.A);
  detail::write_dense(os, "b", p.b);
  detail::write_sparse(os, "G", p.G);
  detail::write_dense(os, "h", p.h);
  os << "end\n";
}

namespace detail {

inline std::string next_data_line(std::istream& is, const std::string& origin) {
  std::string line;
  while (std::getline(is, line)) {
    size_t i = line.find_first_not_of(" \t\r");
    if (i == std::string::npos) continue;
    if (line[i] == '#') continue;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line.substr(i);
  }
  throw std::runtime_error(origin + ": unexpected end of conic file");
}

inline void expect_tag(std::istringstream& token_stream, const char* want,
                       const std::string& origin) {
  std::string tag;
  token_stream >> tag;
  if (tag != want)
    throw std::runtime_error(origin + ": expected '" + want + "', found '" + tag + "'");
}

inline Eigen::VectorXd read_dense(std::istream& is, const char* tag, const std::string& origin) {
  std::istringstream head(next_data_line(is, origin));
  expect_tag(head, tag, origin);
  long n = -1;
  head >> n;
  if (n < 0) throw std::runtime_error(origin + ": bad vector length for " + tag);
  Eigen::VectorXd v(n);
  for (long i = 0; i < n; ++i) {
    std::istringstream ls(next_data_line(is, origin));
    if (!(ls >> v[i])) throw std::runtime_error(origin + ": bad entry in " + tag);
  }
  return v;
}

}  // namespace detail

inline ConicProgram read_conic(std::istream& is, const std::string& origin = "<conic>") {
  using detail::expect_tag;
  using detail::next_data_line;
  ConicProgram p;

  std::istringstream fmt(next_data_line(is, origin));
  expect_tag(fmt, "format", origin);
  std::string kind;
  int version = -1;
  fmt >> kind >> version;
  if (kind != "conic" || version != kConicTextFormatVersion)
    throw std::runtime_error(origin + ": unsupported conic format header");

  std::istringstream vars(next_data_line(is, origin));
  expect_tag(vars, "variables", origin);
  vars >> p.num_vars;

  std::istringstream lp(next_data_line(is, origin));
  expect_tag(lp, "lp-rows", origin);
  lp >> p.num_lp;

  std::istringstream soc(next_data_line(is, origin));
  expect_tag(soc, "soc-blocks", origin);
  long nblk = -1;
  soc >> nblk;
  if (nblk < 0) throw std::runtime_error(origin + ": bad cone block count");
  Eigen::Index soc_total = 0;
  for (long i = 0; i < nblk; ++i) {
    long q;
    if (!(soc >> q) || q < 1) throw std::runtime_error(origin + ": bad cone dimension");
    p.soc_dims.push_back(q);
    soc_total += q;
  }

  std::istringstream oc(next_data_line(is, origin));
  expect_tag(oc, "objective-constant", origin);
  oc >> p.objective_constant;

  std::istringstream on(next_data_line(is, origin));
  expect_tag(on, "objective-nnz", origin);
  long cn = -1;
  on >> cn;
  if (cn < 0) throw std::runtime_error(origin + ": bad objective nonzero count");
  p.c = Eigen::VectorXd::Zero(p.num_vars);
  for (long k = 0; k < cn; ++k) {
    std::istringstream ls(next_data_line(is, origin));
    long i;
    double v;
    if (!(ls >> i >> v) || i < 0 || i >= p.num_vars)
      throw std::runtime_error(origin + ": bad objective entry");
    p.c[i] = v;
  }

  // Equality block: row count comes from the b vector, so parse A with a
  // deferred row bound by reading it into triplet storage first.
  std::istringstream ahead(next_data_line(is, origin));
  expect_tag(ahead, "A-nnz", origin);
  long annz = -1;
  ahead >> annz;
  if (annz < 0) throw std::runtime_error(origin + ": bad nonzero count for A");
  std::vector<Eigen::Triplet<double>> atrip;
  atrip.reserve(static_cast<size_t>(annz));
  long amax_row = -1;
  for (long k = 0; k < annz; ++k) {
    std::istringstream ls(next_data_line(is, origin));
    long r, c;
    double v;
    if (!(ls >> r >> c >> v) || r < 0 || c < 0 || c >= p.num_vars)
      throw std::runtime_error(origin + ": bad triplet in A");
    amax_row = std::max(amax_row, r);
    atrip.emplace_back(static_cast<int>(r), static_cast<int>(c), v);
  }
  p.b = detail::read_dense(is, "b", origin);
  if (amax_row >= p.b.size()) throw std::runtime_error(origin + ": A row exceeds b length");
  p.A.resize(p.b.size(), p.num_vars);
  p.A.setFromTriplets(atrip.begin(), atrip.end());

  std::istringstream ghead(next_data_line(is, origin));
  expect_tag(ghead, "G-nnz", origin);
  long gnnz = -1;
  ghead >> gnnz;
  if (gnnz < 0) throw std::runtime_error(origin + ": bad nonzero count for G");
  std::vector<Eigen::Triplet<double>> gtrip;
  gtrip.reserve(static_cast<size_t>(gnnz));
  long gmax_row = -1;
  for (long k = 0; k < gnnz; ++k) {
    std::istringstream ls(next_data_line(is, origin));
    long r, c;
    double v;
    if (!(ls >> r >> c >> v) || r < 0 || c < 0 || c >= p.num_vars)
      throw std::runtime_error(origin + ": bad triplet in G");
    gmax_row = std::max(gmax_row, r);
    gtrip.emplace_back(static_cast<int>(r), static_cast<int>(c), v);
  }
  p.h = detail::read_dense(is, "h", origin);
  if (gmax_row >= p.h.size()) throw std::runtime_error(origin + ": G row exceeds h length");
  if (p.num_lp + soc_total != p.h.size())
    throw std::runtime_error(origin + ": cone dimensions do not tile the inequality rows");
  p.G.resize(p.h.size(), p.num_vars);
  p.G.setFromTriplets(gtrip.begin(), gtrip.end());

  std::istringstream tail(next_data_line(is, origin));
  expect_tag(tail, "end", origin);
  p.validate();
  return p;
}

inline void write_conic_file(const std::string& path, const ConicProgram& p) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  write_conic(os, p);
}

inline ConicProgram read_conic_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open: " + path);
  return read_conic(is, path);
}

}  // namespace smpc
