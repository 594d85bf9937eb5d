#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"

namespace gpfusion {

// Rows are patients, columns named features. Never contains NaN once built.
struct FeatureTable {
  Eigen::MatrixXd matrix;
  std::vector<std::string> column_names;
  std::vector<std::string> row_ids;

  [[nodiscard]] Eigen::Index rows() const { return matrix.rows(); }
  [[nodiscard]] Eigen::Index cols() const { return matrix.cols(); }

  void check() const {
    if (static_cast<std::size_t>(matrix.cols()) != column_names.size() ||
        static_cast<std::size_t>(matrix.rows()) != row_ids.size())
      throw SchemaError("FeatureTable: shape does not match names");
    if (std::set<std::string>(column_names.begin(), column_names.end()).size() !=
        column_names.size())
      throw SchemaError("FeatureTable: duplicate column names");
    if (!matrix.allFinite()) throw SchemaError("FeatureTable: non-finite entry");
  }

  [[nodiscard]] FeatureTable select_columns(const std::vector<std::size_t>& idx) const {
    FeatureTable out;
    out.row_ids = row_ids;
    out.matrix.resize(matrix.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      out.matrix.col(static_cast<Eigen::Index>(j)) = matrix.col(static_cast<Eigen::Index>(idx[j]));
      out.column_names.push_back(column_names[idx[j]]);
    }
    return out;
  }

  [[nodiscard]] FeatureTable select_columns(const std::vector<std::string>& names) const {
    std::vector<std::size_t> idx;
    for (const auto& n : names) {
      auto it = std::find(column_names.begin(), column_names.end(), n);
      if (it == column_names.end()) throw SchemaError("FeatureTable: no column '" + n + "'");
      idx.push_back(static_cast<std::size_t>(it - column_names.begin()));
    }
    return select_columns(idx);
  }

  [[nodiscard]] FeatureTable select_rows(const std::vector<std::size_t>& idx) const {
    FeatureTable out;
    out.column_names = column_names;
    out.matrix.resize(static_cast<Eigen::Index>(idx.size()), matrix.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.matrix.row(static_cast<Eigen::Index>(i)) = matrix.row(static_cast<Eigen::Index>(idx[i]));
      out.row_ids.push_back(row_ids[idx[i]]);
    }
    return out;
  }
};

// Column-wise concatenation; row ids must agree.
inline FeatureTable hconcat(const FeatureTable& a, const FeatureTable& b) {
  if (a.row_ids != b.row_ids) throw SchemaError("hconcat: row ids differ");
  FeatureTable out;
  out.row_ids = a.row_ids;
  out.matrix.resize(a.rows(), a.cols() + b.cols());
  out.matrix << a.matrix, b.matrix;
  out.column_names = a.column_names;
  out.column_names.insert(out.column_names.end(), b.column_names.begin(), b.column_names.end());
  return out;
}

inline void save_feature_table_csv(const FeatureTable& t, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "patient_id";
  for (const auto& n : t.column_names) out << ',' << csv_escape(n);
  out << '\n';
  for (Eigen::Index i = 0; i < t.rows(); ++i) {
    out << csv_escape(t.row_ids[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < t.cols(); ++j) out << ',' << format_double(t.matrix(i, j));
    out << '\n';
  }
}

inline FeatureTable load_feature_table_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ": empty file");
  auto header = split_csv_line(line);
  if (header.empty() || header[0] != "patient_id")
    throw ParseError(path.string() + ": first column must be patient_id");
  FeatureTable t;
  t.column_names.assign(header.begin() + 1, header.end());
  std::vector<std::vector<double>> rows;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError(path.string() + " row " + std::to_string(row) + ": wrong cell count");
    t.row_ids.push_back(cells[0]);
    std::vector<double> r;
    for (std::size_t j = 1; j < cells.size(); ++j) {
      auto v = parse_double(cells[j]);
      if (!v)
        throw ParseError(path.string() + " row " + std::to_string(row) + ", column " +
                         header[j] + ": not a number");
      r.push_back(*v);
    }
    rows.push_back(std::move(r));
  }
  t.matrix.resize(static_cast<Eigen::Index>(rows.size()),
                  static_cast<Eigen::Index>(t.column_names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.matrix(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  t.check();
  return t;
}

}  // namespace gpfusion
