#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "simsearch/error.hpp"
#include "simsearch/model.hpp"

namespace simsearch {

/// Labeled feature rows.
struct Dataset {
  Matrix features;
  std::vector<std::int32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }

  Dataset subset(const std::vector<std::size_t>& rows) const {
    Dataset out;
    out.features.resize(static_cast<Eigen::Index>(rows.size()), features.cols());
    out.labels.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      out.features.row(static_cast<Eigen::Index>(i)) = features.row(static_cast<Eigen::Index>(rows[i]));
      out.labels.push_back(labels[rows[i]]);
    }
    return out;
  }
};

/// Isotropic Gaussian clusters. Class centers sit on scaled coordinate axes
/// so every pair of centers is `separation` sigmas apart.
struct SyntheticSpec {
  std::size_t classes = 5;
  std::size_t n = 500;
  std::size_t dim = 32;
  double separation = 5.0;
  double sigma = 1.0;
  std::uint64_t seed = 1;
};

inline Dataset make_clusters(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.n == 0 || spec.dim == 0) {
    throw Error(ErrorCode::InvalidArgument, "synthetic spec needs positive classes, n and dim");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double axis = spec.separation * spec.sigma / std::sqrt(2.0);

  Matrix centers = Matrix::Zero(static_cast<Eigen::Index>(spec.classes), static_cast<Eigen::Index>(spec.dim));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    if (c < spec.dim) {
      centers(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(c)) = axis;
    } else {
      // More classes than axes: random directions at the same radius.
      Eigen::RowVectorXd dir(static_cast<Eigen::Index>(spec.dim));
      for (auto& x : dir) x = gauss(rng);
      centers.row(static_cast<Eigen::Index>(c)) = dir.normalized() * axis;
    }
  }

  Dataset ds;
  ds.features.resize(static_cast<Eigen::Index>(spec.n), static_cast<Eigen::Index>(spec.dim));
  ds.labels.resize(spec.n);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const auto c = static_cast<std::int32_t>(i % spec.classes);
    ds.labels[i] = c;
    for (std::size_t j = 0; j < spec.dim; ++j) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          centers(c, static_cast<Eigen::Index>(j)) + spec.sigma * gauss(rng);
    }
  }
  return ds;
}

/// Parses `synthetic:classes=5,n=500,dim=32,sep=5,seed=1[,sigma=1]`.
inline SyntheticSpec parse_synthetic_spec(const std::string& text) {
  const std::string prefix = "synthetic:";
  if (text.rfind(prefix, 0) != 0) throw Error(ErrorCode::InvalidArgument, "not a synthetic spec: " + text);
  SyntheticSpec spec;
  std::stringstream ss(text.substr(prefix.size()));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::InvalidArgument, "bad synthetic field '" + item + "'");
    const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
    try {
      if (key == "classes") {
        spec.classes = std::stoul(value);
      } else if (key == "n") {
        spec.n = std::stoul(value);
      } else if (key == "dim") {
        spec.dim = std::stoul(value);
      } else if (key == "sep") {
        spec.separation = std::stod(value);
      } else if (key == "sigma") {
        spec.sigma = std::stod(value);
      } else if (key == "seed") {
        spec.seed = std::stoull(value);
      } else {
        throw Error(ErrorCode::InvalidArgument, "unknown synthetic field '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::InvalidArgument, "bad value for synthetic field '" + key + "'");
    }
  }
  return spec;
}

/// CSV rows `label,f0,f1,...`. A first line that does not parse as numbers
/// is treated as a header.
inline Dataset load_csv_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path + "'");
  std::vector<std::vector<double>> rows;
  std::vector<std::int32_t> labels;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<double> values;
    bool ok = true;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t", used) != std::string::npos) ok = false;
      } catch (const std::logic_error&) {
        ok = false;
      }
    }
    if (!ok) {
      if (line_no == 1) continue;
      throw Error(ErrorCode::MalformedRecord, path + ":" + std::to_string(line_no) + ": not numeric");
    }
    if (values.size() < 2) throw Error(ErrorCode::MalformedRecord, path + ":" + std::to_string(line_no) + ": too few columns");
    if (!rows.empty() && values.size() - 1 != rows.front().size()) {
      throw Error(ErrorCode::DimMismatch, path + ":" + std::to_string(line_no) + ": inconsistent column count");
    }
    if (values[0] < 0 || values[0] != std::floor(values[0])) {
      throw Error(ErrorCode::MalformedRecord, path + ":" + std::to_string(line_no) + ": label must be a non-negative integer");
    }
    labels.push_back(static_cast<std::int32_t>(values[0]));
    rows.emplace_back(values.begin() + 1, values.end());
  }
  Dataset ds;
  ds.labels = std::move(labels);
  ds.features.resize(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[i].size(); ++j) {
      ds.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    }
  }
  return ds;
}

/// `synthetic:...` or a CSV path.
inline Dataset load_dataset(const std::string& source) {
  if (source.rfind("synthetic:", 0) == 0) return make_clusters(parse_synthetic_spec(source));
  return load_csv_dataset(source);
}

}  // namespace simsearch
