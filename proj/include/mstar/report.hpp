// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Tabular and vector-graphics outputs: a small CSV reader/writer (no quoting;
// fields never contain commas or newlines) and hand-emitted SVG charts.

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mstar::report {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  /// Index of a column, or nullopt.
  std::optional<std::size_t> find(const std::string& column) const;
  std::size_t col(const std::string& column) const;  // throws DataError when absent
  double number(std::size_t row, const std::string& column) const;
};

std::string format_double(double v);

void write_csv(const std::filesystem::path& path, const Table& t);
Table read_csv(const std::filesystem::path& path);
Table parse_csv(const std::string& text, const std::string& origin = "<csv>");

struct Bar {
  std::string label;
  double point = 0;
  double lo = 0;
  double hi = 0;
};

/// One <rect class="bar"> and one <path class="whisker"> per entry.
std::string svg_bars(const std::vector<Bar>& bars, const std::string& title, const std::string& y_label);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> mean;
  std::vector<double> sd;
};

/// Lines over log2-spaced x with +-sd bands.
std::string svg_shots(const std::vector<Series>& series, const std::string& title);

/// Number line from 1 to k with model ticks at their average ranks and a bar
/// of length CD anchored at the best rank.
std::string svg_cd(const std::vector<std::string>& models, const std::vector<double>& avg_ranks, double cd);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace mstar::report
