// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0

#include "mstar/report.hpp"

#include "mstar/errors.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

namespace mstar::report {

std::optional<std::size_t> Table::find(const std::string& column) const {
  const auto it = std::find(header.begin(), header.end(), column);
  if (it == header.end()) return std::nullopt;
  return static_cast<std::size_t>(it - header.begin());
}

std::size_t Table::col(const std::string& column) const {
  const auto c = find(column);
  if (!c) throw DataError("CSV is missing column '" + column + "'");
  return *c;
}

double Table::number(std::size_t row, const std::string& column) const {
  const std::string& s = rows.at(row).at(col(column));
  double v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    if (s == "nan") return std::nan("");
    if (s == "inf") return HUGE_VAL;
    if (s == "-inf") return -HUGE_VAL;
    throw DataError("CSV field '" + s + "' in column '" + column + "' is not a number");
  }
  return v;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out << text;
  if (!out) throw DataError("write failed: " + path.string());
}

void write_csv(const std::filesystem::path& path, const Table& t) {
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (fields[i].find_first_of(",\n") != std::string::npos) throw DataError("CSV field contains a separator");
      os << (i ? "," : "") << fields[i];
    }
    os << '\n';
  };
  line(t.header);
  for (const auto& r : t.rows) {
    if (r.size() != t.header.size()) throw DataError("CSV row width does not match the header");
    line(r);
  }
  write_text(path, os.str());
}

Table parse_csv(const std::string& text, const std::string& origin) {
  Table t;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      fields.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (first) {
      t.header = std::move(fields);
      first = false;
    } else {
      if (fields.size() != t.header.size()) throw DataError(origin + ": row width does not match the header");
      t.rows.push_back(std::move(fields));
    }
  }
  if (t.header.empty()) throw DataError(origin + ": empty CSV");
  return t;
}

Table read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), path.string());
}

// ---- SVG ----------------------------------------------------------------------

namespace {

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(2);
  os << v;
  return os.str();
}

std::string header(int w, int h) {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
         std::to_string(h) + "\" viewBox=\"0 0 " + std::to_string(w) + " " + std::to_string(h) +
         "\" font-family=\"sans-serif\" font-size=\"12\">\n";
}

const char* kPalette[] = {"#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7"};

}  // namespace

std::string svg_bars(const std::vector<Bar>& bars, const std::string& title, const std::string& y_label) {
  if (bars.empty()) throw DataError("bar chart needs at least one bar");
  const int w = 80 + 70 * static_cast<int>(bars.size()), h = 320;
  const double top = 40, bottom = 260, left = 60;
  double ymax = 0;
  for (const auto& b : bars) ymax = std::max({ymax, b.point, b.hi});
  ymax = ymax > 0 ? ymax * 1.1 : 1.0;
  auto y = [&](double v) { return bottom - (bottom - top) * std::clamp(v, 0.0, ymax) / ymax; };
  std::string s = header(w, h);
  s += "<text x=\"" + num(w / 2.0) + "\" y=\"20\" text-anchor=\"middle\">" + esc(title) + "</text>\n";
  s += "<text x=\"14\" y=\"" + num((top + bottom) / 2) + "\" transform=\"rotate(-90 14 " + num((top + bottom) / 2) +
       ")\" text-anchor=\"middle\">" + esc(y_label) + "</text>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(bottom) + "\" x2=\"" + num(w - 10.0) + "\" y2=\"" + num(bottom) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" + num(bottom) +
       "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = ymax * t / 4.0;
    s += "<text x=\"" + num(left - 4) + "\" y=\"" + num(y(v) + 4) + "\" text-anchor=\"end\">" + num(v) + "</text>\n";
  }
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const double x = left + 20 + 70.0 * static_cast<double>(i);
    s += "<rect class=\"bar\" x=\"" + num(x) + "\" y=\"" + num(y(b.point)) + "\" width=\"40\" height=\"" +
         num(bottom - y(b.point)) + "\" fill=\"" + kPalette[i % 8] + "\"/>\n";
    const double cx = x + 20;
    s += "<path class=\"whisker\" d=\"M" + num(cx) + " " + num(y(b.lo)) + " V" + num(y(b.hi)) + " M" + num(cx - 6) +
         " " + num(y(b.lo)) + " H" + num(cx + 6) + " M" + num(cx - 6) + " " + num(y(b.hi)) + " H" + num(cx + 6) +
         "\" stroke=\"black\" fill=\"none\"/>\n";
    s += "<text x=\"" + num(cx) + "\" y=\"" + num(bottom + 16) + "\" text-anchor=\"middle\">" + esc(b.label) +
         "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::string svg_shots(const std::vector<Series>& series, const std::string& title) {
  if (series.empty()) throw DataError("shots chart needs at least one series");
  const int w = 520, h = 340;
  const double top = 40, bottom = 280, left = 60, right = 380;
  double xmax = 1, ymin = 1, ymax = 0;
  for (const auto& s : series) {
    if (s.x.size() != s.mean.size() || s.x.size() != s.sd.size() || s.x.empty()) {
      throw DataError("shots series '" + s.name + "' is malformed");
    }
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.mean[i] - s.sd[i]);
      ymax = std::max(ymax, s.mean[i] + s.sd[i]);
    }
  }
  if (!(ymax > ymin)) ymax = ymin + 1;
  const double lx = std::log2(xmax) > 0 ? std::log2(xmax) : 1.0;
  auto X = [&](double x) { return left + (right - left) * std::log2(std::max(x, 1.0)) / lx; };
  auto Y = [&](double v) { return bottom - (bottom - top) * (v - ymin) / (ymax - ymin); };
  std::string s = header(w, h);
  s += "<text x=\"" + num(w / 2.0) + "\" y=\"20\" text-anchor=\"middle\">" + esc(title) + "</text>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(bottom) + "\" x2=\"" + num(right) + "\" y2=\"" + num(bottom) +
       "\" stroke=\"black\"/>\n";
  s += "<line x1=\"" + num(left) + "\" y1=\"" + num(top) + "\" x2=\"" + num(left) + "\" y2=\"" + num(bottom) +
       "\" stroke=\"black\"/>\n";
  for (double k = 1; k <= xmax; k *= 2) {
    s += "<text x=\"" + num(X(k)) + "\" y=\"" + num(bottom + 16) + "\" text-anchor=\"middle\">" + num(k) + "</text>\n";
  }
  for (int t = 0; t <= 4; ++t) {
    const double v = ymin + (ymax - ymin) * t / 4.0;
    s += "<text x=\"" + num(left - 4) + "\" y=\"" + num(Y(v) + 4) + "\" text-anchor=\"end\">" + num(v) + "</text>\n";
  }
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& sr = series[k];
    const char* colour = kPalette[k % 8];
    std::string band = "M";
    for (std::size_t i = 0; i < sr.x.size(); ++i) band += num(X(sr.x[i])) + " " + num(Y(sr.mean[i] + sr.sd[i])) + " L";
    for (std::size_t i = sr.x.size(); i-- > 0;) band += num(X(sr.x[i])) + " " + num(Y(sr.mean[i] - sr.sd[i])) + " L";
    band.resize(band.size() - 2);
    s += "<path class=\"band\" d=\"" + band + " Z\" fill=\"" + colour + "\" fill-opacity=\"0.2\" stroke=\"none\"/>\n";
    std::string pts;
    for (std::size_t i = 0; i < sr.x.size(); ++i) pts += (i ? " " : "") + num(X(sr.x[i])) + "," + num(Y(sr.mean[i]));
    s += "<polyline class=\"line\" points=\"" + pts + "\" fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"2\"/>\n";
    s += "<text x=\"" + num(right + 12) + "\" y=\"" + num(top + 16.0 * static_cast<double>(k)) + "\" fill=\"" + colour +
         "\">" + esc(sr.name) + "</text>\n";
  }
  s += "</svg>\n";
  return s;
}

std::string svg_cd(const std::vector<std::string>& models, const std::vector<double>& avg_ranks, double cd) {
  if (models.empty() || models.size() != avg_ranks.size()) throw DataError("CD diagram needs one rank per model");
  const auto k = static_cast<double>(models.size());
  const int w = 560;
  const int h = 120 + 18 * static_cast<int>(models.size());
  const double left = 60, right = 500, axis = 60;
  auto X = [&](double r) { return k > 1 ? left + (right - left) * (r - 1.0) / (k - 1.0) : (left + right) / 2; };
  std::string s = header(w, h);
  s += "<line class=\"axis\" x1=\"" + num(left) + "\" y1=\"" + num(axis) + "\" x2=\"" + num(right) + "\" y2=\"" +
       num(axis) + "\" stroke=\"black\"/>\n";
  for (int r = 1; r <= static_cast<int>(k); ++r) {
    s += "<line x1=\"" + num(X(r)) + "\" y1=\"" + num(axis - 5) + "\" x2=\"" + num(X(r)) + "\" y2=\"" + num(axis + 5) +
         "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + num(X(r)) + "\" y=\"" + num(axis - 9) + "\" text-anchor=\"middle\">" + std::to_string(r) +
         "</text>\n";
  }
  double best = avg_ranks.front();
  for (double r : avg_ranks) best = std::min(best, r);
  s += "<line class=\"cd\" x1=\"" + num(X(best)) + "\" y1=\"25\" x2=\"" + num(X(best + cd)) +
       "\" y2=\"25\" stroke=\"#e15759\" stroke-width=\"3\"/>\n";
  s += "<text x=\"" + num(X(best)) + "\" y=\"18\">CD = " + num(cd) + "</text>\n";
  for (std::size_t i = 0; i < models.size(); ++i) {
    const double x = X(avg_ranks[i]);
    const double ty = axis + 24 + 18.0 * static_cast<double>(i);
    s += "<line class=\"tick\" x1=\"" + num(x) + "\" y1=\"" + num(axis) + "\" x2=\"" + num(x) + "\" y2=\"" + num(ty - 4) +
         "\" stroke=\"" + kPalette[i % 8] + "\"/>\n";
    s += "<text x=\"" + num(x + 4) + "\" y=\"" + num(ty) + "\">" + esc(models[i]) + " (" + num(avg_ranks[i]) +
         ")</text>\n";
  }
  s += "</svg>\n";
  return s;
}

}  // namespace mstar::report
