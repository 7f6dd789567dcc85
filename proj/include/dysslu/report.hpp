#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dysslu/error.hpp"
#include "dysslu/harness.hpp"

namespace dysslu {

// ---------------------------------------------------------------------------
// CSV (RFC 4180): comma separated, CRLF records, fields quoted when they
// contain a comma, quote, CR or LF; quotes doubled inside quoted fields.
// ---------------------------------------------------------------------------

inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  return out + "\"";
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_row(const std::vector<std::string>& fields) {
  std::string out;
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i) out.push_back(',');
    out += csv_field(fields[i]);
  }
  return out + "\r\n";
}

/// Parses RFC 4180 text into records of fields. Accepts LF or CRLF endings.
inline std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, field_started = false;
  std::size_t i = 0;
  auto end_field = [&] {
    row.push_back(field);
    field.clear();
    field_started = false;
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row.clear();
  };
  while (i < text.size()) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          i += 2;
          continue;
        }
        quoted = false;
        ++i;
        continue;
      }
      field.push_back(c);
      ++i;
      continue;
    }
    if (c == '"' && !field_started && field.empty()) {
      quoted = true;
      field_started = true;
      ++i;
    } else if (c == ',') {
      end_field();
      ++i;
    } else if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') {
      end_row();
      i += 2;
    } else if (c == '\n') {
      end_row();
      ++i;
    } else {
      field.push_back(c);
      field_started = true;
      ++i;
    }
  }
  if (quoted) throw FormatError("csv: unterminated quoted field");
  if (field_started || !field.empty() || !row.empty()) end_row();
  return rows;
}

inline double parse_csv_number(const std::string& s) {
  if (s == "nan") return std::nan("");
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw FormatError("csv: not a number: '" + s + "'");
  }
  if (used != s.size()) throw FormatError("csv: not a number: '" + s + "'");
  return v;
}

inline const std::vector<std::string>& curves_csv_header() {
  static const std::vector<std::string> h = {"variant", "k", "n_train", "mean_f1", "std_f1", "mean_accuracy"};
  return h;
}

inline const std::vector<std::string>& speakers_csv_header() {
  static const std::vector<std::string> h = {"speaker", "is", "variant", "f1", "fer", "rel_improvement"};
  return h;
}

inline std::string curves_csv(std::span<const VariantCurve> curves) {
  std::string out = csv_row(curves_csv_header());
  for (const auto& c : curves)
    for (const auto& p : c.points)
      out += csv_row({c.variant, std::to_string(p.k), csv_number(p.n_train), csv_number(p.mean_f1),
                      csv_number(p.std_f1), csv_number(p.mean_accuracy)});
  return out;
}

inline std::string speakers_csv(std::span<const SpeakerResult> rows) {
  std::string out = csv_row(speakers_csv_header());
  for (const auto& r : rows)
    out += csv_row({r.speaker_id, csv_number(r.is_score), r.variant, csv_number(r.f1), csv_number(r.frame_error_rate),
                    csv_number(r.rel_improvement)});
  return out;
}

inline void check_header(const std::vector<std::vector<std::string>>& rows, const std::vector<std::string>& header,
                         const std::string& what) {
  if (rows.empty() || rows.front() != header) throw FormatError(what + ": missing or unexpected header row");
  for (std::size_t i = 1; i < rows.size(); ++i)
    if (rows[i].size() != header.size())
      throw FormatError(what + ": record " + std::to_string(i) + " has " + std::to_string(rows[i].size()) +
                        " fields, expected " + std::to_string(header.size()));
}

inline std::vector<VariantCurve> parse_curves_csv(std::string_view text) {
  const auto rows = parse_csv(text);
  check_header(rows, curves_csv_header(), "curves.csv");
  std::vector<VariantCurve> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (out.empty() || out.back().variant != r[0]) out.push_back({r[0], {}});
    out.back().points.push_back({static_cast<std::size_t>(std::stoull(r[1])), parse_csv_number(r[2]),
                                 parse_csv_number(r[3]), parse_csv_number(r[4]), parse_csv_number(r[5])});
  }
  return out;
}

inline std::vector<SpeakerResult> parse_speakers_csv(std::string_view text) {
  const auto rows = parse_csv(text);
  check_header(rows, speakers_csv_header(), "speakers.csv");
  std::vector<SpeakerResult> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out.push_back({r[0], parse_csv_number(r[1]), r[2], parse_csv_number(r[3]), parse_csv_number(r[4]),
                   parse_csv_number(r[5])});
  }
  return out;
}

// ---------------------------------------------------------------------------
// SVG charts: self-contained, no scripts or external references.
// ---------------------------------------------------------------------------

inline std::string xml_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

/// Centered moving average; the ends use the available neighbours.
inline std::vector<double> moving_average(std::span<const double> v, std::size_t window = 3) {
  std::vector<double> out(v.size());
  const std::size_t half = window / 2;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t lo = i >= half ? i - half : 0;
    const std::size_t hi = std::min(v.size() - 1, i + half);
    double s = 0.0;
    for (std::size_t j = lo; j <= hi; ++j) s += v[j];
    out[i] = s / static_cast<double>(hi - lo + 1);
  }
  return out;
}

namespace detail {

struct Frame {
  double width = 640, height = 400, left = 60, right = 20, top = 40, bottom = 50;
  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

  double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
  double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline void axes(std::ostringstream& o, const Frame& f, const std::string& title, const std::string& xlabel,
                 const std::string& ylabel) {
  o << "<rect x=\"0\" y=\"0\" width=\"" << f.width << "\" height=\"" << f.height << "\" fill=\"white\"/>\n";
  o << "<text x=\"" << f.width / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
    << "</text>\n";
  o << "<line x1=\"" << f.left << "\" y1=\"" << f.py(f.y0) << "\" x2=\"" << f.width - f.right << "\" y2=\""
    << f.py(f.y0) << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << f.left << "\" y1=\"" << f.top << "\" x2=\"" << f.left << "\" y2=\"" << f.height - f.bottom
    << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
    o << "<text x=\"" << f.left - 6 << "\" y=\"" << num(f.py(y) + 4) << "\" text-anchor=\"end\" font-size=\"11\">"
      << num(y) << "</text>\n";
  }
  o << "<text x=\"" << f.width / 2 << "\" y=\"" << f.height - 10 << "\" text-anchor=\"middle\" font-size=\"12\">"
    << xml_escape(xlabel) << "</text>\n";
  o << "<text x=\"14\" y=\"" << f.height / 2 << "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 "
    << f.height / 2 << ")\">" << xml_escape(ylabel) << "</text>\n";
}

inline std::string open_svg(const Frame& f) {
  std::ostringstream o;
  o << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width
    << "\" height=\"" << f.height << "\" viewBox=\"0 0 " << f.width << " " << f.height << "\">\n";
  return o.str();
}

}  // namespace detail

/// Raw F1 points against training-set size with a 3-point moving average.
inline std::string curve_svg(const VariantCurve& c) {
  detail::Frame f;
  f.y0 = 0.0;
  f.y1 = 1.0;
  if (!c.points.empty()) {
    f.x0 = c.points.front().n_train;
    f.x1 = c.points.back().n_train;
    if (f.x1 <= f.x0) f.x1 = f.x0 + 1.0;
  }
  std::ostringstream o;
  o << detail::open_svg(f);
  detail::axes(o, f, "Slot F1 vs training size: " + c.variant, "mean training utterances per speaker", "micro F1");
  std::vector<double> f1;
  for (const auto& p : c.points) f1.push_back(p.mean_f1);
  const auto smooth = moving_average(f1);
  o << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" stroke-dasharray=\"6 3\" points=\"";
  for (std::size_t i = 0; i < c.points.size(); ++i)
    o << (i ? " " : "") << detail::num(f.px(c.points[i].n_train)) << "," << detail::num(f.py(smooth[i]));
  o << "\"/>\n";
  for (const auto& p : c.points)
    o << "<circle cx=\"" << detail::num(f.px(p.n_train)) << "\" cy=\"" << detail::num(f.py(p.mean_f1))
      << "\" r=\"3\" fill=\"#d62728\"/>\n";
  o << "<text x=\"" << f.width - f.right << "\" y=\"" << f.top + 12
    << "\" text-anchor=\"end\" font-size=\"11\">dots: raw mean F1; dashed: 3-point moving average</text>\n";
  o << "</svg>\n";
  return o.str();
}

/// Improvement over normal_only per speaker, speakers ordered by IS.
inline std::string transfer_svg(const std::string& variant, std::span<const SpeakerResult> rows) {
  std::vector<const SpeakerResult*> mine;
  for (const auto& r : rows)
    if (r.variant == variant) mine.push_back(&r);
  double lo = -0.05, hi = 0.05;
  for (const auto* r : mine) lo = std::min(lo, r->rel_improvement), hi = std::max(hi, r->rel_improvement);
  detail::Frame f;
  f.x0 = 0.0;
  f.x1 = static_cast<double>(std::max<std::size_t>(mine.size(), 1));
  f.y0 = lo;
  f.y1 = hi;
  std::ostringstream o;
  o << detail::open_svg(f);
  detail::axes(o, f, "F1 change vs normal_only: " + variant, "speakers sorted by intelligibility score",
               "F1 difference");
  o << "<line x1=\"" << f.left << "\" y1=\"" << detail::num(f.py(0.0)) << "\" x2=\"" << f.width - f.right
    << "\" y2=\"" << detail::num(f.py(0.0)) << "\" stroke=\"gray\" stroke-dasharray=\"2 2\"/>\n";
  const double slot = (f.px(f.x1) - f.px(0.0)) / f.x1;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    const double v = mine[i]->rel_improvement;
    const double y_top = f.py(std::max(v, 0.0));
    const double h = std::abs(f.py(v) - f.py(0.0));
    const double x = f.px(static_cast<double>(i)) + 0.15 * slot;
    o << "<rect x=\"" << detail::num(x) << "\" y=\"" << detail::num(y_top) << "\" width=\"" << detail::num(0.7 * slot)
      << "\" height=\"" << detail::num(h) << "\" fill=\"" << (v >= 0 ? "#2ca02c" : "#d62728") << "\"><title>"
      << xml_escape(mine[i]->speaker_id) << " IS " << detail::num(mine[i]->is_score) << ": " << detail::num(v)
      << "</title></rect>\n";
    o << "<text x=\"" << detail::num(x + 0.35 * slot) << "\" y=\"" << f.height - f.bottom + 14
      << "\" text-anchor=\"middle\" font-size=\"10\">" << detail::num(mine[i]->is_score) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

/// Writes curves.csv and speakers.csv, plus a {variant}_{curve,transfer}.csv/.svg
/// pair for every variant and experiment that has data. Returns the paths written, in order.
inline std::vector<std::filesystem::path> emit_report(const ExperimentReport& report,
                                                      const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw Error("emit_report: cannot create output directory " + dir.string());
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& text) {
    write_text_file(dir / name, text);
    written.push_back(dir / name);
  };
  put("curves.csv", curves_csv(report.curves));
  put("speakers.csv", speakers_csv(report.speakers));
  for (const auto& c : report.curves) {
    if (c.points.empty()) continue;
    put(c.variant + "_curve.csv", curves_csv(std::span(&c, 1)));
    put(c.variant + "_curve.svg", curve_svg(c));
  }
  std::vector<std::string> variants;
  for (const auto& r : report.speakers)
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
  for (const auto& v : variants) {
    std::vector<SpeakerResult> mine;
    for (const auto& r : report.speakers)
      if (r.variant == v) mine.push_back(r);
    put(v + "_transfer.csv", speakers_csv(mine));
    put(v + "_transfer.svg", transfer_svg(v, report.speakers));
  }
  return written;
}

}  // namespace dysslu
