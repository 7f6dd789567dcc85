#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "dysslu/report.hpp"

using namespace dysslu;
namespace fs = std::filesystem;

namespace {

// Minimal XML well-formedness check: balanced, properly nested elements,
// quoted attributes, known entities, a single root.
bool well_formed_xml(const std::string& s, std::string* why) {
  std::vector<std::string> stack;
  std::size_t i = 0, roots = 0;
  auto fail = [&](const std::string& m) {
    *why = m + " at offset " + std::to_string(i);
    return false;
  };
  auto name_at = [&](std::size_t& p) {
    const std::size_t a = p;
    while (p < s.size() && (std::isalnum(static_cast<unsigned char>(s[p])) || s[p] == '-' || s[p] == ':' || s[p] == '_'))
      ++p;
    return s.substr(a, p - a);
  };
  auto check_entities = [&](std::size_t a, std::size_t b) {
    for (std::size_t p = a; p < b; ++p) {
      if (s[p] == '<') return false;
      if (s[p] != '&') continue;
      const auto semi = s.find(';', p);
      if (semi == std::string::npos || semi > b) return false;
      const std::string ent = s.substr(p + 1, semi - p - 1);
      if (ent != "amp" && ent != "lt" && ent != "gt" && ent != "quot" && ent != "apos") return false;
    }
    return true;
  };
  while (i < s.size()) {
    if (s[i] != '<') {
      const auto next = s.find('<', i);
      const std::size_t end = next == std::string::npos ? s.size() : next;
      if (!check_entities(i, end)) return fail("bad text content");
      if (stack.empty())
        for (std::size_t p = i; p < end; ++p)
          if (!std::isspace(static_cast<unsigned char>(s[p]))) return fail("text outside root");
      i = end;
      continue;
    }
    if (s.compare(i, 5, "<?xml") == 0) {
      const auto e = s.find("?>", i);
      if (e == std::string::npos) return fail("unterminated declaration");
      i = e + 2;
      continue;
    }
    if (s.compare(i, 2, "</") == 0) {
      std::size_t p = i + 2;
      const std::string n = name_at(p);
      if (p >= s.size() || s[p] != '>') return fail("bad end tag");
      if (stack.empty() || stack.back() != n) return fail("mismatched end tag " + n);
      stack.pop_back();
      i = p + 1;
      continue;
    }
    std::size_t p = i + 1;
    const std::string n = name_at(p);
    if (n.empty()) return fail("bad start tag");
    while (true) {
      while (p < s.size() && std::isspace(static_cast<unsigned char>(s[p]))) ++p;
      if (p >= s.size()) return fail("unterminated tag");
      if (s[p] == '>' || s.compare(p, 2, "/>") == 0) break;
      const std::string attr = name_at(p);
      if (attr.empty() || p + 1 >= s.size() || s[p] != '=' || s[p + 1] != '"') return fail("bad attribute");
      const auto close = s.find('"', p + 2);
      if (close == std::string::npos || !check_entities(p + 2, close)) return fail("bad attribute value");
      p = close + 1;
    }
    if (stack.empty()) ++roots;
    if (s[p] == '/') {
      i = p + 2;
    } else {
      stack.push_back(n);
      i = p + 1;
    }
  }
  if (!stack.empty()) return fail("unclosed element " + stack.back());
  if (roots != 1) return fail("expected exactly one root element");
  return true;
}

ExperimentReport sample_report() {
  ExperimentReport r;
  std::vector<CurvePoint> pts;
  for (std::size_t k = 1; k <= 14; ++k)
    pts.push_back({k, 2.0 * static_cast<double>(k) + 0.1, 1.0 / 3.0 + 0.01 * static_cast<double>(k), 0.1 / 7.0,
                   0.5 + 1e-17 * static_cast<double>(k)});
  r.curves.push_back({"normal_only", pts});
  r.curves.push_back({"finetune_full", pts});
  r.speakers = {{"spk<1>", 61.5, "finetune_full", 0.7123456789012345, 0.25, 0.1 / 3.0},
                {"spk,2", 90, "finetune_full", 0.8, std::nan(""), -2.0 / 3.0},
                {"spk\"3", 95, "normal_only", 0.9, 1e-300, 0.0}};
  return r;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / "dysslu_test_report" / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Csv, QuotesAndParsesBack) {
  const std::string row = csv_row({"plain", "a,b", "say \"hi\"", "two\nlines", ""});
  const auto rows = parse_csv(row + csv_row({"x"}));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"plain", "a,b", "say \"hi\"", "two\nlines", ""}));
  EXPECT_EQ(rows[1], (std::vector<std::string>{"x"}));
  EXPECT_THROW(parse_csv("\"open"), FormatError);
}

TEST(Csv, NumbersRoundTripAtFullPrecision) {
  Rng rng(1);
  for (int n = 0; n < 1000; ++n) {
    const double v = rng.normal() * std::pow(10.0, rng.uniform(-300, 300));
    EXPECT_EQ(parse_csv_number(csv_number(v)), v);
  }
  EXPECT_TRUE(std::isnan(parse_csv_number(csv_number(std::nan("")))));
  EXPECT_THROW(parse_csv_number("1.5x"), FormatError);
}

TEST(EmitReport, EmptyReportWritesHeadersOnly) {
  const fs::path dir = fresh_dir("empty");
  const auto files = emit_report(ExperimentReport{}, dir);
  ASSERT_EQ(files.size(), 2u);
  EXPECT_EQ(read_text_file(dir / "curves.csv"), "variant,k,n_train,mean_f1,std_f1,mean_accuracy\r\n");
  EXPECT_EQ(read_text_file(dir / "speakers.csv"), "speaker,is,variant,f1,fer,rel_improvement\r\n");
  for (const auto& e : fs::directory_iterator(dir)) EXPECT_NE(e.path().extension(), ".svg");
}

TEST(EmitReport, CsvRoundTripIsExact) {
  const ExperimentReport r = sample_report();
  const fs::path dir = fresh_dir("full");
  emit_report(r, dir);
  EXPECT_EQ(parse_curves_csv(read_text_file(dir / "curves.csv")), r.curves);
  const auto back = parse_speakers_csv(read_text_file(dir / "speakers.csv"));
  ASSERT_EQ(back.size(), r.speakers.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    EXPECT_EQ(back[i].speaker_id, r.speakers[i].speaker_id);
    EXPECT_EQ(back[i].f1, r.speakers[i].f1);
    EXPECT_EQ(back[i].rel_improvement, r.speakers[i].rel_improvement);
    if (std::isnan(r.speakers[i].frame_error_rate))
      EXPECT_TRUE(std::isnan(back[i].frame_error_rate));
    else
      EXPECT_EQ(back[i].frame_error_rate, r.speakers[i].frame_error_rate);
  }
  const auto mine = parse_speakers_csv(read_text_file(dir / "finetune_full_transfer.csv"));
  EXPECT_EQ(mine.size(), 2u);
  EXPECT_EQ(parse_curves_csv(read_text_file(dir / "normal_only_curve.csv")).at(0), r.curves[0]);
}

TEST(EmitReport, SvgsAreWellFormed) {
  const fs::path dir = fresh_dir("svg");
  const auto files = emit_report(sample_report(), dir);
  std::size_t svgs = 0;
  for (const auto& f : files) {
    if (f.extension() != ".svg") continue;
    ++svgs;
    std::string why;
    EXPECT_TRUE(well_formed_xml(read_text_file(f), &why)) << f << ": " << why;
  }
  EXPECT_EQ(svgs, 4u);
  EXPECT_TRUE(fs::exists(dir / "normal_only_curve.svg"));
  EXPECT_TRUE(fs::exists(dir / "finetune_full_transfer.svg"));
}

TEST(EmitReport, CurveSvgLabelsSmoothing) {
  const std::string svg = curve_svg(sample_report().curves[0]);
  EXPECT_NE(svg.find("moving average"), std::string::npos);
  EXPECT_EQ(std::count(svg.begin(), svg.end(), '\n') > 14, true);
}

TEST(WellFormedChecker, RejectsBrokenMarkup) {
  std::string why;
  EXPECT_FALSE(well_formed_xml("<svg><g></svg>", &why));
  EXPECT_FALSE(well_formed_xml("<svg a=1/>", &why));
  EXPECT_FALSE(well_formed_xml("<svg>a & b</svg>", &why));
  EXPECT_TRUE(well_formed_xml("<svg a=\"1\"><g/>x &amp; y</svg>\n", &why));
}

TEST(MovingAverage, ThreePointWindowKeepsEnds) {
  const std::vector<double> v = {1, 2, 6, 4};
  const auto m = moving_average(v);
  ASSERT_EQ(m.size(), 4u);
  EXPECT_DOUBLE_EQ(m[1], 3.0);
  EXPECT_DOUBLE_EQ(m[2], 4.0);
  EXPECT_DOUBLE_EQ(m[0], 1.5);
  EXPECT_DOUBLE_EQ(m[3], 5.0);
}
