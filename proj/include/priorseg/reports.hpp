#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "priorseg/core.hpp"
#include "priorseg/evaluation.hpp"

namespace priorseg {

// ---------------------------------------------------------------------------
// Grayscale raster I/O (binary PGM).

struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
  std::vector<std::string> comments;

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h, fill) {}
  std::uint8_t& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  std::uint8_t at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
};

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << "P5\n";
  for (const auto& c : img.comments) out << "# " << c << "\n";
  out << img.width << " " << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  GrayImage img;
  const auto next_token = [&]() {
    std::string tok;
    while (in) {
      int ch = in.peek();
      if (ch == '#') {
        std::string line;
        std::getline(in, line);
        img.comments.push_back(line.size() > 2 ? line.substr(2) : "");
      } else if (std::isspace(ch)) {
        in.get();
      } else {
        break;
      }
    }
    in >> tok;
    return tok;
  };
  if (next_token() != "P5") throw Error("'" + path.string() + "' is not a binary PGM");
  img.width = std::stoul(next_token());
  img.height = std::stoul(next_token());
  if (std::stoul(next_token()) != 255) throw Error("'" + path.string() + "' must be 8-bit");
  in.get();
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!in) throw Error("'" + path.string() + "' is truncated");
  return img;
}

namespace detail {

// 5x7 glyphs for captions; unknown characters render blank.
struct Glyph {
  char ch;
  std::array<const char*, 7> rows;
};

inline constexpr std::array<Glyph, 26> kGlyphs = {{
    {'(', {"...#.", "..#..", ".#...", ".#...", ".#...", "..#..", "...#."}},
    {')', {".#...", "..#..", "...#.", "...#.", "...#.", "..#..", ".#..."}},
    {'a', {".....", ".....", ".###.", "....#", ".####", "#...#", ".####"}},
    {'b', {"#....", "#....", "#.##.", "##..#", "#...#", "#...#", "####."}},
    {'c', {".....", ".....", ".###.", "#....", "#....", "#...#", ".###."}},
    {'d', {"....#", "....#", ".##.#", "#..##", "#...#", "#...#", ".####"}},
    {'e', {".....", ".....", ".###.", "#...#", "#####", "#....", ".###."}},
    {'f', {"..##.", ".#..#", ".#...", "###..", ".#...", ".#...", ".#..."}},
    {'g', {".....", ".####", "#...#", "#...#", ".####", "....#", ".###."}},
    {'h', {"#....", "#....", "#.##.", "##..#", "#...#", "#...#", "#...#"}},
    {'i', {"..#..", ".....", ".##..", "..#..", "..#..", "..#..", ".###."}},
    {'l', {".##..", "..#..", "..#..", "..#..", "..#..", "..#..", ".###."}},
    {'m', {".....", ".....", "##.#.", "#.#.#", "#.#.#", "#...#", "#...#"}},
    {'n', {".....", ".....", "#.##.", "##..#", "#...#", "#...#", "#...#"}},
    {'o', {".....", ".....", ".###.", "#...#", "#...#", "#...#", ".###."}},
    {'p', {".....", "####.", "#...#", "#...#", "####.", "#....", "#...."}},
    {'r', {".....", ".....", "#.##.", "##..#", "#....", "#....", "#...."}},
    {'s', {".....", ".....", ".####", "#....", ".###.", "....#", "####."}},
    {'t', {".#...", ".#...", "###..", ".#...", ".#...", ".#..#", "..##."}},
    {'u', {".....", ".....", "#...#", "#...#", "#...#", "#..##", ".##.#"}},
    {'w', {".....", ".....", "#...#", "#...#", "#.#.#", "#.#.#", ".#.#."}},
    {'3', {"####.", "....#", "....#", ".###.", "....#", "....#", "####."}},
    {'4', {"...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."}},
    {'-', {".....", ".....", ".....", "#####", ".....", ".....", "....."}},
    {'.', {".....", ".....", ".....", ".....", ".....", ".##..", ".##.."}},
    {' ', {".....", ".....", ".....", ".....", ".....", ".....", "....."}},
}};

inline constexpr std::size_t kGlyphWidth = 6;  // 5 px plus spacing
inline constexpr std::size_t kGlyphHeight = 7;

inline void draw_text(GrayImage& img, std::size_t x, std::size_t y, std::string_view text,
                      std::uint8_t ink) {
  for (char ch : text) {
    const char lower = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    for (const auto& g : kGlyphs) {
      if (g.ch != lower) continue;
      for (std::size_t r = 0; r < kGlyphHeight; ++r)
        for (std::size_t c = 0; c < 5; ++c)
          if (g.rows[r][c] == '#' && x + c < img.width && y + r < img.height) img.at(x + c, y + r) = ink;
    }
    x += kGlyphWidth;
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Box-plot data.

struct FiveNumber {
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
};

/// Quantile with linear interpolation between order statistics at q*(n-1).
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw Error("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline FiveNumber five_number_summary(const std::vector<double>& values) {
  return {quantile(values, 0.0), quantile(values, 0.25), quantile(values, 0.5), quantile(values, 0.75),
          quantile(values, 1.0)};
}

struct BoxplotSeries {
  Tissue tissue;
  FiveNumber summary;
  std::vector<double> values;
};

inline std::vector<BoxplotSeries> boxplot_series(const std::vector<RunRecord>& records) {
  if (records.empty()) throw Error("boxplot needs at least one run record");
  std::vector<BoxplotSeries> out;
  for (auto t : kEvaluatedTissues) {
    BoxplotSeries s{t, {}, {}};
    for (const auto& r : records) s.values.push_back(r.test_dice[t]);
    s.summary = five_number_summary(s.values);
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}
}  // namespace detail

/// One CSV row per class: five-number summary, run count and the raw values
/// (space separated).
inline std::string boxplot_csv(const std::vector<BoxplotSeries>& series) {
  std::ostringstream os;
  os << "class,min,q1,median,q3,max,n,values\n";
  for (const auto& s : series) {
    os << tissue_name(s.tissue) << ',' << detail::fmt_double(s.summary.min) << ','
       << detail::fmt_double(s.summary.q1) << ',' << detail::fmt_double(s.summary.median) << ','
       << detail::fmt_double(s.summary.q3) << ',' << detail::fmt_double(s.summary.max) << ','
       << s.values.size() << ',';
    for (std::size_t i = 0; i < s.values.size(); ++i) os << (i ? " " : "") << detail::fmt_double(s.values[i]);
    os << '\n';
  }
  return os.str();
}

/// Renders boxes (Q1-Q3), median bars, min-max whiskers and run dots.
inline GrayImage render_boxplot(const std::vector<BoxplotSeries>& series) {
  constexpr std::size_t kW = 90, kH = 200, kTop = 10, kBottom = 170;
  GrayImage img(kW * series.size() + 20, kH, 255);
  double lo = 1.0, hi = 0.0;
  for (const auto& s : series) {
    lo = std::min(lo, s.summary.min);
    hi = std::max(hi, s.summary.max);
  }
  const double pad = std::max(0.005, 0.1 * (hi - lo));
  lo -= pad;
  hi += pad;
  const auto ypix = [&](double v) {
    const double t = (v - lo) / (hi - lo);
    return static_cast<std::size_t>(std::lround(static_cast<double>(kBottom) - t * (kBottom - kTop)));
  };
  const auto hline = [&](std::size_t x0, std::size_t x1, std::size_t y, std::uint8_t ink) {
    for (std::size_t x = x0; x <= x1; ++x) img.at(x, y) = ink;
  };
  const auto vline = [&](std::size_t x, std::size_t y0, std::size_t y1, std::uint8_t ink) {
    for (std::size_t y = std::min(y0, y1); y <= std::max(y0, y1); ++y) img.at(x, y) = ink;
  };
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i].summary;
    const std::size_t x0 = 20 + i * kW + 20, x1 = x0 + 40, xm = (x0 + x1) / 2;
    vline(xm, ypix(s.min), ypix(s.q1), 0);
    vline(xm, ypix(s.q3), ypix(s.max), 0);
    hline(x0 + 10, x1 - 10, ypix(s.min), 0);
    hline(x0 + 10, x1 - 10, ypix(s.max), 0);
    hline(x0, x1, ypix(s.q1), 0);
    hline(x0, x1, ypix(s.q3), 0);
    vline(x0, ypix(s.q1), ypix(s.q3), 0);
    vline(x1, ypix(s.q1), ypix(s.q3), 0);
    hline(x0, x1, ypix(s.median), 96);
    for (double v : series[i].values) img.at(x1 + 6, ypix(v)) = 0;
    detail::draw_text(img, x0 + 8, kBottom + 12, tissue_name(series[i].tissue), 0);
  }
  img.comments.push_back("dice boxplot, y range " + detail::fmt_double(lo) + " to " + detail::fmt_double(hi));
  return img;
}

/// Writes the CSV and, when image_path is non-empty, the rendered raster.
inline void emit_boxplot(const std::vector<RunRecord>& records, const std::filesystem::path& csv_path,
                         const std::filesystem::path& image_path = {}) {
  const auto series = boxplot_series(records);
  std::ofstream out(csv_path, std::ios::trunc);
  if (!out) throw Error("cannot open '" + csv_path.string() + "' for writing");
  out << boxplot_csv(series);
  if (!out) throw Error("write failed for '" + csv_path.string() + "'");
  if (!image_path.empty()) write_pgm(image_path, render_boxplot(series));
}

// ---------------------------------------------------------------------------
// Overlay panel: (a) input, (b) ground truth, (c) 3-channel, (d) 4-channel.

inline constexpr std::size_t kPanelGap = 4;
inline constexpr std::size_t kCaptionHeight = 12;

inline std::uint8_t palette_gray(std::uint8_t cls) { return kPalette.at(cls).gray; }

/// Panel i occupies x in [i * (cols + gap), i * (cols + gap) + cols), y in [0, rows).
inline GrayImage render_overlay(const Array2<float>& input, const LabelMap& truth, const LabelMap& pred3,
                                const LabelMap& pred4) {
  const std::size_t rows = truth.rows(), cols = truth.cols();
  for (const auto* m : {&pred3, &pred4})
    if (m->rows() != rows || m->cols() != cols) throw Error("overlay: label maps differ in shape");
  if (input.rows != rows || input.cols != cols) throw Error("overlay: input slice shape differs from labels");
  const std::size_t width = 4 * cols + 3 * kPanelGap;
  GrayImage img(width, rows + kCaptionHeight, 255);
  const auto norm = normalize_intensity(input);
  const auto origin = [&](std::size_t panel) { return panel * (cols + kPanelGap); };
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      img.at(origin(0) + c, r) = static_cast<std::uint8_t>(std::lround(255.0 * norm(r, c)));
      img.at(origin(1) + c, r) = palette_gray(truth(r, c));
      img.at(origin(2) + c, r) = palette_gray(pred3(r, c));
      img.at(origin(3) + c, r) = palette_gray(pred4(r, c));
    }
  constexpr std::array<std::string_view, 4> captions = {"(a) input", "(b) ground truth", "(c) 3 channels",
                                                        "(d) 4 channels"};
  for (std::size_t p = 0; p < 4; ++p) {
    detail::draw_text(img, origin(p) + 1, rows + 3, captions[p], 0);
    img.comments.push_back("panel " + std::to_string(p) + " x=" + std::to_string(origin(p)) + " " +
                           std::string(captions[p]));
  }
  std::string legend = "palette";
  for (const auto& e : kPalette) legend += " " + std::string(e.name) + "=" + std::to_string(e.gray);
  img.comments.push_back(legend);
  return img;
}

inline void emit_overlay(const Array2<float>& input, const LabelMap& truth, const LabelMap& pred3,
                         const LabelMap& pred4, const std::filesystem::path& out) {
  write_pgm(out, render_overlay(input, truth, pred3, pred4));
}

// ---------------------------------------------------------------------------
// Run-record reports.

inline nlohmann::json to_json(const DiceScores& s) {
  nlohmann::json j;
  for (int k = 1; k < kNumClasses; ++k) {
    j[std::string(kPalette[static_cast<std::size_t>(k)].name)] = s.value[static_cast<std::size_t>(k)];
  }
  nlohmann::json empty = nlohmann::json::array();
  for (int k = 1; k < kNumClasses; ++k)
    if (s.both_empty[static_cast<std::size_t>(k)]) empty.push_back(kPalette[static_cast<std::size_t>(k)].name);
  j["both_empty"] = std::move(empty);
  return j;
}

inline DiceScores dice_scores_from_json(const nlohmann::json& j) {
  DiceScores s;
  for (int k = 1; k < kNumClasses; ++k) {
    const std::string name(kPalette[static_cast<std::size_t>(k)].name);
    s.value[static_cast<std::size_t>(k)] = j.value(name, 0.0);
  }
  if (j.contains("both_empty"))
    for (const auto& n : j.at("both_empty"))
      for (int k = 1; k < kNumClasses; ++k)
        if (n.get<std::string>() == kPalette[static_cast<std::size_t>(k)].name)
          s.both_empty[static_cast<std::size_t>(k)] = true;
  return s;
}

inline nlohmann::json to_json(const RunRecord& r) {
  return {{"run_index", r.run_index}, {"seed", r.seed},          {"epoch_loss", r.epoch_loss},
          {"checkpoint", r.checkpoint}, {"dice", to_json(r.test_dice)}};
}

inline RunRecord run_record_from_json(const nlohmann::json& j) {
  RunRecord r;
  r.run_index = j.at("run_index").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.epoch_loss = j.at("epoch_loss").get<std::vector<double>>();
  r.checkpoint = j.value("checkpoint", "");
  r.test_dice = dice_scores_from_json(j.at("dice"));
  return r;
}

inline nlohmann::json to_json(const DiceReport& report) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& c : report.classes)
    j[std::string(tissue_name(c.tissue))] = {{"mean", c.mean},
                                             {"std", c.std},
                                             {"per_run", c.per_run},
                                             {"formatted", format_mean_std(c.mean, c.std)},
                                             {"any_both_empty", c.any_both_empty}};
  return j;
}

/// One row per run, one column per evaluated class.
inline std::string runs_csv(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  os << "run,seed";
  for (auto t : kEvaluatedTissues) os << ',' << tissue_name(t);
  os << ",mean\n";
  for (const auto& r : records) {
    os << r.run_index << ',' << r.seed;
    for (auto t : kEvaluatedTissues) os << ',' << detail::fmt_double(r.test_dice[t]);
    os << ',' << detail::fmt_double(r.test_dice.evaluated_mean()) << '\n';
  }
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error("corrupt JSON in '" + path.string() + "': " + e.what());
  }
}

}  // namespace priorseg
