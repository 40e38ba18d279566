#include "defog/plot.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <sstream>

#include "defog/errors.hpp"

namespace defog {

namespace {
#include "font_glyphs.inc"

const Rgb kInk{40, 40, 40};
const Rgb kGrid{225, 225, 225};

std::string tick_label(double v, double step) {
  std::ostringstream os;
  const int decimals = step >= 1.0 ? 0 : std::min(4, static_cast<int>(std::ceil(-std::log10(step))));
  os << std::fixed << std::setprecision(decimals) << (std::abs(v) < step * 1e-6 ? 0.0 : v);
  return os.str();
}

double nice_step(double range, int target) {
  const double raw = range / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double f = raw / mag;
  return (f < 1.5 ? 1.0 : f < 3.0 ? 2.0 : f < 7.0 ? 5.0 : 10.0) * mag;
}

}  // namespace

Canvas::Canvas(int width, int height, Rgb bg) : w_(width), h_(height) {
  require(width > 0 && height > 0, ErrorKind::InvalidInput, "canvas size must be positive");
  px_.resize(static_cast<std::size_t>(w_) * h_ * 3);
  for (std::size_t i = 0; i < px_.size(); i += 3) {
    px_[i] = bg.r;
    px_[i + 1] = bg.g;
    px_[i + 2] = bg.b;
  }
}

Rgb Canvas::at(int x, int y) const {
  const auto i = (static_cast<std::size_t>(y) * w_ + x) * 3;
  return {px_[i], px_[i + 1], px_[i + 2]};
}

void Canvas::blend(int x, int y, Rgb c, double alpha) {
  if (x < 0 || y < 0 || x >= w_ || y >= h_) return;
  const auto i = (static_cast<std::size_t>(y) * w_ + x) * 3;
  auto mix = [alpha](std::uint8_t a, std::uint8_t b) {
    return static_cast<std::uint8_t>(std::lround(a * (1.0 - alpha) + b * alpha));
  };
  px_[i] = mix(px_[i], c.r);
  px_[i + 1] = mix(px_[i + 1], c.g);
  px_[i + 2] = mix(px_[i + 2], c.b);
}

void Canvas::line(double x0, double y0, double x1, double y1, Rgb c, int thickness) {
  const double len = std::max(std::abs(x1 - x0), std::abs(y1 - y0));
  const int n = std::max(1, static_cast<int>(std::ceil(len)));
  const int r0 = -(thickness - 1) / 2, r1 = thickness / 2;
  for (int i = 0; i <= n; ++i) {
    const double t = static_cast<double>(i) / n;
    const int x = static_cast<int>(std::lround(x0 + (x1 - x0) * t));
    const int y = static_cast<int>(std::lround(y0 + (y1 - y0) * t));
    for (int dy = r0; dy <= r1; ++dy)
      for (int dx = r0; dx <= r1; ++dx) blend(x + dx, y + dy, c);
  }
}

void Canvas::fill_rect(int x0, int y0, int x1, int y1, Rgb c, double alpha) {
  for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
    for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) blend(x, y, c, alpha);
}

int Canvas::text_width(const std::string& s) { return static_cast<int>(s.size()) * kGlyphW; }

void Canvas::text(int x, int y, const std::string& s, Rgb c) {
  for (std::size_t k = 0; k < s.size(); ++k) {
    const int code = static_cast<unsigned char>(s[k]);
    if (code < 32 || code > 126) continue;
    const auto& g = kGlyphs[code - 32];
    for (int row = 0; row < kGlyphH; ++row)
      for (int col = 0; col < kGlyphW; ++col)
        if (g[row] >> (kGlyphW - 1 - col) & 1) blend(x + static_cast<int>(k) * kGlyphW + col, y + row, c);
  }
}

void Canvas::text_vertical(int x, int y, const std::string& s, Rgb c) {
  for (std::size_t k = 0; k < s.size(); ++k) {
    const int code = static_cast<unsigned char>(s[k]);
    if (code < 32 || code > 126) continue;
    const auto& g = kGlyphs[code - 32];
    for (int row = 0; row < kGlyphH; ++row)
      for (int col = 0; col < kGlyphW; ++col)
        if (g[row] >> (kGlyphW - 1 - col) & 1)
          blend(x + row, y - static_cast<int>(k) * kGlyphW - col, c);
  }
}

void Canvas::save_png(const std::string& path) const {
  FILE* f = std::fopen(path.c_str(), "wb");
  require(f != nullptr, ErrorKind::Io, "cannot write image " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(f);
    fail(ErrorKind::Io, "libpng failed writing " + path);
  }
  png_init_io(png, f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w_), static_cast<png_uint_32>(h_), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h_; ++y) {
    png_write_row(png, const_cast<png_bytep>(px_.data() + static_cast<std::size_t>(y) * w_ * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  require(std::fclose(f) == 0, ErrorKind::Io, "failed closing " + path);
}

Rgb palette(int i) {
  static const Rgb colors[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},
                               {148, 103, 189}, {140, 86, 75},  {227, 119, 194}, {127, 127, 127},
                               {188, 189, 34},  {23, 190, 207}};
  return colors[static_cast<std::size_t>(i) % 10];
}

void render_plot(const PlotSpec& spec, const std::string& path) {
  require(!spec.series.empty(), ErrorKind::InvalidInput, "plot has no series");
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const auto& s : spec.series) {
    require(s.x.size() == s.y.size() && (s.band.empty() || s.band.size() == s.y.size()),
            ErrorKind::InvalidInput, "series '" + s.label + "' has mismatched lengths");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double b = s.band.empty() ? 0.0 : s.band[i];
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i] - b);
      ymax = std::max(ymax, s.y[i] + b);
    }
  }
  require(std::isfinite(xmin) && std::isfinite(ymin), ErrorKind::InvalidInput, "plot has no points");
  if (xmax - xmin < 1e-12) { xmin -= 0.5; xmax += 0.5; }
  if (ymax - ymin < 1e-12) { ymin -= 0.5; ymax += 0.5; }
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  Canvas cv(spec.width, spec.height);
  const int left = 78, right = spec.width - 16, top = 34, bottom = spec.height - 46;
  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (right - left); };
  auto py = [&](double y) { return bottom - (y - ymin) / (ymax - ymin) * (bottom - top); };

  const double xs = nice_step(xmax - xmin, 6), ys = nice_step(ymax - ymin, 6);
  for (double v = std::ceil(xmin / xs) * xs; v <= xmax + xs * 1e-9; v += xs) {
    const int x = static_cast<int>(std::lround(px(v)));
    cv.line(x, top, x, bottom, kGrid);
    const auto l = tick_label(v, xs);
    cv.text(x - Canvas::text_width(l) / 2, bottom + 6, l, kInk);
  }
  for (double v = std::ceil(ymin / ys) * ys; v <= ymax + ys * 1e-9; v += ys) {
    const int y = static_cast<int>(std::lround(py(v)));
    cv.line(left, y, right, y, kGrid);
    const auto l = tick_label(v, ys);
    cv.text(left - 6 - Canvas::text_width(l), y - 6, l, kInk);
  }
  cv.line(left, bottom, right, bottom, kInk);
  cv.line(left, top, left, bottom, kInk);

  for (std::size_t k = 0; k < spec.series.size(); ++k) {
    const auto& s = spec.series[k];
    const Rgb c = palette(s.color >= 0 ? s.color : static_cast<int>(k));
    if (!s.band.empty()) {
      for (std::size_t i = 0; i + 1 < s.x.size(); ++i) {
        const int xa = static_cast<int>(std::lround(px(s.x[i])));
        const int xb = static_cast<int>(std::lround(px(s.x[i + 1])));
        for (int x = std::min(xa, xb); x < std::max(xa, xb); ++x) {
          const double t = xb == xa ? 0.0 : static_cast<double>(x - xa) / (xb - xa);
          const double y = s.y[i] + (s.y[i + 1] - s.y[i]) * t;
          const double b = s.band[i] + (s.band[i + 1] - s.band[i]) * t;
          for (int yy = static_cast<int>(std::lround(py(y + b))); yy <= std::lround(py(y - b)); ++yy)
            cv.blend(x, yy, c, 0.18);
        }
      }
    }
    if (s.line) {
      for (std::size_t i = 0; i + 1 < s.x.size(); ++i)
        cv.line(px(s.x[i]), py(s.y[i]), px(s.x[i + 1]), py(s.y[i + 1]), c, 2);
    }
    if (s.points || s.x.size() == 1) {
      for (std::size_t i = 0; i < s.x.size(); ++i) {
        const int x = static_cast<int>(std::lround(px(s.x[i])));
        const int y = static_cast<int>(std::lround(py(s.y[i])));
        cv.fill_rect(x - 2, y - 2, x + 2, y + 2, c);
      }
    }
  }

  int ly = top + 6;
  for (std::size_t k = 0; k < spec.series.size(); ++k) {
    const auto& s = spec.series[k];
    if (s.label.empty()) continue;
    const Rgb c = palette(s.color >= 0 ? s.color : static_cast<int>(k));
    const int lx = right - 24 - Canvas::text_width(s.label);
    cv.fill_rect(lx - 4, ly - 2, right - 4, ly + 14, {255, 255, 255}, 0.85);
    cv.fill_rect(lx, ly + 5, lx + 12, ly + 7, c);
    cv.text(lx + 16, ly, s.label, kInk);
    ly += 18;
  }

  cv.text((left + right - Canvas::text_width(spec.title)) / 2, 10, spec.title, kInk);
  cv.text((left + right - Canvas::text_width(spec.xlabel)) / 2, spec.height - 20, spec.xlabel, kInk);
  cv.text_vertical(8, (top + bottom + Canvas::text_width(spec.ylabel)) / 2, spec.ylabel, kInk);
  cv.save_png(path);
}

}  // namespace defog
