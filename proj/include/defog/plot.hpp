#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace defog {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

/// Fixed-size RGB raster with just enough drawing for line charts.
class Canvas {
public:
  Canvas(int width, int height, Rgb background = {255, 255, 255});

  int width() const { return w_; }
  int height() const { return h_; }
  Rgb at(int x, int y) const;

  void blend(int x, int y, Rgb c, double alpha = 1.0);
  void line(double x0, double y0, double x1, double y1, Rgb c, int thickness = 1);
  void fill_rect(int x0, int y0, int x1, int y1, Rgb c, double alpha = 1.0);
  void text(int x, int y, const std::string& s, Rgb c);
  /// Text drawn bottom-to-top, for y-axis labels.
  void text_vertical(int x, int y, const std::string& s, Rgb c);
  static int text_width(const std::string& s);

  void save_png(const std::string& path) const;

private:
  int w_, h_;
  std::vector<std::uint8_t> px_;
};

struct Series {
  std::string label;
  std::vector<double> x, y;
  std::vector<double> band;  // optional half-width around y
  bool line = true;
  bool points = false;
  int color = -1;  // palette index; -1 = position in the plot
};

struct PlotSpec {
  std::string title;
  std::string xlabel;
  std::string ylabel;
  std::vector<Series> series;
  int width = 720;
  int height = 480;
};

Rgb palette(int i);
void render_plot(const PlotSpec& spec, const std::string& path);

}  // namespace defog
