#include "saliency/heatmap.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace saliency {

namespace {

std::uint8_t channel(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void write_ppm(const RgbImage& image, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw OutputError("cannot write heatmap to '" + path + "'");
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw OutputError("failed while writing '" + path + "'");
}

void write_png(const RgbImage& image, const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw OutputError("cannot write heatmap to '" + path + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw OutputError("libpng initialisation failed for '" + path + "'");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw OutputError("failed while writing '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(image.pixels.data() + y * image.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

RgbImage colorize(const Tensor& map, const HeatmapOptions& options) {
  if (map.rank() != 2) throw ShapeError("heatmaps take [H, W] maps, got " + shape_string(map.shape()));
  if (options.zoom == 0) throw std::invalid_argument("zoom must be at least 1");
  const std::size_t h = map.dim(0), w = map.dim(1);
  double scale = 0.0;
  for (double v : map.data()) scale = std::max(scale, std::fabs(v));

  const Tensor* overlay = options.overlay;
  std::size_t overlay_channels = 0;
  if (overlay) {
    const std::size_t r = overlay->rank();
    if ((r != 3 && r != 4) || overlay->dim(r - 2) != h || overlay->dim(r - 1) != w) {
      throw ShapeError("overlay " + shape_string(overlay->shape()) + " does not match map " + shape_string(map.shape()));
    }
    overlay_channels = overlay->dim(r - 3);
  }

  RgbImage img{h * options.zoom, w * options.zoom, {}};
  img.pixels.resize(img.height * img.width * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double t = scale > 0.0 ? map.at(y, x) / scale : 0.0;
      double rgb[3];
      if (options.palette == Palette::sequential || t >= 0.0) {
        const double a = std::fabs(t);
        rgb[0] = 1.0;
        rgb[1] = rgb[2] = 1.0 - a;
      } else {
        rgb[0] = rgb[1] = 1.0 + t;
        rgb[2] = 1.0;
      }
      if (overlay) {
        double gray = 0.0;
        for (std::size_t c = 0; c < overlay_channels; ++c) gray += (*overlay)[(c * h + y) * w + x];
        gray /= static_cast<double>(overlay_channels);
        for (double& v : rgb) v = 0.5 * v + 0.5 * gray;
      }
      for (std::size_t dy = 0; dy < options.zoom; ++dy) {
        for (std::size_t dx = 0; dx < options.zoom; ++dx) {
          std::uint8_t* p = &img.pixels[((y * options.zoom + dy) * img.width + x * options.zoom + dx) * 3];
          for (int c = 0; c < 3; ++c) p[c] = channel(rgb[c]);
        }
      }
    }
  }
  return img;
}

void write_image(const RgbImage& image, const std::string& path) {
  if (ends_with(path, ".ppm")) {
    write_ppm(image, path);
  } else if (ends_with(path, ".png")) {
    write_png(image, path);
  } else {
    throw OutputError("unsupported heatmap extension in '" + path + "' (use .ppm or .png)");
  }
}

void render_heatmap(const Tensor& map, const std::string& path, const HeatmapOptions& options) {
  write_image(colorize(map, options), path);
}

void render_heatmap(const AttributionMap& map, const std::string& path, std::size_t zoom, const Tensor* overlay) {
  render_heatmap(map.values, path, {Palette::diverging, zoom, overlay});
}

void render_heatmap(const SaliencyMap& map, const std::string& path, std::size_t zoom, const Tensor* overlay) {
  render_heatmap(map.values, path, {Palette::sequential, zoom, overlay});
}

}  // namespace saliency
