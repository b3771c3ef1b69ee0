#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "saliency/attribution.hpp"
#include "saliency/tensor.hpp"

namespace saliency {

class OutputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Palette {
  diverging,   // signed maps: blue < 0 < red, symmetric around white
  sequential,  // non-negative maps: white -> red
};

struct HeatmapOptions {
  Palette palette = Palette::sequential;
  std::size_t zoom = 1;  // nearest-neighbour magnification
  /// Optional [C, H, W] or [1, C, H, W] image blended underneath at half weight.
  const Tensor* overlay = nullptr;
};

struct RgbImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB
};

RgbImage colorize(const Tensor& map, const HeatmapOptions& options);

/// Writes a binary PPM (.ppm) or PNG (.png), chosen by extension.
void write_image(const RgbImage& image, const std::string& path);

void render_heatmap(const Tensor& map, const std::string& path, const HeatmapOptions& options = {});
/// Signed maps use the diverging palette, saliency maps the sequential one.
void render_heatmap(const AttributionMap& map, const std::string& path, std::size_t zoom = 1,
                    const Tensor* overlay = nullptr);
void render_heatmap(const SaliencyMap& map, const std::string& path, std::size_t zoom = 1,
                    const Tensor* overlay = nullptr);

}  // namespace saliency
