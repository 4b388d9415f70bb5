#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mros/tensor.hpp"

namespace mros {

// Planar (channel-major) float image. Pixel values are in [0, 1] before
// normalization.
struct Image {
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;

  static Image blank(std::size_t channels, std::size_t height, std::size_t width, float fill = 0.0f) {
    return {channels, height, width, std::vector<float>(channels * height * width, fill)};
  }

  float& at(std::size_t c, std::size_t y, std::size_t x) { return pixels[(c * height + y) * width + x]; }
  float at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }

  bool operator==(const Image&) const = default;
};

inline Tensor to_tensor(const Image& img) {
  return Tensor({img.channels, img.height, img.width},
                std::vector<double>(img.pixels.begin(), img.pixels.end()));
}

}  // namespace mros
