#pragma once

#include <array>
#include <string>
#include <vector>

#include "hydet/bbox.hpp"

namespace hydet {

/// Planar RGB image, values in [0,1], layout [3][height][width].
struct Image {
  int width = 0, height = 0;
  std::vector<float> data;

  Image() = default;
  Image(int w, int h, float fill = 0.0f) : width(w), height(h), data(static_cast<std::size_t>(3) * w * h, fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool empty() const { return width <= 0 || height <= 0; }
};

/// Decodes PNG, JPEG or binary PPM (P6) by content sniffing. Throws
/// DatasetError(undecodable_image) on failure.
Image load_image(const std::string& path);
Image decode_image(const std::vector<unsigned char>& bytes, const std::string& name = "<memory>");

void save_png(const Image& img, const std::string& path);
void save_ppm(const Image& img, const std::string& path);
std::vector<unsigned char> encode_ppm(const Image& img);

/// Bilinear resampling with half-pixel centers and edge clamping.
Image resize_bilinear(const Image& img, int width, int height);

/// Rectangle outline of the given thickness, clipped to the image.
void draw_box(Image& img, const Box& box, std::array<float, 3> color, int thickness = 2);

}  // namespace hydet
