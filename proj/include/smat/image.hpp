#pragma once

// 8-bit-backed float images (values in [0,1], HWC) with PPM/PGM IO, optional
// PNG reading, and bilinear resize.

#include <string>
#include <vector>

#include "smat/tensor.hpp"

namespace smat {

struct Image {
  int h = 0, w = 0, c = 3;
  std::vector<float> data;  // h*w*c, row-major, [0,1]

  float& at(int r, int col, int ch) {
    return data[(static_cast<std::size_t>(r) * w + col) * c + ch];
  }
  float at(int r, int col, int ch) const {
    return data[(static_cast<std::size_t>(r) * w + col) * c + ch];
  }
};

Image make_image(int h, int w, int c = 3);

// binary PPM (P6) / PGM (P5), 8-bit
void write_ppm(const std::string& path, const Image& img);
Image read_ppm(const std::string& path);
void write_pgm(const std::string& path, int h, int w,
               const std::vector<float>& values);  // values clamped to [0,1]

// dispatches on extension: .ppm always; .png when built with PNG support
Image read_image(const std::string& path);
bool png_supported();

Image resize_bilinear(const Image& img, int out_h, int out_w);

Tensor image_to_tensor(const Image& img);
Image tensor_to_image(const Tensor& t);

}  // namespace smat
