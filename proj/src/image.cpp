#include "smat/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#ifdef SMAT_HAS_PNG
#include <png.h>
#endif

namespace smat {

Image make_image(int h, int w, int c) {
  if (h < 1 || w < 1 || (c != 1 && c != 3))
    throw std::invalid_argument("make_image: bad dims " + std::to_string(h) +
                                "x" + std::to_string(w) + "x" + std::to_string(c));
  Image img;
  img.h = h;
  img.w = w;
  img.c = c;
  img.data.assign(static_cast<std::size_t>(h) * w * c, 0.0f);
  return img;
}

namespace {

unsigned char to_byte(float v) {
  float x = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(x * 255.0f));
}

// skips whitespace and '#' comment lines between header tokens
int read_pnm_int(std::istream& in) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF) throw std::runtime_error("pnm: truncated header");
  int v = 0;
  bool any = false;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    any = true;
    ch = in.get();
  }
  if (!any) throw std::runtime_error("pnm: expected integer in header");
  return v;
}

}  // namespace

void write_ppm(const std::string& path, const Image& img) {
  if (img.c != 3) throw std::invalid_argument("write_ppm: needs 3 channels");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_ppm: cannot open " + path);
  out << "P6\n" << img.w << " " << img.h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * 3);
  for (int r = 0; r < img.h; ++r) {
    for (int cidx = 0; cidx < img.w; ++cidx)
      for (int ch = 0; ch < 3; ++ch)
        row[cidx * 3 + ch] = to_byte(img.at(r, cidx, ch));
    out.write(reinterpret_cast<const char*>(row.data()), (std::streamsize)row.size());
  }
  if (!out) throw std::runtime_error("write_ppm: write failed for " + path);
}

Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("read_ppm: cannot open " + path);
  char m0 = (char)in.get(), m1 = (char)in.get();
  if (m0 != 'P' || m1 != '6')
    throw std::runtime_error("read_ppm: " + path + " is not a binary PPM");
  int w = read_pnm_int(in);
  int h = read_pnm_int(in);
  int maxv = read_pnm_int(in);
  if (maxv != 255)
    throw std::runtime_error("read_ppm: only 8-bit files supported, maxval=" +
                             std::to_string(maxv));
  auto img = make_image(h, w, 3);
  std::vector<unsigned char> raw(static_cast<std::size_t>(h) * w * 3);
  in.read(reinterpret_cast<char*>(raw.data()), (std::streamsize)raw.size());
  if (in.gcount() != (std::streamsize)raw.size())
    throw std::runtime_error("read_ppm: truncated pixel data in " + path);
  for (std::size_t i = 0; i < raw.size(); ++i)
    img.data[i] = raw[i] / 255.0f;
  return img;
}

void write_pgm(const std::string& path, int h, int w,
               const std::vector<float>& values) {
  if ((int)values.size() != h * w)
    throw std::invalid_argument("write_pgm: " + std::to_string(values.size()) +
                                " values for a " + std::to_string(h) + "x" +
                                std::to_string(w) + " map");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(w);
  for (int r = 0; r < h; ++r) {
    for (int cidx = 0; cidx < w; ++cidx) row[cidx] = to_byte(values[r * w + cidx]);
    out.write(reinterpret_cast<const char*>(row.data()), w);
  }
  if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

bool png_supported() {
#ifdef SMAT_HAS_PNG
  return true;
#else
  return false;
#endif
}

#ifdef SMAT_HAS_PNG
namespace {

Image read_png_file(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("read_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("read_png: decode error in " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  // normalize everything to 8-bit RGB
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  auto img = make_image((int)h, (int)w, 3);
  std::vector<unsigned char> rowbuf(png_get_rowbytes(png, info));
  for (png_uint_32 r = 0; r < h; ++r) {
    png_read_row(png, rowbuf.data(), nullptr);
    for (png_uint_32 cidx = 0; cidx < w; ++cidx)
      for (int ch = 0; ch < 3; ++ch)
        img.at((int)r, (int)cidx, ch) = rowbuf[cidx * 3 + ch] / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

}  // namespace
#endif

Image read_image(const std::string& path) {
  auto dot = path.rfind('.');
  std::string ext = dot == std::string::npos ? "" : path.substr(dot);
  for (auto& ch : ext) ch = (char)std::tolower(ch);
  if (ext == ".ppm") return read_ppm(path);
#ifdef SMAT_HAS_PNG
  if (ext == ".png") return read_png_file(path);
#else
  if (ext == ".png")
    throw std::runtime_error("read_image: built without PNG support: " + path);
#endif
  throw std::runtime_error("read_image: unsupported extension '" + ext +
                           "' for " + path);
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1)
    throw std::invalid_argument("resize_bilinear: bad output dims");
  auto out = make_image(out_h, out_w, img.c);
  // align pixel centers: source = (dst + 0.5) * scale - 0.5
  double sy = (double)img.h / out_h, sx = (double)img.w / out_w;
  for (int r = 0; r < out_h; ++r) {
    double fy = (r + 0.5) * sy - 0.5;
    int y0 = (int)std::floor(fy);
    double wy = fy - y0;
    int y0c = std::clamp(y0, 0, img.h - 1);
    int y1c = std::clamp(y0 + 1, 0, img.h - 1);
    for (int cidx = 0; cidx < out_w; ++cidx) {
      double fx = (cidx + 0.5) * sx - 0.5;
      int x0 = (int)std::floor(fx);
      double wx = fx - x0;
      int x0c = std::clamp(x0, 0, img.w - 1);
      int x1c = std::clamp(x0 + 1, 0, img.w - 1);
      for (int ch = 0; ch < img.c; ++ch) {
        double top = (1 - wx) * img.at(y0c, x0c, ch) + wx * img.at(y0c, x1c, ch);
        double bot = (1 - wx) * img.at(y1c, x0c, ch) + wx * img.at(y1c, x1c, ch);
        out.at(r, cidx, ch) = (float)((1 - wy) * top + wy * bot);
      }
    }
  }
  return out;
}

Tensor image_to_tensor(const Image& img) {
  if (img.c != 3) throw std::invalid_argument("image_to_tensor: needs RGB");
  auto t = Tensor::zeros({img.h, img.w, 3});
  std::copy(img.data.begin(), img.data.end(), t.vec().begin());
  return t;
}

Image tensor_to_image(const Tensor& t) {
  if (t.shape().size() != 3 || t.shape()[2] != 3)
    throw std::invalid_argument("tensor_to_image: expected {H,W,3}, got " +
                                shape_str(t.shape()));
  auto img = make_image(t.shape()[0], t.shape()[1], 3);
  std::copy(t.vec().begin(), t.vec().end(), img.data.begin());
  return img;
}

}  // namespace smat
