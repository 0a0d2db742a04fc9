// Binary PPM (P6, 8-bit) image I/O and bicubic resampling.
//
// Images are (C, H, W) tensors with C=3 and pixel values in [0, 1]; bytes map
// through value/255 on read and round(value*255) clamped on write.
#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>

#include "vitmix/tensor.hpp"

namespace vitmix {

template <class S>
void write_image(const Tensor<S>& image, const std::filesystem::path& path) {
  if (image.ndim() != 3 || image.dim(0) != 3)
    throw IoError("write_image: expected (3,H,W), got " + shape_str(image.shape()));
  const std::int64_t h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image: " + path.string());
  out << "P6\n" << w << " " << h << "\n255\n";
  const S* px = image.data();
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (std::int64_t y = 0; y < h; ++y) {
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c) {
        double v = std::round(static_cast<double>(px[(c * h + y) * w + x]) * 255.0);
        v = std::min(255.0, std::max(0.0, v));
        row[static_cast<std::size_t>(x * 3 + c)] = static_cast<unsigned char>(v);
      }
    out.write(reinterpret_cast<const char*>(row.data()),
              static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("short write on image: " + path.string());
}

template <class S>
Tensor<S> read_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image: " + path.string());
  auto next_token = [&]() {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
      if (ch == '#') { // comment to end of line
        while ((ch = in.get()) != EOF && ch != '\n') {}
        continue;
      }
      if (std::isspace(ch)) {
        if (!tok.empty()) return tok;
        continue;
      }
      tok.push_back(static_cast<char>(ch));
    }
    return tok;
  };
  const std::string magic = next_token();
  if (magic != "P6")
    throw IoError("malformed PPM header (expected P6) in " + path.string());
  std::int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(next_token());
    h = std::stoll(next_token());
    maxval = std::stoll(next_token());
  } catch (const std::exception&) {
    throw IoError("malformed PPM header in " + path.string());
  }
  if (w <= 0 || h <= 0 || maxval != 255)
    throw IoError("unsupported PPM (need 8-bit, positive dims) in " + path.string());
  // Exactly one whitespace byte separates the header from the raster; the
  // token reader has already consumed it.
  std::vector<unsigned char> raster(static_cast<std::size_t>(w * h * 3));
  in.read(reinterpret_cast<char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (static_cast<std::size_t>(in.gcount()) != raster.size())
    throw IoError("truncated PPM raster in " + path.string());
  Tensor<S> img = Tensor<S>::zeros({3, h, w});
  S* px = img.mutable_data();
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < 3; ++c)
        px[(c * h + y) * w + x] =
            static_cast<S>(raster[static_cast<std::size_t>((y * w + x) * 3 + c)] / 255.0);
  return img;
}

namespace detail {
// Catmull-Rom cubic kernel (a = -0.5).
inline double cubic_kernel(double x) {
  constexpr double a = -0.5;
  x = std::fabs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}
} // namespace detail

// Bicubic resample to (C, out_h, out_w); border pixels clamp-extend.
template <class S>
Tensor<S> resize_bicubic(const Tensor<S>& image, std::int64_t out_h, std::int64_t out_w) {
  if (image.ndim() != 3)
    throw GeometryError("resize_bicubic: expected (C,H,W), got " + shape_str(image.shape()));
  const std::int64_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (out_h <= 0 || out_w <= 0)
    throw GeometryError("resize_bicubic: output dims must be positive");
  Tensor<S> out = Tensor<S>::zeros({c, out_h, out_w});
  const S* src = image.data();
  S* dst = out.mutable_data();
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  auto clampi = [](std::int64_t v, std::int64_t hi) {
    return std::min(hi - 1, std::max<std::int64_t>(0, v));
  };
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
      const std::int64_t y0 = static_cast<std::int64_t>(std::floor(fy));
      std::array<double, 4> wy;
      for (int t = 0; t < 4; ++t) wy[static_cast<std::size_t>(t)] = detail::cubic_kernel(fy - static_cast<double>(y0 - 1 + t));
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
        const std::int64_t x0 = static_cast<std::int64_t>(std::floor(fx));
        double acc = 0.0, wsum = 0.0;
        for (int ty = 0; ty < 4; ++ty) {
          const std::int64_t yy = clampi(y0 - 1 + ty, h);
          for (int tx = 0; tx < 4; ++tx) {
            const std::int64_t xx = clampi(x0 - 1 + tx, w);
            const double wgt = wy[static_cast<std::size_t>(ty)] *
                               detail::cubic_kernel(fx - static_cast<double>(x0 - 1 + tx));
            acc += wgt * static_cast<double>(src[(ci * h + yy) * w + xx]);
            wsum += wgt;
          }
        }
        dst[(ci * out_h + oy) * out_w + ox] = static_cast<S>(acc / wsum);
      }
    }
  return out;
}

} // namespace vitmix
