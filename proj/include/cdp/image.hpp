#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "cdp/rng.hpp"
#include "cdp/tensor.hpp"

namespace cdp {

// Row-major RGB image, 3 bytes per pixel.
struct Image8 {
  int h = 0;
  int w = 0;
  std::vector<uint8_t> px;

  static Image8 make(int h, int w, uint8_t fill = 0) {
    Image8 im;
    im.h = h;
    im.w = w;
    im.px.assign(static_cast<size_t>(h) * w * 3, fill);
    return im;
  }

  uint8_t& at(int y, int x, int c) { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }
  uint8_t at(int y, int x, int c) const { return px[(static_cast<size_t>(y) * w + x) * 3 + c]; }

  bool operator==(const Image8& o) const { return h == o.h && w == o.w && px == o.px; }
};

// Binary PPM (P6, maxval 255). Lossless round trip by construction.
inline void save_ppm(const std::string& path, const Image8& im) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw TensorError("save_ppm: cannot open " + path);
  f << "P6\n" << im.w << " " << im.h << "\n255\n";
  f.write(reinterpret_cast<const char*>(im.px.data()), static_cast<std::streamsize>(im.px.size()));
  if (!f) throw TensorError("save_ppm: write failed for " + path);
}

inline Image8 load_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw TensorError("load_ppm: cannot open " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw TensorError("load_ppm: " + path + " is not a P6 ppm");
  int w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0) throw TensorError("load_ppm: bad header in " + path);
  if (maxval != 255) throw TensorError("load_ppm: unsupported maxval in " + path);
  f.get();  // single whitespace after header
  Image8 im = Image8::make(h, w);
  f.read(reinterpret_cast<char*>(im.px.data()), static_cast<std::streamsize>(im.px.size()));
  if (static_cast<size_t>(f.gcount()) != im.px.size())
    throw TensorError("load_ppm: truncated pixel data in " + path);
  return im;
}

inline Image8 crop(const Image8& im, int top, int left, int size) {
  if (top < 0 || left < 0 || top + size > im.h || left + size > im.w)
    throw TensorError("crop: window " + std::to_string(size) + " at (" + std::to_string(top) +
                      "," + std::to_string(left) + ") exceeds image " + std::to_string(im.h) +
                      "x" + std::to_string(im.w));
  Image8 out = Image8::make(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = im.at(top + y, left + x, c);
  return out;
}

inline Image8 center_crop(const Image8& im, int size) {
  return crop(im, (im.h - size) / 2, (im.w - size) / 2, size);
}

inline Image8 random_crop(const Image8& im, int size, Rng& rng) {
  int top = rng.uniform_int(im.h - size + 1);
  int left = rng.uniform_int(im.w - size + 1);
  return crop(im, top, left, size);
}

// Brightness / contrast / saturation factors drawn from U(1-s, 1+s). Each factor
// has unit mean and acts linearly around a fixed anchor, so expected pixel values
// are preserved up to clamping at the [0,255] ends.
inline Image8 color_jitter(const Image8& im, double strength, Rng& rng) {
  double b = rng.uniform(1.0 - strength, 1.0 + strength);
  double c = rng.uniform(1.0 - strength, 1.0 + strength);
  double s = rng.uniform(1.0 - strength, 1.0 + strength);
  Image8 out = Image8::make(im.h, im.w);
  for (int y = 0; y < im.h; ++y) {
    for (int x = 0; x < im.w; ++x) {
      double r = im.at(y, x, 0), g = im.at(y, x, 1), bl = im.at(y, x, 2);
      double gray = (r + g + bl) / 3.0;
      double ch[3] = {r, g, bl};
      for (int k = 0; k < 3; ++k) {
        double v = gray + s * (ch[k] - gray);  // saturation about per-pixel gray
        v = 127.5 + c * (v - 127.5);           // contrast about mid-gray
        v *= b;                                // brightness
        out.at(y, x, k) = static_cast<uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

namespace detail {

inline double bilerp_px(const Image8& im, double sy, double sx, int c) {
  sy = std::clamp(sy, 0.0, static_cast<double>(im.h - 1));
  sx = std::clamp(sx, 0.0, static_cast<double>(im.w - 1));
  int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
  int y1 = std::min(y0 + 1, im.h - 1), x1 = std::min(x0 + 1, im.w - 1);
  double fy = sy - y0, fx = sx - x0;
  double v00 = im.at(y0, x0, c), v01 = im.at(y0, x1, c);
  double v10 = im.at(y1, x0, c), v11 = im.at(y1, x1, c);
  return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy;
}

}  // namespace detail

// Quad warp: each source corner is displaced by at most max_frac of the image
// width, output pixels sample the source through bilinear interpolation of the
// displaced quad. max_frac = 0 is the identity up to rounding.
inline Image8 warp_random(const Image8& im, double max_frac, Rng& rng) {
  double cx[4], cy[4];
  const double base_x[4] = {0.0, double(im.w - 1), 0.0, double(im.w - 1)};
  const double base_y[4] = {0.0, 0.0, double(im.h - 1), double(im.h - 1)};
  for (int k = 0; k < 4; ++k) {
    cx[k] = base_x[k] + rng.uniform(-max_frac, max_frac) * im.w;
    cy[k] = base_y[k] + rng.uniform(-max_frac, max_frac) * im.w;
  }
  Image8 out = Image8::make(im.h, im.w);
  for (int y = 0; y < im.h; ++y) {
    double v = im.h > 1 ? double(y) / (im.h - 1) : 0.0;
    for (int x = 0; x < im.w; ++x) {
      double u = im.w > 1 ? double(x) / (im.w - 1) : 0.0;
      double sx = (cx[0] * (1 - u) + cx[1] * u) * (1 - v) + (cx[2] * (1 - u) + cx[3] * u) * v;
      double sy = (cy[0] * (1 - u) + cy[1] * u) * (1 - v) + (cy[2] * (1 - u) + cy[3] * u) * v;
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = static_cast<uint8_t>(std::lround(detail::bilerp_px(im, sy, sx, c)));
    }
  }
  return out;
}

// Training-time view preparation: optional geometric warp + random crop
// (otherwise a deterministic center crop), then optional color jitter.
inline Image8 prepare_view(const Image8& im, int size, bool geo_aug, double jitter_strength,
                           Rng& rng) {
  Image8 view = geo_aug ? random_crop(warp_random(im, 0.10, rng), size, rng)
                        : center_crop(im, size);
  if (jitter_strength > 0.0) view = color_jitter(view, jitter_strength, rng);
  return view;
}

// [h,w,3] tensor with values in [0,1].
template <typename S>
TensorT<S> image_to_tensor(const Image8& im) {
  std::vector<S> v(im.px.size());
  for (size_t i = 0; i < im.px.size(); ++i) v[i] = static_cast<S>(im.px[i]) / static_cast<S>(255);
  return TensorT<S>::from_data({im.h, im.w, 3}, std::move(v));
}

}  // namespace cdp
