#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsbench/capsule.hpp"

namespace capsbench {

// Forward-pass attention maps built from routing traces, plus the
// first-conv channel-sum view, rendered as colormapped overlays.

struct ActivationMap {
  int h = 0, w = 0;
  std::vector<float> values;  // [0,1]; max is 1 unless the map is all zero

  float at(int y, int x) const { return values[static_cast<size_t>(y) * w + x]; }
};

struct ProbamGeometry {
  int channels = 64;
  int h = 0, w = 0;       // feature-map size
  int caps_dim = 32;      // low-level capsule dimension
  int slots() const { return channels / caps_dim; }
  int capsule_count() const { return slots() * h * w; }
};

// Per low-level capsule weight w_i = sum_j c_ij * |v_j|, mapped back to its
// spatial site through the inverse of the channel-major reshape and summed
// over slots. The result is non-negative; it is normalized by its maximum
// (an all-zero map stays zero).
inline ActivationMap probam_map(const float* coupling, const float* class_lengths, int n, int m,
                                const ProbamGeometry& geo) {
  if (n != geo.capsule_count())
    throw std::invalid_argument("probam_map: trace has " + std::to_string(n) +
                                " capsules, geometry expects " +
                                std::to_string(geo.capsule_count()));
  ActivationMap map;
  map.h = geo.h;
  map.w = geo.w;
  map.values.assign(static_cast<size_t>(geo.h) * geo.w, 0.f);
  const int hw = geo.h * geo.w;
  for (int i = 0; i < n; ++i) {
    float wi = 0.f;
    for (int j = 0; j < m; ++j) wi += coupling[static_cast<size_t>(i) * m + j] * class_lengths[j];
    map.values[i % hw] += wi;  // site index; slot = i / hw
  }
  float mx = 0.f;
  for (float v : map.values) mx = std::max(mx, v);
  if (mx > 0.f)
    for (float& v : map.values) v /= mx;
  return map;
}

// Channel sum of a feature map followed by min-max normalization; a constant
// (or empty-range) sum maps to all zeros.
inline ActivationMap conv1_map(const float* features, int c, int h, int w) {
  ActivationMap map;
  map.h = h;
  map.w = w;
  map.values.assign(static_cast<size_t>(h) * w, 0.f);
  const size_t hw = static_cast<size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch)
    for (size_t p = 0; p < hw; ++p) map.values[p] += features[ch * hw + p];
  float lo = map.values[0], hi = map.values[0];
  for (float v : map.values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi > lo)
    for (float& v : map.values) v = (v - lo) / (hi - lo);
  else
    std::fill(map.values.begin(), map.values.end(), 0.f);
  return map;
}

// Bilinear upsampling without corner alignment (sample centers at
// (i + 0.5) * scale - 0.5, clamped).
inline ActivationMap resize_bilinear(const ActivationMap& src, int th, int tw) {
  if (th < src.h || tw < src.w)
    throw std::invalid_argument("resize_bilinear: target smaller than source");
  if (th == src.h && tw == src.w) return src;
  ActivationMap out;
  out.h = th;
  out.w = tw;
  out.values.resize(static_cast<size_t>(th) * tw);
  const double sy = static_cast<double>(src.h) / th;
  const double sx = static_cast<double>(src.w) / tw;
  for (int y = 0; y < th; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    fy = std::clamp(fy, 0.0, static_cast<double>(src.h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < tw; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      fx = std::clamp(fx, 0.0, static_cast<double>(src.w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.w - 1);
      const double wx = fx - x0;
      const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0) + wx * src.at(y0, x1)) +
                       wy * ((1 - wx) * src.at(y1, x0) + wx * src.at(y1, x1));
      out.values[static_cast<size_t>(y) * tw + x] = static_cast<float>(v);
    }
  }
  return out;
}

struct RgbImage {
  int h = 0, w = 0;
  std::vector<uint8_t> rgb;  // h*w*3

  bool operator==(const RgbImage& o) const { return h == o.h && w == o.w && rgb == o.rgb; }
};

// Blue -> green -> red heatmap color. The three ramps are the classic
// piecewise-linear lookup r=clamp(1.5-|4t-3|), g=clamp(1.5-|4t-2|),
// b=clamp(1.5-|4t-1|) sampled at t in [0,1].
inline void heat_color(float t, uint8_t* rgb) {
  auto ramp = [](double v) { return std::clamp(v, 0.0, 1.0); };
  rgb[0] = static_cast<uint8_t>(std::lround(255.0 * ramp(1.5 - std::fabs(4.0 * t - 3.0))));
  rgb[1] = static_cast<uint8_t>(std::lround(255.0 * ramp(1.5 - std::fabs(4.0 * t - 2.0))));
  rgb[2] = static_cast<uint8_t>(std::lround(255.0 * ramp(1.5 - std::fabs(4.0 * t - 1.0))));
}

// Alpha-blends the colormapped activation onto the input image. `image` is
// [0,1] float, channel-planar with 1 (replicated) or 3 channels, same h*w as
// the map.
inline RgbImage overlay(const ActivationMap& map, const float* image, int channels, float alpha) {
  RgbImage out;
  out.h = map.h;
  out.w = map.w;
  out.rgb.resize(static_cast<size_t>(map.h) * map.w * 3);
  const size_t hw = static_cast<size_t>(map.h) * map.w;
  for (size_t p = 0; p < hw; ++p) {
    uint8_t heat[3];
    heat_color(map.values[p], heat);
    for (int c = 0; c < 3; ++c) {
      const float img = channels == 3 ? image[static_cast<size_t>(c) * hw + p] : image[p];
      const float v = (1.f - alpha) * std::clamp(img, 0.f, 1.f) * 255.f + alpha * heat[c];
      out.rgb[p * 3 + c] = static_cast<uint8_t>(std::lround(std::clamp(v, 0.f, 255.f)));
    }
  }
  return out;
}

// Lossless binary PPM (P6).
inline void write_ppm(const RgbImage& img, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.rgb.data()),
           static_cast<std::streamsize>(img.rgb.size()));
  if (!os) throw std::runtime_error(path + ": write failed");
}

inline RgbImage read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(path + ": cannot open");
  std::string magic;
  is >> magic;
  if (magic != "P6") throw std::runtime_error(path + ": not a P6 ppm");
  RgbImage img;
  int maxval = 0;
  is >> img.w >> img.h >> maxval;
  if (maxval != 255) throw std::runtime_error(path + ": unsupported maxval");
  is.get();  // single whitespace after header
  img.rgb.resize(static_cast<size_t>(img.w) * img.h * 3);
  is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (static_cast<size_t>(is.gcount()) != img.rgb.size())
    throw std::runtime_error(path + ": truncated pixel data");
  return img;
}

}  // namespace capsbench
