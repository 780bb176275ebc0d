#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "watervib/fft.hpp"
#include "watervib/rng.hpp"

namespace watervib {

/// Grayscale image with pixel values in [0,1], row-major.
struct CoverImage {
  int h = 0;
  int w = 0;
  std::vector<double> px;

  double at(int y, int x) const { return px[static_cast<std::size_t>(y) * w + x]; }
  double& at(int y, int x) { return px[static_cast<std::size_t>(y) * w + x]; }
};

inline void validate(const CoverImage& im) {
  if (im.h < 1 || im.w < 1 || im.px.size() != static_cast<std::size_t>(im.h) * im.w)
    throw std::invalid_argument("image: size mismatch");
  for (double v : im.px)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("image: pixel outside [0,1]");
}

inline double mse(const CoverImage& a, const CoverImage& b) {
  if (a.h != b.h || a.w != b.w) throw std::invalid_argument("mse: image size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    const double d = a.px[i] - b.px[i];
    s += d * d;
  }
  return s / static_cast<double>(a.px.size());
}

/// PSNR in dB with peak 1.0; +inf for identical images.
inline double psnr(const CoverImage& a, const CoverImage& b) {
  const double m = mse(a, b);
  if (m == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / m);
}

// --- binary PGM (P5), maxval 65535, big-endian, row-major -------------------

inline void write_pgm(std::ostream& os, const CoverImage& im) {
  validate(im);
  os << "P5\n" << im.w << ' ' << im.h << "\n65535\n";
  for (double v : im.px) {
    const double clamped = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    const auto q = static_cast<std::uint16_t>(std::lround(clamped * 65535.0));
    const unsigned char hi = static_cast<unsigned char>(q >> 8);
    const unsigned char lo = static_cast<unsigned char>(q & 0xff);
    os.put(static_cast<char>(hi));
    os.put(static_cast<char>(lo));
  }
}

inline void write_pgm_file(const std::string& path, const CoverImage& im) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_pgm(f, im);
}

namespace detail {
inline int pgm_token(std::istream& is) {
  // skips whitespace and '#' comment lines
  int c = is.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#')
      while (c != EOF && c != '\n') c = is.get();
    c = is.get();
  }
  int v = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = is.get();
  }
  if (!any) throw std::runtime_error("pgm: malformed header");
  return v;
}
}  // namespace detail

inline CoverImage read_pgm(std::istream& is) {
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '5') throw std::runtime_error("pgm: expected binary P5");
  const int w = detail::pgm_token(is);
  const int h = detail::pgm_token(is);
  const int maxval = detail::pgm_token(is);
  if (maxval != 65535) throw std::runtime_error("pgm: expected maxval 65535");
  CoverImage im;
  im.h = h;
  im.w = w;
  im.px.resize(static_cast<std::size_t>(h) * w);
  for (double& v : im.px) {
    const int hi = is.get();
    const int lo = is.get();
    if (hi == EOF || lo == EOF) throw std::runtime_error("pgm: truncated pixel data");
    v = static_cast<double>((hi << 8) | lo) / 65535.0;
  }
  return im;
}

inline CoverImage read_pgm_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open: " + path);
  return read_pgm(f);
}

// --- synthetic covers ---------------------------------------------------------

inline constexpr double kCoverSpectralExponent = 2.5;  // power ~ 1/f^2.5
inline constexpr double kCoverStd = 0.2;

/// Gaussian random field with a 1/f^2.5 power spectrum, normalized to mean 0.5
/// and std 0.2 then clamped to [0,1]. Mimics the low-frequency dominance of
/// natural images at 32x32 scale.
inline CoverImage generate_cover(int h, int w, Rng& rng) {
  std::vector<double> noise(static_cast<std::size_t>(h) * w);
  for (double& v : noise) v = rng.normal();
  auto spec = dft2d(noise, h, w);
  for (int ky = 0; ky < h; ++ky)
    for (int kx = 0; kx < w; ++kx) {
      const double fy = dft_freq(ky, h);
      const double fx = dft_freq(kx, w);
      const double r = std::sqrt(fx * fx + fy * fy);
      const double amp = r > 0.0 ? std::pow(r, -kCoverSpectralExponent / 2.0) : 0.0;
      spec[static_cast<std::size_t>(ky) * w + kx] *= amp;
    }
  std::vector<double> field = idft2d_real(spec, h, w);
  double mean = 0.0;
  for (double v : field) mean += v;
  mean /= static_cast<double>(field.size());
  double var = 0.0;
  for (double v : field) var += (v - mean) * (v - mean);
  var /= static_cast<double>(field.size());
  const double sd = std::sqrt(var);
  CoverImage im;
  im.h = h;
  im.w = w;
  im.px.resize(field.size());
  for (std::size_t i = 0; i < field.size(); ++i) {
    const double v = 0.5 + kCoverStd * (field[i] - mean) / (sd > 0.0 ? sd : 1.0);
    im.px[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  }
  return im;
}

inline std::vector<CoverImage> generate_covers(int count, int h, int w, std::uint64_t seed) {
  Rng rng(stream_seed(seed, "covers"));
  std::vector<CoverImage> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_cover(h, w, rng));
  return out;
}

}  // namespace watervib
