#pragma once

#include <complex>
#include <stdexcept>
#include <vector>

namespace watervib {

// Small dense 2-D DFT via row-column transforms with precomputed twiddle
// matrices. Unnormalized forward transform; cost O(H*W*(H+W)), plenty for the
// desk-scale images used here.

namespace detail {

inline std::vector<std::complex<double>> twiddle_matrix(int n, double sign) {
  std::vector<std::complex<double>> w(static_cast<std::size_t>(n) * n);
  const double step = sign * 2.0 * 3.14159265358979323846 / n;
  for (int j = 0; j < n; ++j)
    for (int k = 0; k < n; ++k) {
      const double ph = step * ((static_cast<long long>(j) * k) % n);
      w[static_cast<std::size_t>(j) * n + k] = {std::cos(ph), std::sin(ph)};
    }
  return w;
}

}  // namespace detail

/// Unnormalized 2-D DFT of a real H x W signal (row-major).
inline std::vector<std::complex<double>> dft2d(const std::vector<double>& x, int h, int w) {
  if (x.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("dft2d: size mismatch");
  const auto wh = detail::twiddle_matrix(h, -1.0);
  const auto ww = detail::twiddle_matrix(w, -1.0);
  // rows first
  std::vector<std::complex<double>> rows(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int k = 0; k < w; ++k) {
      std::complex<double> s{0.0, 0.0};
      for (int xx = 0; xx < w; ++xx)
        s += x[static_cast<std::size_t>(y) * w + xx] * ww[static_cast<std::size_t>(k) * w + xx];
      rows[static_cast<std::size_t>(y) * w + k] = s;
    }
  std::vector<std::complex<double>> out(static_cast<std::size_t>(h) * w);
  for (int k = 0; k < h; ++k)
    for (int xx = 0; xx < w; ++xx) {
      std::complex<double> s{0.0, 0.0};
      for (int y = 0; y < h; ++y)
        s += rows[static_cast<std::size_t>(y) * w + xx] * wh[static_cast<std::size_t>(k) * h + y];
      out[static_cast<std::size_t>(k) * w + xx] = s;
    }
  return out;
}

/// Real part of the unnormalized inverse 2-D DFT (divides by H*W).
inline std::vector<double> idft2d_real(const std::vector<std::complex<double>>& f, int h, int w) {
  if (f.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("idft2d: size mismatch");
  const auto wh = detail::twiddle_matrix(h, 1.0);
  const auto ww = detail::twiddle_matrix(w, 1.0);
  std::vector<std::complex<double>> rows(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y)
    for (int k = 0; k < w; ++k) {
      std::complex<double> s{0.0, 0.0};
      for (int xx = 0; xx < w; ++xx)
        s += f[static_cast<std::size_t>(y) * w + xx] * ww[static_cast<std::size_t>(k) * w + xx];
      rows[static_cast<std::size_t>(y) * w + k] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  const double inv = 1.0 / (static_cast<double>(h) * w);
  for (int k = 0; k < h; ++k)
    for (int xx = 0; xx < w; ++xx) {
      std::complex<double> s{0.0, 0.0};
      for (int y = 0; y < h; ++y)
        s += rows[static_cast<std::size_t>(y) * w + xx] * wh[static_cast<std::size_t>(k) * h + y];
      out[static_cast<std::size_t>(k) * w + xx] = s.real() * inv;
    }
  return out;
}

/// Signed normalized frequency of DFT bin k of n: k/n mapped into [-0.5, 0.5).
inline double dft_freq(int k, int n) {
  const int kk = k <= n / 2 ? k : k - n;
  return static_cast<double>(kk) / n;
}

}  // namespace watervib
