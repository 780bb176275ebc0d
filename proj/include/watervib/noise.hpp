#pragma once

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "watervib/autodiff.hpp"
#include "watervib/image.hpp"
#include "watervib/rng.hpp"

namespace watervib {

// Differentiable distortion channels. Each channel is expressed as tape ops
// with its random draws frozen as constants, so gradients flow to the input
// image; the plain-image path runs the same code on a scratch tape.

struct DistortionSpec {
  enum class Kind { identity, gaussian, dropout, cropout, crop, resize, jpeg, purify };

  Kind kind = Kind::identity;
  // the channel's ranged parameter, drawn uniformly from [lo, hi] per application:
  // gaussian sigma, dropout keep prob, crop/cropout kept-area ratio, resize scale
  double lo = 0.0;
  double hi = 0.0;
  int keep_y = 25;        // jpeg: retained zigzag DCT coefficients per 8x8 block
  double gamma = 0.5;     // purify: high-frequency erasure strength
  double sigma_p = 0.02;  // purify: texture-modulated noise level

  static DistortionSpec identity_spec() { return DistortionSpec{}; }
  static DistortionSpec gaussian_spec(double sig_lo, double sig_hi) {
    return DistortionSpec{Kind::gaussian, sig_lo, sig_hi};
  }
  static DistortionSpec dropout_spec(double keep_lo, double keep_hi) {
    return DistortionSpec{Kind::dropout, keep_lo, keep_hi};
  }
  static DistortionSpec cropout_spec(double r_lo, double r_hi) {
    return DistortionSpec{Kind::cropout, r_lo, r_hi};
  }
  static DistortionSpec crop_spec(double r_lo, double r_hi) {
    return DistortionSpec{Kind::crop, r_lo, r_hi};
  }
  static DistortionSpec resize_spec(double s_lo, double s_hi) {
    return DistortionSpec{Kind::resize, s_lo, s_hi};
  }
  static DistortionSpec jpeg_spec(int keep) {
    DistortionSpec d;
    d.kind = Kind::jpeg;
    d.keep_y = keep;
    return d;
  }
  static DistortionSpec purify_spec(double gamma, double sigma_p) {
    DistortionSpec d;
    d.kind = Kind::purify;
    d.gamma = gamma;
    d.sigma_p = sigma_p;
    return d;
  }

  std::string name() const;
};

inline void validate(const DistortionSpec& d) {
  using K = DistortionSpec::Kind;
  auto range_in = [&](double a, double b, const char* what) {
    if (!(a <= b)) throw std::invalid_argument(std::string(what) + ": lo > hi");
    if (!(a > 0.0 && b <= 1.0))
      throw std::invalid_argument(std::string(what) + ": range must lie in (0,1]");
  };
  switch (d.kind) {
    case K::identity:
      break;
    case K::gaussian:
      if (!(d.lo >= 0.0 && d.hi >= d.lo)) throw std::invalid_argument("gaussian: sigma >= 0");
      break;
    case K::dropout:
      range_in(d.lo, d.hi, "dropout keep");
      break;
    case K::cropout:
      range_in(d.lo, d.hi, "cropout ratio");
      break;
    case K::crop:
      range_in(d.lo, d.hi, "crop ratio");
      break;
    case K::resize:
      range_in(d.lo, d.hi, "resize scale");
      break;
    case K::jpeg:
      if (d.keep_y < 1 || d.keep_y > 64) throw std::invalid_argument("jpeg: keep_y in [1,64]");
      break;
    case K::purify:
      if (!(d.gamma >= 0.0 && d.gamma <= 1.0)) throw std::invalid_argument("purify: gamma in [0,1]");
      if (!(d.sigma_p >= 0.0)) throw std::invalid_argument("purify: sigma >= 0");
      break;
  }
}

namespace detail {
inline std::string fmt_range(double lo, double hi) {
  std::ostringstream os;
  os.precision(10);
  os << lo;
  if (hi != lo) os << ".." << hi;
  return os.str();
}
}  // namespace detail

inline std::string DistortionSpec::name() const {
  using K = Kind;
  switch (kind) {
    case K::identity: return "identity";
    case K::gaussian: return "gaussian(sigma=" + detail::fmt_range(lo, hi) + ")";
    case K::dropout: return "dropout(keep=" + detail::fmt_range(lo, hi) + ")";
    case K::cropout: return "cropout(ratio=" + detail::fmt_range(lo, hi) + ")";
    case K::crop: return "crop(ratio=" + detail::fmt_range(lo, hi) + ")";
    case K::resize: return "resize(scale=" + detail::fmt_range(lo, hi) + ")";
    case K::jpeg: return "jpeg(keep_y=" + std::to_string(keep_y) + ")";
    case K::purify: {
      std::ostringstream os;
      os.precision(10);
      os << "purify(gamma=" << gamma << ",sigma=" << sigma_p << ")";
      return os.str();
    }
  }
  return "?";
}

// Grammar:  kind | kind(key=value[, key=value])  with ranges written a..b.
// e.g.  dropout(keep=0.65..0.75)   jpeg(keep_y=25)   purify(gamma=0.5,sigma=0.02)
inline DistortionSpec parse_distortion(const std::string& text) {
  auto fail = [&](const std::string& why) {
    throw std::invalid_argument("distortion '" + text + "': " + why);
  };
  std::string s;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) s += c;
  std::string kind = s;
  std::string args;
  const auto paren = s.find('(');
  if (paren != std::string::npos) {
    if (s.back() != ')') fail("missing ')'");
    kind = s.substr(0, paren);
    args = s.substr(paren + 1, s.size() - paren - 2);
  }
  // key=value pairs
  std::vector<std::pair<std::string, std::string>> kv;
  std::istringstream as(args);
  std::string item;
  while (std::getline(as, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) fail("expected key=value, got '" + item + "'");
    kv.emplace_back(item.substr(0, eq), item.substr(eq + 1));
  }
  auto get = [&](const std::string& key) -> std::string {
    for (auto& [k, v] : kv)
      if (k == key) return v;
    fail("missing parameter '" + key + "'");
    return {};
  };
  auto parse_range = [&](const std::string& v, double& lo, double& hi) {
    const auto dots = v.find("..");
    try {
      if (dots == std::string::npos) {
        lo = hi = std::stod(v);
      } else {
        lo = std::stod(v.substr(0, dots));
        hi = std::stod(v.substr(dots + 2));
      }
    } catch (const std::exception&) {
      fail("bad numeric value '" + v + "'");
    }
  };

  DistortionSpec d;
  using K = DistortionSpec::Kind;
  if (kind == "identity") {
    d.kind = K::identity;
    if (!kv.empty()) fail("identity takes no parameters");
  } else if (kind == "gaussian") {
    d.kind = K::gaussian;
    parse_range(get("sigma"), d.lo, d.hi);
  } else if (kind == "dropout") {
    d.kind = K::dropout;
    parse_range(get("keep"), d.lo, d.hi);
  } else if (kind == "cropout") {
    d.kind = K::cropout;
    parse_range(get("ratio"), d.lo, d.hi);
  } else if (kind == "crop") {
    d.kind = K::crop;
    parse_range(get("ratio"), d.lo, d.hi);
  } else if (kind == "resize") {
    d.kind = K::resize;
    parse_range(get("scale"), d.lo, d.hi);
  } else if (kind == "jpeg") {
    d.kind = K::jpeg;
    double lo, hi;
    parse_range(get("keep_y"), lo, hi);
    if (lo != hi) fail("jpeg keep_y takes a single value");
    d.keep_y = static_cast<int>(lo);
  } else if (kind == "purify") {
    d.kind = K::purify;
    double lo, hi;
    parse_range(get("gamma"), lo, hi);
    if (lo != hi) fail("purify gamma takes a single value");
    d.gamma = lo;
    parse_range(get("sigma"), lo, hi);
    if (lo != hi) fail("purify sigma takes a single value");
    d.sigma_p = lo;
  } else {
    fail("unknown channel kind '" + kind + "'");
  }
  validate(d);
  return d;
}

/// The noise pool of the training table: crop [0.4,0.55], cropout [0.25,0.35],
/// dropout keep [0.65,0.75], resize [0.4,0.6], JPEG luma 25.
inline std::vector<DistortionSpec> default_train_pool() {
  return {DistortionSpec::crop_spec(0.4, 0.55), DistortionSpec::cropout_spec(0.25, 0.35),
          DistortionSpec::dropout_spec(0.65, 0.75), DistortionSpec::resize_spec(0.4, 0.6),
          DistortionSpec::jpeg_spec(25)};
}

struct AttackOutcome {
  CoverImage image;
  std::vector<double> s_atk;  // image - input, exact
};

namespace detail {

// Rectangle of the requested area fraction at a position drawn uniformly.
struct Rect {
  int y0, x0, h, w;
};

inline Rect draw_rect(int H, int W, double area_ratio, Rng& rng) {
  const double side = std::sqrt(area_ratio);
  int rh = static_cast<int>(std::lround(side * H));
  int rw = static_cast<int>(std::lround(side * W));
  rh = std::max(1, std::min(rh, H));
  rw = std::max(1, std::min(rw, W));
  const int y0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(H - rh + 1)));
  const int x0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(W - rw + 1)));
  return {y0, x0, rh, rw};
}

}  // namespace detail

/// Applies the channel to a batched image tensor [B,1,H,W] on the tape.
/// `cover` supplies the pixels mixed in by dropout/cropout and must match the
/// tensor's shape. Random draws are constants on the tape, so the result is
/// differentiable with respect to `img`.
inline ad::Value apply_on_tape(ad::Tape& t, const DistortionSpec& d, ad::Value img,
                               const std::vector<double>& cover, Rng& rng) {
  using K = DistortionSpec::Kind;
  validate(d);
  const ad::Shape s = t.shape(img);  // by value: the tape grows below
  if (s.size() != 4 || s[1] != 1) throw std::invalid_argument("apply: expects [B,1,H,W]");
  const int B = s[0], H = s[2], W = s[3];
  const std::size_t n = ad::numel(s);
  if ((d.kind == K::dropout || d.kind == K::cropout) && cover.size() != n)
    throw std::invalid_argument("apply: cover size mismatch");

  switch (d.kind) {
    case K::identity:
      return img;
    case K::gaussian: {
      const double sigma = rng.uniform(d.lo, d.hi);
      std::vector<double> noise(n);
      for (double& v : noise) v = sigma * rng.normal();
      return ad::clip(t, ad::add(t, img, t.constant(s, std::move(noise))), 0.0, 1.0);
    }
    case K::dropout: {
      const double keep = rng.uniform(d.lo, d.hi);
      std::vector<double> mask(n), rest(n);
      for (std::size_t i = 0; i < n; ++i) {
        const bool k = rng.uniform01() < keep;
        mask[i] = k ? 1.0 : 0.0;
        rest[i] = k ? 0.0 : cover[i];
      }
      return ad::add(t, ad::multiply(t, img, t.constant(s, std::move(mask))),
                     t.constant(s, std::move(rest)));
    }
    case K::cropout: {
      const double ratio = rng.uniform(d.lo, d.hi);
      std::vector<double> mask(n, 0.0), rest = cover;
      for (int b = 0; b < B; ++b) {
        const auto r = detail::draw_rect(H, W, ratio, rng);
        for (int y = r.y0; y < r.y0 + r.h; ++y)
          for (int x = r.x0; x < r.x0 + r.w; ++x) {
            const std::size_t ix = (static_cast<std::size_t>(b) * H + y) * W + x;
            mask[ix] = 1.0;
            rest[ix] = 0.0;
          }
      }
      return ad::add(t, ad::multiply(t, img, t.constant(s, std::move(mask))),
                     t.constant(s, std::move(rest)));
    }
    case K::crop: {
      const double ratio = rng.uniform(d.lo, d.hi);
      std::vector<double> mask(n, 0.0);
      for (int b = 0; b < B; ++b) {
        const auto r = detail::draw_rect(H, W, ratio, rng);
        for (int y = r.y0; y < r.y0 + r.h; ++y)
          for (int x = r.x0; x < r.x0 + r.w; ++x)
            mask[(static_cast<std::size_t>(b) * H + y) * W + x] = 1.0;
      }
      return ad::multiply(t, img, t.constant(s, std::move(mask)));
    }
    case K::resize: {
      const double sc = rng.uniform(d.lo, d.hi);
      const int ho = std::max(1, static_cast<int>(std::lround(sc * H)));
      const int wo = std::max(1, static_cast<int>(std::lround(sc * W)));
      return ad::resize_bilinear(t, ad::resize_bilinear(t, img, ho, wo), H, W);
    }
    case K::jpeg:
      return ad::clip(t, ad::dct8_mask(t, img, d.keep_y), 0.0, 1.0);
    case K::purify: {
      // s_atk = -gamma * highpass(x) + sigma_p * texture-modulated noise,
      // where highpass = x - blur(x). The noise term is modulated by the
      // cover's texture and enters as a tape constant, like every rng draw.
      if (cover.size() != n) throw std::invalid_argument("purify: cover size mismatch");
      ad::Value blurred = ad::gaussian_blur5(t, img);
      ad::Value hp = ad::subtract(t, img, blurred);
      ad::Value eroded = ad::add(t, img, ad::scale(t, hp, -d.gamma));
      if (d.sigma_p > 0.0) {
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        std::vector<double> tex(n), tmp;
        for (int b = 0; b < B; ++b) {
          std::vector<double> blur_c(plane, 0.0);
          ad::detail::blur5_plane(cover.data() + b * plane, blur_c.data(), H, W, false, tmp);
          for (std::size_t i = 0; i < plane; ++i) {
            const std::size_t ix = b * plane + i;
            tex[ix] = std::abs(cover[ix] - blur_c[i]);
          }
        }
        double mean_tex = 0.0;
        for (double v : tex) mean_tex += v;
        mean_tex /= static_cast<double>(n);
        std::vector<double> noise(n);
        for (std::size_t i = 0; i < n; ++i)
          noise[i] = d.sigma_p * (tex[i] / (mean_tex + 1e-12)) * rng.normal();
        eroded = ad::add(t, eroded, t.constant(s, std::move(noise)));
      }
      return ad::clip(t, eroded, 0.0, 1.0);
    }
  }
  throw std::logic_error("apply: unreachable");
}

/// Plain-image application: runs the tape code on constants and reports the
/// attacked image together with the exact residual s_atk = image - input.
inline AttackOutcome apply(const DistortionSpec& d, const CoverImage& image,
                           const CoverImage& cover, Rng& rng) {
  validate(image);
  if (image.h != cover.h || image.w != cover.w)
    throw std::invalid_argument("apply: image/cover size mismatch");
  ad::Tape t;
  ad::Value in = t.constant({1, 1, image.h, image.w}, image.px);
  ad::Value out = apply_on_tape(t, d, in, cover.px, rng);
  AttackOutcome res;
  res.image.h = image.h;
  res.image.w = image.w;
  res.image.px = t.data(out);
  res.s_atk.resize(image.px.size());
  for (std::size_t i = 0; i < image.px.size(); ++i)
    res.s_atk[i] = res.image.px[i] - image.px[i];
  return res;
}

/// Differentiable JPEG as a standalone op: per 8x8 block DCT, keep the first
/// keep_y zigzag coefficients, inverse DCT. Sides not divisible by 8 are
/// reflect-padded, transformed, and cropped back.
inline AttackOutcome jpeg_differentiable(const CoverImage& image, int keep_y, Rng& rng) {
  (void)rng;  // deterministic; parameter kept for interface uniformity
  if (keep_y < 1 || keep_y > 64) throw std::invalid_argument("jpeg: keep_y in [1,64]");
  validate(image);
  const int H = image.h, W = image.w;
  const int hp = (H + 7) / 8 * 8, wp = (W + 7) / 8 * 8;
  std::vector<double> padded(static_cast<std::size_t>(hp) * wp);
  for (int y = 0; y < hp; ++y)
    for (int x = 0; x < wp; ++x)
      padded[static_cast<std::size_t>(y) * wp + x] =
          image.px[static_cast<std::size_t>(ad::detail::reflect101(y, H)) * W +
                   ad::detail::reflect101(x, W)];
  std::vector<double> masked(padded.size());
  ad::detail::dct8_mask_plane(padded.data(), masked.data(), hp, wp, keep_y);
  AttackOutcome res;
  res.image.h = H;
  res.image.w = W;
  res.image.px.resize(image.px.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double v = masked[static_cast<std::size_t>(y) * wp + x];
      res.image.px[static_cast<std::size_t>(y) * W + x] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
  res.s_atk.resize(image.px.size());
  for (std::size_t i = 0; i < image.px.size(); ++i)
    res.s_atk[i] = res.image.px[i] - image.px[i];
  return res;
}

/// The generative-purification proxy as a standalone op.
inline AttackOutcome purify_proxy(const CoverImage& image, double gamma, double sigma_p,
                                  Rng& rng) {
  return apply(DistortionSpec::purify_spec(gamma, sigma_p), image, image, rng);
}

/// Plain highpass helper used by the analysis side: x - blur5(x).
inline std::vector<double> highpass(const CoverImage& image) {
  ad::Tape t;
  ad::Value in = t.constant({1, 1, image.h, image.w}, image.px);
  ad::Value hp = ad::subtract(t, in, ad::gaussian_blur5(t, in));
  return t.data(hp);
}

}  // namespace watervib
