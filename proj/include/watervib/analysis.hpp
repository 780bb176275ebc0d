#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "watervib/fft.hpp"
#include "watervib/image.hpp"
#include "watervib/model.hpp"

namespace watervib {

// Diagnostic measurements: radial spectral band energies, correlation
// statistics, gradient-projection interference, and logit-based watermark
// detection.

/// Radial band boundaries as normalized frequencies; defaults split the
/// Nyquist radius [0, 0.5] into thirds.
struct BandSpec {
  double low_cut = 1.0 / 6.0;
  double mid_cut = 1.0 / 3.0;
};

inline void validate(const BandSpec& b) {
  if (!(0.0 < b.low_cut && b.low_cut < b.mid_cut && b.mid_cut <= 0.5))
    throw std::invalid_argument("bands: need 0 < low_cut < mid_cut <= 0.5");
}

struct BandEnergyReport {
  double low = 0.0;
  double mid = 0.0;
  double high = 0.0;
};

/// Fraction of (non-DC) spectral energy per radial band. Bin (u,v) belongs to
/// the band of r = sqrt(u^2 + v^2) with u, v in [-0.5, 0.5).
inline BandEnergyReport band_energy(const std::vector<double>& signal, int h, int w,
                                    const BandSpec& bands = BandSpec{}) {
  validate(bands);
  if (h < 8 || w < 8) throw std::invalid_argument("band_energy: signal smaller than 8x8");
  if (signal.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("band_energy: size mismatch");
  for (double v : signal)
    if (!std::isfinite(v)) throw std::invalid_argument("band_energy: non-finite sample");
  const auto spec = dft2d(signal, h, w);
  double low = 0.0, mid = 0.0, high = 0.0;
  const double dc = std::norm(spec[0]);
  for (int ky = 0; ky < h; ++ky)
    for (int kx = 0; kx < w; ++kx) {
      if (ky == 0 && kx == 0) continue;  // DC excluded
      const double fy = dft_freq(ky, h);
      const double fx = dft_freq(kx, w);
      const double r = std::sqrt(fx * fx + fy * fy);
      const double e = std::norm(spec[static_cast<std::size_t>(ky) * w + kx]);
      if (r < bands.low_cut)
        low += e;
      else if (r < bands.mid_cut)
        mid += e;
      else
        high += e;
    }
  const double total = low + mid + high;
  // all-zero and constant signals leave only DFT roundoff outside DC
  if (total <= 0.0 || total <= 1e-20 * (total + dc))
    throw std::invalid_argument("band_energy: no non-DC energy to apportion");
  return {low / total, mid / total, high / total};
}

/// Total spectral energy (DC included) scaled to match the spatial
/// sum-of-squares; exposes the Parseval identity for testing.
inline double total_spectral_energy(const std::vector<double>& signal, int h, int w) {
  const auto spec = dft2d(signal, h, w);
  double e = 0.0;
  for (const auto& c : spec) e += std::norm(c);
  return e / (static_cast<double>(h) * w);
}

/// Standard centered Pearson correlation on flattened arrays.
inline double pearson_cc(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("pearson: need equal lengths >= 2");
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(a.size());
  double saa = 0.0, sbb = 0.0, sab = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    saa += da * da;
    sbb += db * db;
    sab += da * db;
  }
  if (saa <= 0.0 || sbb <= 0.0) throw std::invalid_argument("pearson: zero-variance input");
  return sab / std::sqrt(saa * sbb);
}

/// Spectral-magnitude variant (DC excluded): correlates |DFT(a)| with |DFT(b)|.
inline double pearson_cc_spectral(const std::vector<double>& a, const std::vector<double>& b,
                                  int h, int w) {
  if (a.size() != b.size() || a.size() != static_cast<std::size_t>(h) * w)
    throw std::invalid_argument("pearson_spectral: size mismatch");
  const auto fa = dft2d(a, h, w);
  const auto fb = dft2d(b, h, w);
  std::vector<double> mag_a, mag_b;
  mag_a.reserve(fa.size() - 1);
  mag_b.reserve(fb.size() - 1);
  for (std::size_t i = 1; i < fa.size(); ++i) {  // index 0 is DC
    mag_a.push_back(std::abs(fa[i]));
    mag_b.push_back(std::abs(fb[i]));
  }
  return pearson_cc(mag_a, mag_b);
}

/// Scalar projection of s onto the unit gradient direction: <s, g> / ||g||.
inline double gradient_projection(const std::vector<double>& s, const std::vector<double>& grad) {
  if (s.size() != grad.size()) throw std::invalid_argument("projection: length mismatch");
  double gg = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    gg += grad[i] * grad[i];
    sg += s[i] * grad[i];
  }
  if (gg <= 0.0) throw std::invalid_argument("projection: zero gradient");
  return sg / std::sqrt(gg);
}

struct InterferenceReport {
  double proj_wm = 0.0;         // signed projection of s_wm on the unit gradient
  double proj_atk = 0.0;        // signed projection of s_atk on the unit gradient
  double rho = 0.0;             // |proj_atk| / |proj_wm|
  double cos_wm_atk = 0.0;      // cosine between s_wm and s_atk
  double eta = 0.0;             // ||s_atk|| / ||s_wm||
  double effective_proj = 0.0;  // eta * |cos|
};

inline InterferenceReport interference_ratio(const std::vector<double>& s_atk,
                                             const std::vector<double>& s_wm,
                                             const std::vector<double>& grad) {
  if (s_atk.size() != s_wm.size() || s_wm.size() != grad.size())
    throw std::invalid_argument("interference: length mismatch");
  InterferenceReport r;
  r.proj_wm = gradient_projection(s_wm, grad);
  r.proj_atk = gradient_projection(s_atk, grad);
  if (r.proj_wm == 0.0)
    throw std::invalid_argument("interference: watermark projection is zero");
  r.rho = std::abs(r.proj_atk) / std::abs(r.proj_wm);
  double naa = 0.0, nww = 0.0, naw = 0.0;
  for (std::size_t i = 0; i < s_atk.size(); ++i) {
    naa += s_atk[i] * s_atk[i];
    nww += s_wm[i] * s_wm[i];
    naw += s_atk[i] * s_wm[i];
  }
  if (nww <= 0.0) throw std::invalid_argument("interference: zero watermark residual");
  r.eta = std::sqrt(naa / nww);
  r.cos_wm_atk = naa > 0.0 ? naw / std::sqrt(naa * nww) : 0.0;
  r.effective_proj = r.eta * std::abs(r.cos_wm_atk);
  return r;
}

/// Gradient of the decoding BCE loss with respect to the input image, along
/// the deterministic inference path (U = mu).
inline std::vector<double> decoding_gradient(const WatermarkModel& m, const CoverImage& image,
                                             const Message& msg) {
  if (msg.size() != m.msg_bits) throw std::invalid_argument("decoding_gradient: bad message");
  ad::Tape t;
  BoundModel b = bind_model(t, m, false);
  ad::Value img = t.leaf({1, 1, m.img_h, m.img_w}, image.px, true);
  ad::Value z = extract_on_tape(t, m, b, img);
  VIBHeads heads = vib_heads_on_tape(t, m, b, z);
  ad::Value logits = decode_head_on_tape(t, m, b, heads.mu);
  std::vector<double> targets(msg.bits.begin(), msg.bits.end());
  ad::Value loss = ad::bce_with_logits(t, logits, targets);
  t.backward(loss);
  return t.grad(img);
}

/// Average Logits score: AL = mean |l_i|.
inline double average_logits(const std::vector<double>& logits) {
  if (logits.empty()) throw std::invalid_argument("average_logits: empty");
  double s = 0.0;
  for (double v : logits) s += std::abs(v);
  return s / static_cast<double>(logits.size());
}

struct DetectionReport {
  double threshold = 0.0;
  double fp_rate = 0.0;
  double fn_rate = 0.0;
  double fn_rate_noised = 0.0;
  double kl_div_logit_dists = 0.0;  // nats, watermarked vs clean AL histograms
};

struct ThresholdPolicy {
  bool fixed = false;
  double fixed_value = 0.0;

  static ThresholdPolicy calibrated() { return {}; }
  static ThresholdPolicy at(double v) { return {true, v}; }
};

namespace detail {

/// Midpoint of clean-max and watermarked-min when separable on the
/// calibration half; otherwise the equal-error-rate point.
inline double calibrate_threshold(const std::vector<double>& al_clean,
                                  const std::vector<double>& al_wm) {
  const std::size_t nc = std::max<std::size_t>(1, al_clean.size() / 2);
  const std::size_t nw = std::max<std::size_t>(1, al_wm.size() / 2);
  std::vector<double> cal_clean(al_clean.begin(), al_clean.begin() + nc);
  std::vector<double> cal_wm(al_wm.begin(), al_wm.begin() + nw);
  const double cmax = *std::max_element(cal_clean.begin(), cal_clean.end());
  const double wmin = *std::min_element(cal_wm.begin(), cal_wm.end());
  if (cmax < wmin) return 0.5 * (cmax + wmin);
  // overlapping: sweep candidate thresholds for the equal-error-rate point
  std::vector<double> cand;
  cand.insert(cand.end(), cal_clean.begin(), cal_clean.end());
  cand.insert(cand.end(), cal_wm.begin(), cal_wm.end());
  std::sort(cand.begin(), cand.end());
  double best_t = cand.front(), best_gap = 1e300, best_sum = 1e300;
  for (double th : cand) {
    double fp = 0.0, fn = 0.0;
    for (double v : cal_clean) fp += v > th;
    for (double v : cal_wm) fn += v <= th;
    fp /= static_cast<double>(cal_clean.size());
    fn /= static_cast<double>(cal_wm.size());
    const double gap = std::abs(fp - fn);
    if (gap < best_gap - 1e-12 ||
        (std::abs(gap - best_gap) <= 1e-12 && fp + fn < best_sum - 1e-12)) {
      best_gap = gap;
      best_sum = fp + fn;
      best_t = th;
    }
  }
  return best_t;
}

/// KL of 32-bin histograms with add-one smoothing over the pooled range.
inline double histogram_kl(const std::vector<double>& p_samples,
                           const std::vector<double>& q_samples, int bins = 32) {
  double lo = 1e300, hi = -1e300;
  for (double v : p_samples) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : q_samples) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (!(hi > lo)) hi = lo + 1.0;
  std::vector<double> hp(bins, 1.0), hq(bins, 1.0);  // add-one smoothing
  auto bin_of = [&](double v) {
    int b = static_cast<int>((v - lo) / (hi - lo) * bins);
    return std::min(std::max(b, 0), bins - 1);
  };
  for (double v : p_samples) hp[bin_of(v)] += 1.0;
  for (double v : q_samples) hq[bin_of(v)] += 1.0;
  double sp = 0.0, sq = 0.0;
  for (int i = 0; i < bins; ++i) {
    sp += hp[i];
    sq += hq[i];
  }
  double kl = 0.0;
  for (int i = 0; i < bins; ++i) kl += (hp[i] / sp) * std::log((hp[i] / sp) / (hq[i] / sq));
  return kl;
}

}  // namespace detail

/// AL-threshold detection metrics: FP on clean, FN on watermarked, FN on the
/// Gaussian-noised watermarked set, and the histogram KL between the
/// watermarked and clean AL distributions. Decision rule: AL > threshold.
inline DetectionReport detection_eval(const WatermarkModel& m,
                                      const std::vector<CoverImage>& clean_set,
                                      const std::vector<CoverImage>& wm_set,
                                      const std::vector<CoverImage>& noised_wm_set,
                                      const ThresholdPolicy& policy = ThresholdPolicy{}) {
  if (clean_set.empty() || wm_set.empty() || noised_wm_set.empty())
    throw std::invalid_argument("detection_eval: empty image set");
  auto als = [&](const std::vector<CoverImage>& set) {
    std::vector<double> out;
    out.reserve(set.size());
    for (const auto& im : set) out.push_back(average_logits(decode(m, im).logits));
    return out;
  };
  const std::vector<double> al_clean = als(clean_set);
  const std::vector<double> al_wm = als(wm_set);
  const std::vector<double> al_noised = als(noised_wm_set);

  DetectionReport r;
  r.threshold = policy.fixed ? policy.fixed_value
                             : detail::calibrate_threshold(al_clean, al_wm);
  double fp = 0.0, fn = 0.0, fnn = 0.0;
  for (double v : al_clean) fp += v > r.threshold;
  for (double v : al_wm) fn += v <= r.threshold;
  for (double v : al_noised) fnn += v <= r.threshold;
  r.fp_rate = fp / static_cast<double>(al_clean.size());
  r.fn_rate = fn / static_cast<double>(al_wm.size());
  r.fn_rate_noised = fnn / static_cast<double>(al_noised.size());
  r.kl_div_logit_dists = detail::histogram_kl(al_wm, al_clean);
  return r;
}

}  // namespace watervib
