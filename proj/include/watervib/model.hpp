#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "watervib/autodiff.hpp"
#include "watervib/image.hpp"
#include "watervib/noise.hpp"
#include "watervib/rng.hpp"

namespace watervib {

// The toy-scale WaterVIB model: a conv encoder embeds an L-bit message into a
// grayscale cover as an additive residual; a conv extractor plus a stochastic
// VIB bottleneck (mu/log-variance heads, reparameterized sample) and a linear
// readout recover the bits. Training mode injects latent noise; inference is
// the deterministic mapping U = mu(Z).

struct Message {
  std::vector<std::uint8_t> bits;  // 0/1

  int size() const { return static_cast<int>(bits.size()); }
};

inline Message random_message(int length, Rng& rng) {
  Message m;
  m.bits.resize(length);
  for (auto& b : m.bits) b = static_cast<std::uint8_t>(rng.next_u64() & 1u);
  return m;
}

inline double bit_error_rate(const Message& a, const Message& b) {
  if (a.size() != b.size()) throw std::invalid_argument("ber: length mismatch");
  int errs = 0;
  for (int i = 0; i < a.size(); ++i) errs += a.bits[i] != b.bits[i];
  return static_cast<double>(errs) / a.size();
}

struct VIBConfig {
  double alpha = 0.007;       // latent noise scale
  double beta = 1.5e-4;       // bottleneck weight
  int latent_dim = 32;        // D
  double logvar_clip = 10.0;  // log-variance clipped to [-clip, clip]
  bool enabled = true;        // false reproduces the beta = 0 baseline
};

inline void validate(const VIBConfig& v) {
  if (!(v.alpha >= 0.0)) throw std::invalid_argument("vib: alpha >= 0");
  if (!(v.beta >= 0.0)) throw std::invalid_argument("vib: beta >= 0");
  if (v.latent_dim < 1) throw std::invalid_argument("vib: latent_dim >= 1");
  if (!(v.logvar_clip > 0.0)) throw std::invalid_argument("vib: logvar_clip > 0");
}

inline constexpr int kEncChannels = 16;
inline constexpr int kExtChannels = 16;
inline constexpr int kFeatureDim = 4 * kExtChannels;  // quadrant-pooled

struct WatermarkModel {
  int msg_bits = 16;
  int img_h = 32;
  int img_w = 32;
  VIBConfig vib;
  std::uint64_t init_seed = 0;

  struct Param {
    std::string name;
    ad::Shape shape;
    std::vector<double> data;
  };
  std::vector<Param> params;

  // fixed parameter order; indices into `params`
  enum Ix {
    kEncW1, kEncB1, kEncW2, kEncB2, kEncW3, kEncB3,
    kExtW1, kExtB1, kExtW2, kExtB2, kExtW3, kExtB3,
    kMuW, kMuB, kSigW, kSigB, kDecW, kDecB,
    kParamCount
  };

  std::size_t n_weights() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.data.size();
    return n;
  }
};

namespace detail {

inline WatermarkModel::Param make_param(const std::string& name, ad::Shape shape,
                                        double init_std, Rng& rng) {
  WatermarkModel::Param p;
  p.name = name;
  p.shape = std::move(shape);
  p.data.resize(ad::numel(p.shape));
  if (init_std > 0.0)
    for (double& v : p.data) v = init_std * rng.normal();
  return p;
}

}  // namespace detail

/// Fresh model with He-style conv init and zero biases, seeded from the
/// "weights" stream of `seed`. The final encoder conv is down-scaled so
/// training starts near the identity embedding.
inline WatermarkModel init_model(int msg_bits, int img_h, int img_w, const VIBConfig& vib,
                                 std::uint64_t seed) {
  validate(vib);
  if (msg_bits < 1) throw std::invalid_argument("model: msg_bits >= 1");
  if (img_h < 8 || img_w < 8 || img_h % 8 || img_w % 8)
    throw std::invalid_argument("model: image sides must be multiples of 8");
  WatermarkModel m;
  m.msg_bits = msg_bits;
  m.img_h = img_h;
  m.img_w = img_w;
  m.vib = vib;
  m.init_seed = seed;
  Rng rng(stream_seed(seed, "weights"));
  const int ein = 1 + msg_bits;
  auto he = [](int fan_in) { return std::sqrt(2.0 / fan_in); };
  const int D = vib.latent_dim;
  m.params.resize(WatermarkModel::kParamCount);
  using P = WatermarkModel;
  m.params[P::kEncW1] = detail::make_param("enc.conv1.w", {kEncChannels, ein, 3, 3}, he(ein * 9), rng);
  m.params[P::kEncB1] = detail::make_param("enc.conv1.b", {kEncChannels}, 0.0, rng);
  m.params[P::kEncW2] = detail::make_param("enc.conv2.w", {kEncChannels, kEncChannels, 3, 3},
                                           he(kEncChannels * 9), rng);
  m.params[P::kEncB2] = detail::make_param("enc.conv2.b", {kEncChannels}, 0.0, rng);
  m.params[P::kEncW3] = detail::make_param("enc.conv3.w", {1, kEncChannels, 3, 3},
                                           0.1 * he(kEncChannels * 9), rng);
  m.params[P::kEncB3] = detail::make_param("enc.conv3.b", {1}, 0.0, rng);
  m.params[P::kExtW1] = detail::make_param("ext.conv1.w", {kExtChannels, 1, 3, 3}, he(9), rng);
  m.params[P::kExtB1] = detail::make_param("ext.conv1.b", {kExtChannels}, 0.0, rng);
  m.params[P::kExtW2] = detail::make_param("ext.conv2.w", {kExtChannels, kExtChannels, 3, 3},
                                           he(kExtChannels * 9), rng);
  m.params[P::kExtB2] = detail::make_param("ext.conv2.b", {kExtChannels}, 0.0, rng);
  m.params[P::kExtW3] = detail::make_param("ext.conv3.w", {kExtChannels, kExtChannels, 3, 3},
                                           he(kExtChannels * 9), rng);
  m.params[P::kExtB3] = detail::make_param("ext.conv3.b", {kExtChannels}, 0.0, rng);
  m.params[P::kMuW] = detail::make_param("head.mu.w", {kFeatureDim, D},
                                         std::sqrt(1.0 / kFeatureDim), rng);
  m.params[P::kMuB] = detail::make_param("head.mu.b", {D}, 0.0, rng);
  m.params[P::kSigW] = detail::make_param("head.sigma.w", {kFeatureDim, D},
                                          std::sqrt(1.0 / kFeatureDim), rng);
  m.params[P::kSigB] = detail::make_param("head.sigma.b", {D}, 0.0, rng);
  m.params[P::kDecW] = detail::make_param("head.dec.w", {D, msg_bits}, std::sqrt(1.0 / D), rng);
  m.params[P::kDecB] = detail::make_param("head.dec.b", {msg_bits}, 0.0, rng);
  return m;
}

/// The model's parameters bound to a tape as leaves.
struct BoundModel {
  std::vector<ad::Value> v;  // indexed by WatermarkModel::Ix
};

inline BoundModel bind_model(ad::Tape& t, const WatermarkModel& m, bool requires_grad) {
  BoundModel b;
  b.v.reserve(m.params.size());
  for (const auto& p : m.params) b.v.push_back(t.leaf(p.shape, p.data, requires_grad));
  return b;
}

// --- tape-level forward pieces ------------------------------------------------

/// Packs covers and broadcast message planes into the encoder input
/// [B, 1+L, H, W]: plane 0 is the cover, planes 1..L are constant bit planes.
inline std::vector<double> encoder_input_data(const WatermarkModel& m,
                                              const std::vector<const CoverImage*>& covers,
                                              const std::vector<const Message*>& msgs) {
  const int B = static_cast<int>(covers.size());
  const int L = m.msg_bits;
  const std::size_t plane = static_cast<std::size_t>(m.img_h) * m.img_w;
  std::vector<double> out(static_cast<std::size_t>(B) * (1 + L) * plane);
  for (int b = 0; b < B; ++b) {
    if (covers[b]->h != m.img_h || covers[b]->w != m.img_w)
      throw std::invalid_argument("embed: cover size mismatch");
    if (msgs[b]->size() != L) throw std::invalid_argument("embed: message length mismatch");
    double* dst = out.data() + static_cast<std::size_t>(b) * (1 + L) * plane;
    std::copy(covers[b]->px.begin(), covers[b]->px.end(), dst);
    for (int l = 0; l < L; ++l) {
      const double bit = msgs[b]->bits[l] ? 1.0 : -1.0;  // centered bit planes
      double* pp = dst + (1 + static_cast<std::size_t>(l)) * plane;
      for (std::size_t i = 0; i < plane; ++i) pp[i] = bit;
    }
  }
  return out;
}

/// Encoder: residual from (cover, message planes); x_wm = clip(x + residual).
inline ad::Value embed_on_tape(ad::Tape& t, const WatermarkModel& m, const BoundModel& b,
                               ad::Value enc_in, ad::Value cover) {
  using P = WatermarkModel;
  ad::Value h = ad::relu(t, ad::conv2d(t, enc_in, b.v[P::kEncW1], b.v[P::kEncB1]));
  h = ad::relu(t, ad::conv2d(t, h, b.v[P::kEncW2], b.v[P::kEncB2]));
  ad::Value residual = ad::conv2d(t, h, b.v[P::kEncW3], b.v[P::kEncB3]);
  return ad::clip(t, ad::add(t, cover, residual), 0.0, 1.0);
}

/// Extractor: fixed highpass front-end, 3 conv layers, quadrant mean pooling
/// to a [B, 64] feature. The highpass (x - blur(x)) strips the cover's
/// low-frequency mass so the pooled features are not swamped by content.
inline ad::Value extract_on_tape(ad::Tape& t, const WatermarkModel&, const BoundModel& b,
                                 ad::Value img) {
  using P = WatermarkModel;
  ad::Value hp = ad::subtract(t, img, ad::gaussian_blur5(t, img));
  ad::Value h = ad::relu(t, ad::conv2d(t, hp, b.v[P::kExtW1], b.v[P::kExtB1]));
  h = ad::conv2d(t, h, b.v[P::kExtW2], b.v[P::kExtB2]);
  h = ad::conv2d(t, h, b.v[P::kExtW3], b.v[P::kExtB3]);  // linear: pooled means keep their sign
  // fixed gain compensating the 16x16 spatial averaging, so the heads see
  // O(1) features and train at full step size
  return ad::scale(t, ad::quadrant_pool(t, h), 16.0);
}

struct VIBHeads {
  ad::Value mu;
  ad::Value logvar;  // already clipped
};

inline VIBHeads vib_heads_on_tape(ad::Tape& t, const WatermarkModel& m, const BoundModel& b,
                                  ad::Value z) {
  using P = WatermarkModel;
  VIBHeads h;
  h.mu = ad::linear(t, z, b.v[P::kMuW], b.v[P::kMuB]);
  h.logvar = ad::clip(t, ad::linear(t, z, b.v[P::kSigW], b.v[P::kSigB]),
                      -m.vib.logvar_clip, m.vib.logvar_clip);
  return h;
}

enum class VIBMode { train, infer };

/// Reparameterized sample U = mu + alpha * eps (.) sigma, with sigma =
/// exp(logvar / 2) and eps a tape constant, so gradients reach mu and sigma
/// but not eps. Inference (or alpha = 0) returns U = mu exactly.
inline ad::Value vib_sample_on_tape(ad::Tape& t, const VIBHeads& h, double alpha, VIBMode mode,
                                    Rng& rng) {
  if (mode == VIBMode::infer || alpha == 0.0) return h.mu;
  const ad::Shape s = t.shape(h.mu);  // by value: the tape grows below
  std::vector<double> eps(ad::numel(s));
  for (double& v : eps) v = alpha * rng.normal();
  ad::Value sigma = ad::exp_(t, ad::scale(t, h.logvar, 0.5));
  return ad::add(t, h.mu, ad::multiply(t, sigma, t.constant(s, std::move(eps))));
}

inline ad::Value decode_head_on_tape(ad::Tape& t, const WatermarkModel&, const BoundModel& b,
                                     ad::Value u) {
  using P = WatermarkModel;
  return ad::linear(t, u, b.v[P::kDecW], b.v[P::kDecB]);
}

// --- plain-image operations ---------------------------------------------------

/// Embeds a message into one cover (no gradients).
inline CoverImage embed(const WatermarkModel& m, const CoverImage& cover, const Message& msg) {
  ad::Tape t;
  BoundModel b = bind_model(t, m, false);
  ad::Value enc_in = t.constant({1, 1 + m.msg_bits, m.img_h, m.img_w},
                                encoder_input_data(m, {&cover}, {&msg}));
  ad::Value cov = t.constant({1, 1, m.img_h, m.img_w}, cover.px);
  ad::Value x_wm = embed_on_tape(t, m, b, enc_in, cov);
  CoverImage out;
  out.h = m.img_h;
  out.w = m.img_w;
  out.px = t.data(x_wm);
  return out;
}

struct DecodeResult {
  std::vector<double> logits;
  Message bits;
};

/// Deterministic inference path: extractor, U = mu(Z), linear readout.
/// Bit rule: sigmoid(logit) >= 0.5, i.e. logit >= 0 maps to bit 1.
inline DecodeResult decode(const WatermarkModel& m, const CoverImage& image) {
  if (image.h != m.img_h || image.w != m.img_w)
    throw std::invalid_argument("decode: image size mismatch");
  ad::Tape t;
  BoundModel b = bind_model(t, m, false);
  ad::Value img = t.constant({1, 1, m.img_h, m.img_w}, image.px);
  ad::Value z = extract_on_tape(t, m, b, img);
  VIBHeads heads = vib_heads_on_tape(t, m, b, z);
  ad::Value logits = decode_head_on_tape(t, m, b, heads.mu);
  DecodeResult r;
  r.logits = t.data(logits);
  r.bits.bits.resize(r.logits.size());
  for (std::size_t i = 0; i < r.logits.size(); ++i)
    r.bits.bits[i] = r.logits[i] >= 0.0 ? 1 : 0;
  return r;
}

struct VIBSampleResult {
  std::vector<double> u;
  std::vector<double> mu;
  std::vector<double> logvar;
};

/// The stochastic bottleneck on a raw feature vector Z (length 64), exposed
/// for direct inspection.
inline VIBSampleResult vib_sample(const WatermarkModel& m, const std::vector<double>& z,
                                  VIBMode mode, Rng& rng) {
  if (z.size() != static_cast<std::size_t>(kFeatureDim))
    throw std::invalid_argument("vib_sample: feature length mismatch");
  ad::Tape t;
  BoundModel b = bind_model(t, m, false);
  ad::Value zv = t.constant({1, kFeatureDim}, z);
  VIBHeads heads = vib_heads_on_tape(t, m, b, zv);
  ad::Value u = vib_sample_on_tape(t, heads, m.vib.alpha, mode, rng);
  return {t.data(u), t.data(heads.mu), t.data(heads.logvar)};
}

struct LossBreakdown {
  double total = 0.0;
  double l_img = 0.0;
  double l_rec = 0.0;
  double l_kl = 0.0;
};

namespace detail {

struct LossNodes {
  ad::Value total, l_img, l_rec, l_kl;
  ad::Value logits;
  ad::Value x_wm;
};

/// Builds the full training-path loss for a batch on the tape:
/// embed -> attack -> extract -> sample -> decode -> composite loss.
/// `vib_on` gates both the latent noise and the KL weight.
inline LossNodes total_loss_on_tape(ad::Tape& t, const WatermarkModel& m, const BoundModel& b,
                                    const std::vector<const CoverImage*>& covers,
                                    const std::vector<const Message*>& msgs,
                                    const DistortionSpec& attack, Rng& attack_rng,
                                    Rng& noise_rng, double lambda_img, double lambda_rec,
                                    bool vib_on, VIBMode mode) {
  const int B = static_cast<int>(covers.size());
  const std::size_t plane = static_cast<std::size_t>(m.img_h) * m.img_w;
  std::vector<double> cover_data(static_cast<std::size_t>(B) * plane);
  for (int i = 0; i < B; ++i)
    std::copy(covers[i]->px.begin(), covers[i]->px.end(),
              cover_data.data() + static_cast<std::size_t>(i) * plane);
  ad::Value cover = t.constant({B, 1, m.img_h, m.img_w}, cover_data);
  ad::Value enc_in = t.constant({B, 1 + m.msg_bits, m.img_h, m.img_w},
                                encoder_input_data(m, covers, msgs));
  LossNodes ln;
  ln.x_wm = embed_on_tape(t, m, b, enc_in, cover);
  ad::Value d = ad::subtract(t, ln.x_wm, cover);
  ln.l_img = ad::mean(t, ad::multiply(t, d, d));
  ad::Value attacked = apply_on_tape(t, attack, ln.x_wm, cover_data, attack_rng);
  ad::Value z = extract_on_tape(t, m, b, attacked);
  VIBHeads heads = vib_heads_on_tape(t, m, b, z);
  const double alpha = vib_on ? m.vib.alpha : 0.0;
  const double beta = vib_on ? m.vib.beta : 0.0;
  ad::Value u = vib_sample_on_tape(t, heads, alpha, mode, noise_rng);
  ln.logits = decode_head_on_tape(t, m, b, u);
  std::vector<double> targets(static_cast<std::size_t>(B) * m.msg_bits);
  for (int i = 0; i < B; ++i)
    for (int l = 0; l < m.msg_bits; ++l)
      targets[static_cast<std::size_t>(i) * m.msg_bits + l] = msgs[i]->bits[l] ? 1.0 : 0.0;
  ln.l_rec = ad::bce_with_logits(t, ln.logits, targets);
  ln.l_kl = ad::gaussian_kl(t, heads.mu, heads.logvar);
  ln.total = ad::add(t, ad::add(t, ad::scale(t, ln.l_img, lambda_img),
                                ad::scale(t, ln.l_rec, lambda_rec)),
                     ad::scale(t, ln.l_kl, beta));
  return ln;
}

}  // namespace detail

/// Composite loss for one (cover, message) pair along the attacked path.
/// Uses train-mode sampling; the distortion draws come from `rng`.
inline LossBreakdown total_loss(const WatermarkModel& m, const CoverImage& cover,
                                const Message& msg, const DistortionSpec& attack, Rng& rng,
                                double lambda_img = 1.0, double lambda_rec = 1.0) {
  ad::Tape t;
  BoundModel b = bind_model(t, m, false);
  detail::LossNodes ln =
      detail::total_loss_on_tape(t, m, b, {&cover}, {&msg}, attack, rng, rng, lambda_img,
                                 lambda_rec, m.vib.enabled, VIBMode::train);
  LossBreakdown out;
  out.total = t.scalar_value(ln.total);
  out.l_img = t.scalar_value(ln.l_img);
  out.l_rec = t.scalar_value(ln.l_rec);
  out.l_kl = t.scalar_value(ln.l_kl);
  return out;
}

}  // namespace watervib
