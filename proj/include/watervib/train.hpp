#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "watervib/model.hpp"
#include "watervib/noise.hpp"

namespace watervib {

// Training loop: embed -> attack -> extract -> sample -> decode -> composite
// loss -> Adam update, fully reproducible from one root seed. Sub-streams:
// "weights" (init), "split" (train/val), "shuffle" (epoch order), "messages",
// "attack" (channel draws), "vibnoise" (latent eps), "val" (validation draws).

struct TrainConfig {
  int epochs = 20;
  int batch_size = 16;
  double learning_rate = 1e-3;
  double lambda_img = 1.0;
  double lambda_rec = 1.0;
  std::uint64_t seed = 1;
  std::vector<DistortionSpec> pool;  // one spec drawn uniformly per batch
  bool vib_enabled = true;
  double val_fraction = 0.2;
  int val_subset = 64;  // images per held-out BER estimate during training
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 1 || c.batch_size < 1) throw std::invalid_argument("train: positive counts");
  if (!(c.learning_rate >= 0.0)) throw std::invalid_argument("train: learning_rate >= 0");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0))
    throw std::invalid_argument("train: val_fraction in (0,1)");
  if (c.pool.empty()) throw std::invalid_argument("train: empty attack pool");
  for (const auto& d : c.pool) validate(d);
}

struct EpochStats {
  double l_img = 0.0;
  double l_rec = 0.0;
  double l_kl = 0.0;
  double train_ber = 0.0;
  double val_ber = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

/// Raised when the loss goes non-finite; carries the last finite components.
class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

struct Adam {
  std::vector<std::vector<double>> m, v;
  long long t = 0;
  double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  explicit Adam(const WatermarkModel& model) {
    m.reserve(model.params.size());
    v.reserve(model.params.size());
    for (const auto& p : model.params) {
      m.emplace_back(p.data.size(), 0.0);
      v.emplace_back(p.data.size(), 0.0);
    }
  }

  void step(WatermarkModel& model, const std::vector<std::vector<double>>& grads, double lr) {
    ++t;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
    for (std::size_t k = 0; k < model.params.size(); ++k) {
      auto& w = model.params[k].data;
      const auto& g = grads[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[k][i] = b1 * m[k][i] + (1.0 - b1) * g[i];
        v[k][i] = b2 * v[k][i] + (1.0 - b2) * g[i] * g[i];
        const double mh = m[k][i] / c1;
        const double vh = v[k][i] / c2;
        w[i] -= lr * mh / (std::sqrt(vh) + eps);
      }
    }
  }
};

inline double batch_ber(const std::vector<double>& logits,
                        const std::vector<const Message*>& msgs, int L) {
  int errs = 0;
  for (std::size_t b = 0; b < msgs.size(); ++b)
    for (int l = 0; l < L; ++l) {
      const int bit = logits[b * static_cast<std::size_t>(L) + l] >= 0.0 ? 1 : 0;
      errs += bit != msgs[b]->bits[l];
    }
  return static_cast<double>(errs) / (static_cast<double>(msgs.size()) * L);
}

}  // namespace detail

/// Batched embed -> attack -> decode BER on a fixed cover/message list; the
/// deterministic inference path. Attack draws come from `rng`.
inline double evaluate_ber(const WatermarkModel& m, const std::vector<const CoverImage*>& covers,
                           const std::vector<Message>& msgs, const DistortionSpec& attack,
                           Rng& rng, int batch_size = 64) {
  if (covers.empty() || covers.size() != msgs.size())
    throw std::invalid_argument("evaluate_ber: empty or mismatched sets");
  const std::size_t plane = static_cast<std::size_t>(m.img_h) * m.img_w;
  double errs = 0.0;
  std::size_t done = 0;
  while (done < covers.size()) {
    const int B = static_cast<int>(std::min<std::size_t>(batch_size, covers.size() - done));
    std::vector<const CoverImage*> cb(covers.begin() + done, covers.begin() + done + B);
    std::vector<const Message*> mb;
    mb.reserve(B);
    for (int i = 0; i < B; ++i) mb.push_back(&msgs[done + i]);
    ad::Tape t;
    BoundModel bound = bind_model(t, m, false);
    std::vector<double> cover_data(static_cast<std::size_t>(B) * plane);
    for (int i = 0; i < B; ++i)
      std::copy(cb[i]->px.begin(), cb[i]->px.end(),
                cover_data.data() + static_cast<std::size_t>(i) * plane);
    ad::Value cover = t.constant({B, 1, m.img_h, m.img_w}, cover_data);
    ad::Value enc_in = t.constant({B, 1 + m.msg_bits, m.img_h, m.img_w},
                                  encoder_input_data(m, cb, mb));
    ad::Value x_wm = embed_on_tape(t, m, bound, enc_in, cover);
    ad::Value attacked = apply_on_tape(t, attack, x_wm, cover_data, rng);
    ad::Value z = extract_on_tape(t, m, bound, attacked);
    VIBHeads heads = vib_heads_on_tape(t, m, bound, z);
    ad::Value logits = decode_head_on_tape(t, m, bound, heads.mu);
    errs += detail::batch_ber(t.data(logits), mb, m.msg_bits) * B;
    done += B;
  }
  return errs / static_cast<double>(covers.size());
}

struct DatasetSplit {
  std::vector<int> train;
  std::vector<int> val;
};

inline DatasetSplit split_dataset(int n, double val_fraction, std::uint64_t seed) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(stream_seed(seed, "split"));
  for (int i = n - 1; i > 0; --i)
    std::swap(idx[i], idx[rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
  const int n_val = std::max(1, static_cast<int>(std::lround(n * val_fraction)));
  DatasetSplit s;
  s.val.assign(idx.begin(), idx.begin() + n_val);
  s.train.assign(idx.begin() + n_val, idx.end());
  return s;
}

/// Keeps the multi-megabyte tape buffers on the heap instead of cycling them
/// through mmap/munmap on every step.
inline void tune_allocator_for_training() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 256 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

/// Trains in place. Weights must have been initialized with the same seed for
/// full reproducibility of the run.
inline TrainHistory train(WatermarkModel& model, const TrainConfig& cfg,
                          const std::vector<CoverImage>& covers) {
  validate(cfg);
  tune_allocator_for_training();
  if (static_cast<int>(covers.size()) < 2)
    throw std::invalid_argument("train: need at least 2 covers");

  const DatasetSplit split = split_dataset(static_cast<int>(covers.size()),
                                           cfg.val_fraction, cfg.seed);
  Rng shuffle_rng(stream_seed(cfg.seed, "shuffle"));
  Rng msg_rng(stream_seed(cfg.seed, "messages"));
  Rng attack_rng(stream_seed(cfg.seed, "attack"));
  Rng noise_rng(stream_seed(cfg.seed, "vibnoise"));
  Rng val_rng(stream_seed(cfg.seed, "val"));

  // fixed validation subset with fixed messages
  const int n_val_sub = std::min<int>(cfg.val_subset, static_cast<int>(split.val.size()));
  std::vector<const CoverImage*> val_covers;
  std::vector<Message> val_msgs;
  for (int i = 0; i < n_val_sub; ++i) {
    val_covers.push_back(&covers[split.val[i]]);
    val_msgs.push_back(random_message(model.msg_bits, val_rng));
  }

  detail::Adam adam(model);
  TrainHistory hist;
  double last_l_img = 0.0, last_l_rec = 0.0, last_l_kl = 0.0;

  std::vector<int> order = split.train;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);

    EpochStats stats;
    int n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const int B = static_cast<int>(
          std::min<std::size_t>(cfg.batch_size, order.size() - start));
      std::vector<const CoverImage*> cb;
      std::vector<Message> msgs;
      std::vector<const Message*> mb;
      cb.reserve(B);
      msgs.reserve(B);
      for (int i = 0; i < B; ++i) {
        cb.push_back(&covers[order[start + i]]);
        msgs.push_back(random_message(model.msg_bits, msg_rng));
      }
      for (int i = 0; i < B; ++i) mb.push_back(&msgs[i]);
      const DistortionSpec& attack =
          cfg.pool[attack_rng.uniform_int(cfg.pool.size())];

      ad::Tape t;
      BoundModel bound = bind_model(t, model, true);
      detail::LossNodes ln = detail::total_loss_on_tape(
          t, model, bound, cb, mb, attack, attack_rng, noise_rng, cfg.lambda_img,
          cfg.lambda_rec, cfg.vib_enabled, VIBMode::train);

      const double total = t.scalar_value(ln.total);
      const double li = t.scalar_value(ln.l_img);
      const double lr = t.scalar_value(ln.l_rec);
      const double lk = t.scalar_value(ln.l_kl);
      if (!std::isfinite(total)) {
        std::ostringstream os;
        os << "training diverged (non-finite loss) at epoch " << epoch << ", batch " << n_batches
           << "; last finite components: L_img=" << last_l_img << " L_rec=" << last_l_rec
           << " L_KL=" << last_l_kl;
        throw TrainingDiverged(os.str());
      }
      last_l_img = li;
      last_l_rec = lr;
      last_l_kl = lk;

      t.backward(ln.total);
      std::vector<std::vector<double>> grads;
      grads.reserve(model.params.size());
      for (std::size_t k = 0; k < model.params.size(); ++k) {
        const ad::Node& n = t.node(bound.v[k]);
        grads.push_back(n.g.empty() ? std::vector<double>(n.x.size(), 0.0) : n.g);
      }
      if (cfg.learning_rate > 0.0) adam.step(model, grads, cfg.learning_rate);

      stats.l_img += li;
      stats.l_rec += lr;
      stats.l_kl += lk;
      stats.train_ber += detail::batch_ber(t.data(ln.logits), mb, model.msg_bits);
      ++n_batches;
    }
    if (n_batches > 0) {
      stats.l_img /= n_batches;
      stats.l_rec /= n_batches;
      stats.l_kl /= n_batches;
      stats.train_ber /= n_batches;
    }
    // held-out BER estimate: every pool channel over the fixed subset
    if (!val_covers.empty()) {
      double acc = 0.0;
      for (const auto& d : cfg.pool) acc += evaluate_ber(model, val_covers, val_msgs, d, val_rng);
      stats.val_ber = acc / static_cast<double>(cfg.pool.size());
    }
    hist.epochs.push_back(stats);
  }
  return hist;
}

}  // namespace watervib
