#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "watervib/analysis.hpp"
#include "watervib/checkpoint.hpp"
#include "watervib/config.hpp"
#include "watervib/train.hpp"

namespace watervib {

// Experiment orchestration. One run = train (per the config), evaluate every
// eval attack on the held-out covers, run the interference diagnostics, and
// emit metrics.csv, report.json, checkpoint.json and plot-data files. All
// outputs are byte-reproducible from (config, seed); the single timestamp
// lives in report.json's generated_at field.

namespace detail {

/// Shortest round-trip decimal formatting, used everywhere a double is
/// written to a metric file so re-runs are byte-identical.
inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

struct AttackEval {
  double ber = 0.0;
  double psnr_wm = 0.0;        // cover vs watermarked, mean dB (capped at 99 for clean embeds)
  double rho_mean = 0.0;
  double rho_sd = 0.0;
  double proj_wm_mean = 0.0;
  double proj_atk_mean = 0.0;
  double al_mean = 0.0;
  double al_sd = 0.0;
};

struct RunArtifacts {
  WatermarkModel model;
  TrainHistory history;
  std::map<std::string, AttackEval> eval;  // keyed by attack name
  std::filesystem::path dir;
};

/// Held-out evaluation of one attack: BER, embed PSNR, AL statistics and the
/// gradient-interference aggregates over `n_diag` images.
inline AttackEval evaluate_attack(const WatermarkModel& model,
                                  const std::vector<const CoverImage*>& held_out,
                                  const std::vector<Message>& msgs, const DistortionSpec& attack,
                                  std::uint64_t seed, int n_diag = 64) {
  AttackEval out;
  Rng ber_rng(stream_seed(seed, "eval-ber"));
  out.ber = evaluate_ber(model, held_out, msgs, attack, ber_rng);

  Rng diag_rng(stream_seed(seed, "eval-diag"));
  const int n = std::min<int>(n_diag, static_cast<int>(held_out.size()));
  std::vector<double> rhos, als;
  double psnr_acc = 0.0;
  double proj_wm_acc = 0.0, proj_atk_acc = 0.0;
  int n_proj = 0;
  for (int i = 0; i < n; ++i) {
    const CoverImage& cover = *held_out[i];
    const Message& msg = msgs[i];
    const CoverImage wm = embed(model, cover, msg);
    psnr_acc += std::min(psnr(cover, wm), 99.0);
    const AttackOutcome atk = apply(attack, wm, cover, diag_rng);
    als.push_back(average_logits(decode(model, atk.image).logits));
    std::vector<double> s_wm(wm.px.size());
    for (std::size_t k = 0; k < s_wm.size(); ++k) s_wm[k] = wm.px[k] - cover.px[k];
    const std::vector<double> grad = decoding_gradient(model, wm, msg);
    double g2 = 0.0, w2 = 0.0;
    for (double v : grad) g2 += v * v;
    for (double v : s_wm) w2 += v * v;
    if (g2 > 0.0 && w2 > 0.0) {
      const InterferenceReport rep = interference_ratio(atk.s_atk, s_wm, grad);
      rhos.push_back(rep.rho);
      proj_wm_acc += rep.proj_wm;
      proj_atk_acc += rep.proj_atk;
      ++n_proj;
    }
  }
  out.psnr_wm = n > 0 ? psnr_acc / n : 0.0;
  auto mean_sd = [](const std::vector<double>& xs, double& mean, double& sd) {
    mean = sd = 0.0;
    if (xs.empty()) return;
    for (double v : xs) mean += v;
    mean /= static_cast<double>(xs.size());
    for (double v : xs) sd += (v - mean) * (v - mean);
    sd = xs.size() > 1 ? std::sqrt(sd / (static_cast<double>(xs.size()) - 1)) : 0.0;
  };
  mean_sd(rhos, out.rho_mean, out.rho_sd);
  mean_sd(als, out.al_mean, out.al_sd);
  if (n_proj > 0) {
    out.proj_wm_mean = proj_wm_acc / n_proj;
    out.proj_atk_mean = proj_atk_acc / n_proj;
  }
  return out;
}

namespace detail {

inline std::filesystem::path resolve_out_dir(const std::string& configured) {
  std::filesystem::path p(configured);
  if (const char* root = std::getenv("WATERVIB_OUT_ROOT"); root && *root && p.is_relative())
    p = std::filesystem::path(root) / p;
  return p;
}

struct OutputTracker {
  std::vector<std::filesystem::path> files;

  std::ofstream open(const std::filesystem::path& p) {
    files.push_back(p);
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open for writing: " + p.string());
    return f;
  }

  void remove_all() {
    for (const auto& p : files) {
      std::error_code ec;
      std::filesystem::remove(p, ec);
    }
  }
};

inline void write_plot(OutputTracker& tracker, const std::filesystem::path& path,
                       const std::vector<std::pair<double, double>>& xy) {
  auto f = tracker.open(path);
  for (const auto& [x, y] : xy) f << fmt_double(x) << ' ' << fmt_double(y) << '\n';
}

}  // namespace detail

/// CSV header shared by every run. Empty cells mark fields that do not apply
/// to the row kind (training vs eval).
inline constexpr const char* kMetricsHeader =
    "run,tag,attack,ber,val_ber,psnr,l_img,l_rec,l_kl,rho,al_mean,al_sd";

inline RunArtifacts run_experiment(const ExperimentConfig& cfg) {
  const std::filesystem::path dir = detail::resolve_out_dir(cfg.out_dir);
  std::filesystem::create_directories(dir / "plots");

  detail::OutputTracker tracker;
  try {
    VIBConfig vib;
    vib.alpha = cfg.alpha;
    vib.beta = cfg.beta;
    vib.latent_dim = cfg.latent_dim;
    vib.logvar_clip = cfg.logvar_clip;
    vib.enabled = cfg.vib_enabled;

    RunArtifacts art;
    art.dir = dir;
    art.model = init_model(cfg.message_bits, cfg.image_size, cfg.image_size, vib, cfg.seed);

    const std::vector<CoverImage> covers =
        generate_covers(cfg.covers, cfg.image_size, cfg.image_size, cfg.seed);

    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.learning_rate = cfg.learning_rate;
    tc.lambda_img = cfg.lambda_img;
    tc.lambda_rec = cfg.lambda_rec;
    tc.seed = cfg.seed;
    tc.pool = cfg.train_pool;
    tc.vib_enabled = cfg.vib_enabled;
    tc.val_fraction = cfg.val_fraction;
    tc.val_subset = cfg.val_subset;
    art.history = train(art.model, tc, covers);

    // held-out covers are the validation side of the same seeded split
    const DatasetSplit split = split_dataset(cfg.covers, cfg.val_fraction, cfg.seed);
    std::vector<const CoverImage*> held_out;
    for (int ix : split.val) held_out.push_back(&covers[ix]);
    Rng msg_rng(stream_seed(cfg.seed, "eval-messages"));
    std::vector<Message> msgs;
    msgs.reserve(held_out.size());
    for (std::size_t i = 0; i < held_out.size(); ++i)
      msgs.push_back(random_message(cfg.message_bits, msg_rng));

    for (const auto& attack : cfg.eval_attacks)
      art.eval[attack.name()] = evaluate_attack(art.model, held_out, msgs, attack, cfg.seed);

    // --- emit artifacts ----------------------------------------------------
    save_checkpoint((dir / "checkpoint.json").string(), art.model);
    tracker.files.push_back(dir / "checkpoint.json");

    {
      auto csv = tracker.open(dir / "metrics.csv");
      csv << kMetricsHeader << '\n';
      using detail::fmt_double;
      for (std::size_t e = 0; e < art.history.epochs.size(); ++e) {
        const EpochStats& s = art.history.epochs[e];
        csv << cfg.name << ",epoch:" << (e + 1) << ",pool," << fmt_double(s.train_ber) << ','
            << fmt_double(s.val_ber) << ",," << fmt_double(s.l_img) << ','
            << fmt_double(s.l_rec) << ',' << fmt_double(s.l_kl) << ",,,\n";
      }
      for (const auto& attack : cfg.eval_attacks) {
        const AttackEval& ev = art.eval.at(attack.name());
        csv << cfg.name << ",eval," << attack.name() << ',' << fmt_double(ev.ber) << ",,"
            << fmt_double(ev.psnr_wm) << ",,,," << fmt_double(ev.rho_mean) << ','
            << fmt_double(ev.al_mean) << ',' << fmt_double(ev.al_sd) << '\n';
      }
    }

    {
      nlohmann::json rep;
      rep["run"] = cfg.name;
      rep["seed"] = cfg.seed;
      const auto now = std::chrono::system_clock::now().time_since_epoch();
      rep["generated_at"] =
          std::chrono::duration_cast<std::chrono::seconds>(now).count();  // sole timestamp
      rep["config"] = cfg.raw_text;
      nlohmann::json epochs = nlohmann::json::array();
      for (const auto& s : art.history.epochs)
        epochs.push_back({{"l_img", s.l_img},
                          {"l_rec", s.l_rec},
                          {"l_kl", s.l_kl},
                          {"train_ber", s.train_ber},
                          {"val_ber", s.val_ber}});
      rep["epochs"] = epochs;
      nlohmann::json ev = nlohmann::json::object();
      for (const auto& [name, e] : art.eval)
        ev[name] = {{"ber", e.ber},
                    {"psnr", e.psnr_wm},
                    {"rho_mean", e.rho_mean},
                    {"rho_sd", e.rho_sd},
                    {"proj_wm_mean", e.proj_wm_mean},
                    {"proj_atk_mean", e.proj_atk_mean},
                    {"al_mean", e.al_mean},
                    {"al_sd", e.al_sd}};
      rep["eval"] = ev;
      auto f = tracker.open(dir / "report.json");
      f << rep.dump(1) << '\n';
    }

    {
      std::vector<std::pair<double, double>> total, li, lr, lk, vb;
      for (std::size_t e = 0; e < art.history.epochs.size(); ++e) {
        const EpochStats& s = art.history.epochs[e];
        const double x = static_cast<double>(e + 1);
        total.emplace_back(x, cfg.lambda_img * s.l_img + cfg.lambda_rec * s.l_rec +
                                  (cfg.vib_enabled ? cfg.beta : 0.0) * s.l_kl);
        li.emplace_back(x, s.l_img);
        lr.emplace_back(x, s.l_rec);
        lk.emplace_back(x, s.l_kl);
        vb.emplace_back(x, s.val_ber);
      }
      detail::write_plot(tracker, dir / "plots" / "loss_total.dat", total);
      detail::write_plot(tracker, dir / "plots" / "loss_img.dat", li);
      detail::write_plot(tracker, dir / "plots" / "loss_rec.dat", lr);
      detail::write_plot(tracker, dir / "plots" / "loss_kl.dat", lk);
      detail::write_plot(tracker, dir / "plots" / "val_ber.dat", vb);
    }
    return art;
  } catch (...) {
    tracker.remove_all();  // no partial outputs on abort
    throw;
  }
}

/// Mean held-out BER across the eval attacks of a finished run.
inline double mean_eval_ber(const RunArtifacts& art) {
  double acc = 0.0;
  for (const auto& [name, e] : art.eval) acc += e.ber;
  return art.eval.empty() ? 0.0 : acc / static_cast<double>(art.eval.size());
}

/// Runs one experiment per sweep beta (beta = 0 disables the bottleneck,
/// reproducing the baseline) and writes a BER-vs-beta plot-data file.
inline std::vector<std::pair<double, double>> run_sweep(const ExperimentConfig& cfg) {
  if (cfg.beta_sweep.empty())
    throw std::invalid_argument("sweep: config has no [sweep] betas list");
  const std::filesystem::path dir = detail::resolve_out_dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  std::vector<std::pair<double, double>> curve;
  for (std::size_t k = 0; k < cfg.beta_sweep.size(); ++k) {
    const double beta = cfg.beta_sweep[k];
    ExperimentConfig sub = cfg;
    sub.beta_sweep.clear();
    sub.beta = beta;
    sub.vib_enabled = beta > 0.0;
    sub.name = cfg.name + "-beta" + std::to_string(k);
    sub.out_dir = (dir / ("beta_" + std::to_string(k))).string();
    const RunArtifacts art = run_experiment(sub);
    curve.emplace_back(beta, mean_eval_ber(art));
  }
  std::ofstream f(dir / "ber_vs_beta.dat", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write sweep plot file");
  for (const auto& [b, ber] : curve)
    f << detail::fmt_double(b) << ' ' << detail::fmt_double(ber) << '\n';
  return curve;
}

/// Per-attack BER and rho deltas between two finished runs, with relative
/// reductions. Attack sets must match.
inline nlohmann::json compare_runs(const std::string& dir_a, const std::string& dir_b) {
  auto load = [](const std::string& d) {
    std::ifstream f(std::filesystem::path(d) / "report.json");
    if (!f) throw std::runtime_error("missing report.json under " + d);
    nlohmann::json j;
    f >> j;
    return j;
  };
  const nlohmann::json a = load(dir_a);
  const nlohmann::json b = load(dir_b);
  const auto& ea = a.at("eval");
  const auto& eb = b.at("eval");
  for (auto it = ea.begin(); it != ea.end(); ++it)
    if (!eb.contains(it.key()))
      throw std::runtime_error("runs have mismatched attack sets: missing " + it.key());
  for (auto it = eb.begin(); it != eb.end(); ++it)
    if (!ea.contains(it.key()))
      throw std::runtime_error("runs have mismatched attack sets: missing " + it.key());

  nlohmann::json out;
  out["run_a"] = a.at("run");
  out["run_b"] = b.at("run");
  nlohmann::json attacks = nlohmann::json::object();
  for (auto it = ea.begin(); it != ea.end(); ++it) {
    const double ber_a = it.value().at("ber").get<double>();
    const double ber_b = eb.at(it.key()).at("ber").get<double>();
    const double rho_a = it.value().at("rho_mean").get<double>();
    const double rho_b = eb.at(it.key()).at("rho_mean").get<double>();
    nlohmann::json row;
    row["ber_a"] = ber_a;
    row["ber_b"] = ber_b;
    row["ber_delta"] = ber_b - ber_a;
    row["ber_reduction_pct"] = ber_a > 0.0 ? 100.0 * (ber_a - ber_b) / ber_a : 0.0;
    row["rho_a"] = rho_a;
    row["rho_b"] = rho_b;
    row["rho_delta"] = rho_b - rho_a;
    row["rho_reduction_pct"] = rho_a > 0.0 ? 100.0 * (rho_a - rho_b) / rho_a : 0.0;
    attacks[it.key()] = row;
  }
  out["attacks"] = attacks;
  return out;
}

}  // namespace watervib
