// watervib: command-line front end for the watermarking laboratory.
//
// Subcommands: train, decode, analyze, detect, ib-curve, mss-verify,
// sweep-beta, compare, make-covers. File formats are documented in FORMATS.md.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "watervib/analysis.hpp"
#include "watervib/checkpoint.hpp"
#include "watervib/config.hpp"
#include "watervib/experiment.hpp"
#include "watervib/ib.hpp"
#include "watervib/mss.hpp"
#include "watervib/noise.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace watervib;

namespace {

std::vector<CoverImage> load_covers_dir(const std::string& dir, int limit = 0) {
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".pgm") paths.push_back(entry.path());
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw std::runtime_error("no .pgm files under " + dir);
  if (limit > 0 && static_cast<int>(paths.size()) > limit) paths.resize(limit);
  std::vector<CoverImage> covers;
  covers.reserve(paths.size());
  for (const auto& p : paths) covers.push_back(read_pgm_file(p.string()));
  return covers;
}

json partition_json(const Partition& p) {
  return {{"block_of", p.block_of}, {"n_blocks", p.n_blocks}};
}

std::vector<double> parse_beta_list(const std::string& s) {
  std::vector<double> betas;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    betas.push_back(std::stod(item));
  }
  if (betas.empty()) throw std::runtime_error("empty beta list");
  return betas;
}

struct MeanSd {
  double mean = 0.0, sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& xs) {
  MeanSd m;
  if (xs.empty()) return m;
  for (double v : xs) m.mean += v;
  m.mean /= static_cast<double>(xs.size());
  for (double v : xs) m.sd += (v - m.mean) * (v - m.mean);
  m.sd = xs.size() > 1 ? std::sqrt(m.sd / (static_cast<double>(xs.size()) - 1)) : 0.0;
  return m;
}

json mean_sd_json(const std::vector<double>& xs) {
  const MeanSd m = mean_sd(xs);
  return {{"mean", m.mean}, {"sd", m.sd}};
}

int cmd_mss_verify(const std::string& joint_path, double tol) {
  std::ifstream f(joint_path);
  if (!f) throw std::runtime_error("cannot open: " + joint_path);
  const JointPMF j = read_joint(f);
  const MSSReport r = verify_theorems(j, tol);
  json out;
  out["mss"] = partition_json(r.mss);
  out["rate_nats"] = r.rate.value;
  out["theorem2_holds"] = r.theorem2_holds;
  out["theorem3_holds"] = r.theorem3_holds;
  out["flagged"] = r.flagged;
  out["tol"] = r.tol;
  out["i_mx_nats"] = mutual_information(j).value;
  json suff = json::array();
  const std::size_t cap = 1000;
  for (std::size_t k = 0; k < r.all_sufficient_rates.size() && k < cap; ++k)
    suff.push_back({{"partition", partition_json(r.all_sufficient_rates[k].first)},
                    {"rate_nats", r.all_sufficient_rates[k].second}});
  out["n_sufficient"] = r.all_sufficient_rates.size();
  out["sufficient"] = suff;
  out["sufficient_truncated"] = r.all_sufficient_rates.size() > cap;
  std::cout << out.dump(1) << '\n';
  return 0;
}

int cmd_ib_curve(const std::string& joint_path, const std::string& betas_csv, int z_size,
                 std::uint64_t seed, int restarts) {
  std::ifstream f(joint_path);
  if (!f) throw std::runtime_error("cannot open: " + joint_path);
  const JointPMF j = read_joint(f);
  std::vector<double> betas = parse_beta_list(betas_csv);
  std::sort(betas.begin(), betas.end(), std::greater<>());
  const int z = z_size > 0 ? z_size : j.x_size;
  const auto points = trace_curve(j, betas, z, seed, restarts);
  std::cout << "beta,rate,relevance,epsilon,objective,converged\n";
  for (const auto& p : points)
    std::cout << detail::fmt_double(p.beta) << ',' << detail::fmt_double(p.rate) << ','
              << detail::fmt_double(p.relevance) << ',' << detail::fmt_double(p.epsilon) << ','
              << detail::fmt_double(p.objective) << ',' << (p.converged ? 1 : 0) << '\n';
  return 0;
}

int cmd_make_covers(const std::string& out_dir, int count, int size, std::uint64_t seed) {
  fs::create_directories(out_dir);
  const auto covers = generate_covers(count, size, size, seed);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "cover_%05d.pgm", i);
    write_pgm_file((fs::path(out_dir) / name).string(), covers[i]);
  }
  std::cout << "wrote " << count << " covers to " << out_dir << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_ckpt) {
  const ExperimentConfig cfg = load_config(config_path);
  const RunArtifacts art = run_experiment(cfg);
  if (!out_ckpt.empty()) save_checkpoint(out_ckpt, art.model);
  std::cout << "run '" << cfg.name << "' finished; artifacts under " << art.dir.string() << '\n';
  for (const auto& [name, ev] : art.eval)
    std::cout << "  " << name << ": BER=" << ev.ber << " PSNR=" << ev.psnr_wm
              << " rho=" << ev.rho_mean << '\n';
  return 0;
}

int cmd_decode(const std::string& ckpt, const std::string& image_path) {
  const WatermarkModel m = load_checkpoint(ckpt);
  const CoverImage img = read_pgm_file(image_path);
  const DecodeResult r = decode(m, img);
  std::string bits;
  for (auto b : r.bits.bits) bits += b ? '1' : '0';
  json out;
  out["bits"] = bits;
  out["logits"] = r.logits;
  out["average_logits"] = average_logits(r.logits);
  std::cout << out.dump(1) << '\n';
  return 0;
}

int cmd_analyze(const std::string& ckpt, const std::string& covers_dir,
                const std::string& attack_str, std::uint64_t seed, const std::string& pcc_domain,
                int limit) {
  const WatermarkModel m = load_checkpoint(ckpt);
  const DistortionSpec attack = parse_distortion(attack_str);
  const auto covers = load_covers_dir(covers_dir, limit);
  Rng msg_rng(stream_seed(seed, "analyze-messages"));
  Rng atk_rng(stream_seed(seed, "analyze-attack"));
  Rng ref_rng(stream_seed(seed, "analyze-noise"));

  const bool spectral = pcc_domain == "spectral";
  std::vector<double> band_cover_low, band_cover_mid, band_cover_high;
  std::vector<double> band_wm_low, band_wm_mid, band_wm_high;
  std::vector<double> band_atk_low, band_atk_mid, band_atk_high;
  std::vector<double> pcc_wm, pcc_atk, pcc_noise;
  std::vector<double> rho, proj_wm, proj_atk, cosines, etas, eff;

  for (const auto& cover : covers) {
    const Message msg = random_message(m.msg_bits, msg_rng);
    const CoverImage wm = embed(m, cover, msg);
    std::vector<double> s_wm(wm.px.size());
    for (std::size_t i = 0; i < s_wm.size(); ++i) s_wm[i] = wm.px[i] - cover.px[i];
    const AttackOutcome atk = apply(attack, wm, cover, atk_rng);

    auto push_bands = [&](const std::vector<double>& sig, std::vector<double>& lo,
                          std::vector<double>& mi, std::vector<double>& hi) {
      try {
        const BandEnergyReport r = band_energy(sig, cover.h, cover.w);
        lo.push_back(r.low);
        mi.push_back(r.mid);
        hi.push_back(r.high);
      } catch (const std::invalid_argument&) {
        // all-zero signal (e.g. identity attack residual): nothing to apportion
      }
    };
    push_bands(cover.px, band_cover_low, band_cover_mid, band_cover_high);
    push_bands(s_wm, band_wm_low, band_wm_mid, band_wm_high);
    push_bands(atk.s_atk, band_atk_low, band_atk_mid, band_atk_high);

    std::vector<double> ref_noise(cover.px.size());
    for (double& v : ref_noise) v = ref_rng.normal();
    auto pcc = [&](const std::vector<double>& a, const std::vector<double>& b) {
      return spectral ? pearson_cc_spectral(a, b, cover.h, cover.w) : pearson_cc(a, b);
    };
    try {
      pcc_wm.push_back(pcc(s_wm, cover.px));
      pcc_atk.push_back(pcc(atk.s_atk, cover.px));
      pcc_noise.push_back(pcc(ref_noise, cover.px));
    } catch (const std::invalid_argument&) {
    }

    const std::vector<double> grad = decoding_gradient(m, wm, msg);
    try {
      const InterferenceReport rep = interference_ratio(atk.s_atk, s_wm, grad);
      rho.push_back(rep.rho);
      proj_wm.push_back(rep.proj_wm);
      proj_atk.push_back(rep.proj_atk);
      cosines.push_back(rep.cos_wm_atk);
      etas.push_back(rep.eta);
      eff.push_back(rep.effective_proj);
    } catch (const std::invalid_argument&) {
    }
  }

  json out;
  out["attack"] = attack.name();
  out["n_images"] = covers.size();
  out["pcc_domain"] = spectral ? "spectral" : "spatial";
  out["band_energy"] = {
      {"cover", {{"low", mean_sd_json(band_cover_low)},
                 {"mid", mean_sd_json(band_cover_mid)},
                 {"high", mean_sd_json(band_cover_high)}}},
      {"s_wm", {{"low", mean_sd_json(band_wm_low)},
                {"mid", mean_sd_json(band_wm_mid)},
                {"high", mean_sd_json(band_wm_high)}}},
      {"s_atk", {{"low", mean_sd_json(band_atk_low)},
                 {"mid", mean_sd_json(band_atk_mid)},
                 {"high", mean_sd_json(band_atk_high)}}}};
  out["pcc_with_cover"] = {{"s_wm", mean_sd_json(pcc_wm)},
                           {"s_atk", mean_sd_json(pcc_atk)},
                           {"random_noise", mean_sd_json(pcc_noise)}};
  out["interference"] = {{"rho", mean_sd_json(rho)},
                         {"proj_wm", mean_sd_json(proj_wm)},
                         {"proj_atk", mean_sd_json(proj_atk)},
                         {"cos_wm_atk", mean_sd_json(cosines)},
                         {"eta", mean_sd_json(etas)},
                         {"effective_proj", mean_sd_json(eff)}};
  std::cout << out.dump(1) << '\n';
  return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& covers_dir, double noise_sigma,
               std::uint64_t seed, int limit) {
  const WatermarkModel m = load_checkpoint(ckpt);
  auto covers = load_covers_dir(covers_dir, limit);
  if (covers.size() < 2) throw std::runtime_error("detect: need at least 2 covers");
  const std::size_t half = covers.size() / 2;
  std::vector<CoverImage> clean(covers.begin(), covers.begin() + half);
  Rng msg_rng(stream_seed(seed, "detect-messages"));
  Rng noise_rng(stream_seed(seed, "detect-noise"));
  std::vector<CoverImage> wm_set, noised;
  for (std::size_t i = half; i < covers.size(); ++i) {
    const Message msg = random_message(m.msg_bits, msg_rng);
    CoverImage w = embed(m, covers[i], msg);
    wm_set.push_back(w);
    const AttackOutcome n =
        apply(DistortionSpec::gaussian_spec(noise_sigma, noise_sigma), w, w, noise_rng);
    noised.push_back(n.image);
  }
  const DetectionReport r = detection_eval(m, clean, wm_set, noised);
  json out;
  out["threshold"] = r.threshold;
  out["fp_rate"] = r.fp_rate;
  out["fn_rate"] = r.fn_rate;
  out["fn_rate_noised"] = r.fn_rate_noised;
  out["kl_div_logit_dists"] = r.kl_div_logit_dists;
  out["noise_sigma"] = noise_sigma;
  out["n_clean"] = clean.size();
  out["n_watermarked"] = wm_set.size();
  std::cout << out.dump(1) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WaterVIB watermarking laboratory"};
  app.require_subcommand(1);

  // train
  std::string config_path, out_ckpt;
  auto* train_cmd = app.add_subcommand("train", "train per config and emit run artifacts");
  train_cmd->add_option("--config", config_path, "experiment config file")->required();
  train_cmd->add_option("--out", out_ckpt, "also write the checkpoint to this path");

  // decode
  std::string ckpt_path, image_path;
  auto* decode_cmd = app.add_subcommand("decode", "decode the message from a PGM image");
  decode_cmd->add_option("--ckpt", ckpt_path, "checkpoint JSON")->required();
  decode_cmd->add_option("--image", image_path, "16-bit binary PGM")->required();

  // analyze
  std::string an_ckpt, an_covers, an_attack = "purify(gamma=0.5,sigma=0.02)";
  std::string pcc_domain = "spatial";
  std::uint64_t an_seed = 1;
  int an_limit = 0;
  auto* an_cmd = app.add_subcommand("analyze", "spectral/correlation/interference diagnostics");
  an_cmd->add_option("--ckpt", an_ckpt)->required();
  an_cmd->add_option("--covers", an_covers, "directory of .pgm covers")->required();
  an_cmd->add_option("--attack", an_attack, "distortion spec string");
  an_cmd->add_option("--seed", an_seed);
  an_cmd->add_option("--pcc-domain", pcc_domain)->check(CLI::IsMember({"spatial", "spectral"}));
  an_cmd->add_option("--limit", an_limit, "cap on the number of covers");

  // detect
  std::string det_ckpt, det_covers;
  double det_sigma = 0.05;
  std::uint64_t det_seed = 1;
  int det_limit = 0;
  auto* det_cmd = app.add_subcommand("detect", "AL-threshold watermark detection metrics");
  det_cmd->add_option("--ckpt", det_ckpt)->required();
  det_cmd->add_option("--covers", det_covers, "directory of .pgm covers")->required();
  det_cmd->add_option("--noise-sigma", det_sigma, "gaussian sigma for the noised set");
  det_cmd->add_option("--seed", det_seed);
  det_cmd->add_option("--limit", det_limit);

  // ib-curve
  std::string ib_joint, ib_betas;
  int ib_z = 0, ib_restarts = 3;
  std::uint64_t ib_seed = 1;
  auto* ib_cmd = app.add_subcommand("ib-curve", "trace the rate-relevance curve of a joint");
  ib_cmd->add_option("--joint", ib_joint, "joint PMF text file")->required();
  ib_cmd->add_option("--betas", ib_betas, "comma-separated betas")->required();
  ib_cmd->add_option("--z-size", ib_z, "bottleneck alphabet (default: x_size)");
  ib_cmd->add_option("--seed", ib_seed);
  ib_cmd->add_option("--restarts", ib_restarts);

  // mss-verify
  std::string mss_joint;
  double mss_tol = 1e-9;
  auto* mss_cmd = app.add_subcommand("mss-verify", "exhaustive MSS theorem verification");
  mss_cmd->add_option("--joint", mss_joint, "joint PMF text file")->required();
  mss_cmd->add_option("--tol", mss_tol);

  // sweep-beta
  std::string sweep_config;
  auto* sweep_cmd = app.add_subcommand("sweep-beta", "train once per sweep beta");
  sweep_cmd->add_option("--config", sweep_config)->required();

  // compare
  std::string run_a, run_b;
  auto* cmp_cmd = app.add_subcommand("compare", "per-attack deltas between two runs");
  cmp_cmd->add_option("run_a", run_a)->required();
  cmp_cmd->add_option("run_b", run_b)->required();

  // make-covers
  std::string mc_out;
  int mc_count = 100, mc_size = 32;
  std::uint64_t mc_seed = 1;
  auto* mc_cmd = app.add_subcommand("make-covers", "emit synthetic covers as PGM files");
  mc_cmd->add_option("--out", mc_out)->required();
  mc_cmd->add_option("--count", mc_count);
  mc_cmd->add_option("--size", mc_size);
  mc_cmd->add_option("--seed", mc_seed);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) return cmd_train(config_path, out_ckpt);
    if (*decode_cmd) return cmd_decode(ckpt_path, image_path);
    if (*an_cmd) return cmd_analyze(an_ckpt, an_covers, an_attack, an_seed, pcc_domain, an_limit);
    if (*det_cmd) return cmd_detect(det_ckpt, det_covers, det_sigma, det_seed, det_limit);
    if (*ib_cmd) return cmd_ib_curve(ib_joint, ib_betas, ib_z, ib_seed, ib_restarts);
    if (*mss_cmd) return cmd_mss_verify(mss_joint, mss_tol);
    if (*sweep_cmd) {
      const auto curve = run_sweep(load_config(sweep_config));
      for (const auto& [beta, ber] : curve)
        std::cout << "beta=" << beta << " mean_ber=" << ber << '\n';
      return 0;
    }
    if (*cmp_cmd) {
      std::cout << compare_runs(run_a, run_b).dump(1) << '\n';
      return 0;
    }
    if (*mc_cmd) return cmd_make_covers(mc_out, mc_count, mc_size, mc_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
